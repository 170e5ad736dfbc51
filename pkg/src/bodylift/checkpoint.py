"""Binary checkpoint files.

Layout (all little-endian)::

    magic        4 bytes  b"PLDA"
    version      u32
    num_joints   u32
    width        u32
    dropout      f64
    root_index   u32
    kind         u32      0 = full model, 1 = generator-only baseline
    joint_set    u32 length + UTF-8 bytes (comma-joined joint names)
    tensors      f64 arrays in ``named_parameters()`` order, then every
                 batch norm's running mean and running variance in
                 ``batchnorms()`` order; shapes follow from the header
    norm stats   mean2d, std2d (2J each), mean3d, std3d (3J each), f64
    crc32        u32 over everything above
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .data import NormStats
from .model import build_model

MAGIC = b"PLDA"
VERSION = 1
_KINDS = {"full": 0, "baseline": 1}
_HEADER = struct.Struct("<4sIIIdII")


class CheckpointError(ValueError):
    pass


def _tensors(model) -> list[np.ndarray]:
    arrays = [p.data for _, p in model.named_parameters()]
    for bn in model.batchnorms():
        arrays.extend(bn.buffers())
    return arrays


def dumps_checkpoint(model, stats: NormStats, joint_set: str = "", root_index: int = 0) -> bytes:
    spec = model.spec
    names = joint_set.encode("utf-8")
    parts = [_HEADER.pack(MAGIC, VERSION, spec.num_joints, spec.width, float(spec.dropout),
                          root_index, _KINDS[spec.kind]),
             struct.pack("<I", len(names)), names]
    for arr in _tensors(model):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for arr in (stats.mean2d, stats.std2d, stats.mean3d, stats.std3d):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(model, stats: NormStats, path: str | Path, joint_set: str = "",
                    root_index: int = 0) -> None:
    blob = dumps_checkpoint(model, stats, joint_set, root_index)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


class LoadedCheckpoint:
    def __init__(self, model, stats: NormStats, joint_set: str, root_index: int):
        self.model = model
        self.stats = stats
        self.joint_set = joint_set
        self.root_index = root_index

    def __iter__(self):
        # allows ``model, stats = load_checkpoint(path)``
        return iter((self.model, self.stats))


def loads_checkpoint(blob: bytes) -> LoadedCheckpoint:
    if len(blob) < _HEADER.size + 8:
        raise CheckpointError("checkpoint truncated: shorter than its header")
    magic, version, J, w, dropout, root_index, kind_id = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (reader handles {VERSION})")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: checkpoint corrupted or truncated")
    kinds = {v: k for k, v in _KINDS.items()}
    if kind_id not in kinds:
        raise CheckpointError(f"unknown model kind id {kind_id}")
    off = _HEADER.size
    (n_names,) = struct.unpack_from("<I", body, off)
    off += 4
    joint_set = body[off:off + n_names].decode("utf-8")
    off += n_names

    model = build_model(J, w, dropout, np.random.default_rng(0), kind=kinds[kind_id])

    def take(n: int) -> np.ndarray:
        nonlocal off
        if off + 8 * n > len(body):
            raise CheckpointError("checkpoint body shorter than its header implies")
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        return arr

    for _, p in model.named_parameters():
        p.data = take(p.data.size).reshape(p.data.shape)
    for bn in model.batchnorms():
        width = bn.gamma.data.size
        bn.set_buffers(take(width), take(width))
    stats = NormStats(take(2 * J), take(2 * J), take(3 * J), take(3 * J))
    if off != len(body):
        raise CheckpointError(f"{len(body) - off} unexpected trailing bytes in checkpoint")
    return LoadedCheckpoint(model, stats, joint_set, root_index)


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    return loads_checkpoint(Path(path).read_bytes())
