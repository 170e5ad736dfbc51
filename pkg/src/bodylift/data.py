"""Pose containers, dataset I/O, normalization and a synthetic skeleton rig."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

STD_FLOOR = 1e-8


class DatasetFormatError(ValueError):
    pass


class ProjectionError(ValueError):
    pass


# ---------------------------------------------------------------- skeleton

@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple[str, ...]
    parents: tuple[int, ...]
    bone_lengths: tuple[float, ...]
    root_index: int = 0
    # unit direction of each bone (parent -> joint) in the rest pose
    rest_directions: tuple[tuple[float, float, float], ...] | None = None

    def __post_init__(self):
        J = len(self.joint_names)
        if len(self.parents) != J or len(self.bone_lengths) != J:
            raise ValueError("joint_names, parents and bone_lengths must have equal length")
        if not 0 <= self.root_index < J or self.parents[self.root_index] != -1:
            raise ValueError("root_index must point at the single joint whose parent is -1")
        for j, p in enumerate(self.parents):
            if j == self.root_index:
                continue
            if not 0 <= p < J:
                raise ValueError(f"joint {j} has invalid parent {p}")
            if self.bone_lengths[j] <= 0:
                raise ValueError(f"bone length of joint {j} must be positive")
        # every chain must reach the root without revisiting a joint
        for j in range(J):
            seen, k = set(), j
            while k != self.root_index:
                if k in seen:
                    raise ValueError(f"parent graph has a cycle through joint {j}")
                seen.add(k)
                k = self.parents[k]
        if self.rest_directions is not None and len(self.rest_directions) != J:
            raise ValueError("rest_directions must have one entry per joint")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def joint_set_id(self) -> str:
        return f"{self.num_joints}:" + ",".join(self.joint_names)

    def topo_order(self) -> list[int]:
        order, frontier = [], [self.root_index]
        while frontier:
            j = frontier.pop(0)
            order.append(j)
            frontier.extend(k for k, p in enumerate(self.parents) if p == j)
        return order

    def directions(self) -> np.ndarray:
        if self.rest_directions is None:
            d = np.tile([0.0, 1.0, 0.0], (self.num_joints, 1))
        else:
            d = np.asarray(self.rest_directions, dtype=float)
        n = np.linalg.norm(d, axis=1, keepdims=True)
        return d / np.where(n > 0, n, 1.0)

    def rest_offsets(self) -> np.ndarray:
        off = self.directions() * np.asarray(self.bone_lengths, dtype=float)[:, None]
        off[self.root_index] = 0.0
        return off

    def to_json(self) -> dict:
        out = {
            "joint_names": list(self.joint_names),
            "parents": list(self.parents),
            "bone_lengths": list(self.bone_lengths),
            "root_index": self.root_index,
        }
        if self.rest_directions is not None:
            out["rest_directions"] = [list(d) for d in self.rest_directions]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Skeleton":
        dirs = obj.get("rest_directions")
        return cls(
            joint_names=tuple(obj["joint_names"]),
            parents=tuple(int(p) for p in obj["parents"]),
            bone_lengths=tuple(float(b) for b in obj["bone_lengths"]),
            root_index=int(obj.get("root_index", 0)),
            rest_directions=tuple(tuple(float(c) for c in d) for d in dirs) if dirs else None,
        )


# H3.6M-style topology, y up, subject facing +z; lengths in mm
_H36M = [
    # name, parent, length, direction
    ("Hip", -1, 0.0, (0, 0, 0)),
    ("RHip", 0, 132.9, (-1, 0, 0)),
    ("RKnee", 1, 442.9, (0, -1, 0)),
    ("RFoot", 2, 454.2, (0, -1, 0)),
    ("LHip", 0, 132.9, (1, 0, 0)),
    ("LKnee", 4, 442.9, (0, -1, 0)),
    ("LFoot", 5, 454.2, (0, -1, 0)),
    ("Spine", 0, 233.4, (0, 1, 0)),
    ("Thorax", 7, 257.1, (0, 1, 0)),
    ("Nose", 8, 121.1, (0, 0.6, 0.8)),
    ("Head", 9, 115.0, (0, 1, -0.3)),
    ("LShoulder", 8, 151.0, (1, -0.1, 0)),
    ("LElbow", 11, 278.9, (0, -1, 0)),
    ("LWrist", 12, 251.7, (0, -1, 0)),
    ("RShoulder", 8, 151.0, (-1, -0.1, 0)),
    ("RElbow", 14, 278.9, (0, -1, 0)),
    ("RWrist", 15, 251.7, (0, -1, 0)),
]


def h36m_skeleton(num_joints: int = 16) -> Skeleton:
    """16 joints (nose dropped) or 17 joints (nose kept)."""
    if num_joints not in (16, 17):
        raise ValueError("built-in skeletons have 16 or 17 joints")
    rows = list(_H36M)
    if num_joints == 16:
        nose = 9
        remap = {}
        kept = []
        for i, row in enumerate(rows):
            if i == nose:
                continue
            remap[i] = len(kept)
            kept.append(row)
        out = []
        for name, parent, length, direction in kept:
            if name == "Head":
                parent, length, direction = 8, 200.0, (0, 1, 0.1)
            out.append((name, remap.get(parent, -1) if parent >= 0 else -1, length, direction))
        rows = out
    return Skeleton(
        joint_names=tuple(r[0] for r in rows),
        parents=tuple(r[1] for r in rows),
        bone_lengths=tuple(r[2] for r in rows),
        root_index=0,
        rest_directions=tuple(tuple(float(c) for c in r[3]) for r in rows),
    )


def load_skeleton(path: str | Path) -> Skeleton:
    with open(path) as fh:
        return Skeleton.from_json(json.load(fh))


def save_skeleton(skeleton: Skeleton, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(skeleton.to_json(), fh, indent=2)


# ---------------------------------------------------------------- samples

@dataclass(frozen=True)
class Camera:
    focal: float
    rotation: np.ndarray  # world -> camera, 3x3
    translation: np.ndarray  # mm, camera = R @ world + t

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("camera rotation is not orthonormal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    def to_json(self) -> dict:
        return {
            "focal": float(self.focal),
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Camera":
        return cls(float(obj["focal"]), np.asarray(obj["rotation"], dtype=float),
                   np.asarray(obj["translation"], dtype=float))


@dataclass(frozen=True)
class PoseSample:
    """One pose. ``pose3d`` is root-relative (mm) in the camera frame."""

    pose2d: np.ndarray
    pose3d: np.ndarray | None = None
    subject: str = ""
    action: str = ""
    camera: Camera | None = None

    @property
    def labeled(self) -> bool:
        return self.pose3d is not None

    def to_json(self) -> dict:
        rec = {"subject": self.subject, "action": self.action,
               "pose2d": self.pose2d.tolist()}
        if self.pose3d is not None:
            rec["pose3d"] = self.pose3d.tolist()
        if self.camera is not None:
            rec["camera"] = self.camera.to_json()
        return rec


def root_center(pose3d: np.ndarray, skeleton_or_root: Skeleton | int = 0) -> np.ndarray:
    root = skeleton_or_root.root_index if isinstance(skeleton_or_root, Skeleton) else int(skeleton_or_root)
    pose3d = np.asarray(pose3d, dtype=float)
    return pose3d - pose3d[..., root:root + 1, :]


def load_dataset(path: str | Path, root_index: int = 0) -> list[PoseSample]:
    """Read a JSON Lines pose file; 3D poses are root-centered on load."""
    samples: list[PoseSample] = []
    J = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pose2d = np.asarray(rec["pose2d"], dtype=float)
                pose3d = rec.get("pose3d")
                pose3d = None if pose3d is None else np.asarray(pose3d, dtype=float)
                camera = Camera.from_json(rec["camera"]) if rec.get("camera") else None
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if pose2d.ndim != 2 or pose2d.shape[1] != 2:
                raise DatasetFormatError(f"{path}:{lineno}: pose2d must be J x 2, got {pose2d.shape}")
            if J is None:
                J = pose2d.shape[0]
            if pose2d.shape[0] != J:
                raise DatasetFormatError(
                    f"{path}:{lineno}: {pose2d.shape[0]} joints, earlier records have {J}")
            if pose3d is not None:
                if pose3d.shape != (J, 3):
                    raise DatasetFormatError(f"{path}:{lineno}: pose3d must be {J} x 3, got {pose3d.shape}")
                pose3d = root_center(pose3d, root_index)
            if not np.all(np.isfinite(pose2d)) or (pose3d is not None and not np.all(np.isfinite(pose3d))):
                raise DatasetFormatError(f"{path}:{lineno}: non-finite coordinate")
            samples.append(PoseSample(pose2d, pose3d, str(rec.get("subject", "")),
                                      str(rec.get("action", "")), camera))
    return samples


def save_dataset(samples: Iterable[PoseSample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")


def stack2d(samples: Sequence[PoseSample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, 0))
    return np.stack([s.pose2d.reshape(-1) for s in samples])


def stack3d(samples: Sequence[PoseSample]) -> np.ndarray:
    missing = [i for i, s in enumerate(samples) if s.pose3d is None]
    if missing:
        raise DatasetFormatError(f"{len(missing)} samples lack pose3d (first index {missing[0]})")
    if not samples:
        return np.zeros((0, 0))
    return np.stack([s.pose3d.reshape(-1) for s in samples])


# ---------------------------------------------------------------- normalization

@dataclass
class NormStats:
    mean2d: np.ndarray
    std2d: np.ndarray
    mean3d: np.ndarray
    std3d: np.ndarray

    def normalize2d(self, flat2d: np.ndarray) -> np.ndarray:
        return (flat2d - self.mean2d) / self.std2d

    def normalize3d(self, flat3d: np.ndarray) -> np.ndarray:
        return (flat3d - self.mean3d) / self.std3d

    def denormalize2d(self, flat2d_std: np.ndarray) -> np.ndarray:
        return flat2d_std * self.std2d + self.mean2d

    def denormalize3d(self, flat3d_std: np.ndarray) -> np.ndarray:
        return flat3d_std * self.std3d + self.mean3d


def _floored_std(x: np.ndarray, label: str, quiet: np.ndarray | None = None) -> np.ndarray:
    std = x.std(axis=0)
    low = std < STD_FLOOR
    loud = low if quiet is None else low & ~quiet
    if loud.any():
        warnings.warn(f"{label}: {int(loud.sum())} zero-variance coordinate(s) "
                      f"{np.flatnonzero(loud).tolist()}; std clamped to {STD_FLOOR}")
    return np.where(low, STD_FLOOR, std)


def compute_norm_stats(samples: Sequence[PoseSample]) -> NormStats:
    """Per-coordinate z-score statistics from a (training) split."""
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to compute normalization statistics")
    x2 = stack2d(samples)
    x3 = stack3d(samples)
    # the root of a root-relative pose is identically zero; nothing to warn about
    root_cols = np.all(x3 == 0.0, axis=0)
    return NormStats(x2.mean(axis=0), _floored_std(x2, "pose2d"),
                     x3.mean(axis=0), _floored_std(x3, "pose3d", quiet=root_cols))


def normalize(sample: PoseSample, stats: NormStats) -> PoseSample:
    J = sample.pose2d.shape[0]
    p2 = stats.normalize2d(sample.pose2d.reshape(-1)).reshape(J, 2)
    p3 = None
    if sample.pose3d is not None:
        p3 = stats.normalize3d(sample.pose3d.reshape(-1)).reshape(J, 3)
    return replace(sample, pose2d=p2, pose3d=p3)


def denormalize(pose3d_std: np.ndarray, stats: NormStats) -> np.ndarray:
    """Map normalized (..., 3J) or (..., J, 3) predictions back to mm."""
    arr = np.asarray(pose3d_std, dtype=float)
    if arr.shape[-1] == 3 and arr.ndim >= 2 and arr.shape[-2] * 3 == stats.mean3d.size:
        flat = arr.reshape(arr.shape[:-2] + (-1,))
        return stats.denormalize3d(flat).reshape(arr.shape)
    return stats.denormalize3d(arr)


# ---------------------------------------------------------------- kinematics

def axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    axis = rng.normal(size=3)
    return axis_angle(axis, rng.uniform(0.0, max_angle))


def forward_kinematics(skeleton: Skeleton, joint_rotations: np.ndarray) -> np.ndarray:
    """Place joints from per-joint local rotations.

    The rotation of joint j is composed with its ancestors' and applied to
    the rest offset of the bone ending at j. The root sits at the origin and
    its rotation orients the whole body.
    """
    R = np.asarray(joint_rotations, dtype=float)
    J = skeleton.num_joints
    if R.shape != (J, 3, 3):
        raise ValueError(f"expected {J} rotations of shape 3x3, got {R.shape}")
    eye = np.eye(3)
    for j in range(J):
        if not np.allclose(R[j].T @ R[j], eye, atol=1e-9, rtol=0):
            raise ValueError(f"rotation of joint {j} ({skeleton.joint_names[j]}) is not orthonormal")
    offsets = skeleton.rest_offsets()
    glob = np.zeros((J, 3, 3))
    pos = np.zeros((J, 3))
    for j in skeleton.topo_order():
        p = skeleton.parents[j]
        if p < 0:
            glob[j] = R[j]
            continue
        glob[j] = glob[p] @ R[j]
        pos[j] = pos[p] + glob[j] @ offsets[j]
    return pos


def project_pinhole(pose3d_world: np.ndarray, camera: Camera) -> np.ndarray:
    cam = np.asarray(pose3d_world, dtype=float) @ camera.rotation.T + camera.translation
    z = cam[..., 2]
    if np.any(z <= 0):
        raise ProjectionError("joint behind or on the camera plane (nonpositive depth)")
    return camera.focal * cam[..., :2] / z[..., None]


def look_at_camera(center: np.ndarray, target: np.ndarray, focal: float) -> Camera:
    fwd = np.asarray(target, float) - np.asarray(center, float)
    fwd /= np.linalg.norm(fwd)
    right = np.cross([0.0, 1.0, 0.0], fwd)
    right /= np.linalg.norm(right)
    up = np.cross(fwd, right)
    R = np.stack([right, up, fwd])
    return Camera(focal, R, -R @ np.asarray(center, float))


# ---------------------------------------------------------------- synthesis

DEFAULT_ACTIONS = ("Directions", "Eating", "Greeting", "Phoning",
                   "Posing", "Sitting", "Walking", "Waiting")
DEFAULT_SUBJECTS = ("S1", "S5", "S6", "S7", "S8", "S9", "S11")


@dataclass(frozen=True)
class SynthConfig:
    max_angle_deg: float = 60.0
    # split of the per-joint budget between the action's mean posture and per-sample noise
    action_angle_deg: float = 40.0
    elevation_deg: tuple[float, float] = (-15.0, 15.0)
    distance_mm: tuple[float, float] = (4000.0, 6000.0)
    focal: float = 1000.0
    target_jitter_mm: float = 150.0
    subject_scale: tuple[float, float] = (0.9, 1.1)
    actions: tuple[str, ...] = DEFAULT_ACTIONS
    subjects: tuple[str, ...] = DEFAULT_SUBJECTS
    # archetypes (action postures, subject proportions) are shared across seeds
    archetype_seed: int = 7
    max_retries: int = 20


@dataclass
class _Archetypes:
    postures: dict[str, np.ndarray] = field(default_factory=dict)
    scales: dict[str, float] = field(default_factory=dict)


def _archetypes(skeleton: Skeleton, cfg: SynthConfig) -> _Archetypes:
    rng = np.random.default_rng(cfg.archetype_seed)
    arch = _Archetypes()
    lim = math.radians(min(cfg.action_angle_deg, cfg.max_angle_deg))
    for a in cfg.actions:
        arch.postures[a] = np.stack([random_rotation(rng, lim) for _ in range(skeleton.num_joints)])
    for s in cfg.subjects:
        arch.scales[s] = float(rng.uniform(*cfg.subject_scale))
    return arch


def synth_dataset(skeleton: Skeleton, n: int, rng: np.random.Generator,
                  cfg: SynthConfig | None = None) -> list[PoseSample]:
    """Draw ``n`` posed, projected skeletons.

    Each sample gets an action posture, a per-joint perturbation, a subject
    scale and a camera on a ring around the body. ``pose3d`` is stored in
    camera coordinates relative to the root; the world-frame pose is
    recoverable as ``pose3d @ camera.rotation`` because the root sits at the
    world origin.
    """
    cfg = cfg or SynthConfig()
    arch = _archetypes(skeleton, cfg)
    noise_lim = math.radians(max(cfg.max_angle_deg - min(cfg.action_angle_deg, cfg.max_angle_deg), 0.0))
    out: list[PoseSample] = []
    for _ in range(n):
        action = cfg.actions[int(rng.integers(len(cfg.actions)))]
        subject = cfg.subjects[int(rng.integers(len(cfg.subjects)))]
        base = arch.postures[action]
        rots = np.stack([random_rotation(rng, noise_lim) @ base[j] for j in range(skeleton.num_joints)])
        scaled = replace(skeleton, bone_lengths=tuple(b * arch.scales[subject] for b in skeleton.bone_lengths))
        world = forward_kinematics(scaled, rots)
        for _attempt in range(cfg.max_retries):
            az = rng.uniform(0.0, 2 * math.pi)
            el = math.radians(rng.uniform(*cfg.elevation_deg))
            dist = rng.uniform(*cfg.distance_mm)
            target = rng.uniform(-cfg.target_jitter_mm, cfg.target_jitter_mm, size=3)
            center = target + dist * np.array([math.cos(el) * math.sin(az), math.sin(el),
                                               math.cos(el) * math.cos(az)])
            cam = look_at_camera(center, target, cfg.focal)
            try:
                p2 = project_pinhole(world, cam)
            except ProjectionError:
                continue
            break
        else:
            raise ProjectionError("could not place a camera with all joints in front of it")
        p3 = root_center(world @ cam.rotation.T, skeleton)
        out.append(PoseSample(p2, p3, subject, action, cam))
    return out


def split_cross_action(samples: Sequence[PoseSample], train_actions: Iterable[str]
                       ) -> tuple[list[PoseSample], list[PoseSample]]:
    train_actions = set(train_actions)
    train = [s for s in samples if s.action in train_actions]
    test = [s for s in samples if s.action not in train_actions]
    if not train or not test:
        available = sorted({s.action for s in samples})
        side = "train" if not train else "test"
        raise ValueError(f"cross-action split leaves the {side} side empty; available actions: {available}")
    return train, test
