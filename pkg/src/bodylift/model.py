"""Residual MLP networks: two encoders, decoder, generator, discriminator.

Each network keeps its parameters as leaf ``Tensor`` objects and builds a
fresh graph on every forward call. ``frozen=True`` runs the same math on
detached copies of the parameters so no gradient reaches them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ShapeError, Tensor


def _he(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, n_out))


def _p(t: Tensor, frozen: bool) -> Tensor:
    return t.detach() if frozen else t


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        self.W = Tensor(_he(rng, n_in, n_out), requires_grad=True, name=f"{name}.W")
        self.b = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.b")

    @property
    def n_in(self) -> int:
        return self.W.shape[0]

    @property
    def n_out(self) -> int:
        return self.W.shape[1]

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        return ad.linear(x, _p(self.W, frozen), _p(self.b, frozen))

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


class BatchNorm:
    def __init__(self, width: int, name: str):
        self.gamma = Tensor(np.ones(width), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(width), requires_grad=True, name=f"{name}.beta")
        self.state = BatchNormState.fresh(width)

    def __call__(self, x: Tensor, train: bool, frozen: bool = False) -> Tensor:
        return ad.batchnorm(x, _p(self.gamma, frozen), _p(self.beta, frozen), self.state, train)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def buffers(self) -> list[np.ndarray]:
        return [self.state.running_mean, self.state.running_var]

    def set_buffers(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.state.running_mean = np.array(mean, dtype=ad.DTYPE)
        self.state.running_var = np.array(var, dtype=ad.DTYPE)


class DenseUnit:
    """linear -> batch norm -> ReLU -> dropout"""

    def __init__(self, n_in: int, n_out: int, dropout: float, rng: np.random.Generator, name: str):
        self.fc = Linear(n_in, n_out, rng, f"{name}.fc")
        self.bn = BatchNorm(n_out, f"{name}.bn")
        self.dropout = dropout

    def __call__(self, x, train, rng, frozen=False):
        h = self.bn(self.fc(x, frozen), train, frozen)
        return ad.dropout(ad.relu(h), self.dropout, train, rng)

    def parameters(self):
        return self.fc.parameters() + self.bn.parameters()

    def batchnorms(self):
        return [self.bn]


class ResidualBlock:
    def __init__(self, width: int, dropout: float, rng: np.random.Generator, name: str):
        self.unit1 = DenseUnit(width, width, dropout, rng, f"{name}.u1")
        self.unit2 = DenseUnit(width, width, dropout, rng, f"{name}.u2")

    def __call__(self, x, train, rng, frozen=False):
        return ad.add(x, self.unit2(self.unit1(x, train, rng, frozen), train, rng, frozen))

    def parameters(self):
        return self.unit1.parameters() + self.unit2.parameters()

    def batchnorms(self):
        return self.unit1.batchnorms() + self.unit2.batchnorms()


class Encoder:
    """Input projection followed by two residual blocks; output is the latent."""

    def __init__(self, n_in: int, width: int, dropout: float, rng, name: str):
        self.n_in = n_in
        self.stem = DenseUnit(n_in, width, dropout, rng, f"{name}.stem")
        self.blocks = [ResidualBlock(width, dropout, rng, f"{name}.res{i}") for i in range(2)]

    def __call__(self, x: Tensor, train: bool, rng=None, frozen: bool = False) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"encoder expects (B, {self.n_in}) input, got {x.shape}")
        h = self.stem(x, train, rng, frozen)
        for blk in self.blocks:
            h = blk(h, train, rng, frozen)
        return h

    def parameters(self):
        ps = self.stem.parameters()
        for blk in self.blocks:
            ps += blk.parameters()
        return ps

    def batchnorms(self):
        bns = self.stem.batchnorms()
        for blk in self.blocks:
            bns += blk.batchnorms()
        return bns


class PoseHead:
    """Optional input projection, one residual block, linear output to 3J."""

    def __init__(self, n_in: int, width: int, n_out: int, dropout: float, rng, name: str,
                 project_input: bool):
        self.n_in = n_in
        self.stem = DenseUnit(n_in, width, dropout, rng, f"{name}.stem") if project_input else None
        if not project_input and n_in != width:
            raise ValueError("a head without input projection needs n_in == width")
        self.block = ResidualBlock(width, dropout, rng, f"{name}.res0")
        self.out = Linear(width, n_out, rng, f"{name}.out")

    def __call__(self, x: Tensor, train: bool, rng=None, frozen: bool = False) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"pose head expects (B, {self.n_in}) input, got {x.shape}")
        h = self.stem(x, train, rng, frozen) if self.stem is not None else x
        return self.out(self.block(h, train, rng, frozen), frozen)

    def parameters(self):
        ps = self.stem.parameters() if self.stem is not None else []
        return ps + self.block.parameters() + self.out.parameters()

    def batchnorms(self):
        bns = self.stem.batchnorms() if self.stem is not None else []
        return bns + self.block.batchnorms()


class Discriminator:
    """Three linear layers (width -> 512 -> 1024 -> 1), ReLU between them."""

    hidden = (512, 1024)

    def __init__(self, width: int, rng):
        self.n_in = width
        dims = (width,) + self.hidden + (1,)
        self.layers = [Linear(dims[i], dims[i + 1], rng, f"disc.fc{i}") for i in range(3)]

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"discriminator expects (B, {self.n_in}) input, got {x.shape}")
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h, frozen)
            if i < len(self.layers) - 1:
                h = ad.relu(h)
        return h

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def batchnorms(self):
        return []


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class ModelSpec:
    num_joints: int
    width: int = 1024
    dropout: float = 0.5
    kind: str = "full"  # "full" or "baseline"


class BodyConceptNet:
    """2D encoder, 3D encoder, shared decoder, generator and discriminator."""

    kind = "full"

    def __init__(self, num_joints: int, width: int = 1024, dropout: float = 0.5,
                 rng: np.random.Generator | None = None):
        if num_joints < 2 or width < 8:
            raise ValueError("need at least 2 joints and width >= 8")
        rng = rng if rng is not None else np.random.default_rng(0)
        J, w = num_joints, width
        self.spec = ModelSpec(J, w, dropout, self.kind)
        self.enc2d = Encoder(2 * J, w, dropout, rng, "enc2d")
        self.enc3d = Encoder(3 * J, w, dropout, rng, "enc3d")
        self.decoder = PoseHead(w, w, 3 * J, dropout, rng, "decoder", project_input=False)
        self.generator = PoseHead(2 * J + w, w, 3 * J, dropout, rng, "generator", project_input=True)
        self.discriminator = Discriminator(w, rng)

    # the five forward paths
    def encode2d(self, pose2d, train=False, rng=None, frozen=False) -> Tensor:
        return self.enc2d(_as_tensor(pose2d), train, rng, frozen)

    def encode3d(self, pose3d, train=False, rng=None, frozen=False) -> Tensor:
        return self.enc3d(_as_tensor(pose3d), train, rng, frozen)

    def decode(self, latent, train=False, rng=None, frozen=False) -> Tensor:
        return self.decoder(_as_tensor(latent), train, rng, frozen)

    def generate(self, pose2d, f2d, train=False, rng=None, frozen=False) -> Tensor:
        pose2d, f2d = _as_tensor(pose2d), _as_tensor(f2d)
        if pose2d.shape[0] != f2d.shape[0]:
            raise ShapeError(f"generate: batch sizes differ, pose2d {pose2d.shape} vs feature {f2d.shape}")
        return self.generator(ad.concat([pose2d, f2d]), train, rng, frozen)

    def discriminate(self, feature, frozen=False) -> Tensor:
        return self.discriminator(_as_tensor(feature), frozen)

    def predict(self, pose2d_norm: np.ndarray) -> np.ndarray:
        """Eval-mode lifting of normalized 2D poses to normalized 3D poses."""
        x = Tensor(pose2d_norm)
        return self.generate(x, self.encode2d(x)).data

    # parameter bookkeeping
    def networks(self) -> dict:
        return {"enc2d": self.enc2d, "enc3d": self.enc3d, "decoder": self.decoder,
                "generator": self.generator, "discriminator": self.discriminator}

    def named_parameters(self, groups=None) -> list[tuple[str, Tensor]]:
        nets = self.networks()
        keys = groups if groups is not None else list(nets)
        return [(p.name, p) for k in keys for p in nets[k].parameters()]

    def lifting_parameters(self) -> list[tuple[str, Tensor]]:
        return self.named_parameters(["enc2d", "enc3d", "decoder", "generator"])

    def discriminator_parameters(self) -> list[tuple[str, Tensor]]:
        return self.named_parameters(["discriminator"])

    def batchnorms(self) -> list[BatchNorm]:
        return [bn for net in self.networks().values() for bn in net.batchnorms()]

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


class BaselineNet:
    """Generator-only lifting network: the 2D pose alone feeds the pose head."""

    kind = "baseline"

    def __init__(self, num_joints: int, width: int = 1024, dropout: float = 0.5,
                 rng: np.random.Generator | None = None):
        if num_joints < 2 or width < 8:
            raise ValueError("need at least 2 joints and width >= 8")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = ModelSpec(num_joints, width, dropout, self.kind)
        self.generator = PoseHead(2 * num_joints, width, 3 * num_joints, dropout, rng, "generator",
                                  project_input=True)

    def generate(self, pose2d, train=False, rng=None, frozen=False) -> Tensor:
        return self.generator(_as_tensor(pose2d), train, rng, frozen)

    def predict(self, pose2d_norm: np.ndarray) -> np.ndarray:
        return self.generate(Tensor(pose2d_norm)).data

    def networks(self) -> dict:
        return {"generator": self.generator}

    def named_parameters(self, groups=None) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.generator.parameters()]

    lifting_parameters = named_parameters

    def discriminator_parameters(self):
        return []

    def batchnorms(self) -> list[BatchNorm]:
        return self.generator.batchnorms()

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


def build_model(num_joints: int, width: int = 1024, dropout: float = 0.5,
                rng: np.random.Generator | None = None, kind: str = "full"):
    if kind == "full":
        return BodyConceptNet(num_joints, width, dropout, rng)
    if kind == "baseline":
        return BaselineNet(num_joints, width, dropout, rng)
    raise ValueError(f"unknown model kind {kind!r}")


def expected_parameter_count(num_joints: int, width: int, kind: str = "full") -> int:
    """Closed-form parameter count, independent of the allocation code."""
    J, w = num_joints, width

    def lin(n, m):
        return n * m + m

    unit = lambda n, m: lin(n, m) + 2 * m  # noqa: E731  (linear + bn scale/shift)
    res = 2 * unit(w, w)
    if kind == "baseline":
        return unit(2 * J, w) + res + lin(w, 3 * J)
    enc = lambda n: unit(n, w) + 2 * res  # noqa: E731
    decoder = res + lin(w, 3 * J)
    generator = unit(2 * J + w, w) + res + lin(w, 3 * J)
    disc = lin(w, 512) + lin(512, 1024) + lin(1024, 1)
    return enc(2 * J) + enc(3 * J) + decoder + generator + disc
