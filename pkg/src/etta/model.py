"""Functional model: feature extractor plus a cosine classifier over prototypes.

Parameters live in an immutable :class:`ModelParams` value and every forward
computation takes them explicitly, so adapted (inner-loop) parameters can be
evaluated through the same code path as the originals. Tensors are float64
torch tensors; gradients flow through ``torch.autograd``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Union

import numpy as np
import torch

DTYPE = torch.float64
NORM_FLOOR = 1e-12
PROB_FLOOR = 1e-7


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.from_numpy(np.array(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# backbones
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IdentityBackbone:
    """Pass-through feature extractor with no parameters."""

    d_in: int

    @property
    def d_z(self) -> int:
        return self.d_in

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {}

    def apply(self, phi: Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
        return x

    def to_dict(self) -> dict:
        return {"kind": "identity", "d_in": self.d_in}


@dataclass(frozen=True)
class MLPBackbone:
    """``d_in -> hidden -> d_z`` with a tanh hidden layer and linear output."""

    d_in: int
    hidden: int = 64
    d_z: int = 32

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        def glorot(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        return {
            "w1": glorot(self.d_in, self.hidden),
            "b1": np.zeros(self.hidden),
            "w2": glorot(self.hidden, self.d_z),
            "b2": np.zeros(self.d_z),
        }

    def apply(self, phi: Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(x @ phi["w1"] + phi["b1"])
        return h @ phi["w2"] + phi["b2"]

    def to_dict(self) -> dict:
        return {"kind": "mlp", "d_in": self.d_in, "hidden": self.hidden, "d_z": self.d_z}


Backbone = Union[IdentityBackbone, MLPBackbone]


def backbone_from_dict(d: Mapping) -> Backbone:
    kind = d.get("kind")
    if kind == "identity":
        return IdentityBackbone(int(d["d_in"]))
    if kind == "mlp":
        return MLPBackbone(int(d["d_in"]), int(d["hidden"]), int(d["d_z"]))
    raise ValueError(f"unknown backbone kind {kind!r}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelParams:
    """Feature-extractor parameters ``phi`` and classifier prototypes ``theta`` (C x d_z).

    The rows of ``theta`` double as the domain-general prototypes.
    """

    arch: Backbone
    phi: dict[str, torch.Tensor]
    theta: torch.Tensor

    def __post_init__(self):
        if self.theta.ndim != 2 or self.theta.shape[1] != self.arch.d_z:
            raise ValueError(f"theta must be C x {self.arch.d_z}, got {tuple(self.theta.shape)}")

    @property
    def num_classes(self) -> int:
        return self.theta.shape[0]

    def names(self) -> list[str]:
        return [f"phi.{k}" for k in sorted(self.phi)] + ["theta"]

    def tensors(self) -> list[torch.Tensor]:
        return [self.phi[k] for k in sorted(self.phi)] + [self.theta]

    def with_tensors(self, tensors) -> "ModelParams":
        tensors = list(tensors)
        keys = sorted(self.phi)
        return ModelParams(self.arch, dict(zip(keys, tensors[:-1])), tensors[-1])

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "ModelParams":
        return self.with_tensors(fn(t) for t in self.tensors())

    def detach(self) -> "ModelParams":
        return self.map(lambda t: t.detach())

    def as_leaves(self) -> "ModelParams":
        """Detached copies that require grad; the roots of an autograd graph."""
        return self.map(lambda t: t.detach().clone().requires_grad_(True))

    def flatten(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for t in self.tensors()])

    def unflatten(self, flat) -> "ModelParams":
        flat = as_tensor(flat)
        out, pos = [], 0
        for t in self.tensors():
            n = t.numel()
            out.append(flat[pos:pos + n].reshape(t.shape))
            pos += n
        if pos != flat.numel():
            raise ValueError(f"flat vector has {flat.numel()} entries, expected {pos}")
        return self.with_tensors(out)

    @property
    def size(self) -> int:
        return sum(t.numel() for t in self.tensors())

    def combine(self, other: "ModelParams", a: float, b: float) -> "ModelParams":
        """Element-wise ``a * self + b * other``."""
        return self.with_tensors(a * s + b * o for s, o in zip(self.tensors(), other.tensors()))

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors())

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {n: t.detach().cpu().numpy().copy() for n, t in zip(self.names(), self.tensors())}

    def equals(self, other: "ModelParams") -> bool:
        return self.arch == other.arch and all(
            torch.equal(a, b) for a, b in zip(self.tensors(), other.tensors())
        )


def init_params(arch: Backbone, num_classes: int, rng: np.random.Generator) -> ModelParams:
    phi = {k: as_tensor(v) for k, v in arch.init(rng).items()}
    theta = as_tensor(rng.standard_normal((num_classes, arch.d_z)))
    return ModelParams(arch, phi, theta)


# ---------------------------------------------------------------------------
# prototypes and scores
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """C class vectors tagged ``"general"`` or with the source domain id."""

    vectors: torch.Tensor
    tag: Union[str, int] = "general"


def general_prototypes(params: ModelParams) -> PrototypeSet:
    return PrototypeSet(params.theta, "general")


def embed(params: ModelParams, inputs) -> torch.Tensor:
    x = as_tensor(inputs)
    if x.ndim != 2 or x.shape[1] != params.arch.d_in:
        raise ValueError(f"expected inputs of shape (n, {params.arch.d_in}), got {tuple(x.shape)}")
    return params.arch.apply(params.phi, x)


def class_centroids(embeddings: torch.Tensor, labels, domain_id, num_classes: int | None = None) -> PrototypeSet:
    """Row ``c`` is the mean embedding of the samples labelled ``c``."""
    y = torch.from_numpy(np.array(labels, dtype=np.int64))
    C = int(y.max()) + 1 if num_classes is None else num_classes
    counts = torch.bincount(y, minlength=C)
    if counts.shape[0] > C:
        raise ValueError(f"label {int(y.max())} outside 0..{C - 1}")
    missing = torch.nonzero(counts == 0).flatten()
    if missing.numel():
        raise ValueError(f"undefined prototype: class {int(missing[0])} has no samples in domain {domain_id}")
    onehot = torch.nn.functional.one_hot(y, C).to(embeddings.dtype)
    sums = onehot.T @ embeddings
    return PrototypeSet(sums / counts.to(embeddings.dtype)[:, None], domain_id)


def _unit_rows(v: torch.Tensor, what: str) -> torch.Tensor:
    norms = v.norm(dim=1, keepdim=True)
    if bool((norms < NORM_FLOOR).any()):
        raise ValueError(f"zero-norm {what} row; cosine undefined")
    return v / norms


def cosine_scores(embeddings: torch.Tensor, prototypes: PrototypeSet | torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every embedding (rows) against every prototype (columns)."""
    mu = prototypes.vectors if isinstance(prototypes, PrototypeSet) else prototypes
    z = _unit_rows(as_tensor(embeddings), "embedding")
    return z @ _unit_rows(as_tensor(mu), "prototype").T


def predict_probs(scores: torch.Tensor, temperature: float) -> torch.Tensor:
    """Temperature softmax with every entry lifted to at least ``PROB_FLOOR``.

    The floor is applied as ``floor + (1 - C * floor) * softmax`` so rows stay
    on the simplex while the floor holds exactly.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    s = as_tensor(scores)
    C = s.shape[-1]
    return PROB_FLOOR + (1.0 - C * PROB_FLOOR) * torch.softmax(s / temperature, dim=-1)


def predict(params: ModelParams, inputs) -> np.ndarray:
    with torch.no_grad():
        s = cosine_scores(embed(params, inputs), general_prototypes(params))
    return s.argmax(dim=1).numpy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_params(path: str | Path, params: ModelParams, config_hash: str = "") -> Path:
    """Store names, shapes and float64 values in an ``.npz`` archive."""
    path = Path(path)
    arrays = params.to_numpy()
    header = {"arch": params.arch.to_dict(), "config_hash": config_hash, "names": params.names()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)
    return path


def load_params(path: str | Path) -> tuple[ModelParams, str]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        arrays = {n: z[n] for n in header["names"]}
    arch = backbone_from_dict(header["arch"])
    phi = {n[len("phi."):]: as_tensor(a) for n, a in arrays.items() if n.startswith("phi.")}
    return ModelParams(arch, phi, as_tensor(arrays["theta"])), header["config_hash"]
