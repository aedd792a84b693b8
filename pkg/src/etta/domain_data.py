"""Multi-domain labeled datasets, synthetic domain-shift families and sampling.

Datasets are array-backed and immutable. Every source of randomness is an
explicit ``numpy.random.Generator`` so that callers own determinism.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

FAMILIES = ("rotated_two_moons", "shifted_gaussians")


class DomainDataError(ValueError):
    """Raised for malformed or invariant-violating domain data."""


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    label: int
    domain_id: int


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """One domain: ``features`` (N, d_in), integer ``labels`` (N,) in ``0..C-1``."""

    domain_id: int
    name: str
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        if feats.ndim != 2:
            raise DomainDataError(f"domain {self.name!r}: features must be 2-D, got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise DomainDataError(f"domain {self.name!r}: {labels.shape[0]} labels for {feats.shape[0]} samples")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise DomainDataError(f"domain {self.name!r}: non-integer labels")
        labels = labels.astype(np.int64)
        bad = np.flatnonzero(~np.isfinite(feats).all(axis=1))
        if bad.size:
            raise DomainDataError(f"domain {self.name!r}: non-finite feature in row {int(bad[0])}")
        out = np.flatnonzero((labels < 0) | (labels >= self.num_classes))
        if out.size:
            raise DomainDataError(
                f"domain {self.name!r}: label {int(labels[out[0]])} in row {int(out[0])} outside 0..{self.num_classes - 1}"
            )
        present = np.bincount(labels, minlength=self.num_classes)
        for c in range(self.num_classes):
            if present[c] == 0:
                raise DomainDataError(f"domain {self.name!r}: class {c} absent")
        object.__setattr__(self, "features", _readonly(feats))
        object.__setattr__(self, "labels", _readonly(labels))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    @property
    def samples(self) -> list[LabeledSample]:
        return list(self)

    def __iter__(self) -> Iterator[LabeledSample]:
        for x, y in zip(self.features, self.labels):
            yield LabeledSample(x, int(y), self.domain_id)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices: Sequence[int], name: str | None = None) -> "DomainDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return DomainDataset(self.domain_id, name or self.name, self.features[idx], self.labels[idx], self.num_classes)

    def equals(self, other: "DomainDataset") -> bool:
        return (
            self.domain_id == other.domain_id
            and self.name == other.name
            and self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True, eq=False)
class Batch:
    """Samples drawn from one or more domains, with their source row indices."""

    features: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def samples(self) -> list[LabeledSample]:
        return [LabeledSample(x, int(y), int(d)) for x, y, d in zip(self.features, self.labels, self.domain_ids)]

    @classmethod
    def concat(cls, batches: Sequence["Batch"]) -> "Batch":
        return cls(
            np.concatenate([b.features for b in batches]),
            np.concatenate([b.labels for b in batches]),
            np.concatenate([b.domain_ids for b in batches]),
            np.concatenate([b.indices for b in batches]),
        )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie strictly in (0, 1), got {self.train_fraction}")


# ---------------------------------------------------------------------------
# synthetic families
# ---------------------------------------------------------------------------

def rotation_matrix(degrees: float) -> np.ndarray:
    t = math.radians(degrees)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def _two_moons_base(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, math.pi, n0)
    t1 = rng.uniform(0.0, math.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([upper, lower])
    x += noise * rng.standard_normal(x.shape)
    # centre the pair of moons on the origin so rotations stay in place
    x -= np.array([0.5, 0.25])
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    return x, y


def gaussian_class_means(num_classes: int, radius: float = 2.0) -> np.ndarray:
    angles = 2.0 * math.pi * np.arange(num_classes) / num_classes
    return radius * np.column_stack([np.cos(angles), np.sin(angles)])


GAUSSIAN_SHIFT_DIRECTION = np.array([1.0, 1.0]) / math.sqrt(2.0)


def _gaussians_base(n: int, num_classes: int, std: float, rng: np.random.Generator):
    y = np.arange(n, dtype=np.int64) % num_classes
    x = gaussian_class_means(num_classes)[y] + std * rng.standard_normal((n, 2))
    return x, y


def generate_synthetic_domains(
    family: str,
    num_domains: int,
    samples_per_domain: int,
    domain_params: Sequence[float],
    seed: int,
    *,
    noise: float = 0.1,
    num_classes: int = 2,
    shared_base: bool = False,
) -> list[DomainDataset]:
    """Build ``num_domains`` class-balanced 2-D domains from one base distribution.

    ``domain_params`` holds one shift knob per domain: a rotation angle in
    degrees for ``rotated_two_moons`` and a mean-shift magnitude (along the
    diagonal) for ``shifted_gaussians``. ``noise`` is the moon jitter or the
    Gaussian standard deviation.

    By default every domain draws its own base points from a child stream of
    ``seed``. With ``shared_base=True`` all domains transform the very same
    base points, so domains differ only by the transform.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if family == "rotated_two_moons" and num_classes != 2:
        raise ValueError("rotated_two_moons has exactly 2 classes")
    if num_domains < 2:
        raise ValueError("need at least 2 domains")
    params = [float(p) for p in domain_params]
    if len(params) != num_domains:
        raise ValueError(f"expected {num_domains} domain_params, got {len(params)}")
    if len(set(params)) != len(params):
        raise ValueError(f"duplicate transform in domain_params {params}: duplicates carry no domain shift")
    if samples_per_domain < 2 * num_classes:
        raise ValueError(f"samples_per_domain must be >= {2 * num_classes}, got {samples_per_domain}")

    streams = np.random.SeedSequence(seed).spawn(num_domains)
    base = None
    domains = []
    for k, (p, ss) in enumerate(zip(params, streams)):
        if base is None or not shared_base:
            rng = np.random.default_rng(streams[0] if shared_base else ss)
            if family == "rotated_two_moons":
                base = _two_moons_base(samples_per_domain, noise, rng)
            else:
                base = _gaussians_base(samples_per_domain, num_classes, noise, rng)
        x, y = base
        if family == "rotated_two_moons":
            x = x @ rotation_matrix(p).T
            name = f"moons_rot{p:g}"
        else:
            x = x + p * GAUSSIAN_SHIFT_DIRECTION
            name = f"gauss_shift{p:g}"
        domains.append(DomainDataset(k, name, x, y, num_classes))
    return domains


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def save_domain_dir(dataset: DomainDataset, path: str | Path) -> Path:
    """Write ``meta.json`` and ``data.csv`` for one domain."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"domain_id": dataset.domain_id, "name": dataset.name, "C": dataset.num_classes, "d_in": dataset.d_in}
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    with open(path / "data.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(dataset.d_in)] + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            # repr round-trips float64 exactly
            w.writerow([repr(float(v)) for v in x] + [int(y)])
    return path


def load_domain_dir(path: str | Path) -> DomainDataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DomainDataError(f"{path}: missing meta.json") from e
    for key in ("domain_id", "name", "C", "d_in"):
        if key not in meta:
            raise DomainDataError(f"{path}/meta.json: missing key {key!r}")
    d_in, C = int(meta["d_in"]), int(meta["C"])
    expected = [f"f{i}" for i in range(d_in)]
    feats, labels = [], []
    with open(path / "data.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DomainDataError(f"{path}/data.csv: empty file")
        if "label" not in header:
            raise DomainDataError(f"{path}/data.csv: missing label column")
        if header != expected + ["label"]:
            raise DomainDataError(f"{path}/data.csv: header {header} does not match d_in={d_in}")
        for row_no, row in enumerate(reader, start=1):
            if len(row) != d_in + 1:
                raise DomainDataError(f"{path}/data.csv row {row_no}: expected {d_in + 1} fields, got {len(row)}")
            try:
                x = [float(v) for v in row[:d_in]]
                y = int(row[d_in])
            except ValueError as e:
                raise DomainDataError(f"{path}/data.csv row {row_no}: {e}") from e
            if not all(math.isfinite(v) for v in x):
                raise DomainDataError(f"{path}/data.csv row {row_no}: non-finite feature")
            feats.append(x)
            labels.append(y)
    if not feats:
        raise DomainDataError(f"{path}/data.csv: no samples")
    return DomainDataset(int(meta["domain_id"]), str(meta["name"]), np.array(feats), np.array(labels), C)


# ---------------------------------------------------------------------------
# splitting and sampling
# ---------------------------------------------------------------------------

def split_train_test(dataset: DomainDataset, spec: SplitSpec, max_retries: int = 100):
    """Seeded disjoint split with every class present on both sides."""
    n = len(dataset)
    n_train = int(round(spec.train_fraction * n))
    C = dataset.num_classes
    if n_train < C or n - n_train < C or np.any(dataset.class_counts() < 2):
        raise DomainDataError(f"domain {dataset.name!r} too small to give every class to both splits")
    rng = np.random.default_rng(spec.seed)
    for _ in range(max_retries):
        perm = rng.permutation(n)
        tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        if (np.bincount(dataset.labels[tr], minlength=C).min() > 0
                and np.bincount(dataset.labels[te], minlength=C).min() > 0):
            return dataset.subset(tr, f"{dataset.name}/train"), dataset.subset(te, f"{dataset.name}/test")
    raise DomainDataError(f"domain {dataset.name!r}: no class-covering split after {max_retries} permutations")


def sample_indices(dataset: DomainDataset, n: int, class_balanced: bool, rng: np.random.Generator) -> np.ndarray:
    N, C = len(dataset), dataset.num_classes
    if n > N:
        raise DomainDataError(f"cannot draw {n} samples from domain {dataset.name!r} of size {N}")
    if n < 0:
        raise ValueError("n must be nonnegative")
    if not class_balanced:
        return rng.choice(N, size=n, replace=False)
    if n < C:
        raise DomainDataError(f"class-balanced batch needs n >= C={C}, got {n}")
    per_class = np.full(C, n // C)
    per_class[rng.permutation(C)[: n % C]] += 1
    parts = []
    for c in range(C):
        pool = np.flatnonzero(dataset.labels == c)
        if per_class[c] > pool.size:
            raise DomainDataError(
                f"domain {dataset.name!r}: class {c} has {pool.size} samples, {per_class[c]} requested"
            )
        parts.append(rng.choice(pool, size=per_class[c], replace=False))
    return rng.permutation(np.concatenate(parts))


def sample_batch(dataset: DomainDataset, n: int, class_balanced: bool, rng: np.random.Generator) -> Batch:
    """Draw ``n`` samples without replacement (the ``Sample(D, N)`` operator)."""
    idx = sample_indices(dataset, n, class_balanced, rng)
    return Batch(
        dataset.features[idx],
        dataset.labels[idx],
        np.full(idx.size, dataset.domain_id, dtype=np.int64),
        idx,
    )


def pool_domains(domains: Sequence[DomainDataset], domain_id: int = -1, name: str = "pooled") -> DomainDataset:
    C = {d.num_classes for d in domains}
    if len(C) != 1:
        raise DomainDataError("domains disagree on the number of classes")
    return DomainDataset(
        domain_id,
        name,
        np.vstack([d.features for d in domains]),
        np.concatenate([d.labels for d in domains]),
        C.pop(),
    )
