"""Meta-task construction: task sampling (TS) and mixed task sampling (MTS).

MTS builds the meta-test set as a mixture of *all* source domains. The
held-out domain receives a share ``r_ho`` drawn from a schedule and the
remaining ``1 - r_ho`` is split over the other domains by a flat Dirichlet
draw. TS is the ``r_ho = 1`` case and is implemented as exactly that, so
the two samplers consume the random stream identically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain_data import Batch, DomainDataError, DomainDataset, sample_batch


@dataclass(frozen=True)
class MixRatioSchedule:
    mode: str = "uniform_range"
    r_ho_value: float = 1.0
    r_ho_lo: float = 0.0
    r_ho_hi: float = 1.0

    def __post_init__(self):
        if self.mode not in ("fixed", "uniform_range"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if not 0.0 <= self.r_ho_value <= 1.0:
            raise ValueError(f"r_ho must be in [0, 1], got {self.r_ho_value}")
        if not 0.0 <= self.r_ho_lo <= self.r_ho_hi <= 1.0:
            raise ValueError(f"need 0 <= r_ho_lo <= r_ho_hi <= 1, got [{self.r_ho_lo}, {self.r_ho_hi}]")

    @classmethod
    def fixed(cls, value: float) -> "MixRatioSchedule":
        return cls(mode="fixed", r_ho_value=value)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "MixRatioSchedule":
        return cls(mode="uniform_range", r_ho_lo=lo, r_ho_hi=hi)

    def draw(self, rng: np.random.Generator) -> float:
        if self.mode == "fixed":
            return float(self.r_ho_value)
        return float(rng.uniform(self.r_ho_lo, self.r_ho_hi))


@dataclass(frozen=True, eq=False)
class MetaTask:
    """One episode. ``ratios`` is indexed by position in the source-domain list."""

    meta_train: list[tuple[int, Batch]]
    meta_test: Batch
    held_out_id: int
    ratios: np.ndarray
    counts: np.ndarray
    r_ho: float

    def training_domain_ids(self) -> np.ndarray:
        """Domain ids of every sample the episode exposes to the learner."""
        return np.concatenate([b.domain_ids for _, b in self.meta_train] + [self.meta_test.domain_ids])


def apportion_counts(ratios, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``ratios * total``; ties go to the lower index."""
    r = np.asarray(ratios, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("ratios must be a nonempty vector")
    if np.any(r < 0):
        raise ValueError(f"negative ratio in {r.tolist()}")
    if abs(r.sum() - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {r.sum()!r}")
    if total < 0:
        raise ValueError("total must be nonnegative")
    quotas = r * total
    counts = np.floor(quotas).astype(np.int64)
    # guard float noise pushing a floor one past the quota
    counts = np.minimum(counts, total)
    short = total - int(counts.sum())
    if short > 0:
        remainders = quotas - counts
        # stable sort on -remainder keeps lower indices first among ties
        order = np.argsort(-remainders, kind="stable")
        counts[order[:short]] += 1
    elif short < 0:
        order = np.argsort(quotas - counts, kind="stable")
        for i in order:
            if short == 0:
                break
            if counts[i] > 0:
                counts[i] -= 1
                short += 1
    return counts


def _check_domains(train_domains: Sequence[DomainDataset]) -> None:
    if len(train_domains) < 2:
        raise ValueError("at least 2 source domains are needed to simulate domain shift")
    ids = [d.domain_id for d in train_domains]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate domain ids {ids}")


def sample_task_mts(
    train_domains: Sequence[DomainDataset],
    schedule: MixRatioSchedule,
    batch_train: int,
    n_te: int,
    rng: np.random.Generator,
    class_balanced: bool = True,
) -> MetaTask:
    _check_domains(train_domains)
    K = len(train_domains)
    ho = int(rng.integers(K))
    r_ho = schedule.draw(rng)
    rest = rng.dirichlet(np.ones(K - 1)) * (1.0 - r_ho)
    ratios = np.insert(rest, ho, r_ho)
    # renormalize away float drift so the sum-to-one check is exact enough
    ratios = ratios / ratios.sum()
    counts = apportion_counts(ratios, n_te)

    meta_train = [
        (d.domain_id, sample_batch(d, batch_train, class_balanced, rng))
        for k, d in enumerate(train_domains)
        if k != ho
    ]
    parts = []
    for d, c in zip(train_domains, counts):
        if c == 0:
            continue
        if c > len(d):
            raise DomainDataError(f"meta-test asks domain {d.name!r} for {c} samples; it has {len(d)}")
        parts.append(sample_batch(d, int(c), class_balanced and c >= d.num_classes, rng))
    return MetaTask(meta_train, Batch.concat(parts), train_domains[ho].domain_id, ratios, counts, r_ho)


def sample_task_ts(
    train_domains: Sequence[DomainDataset],
    batch_train: int,
    batch_test: int,
    rng: np.random.Generator,
    class_balanced: bool = True,
) -> MetaTask:
    """Hold one domain out entirely as meta-test; the rest form meta-train."""
    return sample_task_mts(train_domains, MixRatioSchedule.fixed(1.0), batch_train, batch_test, rng, class_balanced)
