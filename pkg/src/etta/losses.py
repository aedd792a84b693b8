"""Task loss and the embedding-alignment meta-objective.

All reductions are means (over samples, and over prototype pairs for the
prototype-wise term) so loss scales do not depend on batch size.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np
import torch

from .model import PROB_FLOOR, PrototypeSet, as_tensor, cosine_scores, predict_probs


@dataclass(frozen=True)
class LossBreakdown:
    task: float
    sa: float
    pa: float
    meta: float
    weighted_total: float
    task_metatest: float = float("nan")


def _labels(labels) -> torch.Tensor:
    return torch.from_numpy(np.array(labels, dtype=np.int64))


def task_loss(probs: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-likelihood of the true class."""
    p = as_tensor(probs)
    if p.shape[0] == 0:
        raise ValueError("task_loss of an empty batch")
    y = _labels(labels)
    return -torch.log(p.gather(1, y[:, None])).mean()


def sample_alignment_loss(embeddings: torch.Tensor, labels, general_prototypes: PrototypeSet) -> torch.Tensor:
    """Mean over samples of ``(1 - cos(own)) + sum(cos(other classes))``."""
    if general_prototypes.tag != "general":
        raise ValueError(f"sample alignment needs the general prototypes, got tag {general_prototypes.tag!r}")
    if embeddings.shape[0] == 0:
        raise ValueError("sample_alignment_loss of an empty batch")
    cos = cosine_scores(embeddings, general_prototypes)
    own = cos.gather(1, _labels(labels)[:, None]).squeeze(1)
    # sum over d != c equals the row sum minus the own-class term
    return ((1.0 - own) + (cos.sum(dim=1) - own)).mean()


def _floor(p: torch.Tensor) -> torch.Tensor:
    p = p.clamp_min(PROB_FLOOR)
    return p / p.sum(dim=-1, keepdim=True)


def symmetric_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """``0.5 * (KL(p||q) + KL(q||p))`` along the last axis, natural log."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(q.shape)}")
    p, q = _floor(p), _floor(q)
    # the two KL sums combine into sum (p - q) * (log p - log q)
    return 0.5 * ((p - q) * (torch.log(p) - torch.log(q))).sum(dim=-1)


def prototype_alignment_loss(
    meta_test_embeddings: torch.Tensor,
    prototype_sets: Sequence[PrototypeSet],
    temperature: float,
) -> torch.Tensor:
    """Mean symmetric KL between predictions made with every pair of prototype sets."""
    if len(prototype_sets) < 2:
        raise ValueError("prototype alignment needs at least 2 prototype sets")
    if meta_test_embeddings.shape[0] == 0:
        raise ValueError("prototype_alignment_loss of an empty batch")
    probs = [predict_probs(cosine_scores(meta_test_embeddings, s), temperature) for s in prototype_sets]
    pair_terms = [symmetric_kl(probs[a], probs[b]) for a, b in combinations(range(len(probs)), 2)]
    return torch.stack(pair_terms).mean()


def meta_objective(sa, pa, gamma1: float, gamma2: float):
    if gamma1 < 0 or gamma2 < 0:
        raise ValueError("trade-off weights must be nonnegative")
    return gamma1 * sa + gamma2 * pa
