"""Episodic bilevel training with task augmentation, plus the DeepAll baseline.

One iteration:

1. sample a meta-task (TS or MTS),
2. adapt the parameters with clipped SGD on the meta-train task loss,
3. evaluate the meta-objective at the adapted parameters,
4. differentiate ``task(original) + meta(adapted)`` with respect to the
   original parameters (through the inner step when ``second_order``) and
   take one Adam step.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .domain_data import Batch, DomainDataset, sample_indices
from .episodes import MetaTask, MixRatioSchedule, sample_task_mts, sample_task_ts
from .losses import LossBreakdown, meta_objective, prototype_alignment_loss, sample_alignment_loss, task_loss
from .model import (
    MLPBackbone,
    ModelParams,
    class_centroids,
    cosine_scores,
    embed,
    general_prototypes,
    init_params,
    predict_probs,
)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 5e-5
    beta: float = 5e-5
    gamma1: float = 1.0
    gamma2: float = 0.5
    clip_norm: float = 2.0
    iterations: int = 10000
    inner_steps: int = 1
    batch_per_domain: int = 120
    n_te: int = 120
    meta_objective_mode: str = "se"
    sampler_mode: str = "mts"
    schedule: MixRatioSchedule = field(default_factory=MixRatioSchedule)
    second_order: bool = True
    temperature: float = 0.1
    seed: int = 0
    class_balanced: bool = True
    # inner = adaptive optimizer, outer = clipped plain SGD
    swap_optimizers: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: int = 64
    d_z: int = 32

    def __post_init__(self):
        for name in ("alpha", "beta", "clip_norm", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("gamma1 and gamma2 must be nonnegative")
        if self.iterations < 1 or self.inner_steps < 1:
            raise ValueError("iterations and inner_steps must be >= 1")
        if self.meta_objective_mode not in ("se", "task_only"):
            raise ValueError(f"unknown meta_objective_mode {self.meta_objective_mode!r}")
        if self.sampler_mode not in ("ts", "mts"):
            raise ValueError(f"unknown sampler_mode {self.sampler_mode!r}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# Desk-scale preset: a from-scratch MLP on 2-D data does not move with the
# 5e-5 rates tuned for a pretrained backbone within 2000 iterations.
DESK_SCALE = dict(alpha=1e-2, beta=2e-3, iterations=2000)


@dataclass
class EpisodeLog:
    iteration: int
    loss_task_tr: float
    loss_sa: Optional[float] = None
    loss_pa: Optional[float] = None
    loss_meta: Optional[float] = None
    loss_task_metatest: Optional[float] = None
    loss_task_unseen: Optional[float] = None
    r_ho: Optional[float] = None
    ratios: Optional[tuple] = None

    def values(self) -> list[Optional[float]]:
        return [self.loss_task_tr, self.loss_sa, self.loss_pa, self.loss_meta,
                self.loss_task_metatest, self.loss_task_unseen, self.r_ho]


# ---------------------------------------------------------------------------
# gradient utilities
# ---------------------------------------------------------------------------

def clip_by_norm(gradient, threshold: float):
    """Rescale ``gradient`` to L2 norm ``threshold`` if it is longer."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if isinstance(gradient, torch.Tensor):
        norm = gradient.norm()
        if float(norm.detach()) <= threshold:
            return gradient
        return gradient * (threshold / norm)
    g = np.asarray(gradient, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    return g if norm <= threshold else g * (threshold / norm)


def clip_global(grads: Sequence[torch.Tensor], threshold: float) -> list[torch.Tensor]:
    """:func:`clip_by_norm` applied to the concatenation of ``grads``."""
    norm = torch.sqrt(sum((g * g).sum() for g in grads))
    if float(norm.detach()) <= threshold:
        return list(grads)
    scale = threshold / norm
    return [g * scale for g in grads]


@dataclass(frozen=True, eq=False)
class AdamState:
    m: tuple
    v: tuple
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        z = tuple(torch.zeros_like(t).detach() for t in params.tensors())
        return cls(z, z, 0)


def adam_update(tensors, grads, state: AdamState, lr, b1=0.9, b2=0.999, eps=1e-8):
    """One bias-corrected Adam step; returns ``(new_tensors, new_state)``."""
    t = state.t + 1
    m = tuple(b1 * m_ + (1 - b1) * g for m_, g in zip(state.m, grads))
    v = tuple(b2 * v_ + (1 - b2) * g * g for v_, g in zip(state.v, grads))
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new = [p - lr * (m_ / c1) / (torch.sqrt(v_ / c2) + eps) for p, m_, v_ in zip(tensors, m, v)]
    return new, AdamState(m, v, t)


def _check_finite(grads, where: str) -> None:
    for g in grads:
        if not bool(torch.isfinite(g).all()):
            raise TrainingDivergedError(f"non-finite gradient in {where}")


def adapt(
    params: ModelParams,
    loss_fn: Callable[[ModelParams], torch.Tensor],
    alpha: float,
    clip_norm: float,
    steps: int = 1,
    second_order: bool = True,
    adaptive: bool = False,
) -> ModelParams:
    """Inner optimization: ``steps`` clipped gradient-descent steps on ``loss_fn``.

    With ``second_order`` the returned tensors stay attached to ``params`` in
    the autograd graph, so a later backward pass differentiates through the
    update. Otherwise each gradient is treated as a constant and the adapted
    parameters depend on the originals only through the identity.

    ``adaptive`` replaces clipped SGD by a fresh-state Adam step (used only
    when the optimizer roles are swapped).
    """
    p = params
    for _ in range(steps):
        loss = loss_fn(p)
        grads = torch.autograd.grad(loss, p.tensors(), create_graph=second_order, retain_graph=True)
        _check_finite(grads, "inner step")
        if adaptive:
            new, _ = adam_update(p.tensors(), grads, AdamState.zeros_like(p), alpha)
            p = p.with_tensors(new)
        else:
            grads = clip_global(grads, clip_norm)
            p = p.with_tensors(t - alpha * g for t, g in zip(p.tensors(), grads))
    return p


def outer_gradient(
    params: ModelParams,
    adapted: ModelParams,
    task_loss_fn: Callable[[ModelParams], torch.Tensor],
    meta_loss_fn: Callable[[ModelParams], torch.Tensor],
) -> list[torch.Tensor]:
    """Gradient of ``task_loss_fn(params) + meta_loss_fn(adapted)`` w.r.t. ``params``."""
    total = task_loss_fn(params) + meta_loss_fn(adapted)
    return list(torch.autograd.grad(total, params.tensors()))


# ---------------------------------------------------------------------------
# episode losses
# ---------------------------------------------------------------------------

def _probs(params: ModelParams, z: torch.Tensor, temperature: float) -> torch.Tensor:
    return predict_probs(cosine_scores(z, general_prototypes(params)), temperature)


def batch_task_loss(params: ModelParams, batch: Batch, temperature: float) -> torch.Tensor:
    z = embed(params, batch.features)
    return task_loss(_probs(params, z, temperature), batch.labels)


def meta_train_batch(task: MetaTask) -> Batch:
    return Batch.concat([b for _, b in task.meta_train])


def episode_meta_losses(adapted: ModelParams, task: MetaTask, config: TrainConfig) -> dict[str, torch.Tensor]:
    """Alignment losses and meta-test task loss at the adapted parameters."""
    C = adapted.num_classes
    tr = meta_train_batch(task)
    te = task.meta_test
    z = embed(adapted, np.vstack([tr.features, te.features]))
    z_tr, z_te = z[: len(tr)], z[len(tr):]
    general = general_prototypes(adapted)

    labels = np.concatenate([tr.labels, te.labels])
    sa = sample_alignment_loss(z, labels, general)

    protos, pos = [], 0
    for domain_id, b in task.meta_train:
        protos.append(class_centroids(z_tr[pos:pos + len(b)], b.labels, domain_id, C))
        pos += len(b)
    pa = prototype_alignment_loss(z_te, protos + [general], config.temperature)

    metatest = task_loss(_probs(adapted, z_te, config.temperature), te.labels)
    if config.meta_objective_mode == "se":
        meta = meta_objective(sa, pa, config.gamma1, config.gamma2)
    else:
        meta = metatest
    return {"sa": sa, "pa": pa, "meta": meta, "task_metatest": metatest}


def inner_step(params: ModelParams, meta_train_batches, config: TrainConfig) -> ModelParams:
    """Adapted parameters after ``config.inner_steps`` steps on the meta-train task loss.

    ``params`` must be autograd leaves (see :meth:`ModelParams.as_leaves`).
    """
    if isinstance(meta_train_batches, MetaTask):
        batch = meta_train_batch(meta_train_batches)
    else:
        batch = Batch.concat([b for _, b in meta_train_batches])
    adapted = adapt(
        params,
        lambda p: batch_task_loss(p, batch, config.temperature),
        config.alpha,
        config.clip_norm,
        config.inner_steps,
        config.second_order,
        adaptive=config.swap_optimizers,
    )
    object.__setattr__(adapted, "_origin", params)
    return adapted


def composite_loss(params: ModelParams, task: MetaTask, config: TrainConfig):
    """``L_task(meta-train; params) + L_meta(adapted)`` as a differentiable scalar."""
    adapted = inner_step(params, task, config)
    parts = episode_meta_losses(adapted, task, config)
    task_tr = batch_task_loss(params, meta_train_batch(task), config.temperature)
    return task_tr + parts["meta"], task_tr, parts


def outer_step(
    params: ModelParams,
    adapted: ModelParams,
    meta_task: MetaTask,
    config: TrainConfig,
    optimizer_state: AdamState,
):
    """Meta-update of the original parameters; returns ``(params, state, LossBreakdown)``."""
    if getattr(adapted, "_origin", None) is not params:
        raise ValueError("adapted parameters were not produced from these params by inner_step")
    parts = episode_meta_losses(adapted, meta_task, config)
    task_tr = batch_task_loss(params, meta_train_batch(meta_task), config.temperature)
    total = task_tr + parts["meta"]
    grads = torch.autograd.grad(total, params.tensors())
    _check_finite(grads, "outer step")
    leaves = [t.detach() for t in params.tensors()]
    grads = [g.detach() for g in grads]
    if config.swap_optimizers:
        grads = clip_global(grads, config.clip_norm)
        new = [t - config.beta * g for t, g in zip(leaves, grads)]
        state = optimizer_state
    else:
        new, state = adam_update(
            leaves, grads, optimizer_state, config.beta, config.adam_beta1, config.adam_beta2, config.adam_eps
        )
    breakdown = LossBreakdown(
        task=float(task_tr.detach()),
        sa=float(parts["sa"].detach()),
        pa=float(parts["pa"].detach()),
        meta=float(parts["meta"].detach()),
        weighted_total=float(total.detach()),
        task_metatest=float(parts["task_metatest"].detach()),
    )
    return params.with_tensors(new), state, breakdown


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, task_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(task_ss)


def initial_params(train_domains: Sequence[DomainDataset], config: TrainConfig) -> ModelParams:
    init_rng, _ = _rngs(config.seed)
    d = train_domains[0]
    return init_params(MLPBackbone(d.d_in, config.hidden, config.d_z), d.num_classes, init_rng)


def sample_task(train_domains, config: TrainConfig, rng: np.random.Generator) -> MetaTask:
    if config.sampler_mode == "ts":
        return sample_task_ts(train_domains, config.batch_per_domain, config.n_te, rng, config.class_balanced)
    return sample_task_mts(
        train_domains, config.schedule, config.batch_per_domain, config.n_te, rng, config.class_balanced
    )


def unseen_loss(params: ModelParams, domain: DomainDataset, temperature: float) -> float:
    with torch.no_grad():
        z = embed(params.detach(), domain.features)
        return float(task_loss(_probs(params.detach(), z, temperature), domain.labels))


def _check_domains(train_domains: Sequence[DomainDataset]) -> None:
    if len(train_domains) < 2:
        raise ValueError("training needs K >= 2 source domains")
    if len({d.num_classes for d in train_domains}) != 1 or len({d.d_in for d in train_domains}) != 1:
        raise ValueError("source domains disagree on num_classes or d_in")


def _guard(entry: EpisodeLog) -> None:
    for v in entry.values():
        if v is not None and not math.isfinite(v):
            raise TrainingDivergedError(f"non-finite loss at iteration {entry.iteration}: {entry}")


def train(
    train_domains: Sequence[DomainDataset],
    config: TrainConfig,
    diagnostics_domain: Optional[DomainDataset] = None,
    *,
    params: Optional[ModelParams] = None,
    on_iteration: Optional[Callable] = None,
) -> tuple[ModelParams, list[EpisodeLog]]:
    """Episodic training with task augmentation.

    ``diagnostics_domain`` only feeds the ``loss_task_unseen`` log column; it
    is evaluated without gradients and never touches the random stream.
    ``on_iteration(i, params, task)`` is called after every update.
    """
    _check_domains(train_domains)
    _, rng = _rngs(config.seed)
    if params is None:
        params = initial_params(train_domains, config)
    state = AdamState.zeros_like(params)
    logs = []
    for i in range(1, config.iterations + 1):
        task = sample_task(train_domains, config, rng)
        leaves = params.as_leaves()
        adapted = inner_step(leaves, task, config)
        params, state, b = outer_step(leaves, adapted, task, config, state)
        entry = EpisodeLog(
            i, b.task, b.sa, b.pa, b.meta, b.task_metatest,
            unseen_loss(adapted, diagnostics_domain, config.temperature) if diagnostics_domain is not None else None,
            task.r_ho, tuple(float(r) for r in task.ratios),
        )
        _guard(entry)
        logs.append(entry)
        if on_iteration is not None:
            on_iteration(i, params, task)
    return params, logs


def train_deepall(
    train_domains: Sequence[DomainDataset],
    config: TrainConfig,
    diagnostics_domain: Optional[DomainDataset] = None,
    *,
    params: Optional[ModelParams] = None,
    on_iteration: Optional[Callable] = None,
) -> tuple[ModelParams, list[EpisodeLog]]:
    """Supervised baseline on the pooled source domains.

    Each step draws ``batch_per_domain * K`` pooled samples, the same number
    an episode exposes, and takes one Adam step with rate ``beta``.
    """
    _check_domains(train_domains)
    _, rng = _rngs(config.seed)
    if params is None:
        params = initial_params(train_domains, config)
    features = np.vstack([d.features for d in train_domains])
    labels = np.concatenate([d.labels for d in train_domains])
    domain_ids = np.concatenate([np.full(len(d), d.domain_id) for d in train_domains])
    pooled = DomainDataset(-1, "pooled", features, labels, train_domains[0].num_classes)
    n = min(config.batch_per_domain * len(train_domains), len(pooled))
    state = AdamState.zeros_like(params)
    logs = []
    for i in range(1, config.iterations + 1):
        idx = sample_indices(pooled, n, config.class_balanced, rng)
        batch = Batch(features[idx], labels[idx], domain_ids[idx], idx)
        leaves = params.as_leaves()
        loss = batch_task_loss(leaves, batch, config.temperature)
        grads = torch.autograd.grad(loss, leaves.tensors())
        _check_finite(grads, "deepall step")
        new, state = adam_update(
            [t.detach() for t in leaves.tensors()], grads, state,
            config.beta, config.adam_beta1, config.adam_beta2, config.adam_eps,
        )
        params = params.with_tensors(new)
        entry = EpisodeLog(
            i, float(loss.detach()),
            loss_task_unseen=unseen_loss(leaves, diagnostics_domain, config.temperature)
            if diagnostics_domain is not None else None,
        )
        _guard(entry)
        logs.append(entry)
        if on_iteration is not None:
            on_iteration(i, params, batch)
    return params, logs
