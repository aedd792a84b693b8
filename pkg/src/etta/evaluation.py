"""Leave-one-domain-out harness, metrics and training diagnostics."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .domain_data import DomainDataset, SplitSpec, split_train_test
from .metatrain import EpisodeLog, TrainConfig, train, train_deepall
from .model import ModelParams, embed, predict

METHOD_KINDS = ("etta", "deepall")


def accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("accuracy of an empty batch")
    return float(np.count_nonzero(p == y)) / p.size


def dice(prediction_mask, truth_mask) -> float:
    """``2|P & G| / (|P| + |G|)``; two empty masks score 1.0."""
    p, g = np.asarray(prediction_mask).astype(bool), np.asarray(truth_mask).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shape mismatch {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def domain_accuracy(params: ModelParams, domain: DomainDataset) -> float:
    return accuracy(predict(params, domain.features), domain.labels)


# ---------------------------------------------------------------------------
# leave-one-domain-out
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodSpec:
    name: str
    kind: str
    config: TrainConfig

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}; expected one of {METHOD_KINDS}")


def config_hash(obj) -> str:
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RunResult:
    held_out: str
    method: str
    metric: str
    mean: float
    std: float
    per_seed: list[float]
    config_hash: str
    source_mean: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def setting_label(sources: Sequence[DomainDataset], target: DomainDataset) -> str:
    return ",".join(d.name for d in sources) + " -> " + target.name


def _train_method(method: MethodSpec, sources, seed: int, observer=None, diagnostics=None):
    cfg = method.config.replace(seed=seed)
    fn = train if method.kind == "etta" else train_deepall
    return fn(sources, cfg, diagnostics, on_iteration=observer)


def _run_cell(splits, held_out: int, method: MethodSpec, seed: int, observer=None):
    sources = [tr for k, (tr, _) in enumerate(splits) if k != held_out]
    params, _ = _train_method(method, sources, seed, observer)
    target_acc = domain_accuracy(params, splits[held_out][1])
    source_acc = [domain_accuracy(params, te) for k, (_, te) in enumerate(splits) if k != held_out]
    return target_acc, float(np.mean(source_acc))


def _cell_job(args):
    return _run_cell(*args)


def leave_one_domain_out(
    all_domains: Sequence[DomainDataset],
    methods: Sequence[MethodSpec],
    seeds: Sequence[int] = (0, 1, 2),
    split: SplitSpec = SplitSpec(),
    *,
    jobs: int = 1,
    observer: Optional[Callable] = None,
) -> list[RunResult]:
    """Cycle every domain as the unseen target; train on the others' 70% splits.

    ``observer(held_out_name, method_name, seed)`` may return a per-iteration
    callback ``(i, params, task)`` for auditing; it forces sequential runs.
    Results hold one row per (setting, method) plus an ``Average`` row per method.
    """
    if len(all_domains) < 3:
        raise ValueError("leave-one-domain-out needs at least 3 domains")
    if not seeds:
        raise ValueError("need at least one seed")
    splits = [split_train_test(d, split) for d in all_domains]
    cells = [(h, m, s) for h in range(len(all_domains)) for m in methods for s in seeds]

    if jobs > 1 and observer is None:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_cell_job, [(splits, h, m, s) for h, m, s in cells]))
    else:
        outcomes = []
        for h, m, s in cells:
            cb = observer(all_domains[h].name, m.name, s) if observer is not None else None
            outcomes.append(_run_cell(splits, h, m, s, cb))
    by_cell = dict(zip([(h, m.name, s) for h, m, s in cells], outcomes))

    results = []
    for m in methods:
        h_rows = []
        for h, target in enumerate(all_domains):
            accs = [by_cell[h, m.name, s][0] for s in seeds]
            srcs = [by_cell[h, m.name, s][1] for s in seeds]
            sources = [d for k, d in enumerate(all_domains) if k != h]
            h_rows.append(RunResult(
                setting_label(sources, target), m.name, "ACC",
                float(np.mean(accs)), float(np.std(accs)), accs,
                config_hash(m.config), float(np.mean(srcs)),
                {"target": target.name},
            ))
        per_seed_avg = [float(np.mean([r.per_seed[i] for r in h_rows])) for i in range(len(seeds))]
        results.extend(h_rows)
        results.append(RunResult(
            "Average", m.name, "ACC",
            float(np.mean([r.mean for r in h_rows])), float(np.std(per_seed_avg)), per_seed_avg,
            config_hash(m.config), float(np.mean([r.source_mean for r in h_rows])),
        ))
    return results


def results_table(results: Sequence[RunResult], percent: bool = True) -> str:
    """Fixed-width text table: rows are settings, columns methods, cells mean±std."""
    methods = list(dict.fromkeys(r.method for r in results))
    rows = list(dict.fromkeys(r.held_out for r in results))
    cell = {(r.held_out, r.method): r for r in results}
    scale = 100.0 if percent else 1.0

    def fmt(r):
        if r is None:
            return "-"
        return f"{scale * r.mean:.2f}±{scale * r.std:.2f}"

    table = [["Setting"] + methods]
    for row in rows:
        table.append([row] + [fmt(cell.get((row, m))) for m in methods])
    widths = [max(len(line[i]) for line in table) for i in range(len(table[0]))]
    lines = ["  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(line, widths)))
             for line in table]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def save_results(results: Sequence[RunResult], out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "results.json").write_text(json.dumps([r.to_dict() for r in results], indent=2) + "\n")
    (out / "results.txt").write_text(results_table(results))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def _moving_average(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return x
    kernel = np.ones(window) / window
    return np.convolve(x, kernel, mode="valid")


def overfit_gap_area(logs: Sequence[EpisodeLog], burn_in: int = 0, smooth_window: int = 1) -> float:
    """Trapezoidal area between the meta-test and unseen-domain task-loss curves.

    Integrates ``|unseen - metatest|`` over iteration index, skipping the first
    ``burn_in`` records. ``smooth_window > 1`` applies a moving average to both
    curves first.
    """
    if not 0 <= burn_in < len(logs):
        raise ValueError(f"burn_in {burn_in} must be in [0, {len(logs)})")
    logs = logs[burn_in:]
    if any(l.loss_task_unseen is None for l in logs):
        raise ValueError("logs lack the unseen-domain loss channel (train with a diagnostics domain)")
    if any(l.loss_task_metatest is None for l in logs):
        raise ValueError("logs lack the meta-test task-loss channel")
    it = np.array([l.iteration for l in logs], dtype=np.float64)
    unseen = np.array([l.loss_task_unseen for l in logs])
    metatest = np.array([l.loss_task_metatest for l in logs])
    if smooth_window > 1:
        unseen, metatest = _moving_average(unseen, smooth_window), _moving_average(metatest, smooth_window)
        it = it[smooth_window - 1:]
    return float(np.trapezoid(np.abs(unseen - metatest), it))


def export_embeddings(params: ModelParams, domains: Sequence[DomainDataset], path: str | Path) -> Path:
    """Write ``z0..z{d_z-1},label,domain_id`` rows for every sample of every domain."""
    path = Path(path)
    d_z = params.arch.d_z
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f"z{i}" for i in range(d_z)] + ["label", "domain_id"])
            for d in domains:
                with torch.no_grad():
                    z = embed(params.detach(), d.features).numpy()
                for row, y in zip(z, d.labels):
                    w.writerow([repr(float(v)) for v in row] + [int(y), d.domain_id])
    except OSError as e:
        raise OSError(f"cannot write embeddings to {path}: {e}") from e
    return path


def load_embeddings(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :-2], data[:, -2].astype(np.int64), data[:, -1].astype(np.int64)
