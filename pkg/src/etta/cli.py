"""Command-line entry point: ``etta <command> --config c.json [--set key=value ...]``.

Exit status: 0 on success, 2 for usage/config errors, 1 for runtime failures.
Errors are reported as a single ``etta-error kind=... message=...`` line on
stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .domain_data import save_domain_dir, split_train_test
from .evaluation import (
    RunResult,
    domain_accuracy,
    export_embeddings,
    leave_one_domain_out,
    overfit_gap_area,
    save_results,
)
from .metatrain import EpisodeLog, train, train_deepall
from .model import load_params, save_params

COMMANDS = ("generate-data", "train", "deepall", "lodo", "gap-area", "export-embeddings")
EPISODE_COLUMNS = (
    "iteration", "loss_task_tr", "loss_sa", "loss_pa", "loss_meta",
    "loss_task_metatest", "loss_task_unseen", "r_ho",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="etta", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. train.sampler_mode=ts (repeatable)")
    p.add_argument("--out", help="output directory (overrides eval.output_dir)")
    p.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel grid cells for lodo")
    p.add_argument("--checkpoint", help="parameter file for export-embeddings")
    return p


def write_episodes(logs: Sequence[EpisodeLog], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EPISODE_COLUMNS)
        for entry in logs:
            # repr keeps every float bit so reruns compare byte for byte
            w.writerow([entry.iteration] + ["" if v is None else repr(float(v)) for v in entry.values()])


def _output_dir(args, cfg) -> Path:
    if args.out:
        out = Path(args.out)
    elif cfg["eval"]["output_dir"]:
        out = Path(cfg["eval"]["output_dir"])
    elif os.environ.get("ETTA_OUT_DIR"):
        out = Path(os.environ["ETTA_OUT_DIR"]) / f"{args.command}-{cfgmod.config_digest(cfg)[:12]}"
    else:
        raise UsageError("no output directory: pass --out, set eval.output_dir, or export ETTA_OUT_DIR")
    if out.exists() and any(out.iterdir()):
        if not args.overwrite:
            raise RuntimeError(f"output directory {out} is not empty; pass --overwrite to reuse it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _splits(cfg):
    domains = cfgmod.build_domains(cfg)
    spec = cfgmod.split_spec_from(cfg)
    return domains, [split_train_test(d, spec) for d in domains]


def _held_out_index(cfg, domains) -> Optional[int]:
    h = cfg["data"]["held_out"]
    if h is None:
        return None
    if isinstance(h, str):
        names = [d.name for d in domains]
        if h not in names:
            raise cfgmod.ConfigError(f"data.held_out: no domain named {h!r} (have {names})")
        return names.index(h)
    if not 0 <= h < len(domains):
        raise cfgmod.ConfigError(f"data.held_out: index {h} out of range")
    return h


def _cmd_generate(cfg, out: Path, args) -> None:
    for d in cfgmod.build_domains(cfg):
        save_domain_dir(d, out / "domains" / d.name)


def _single_run(cfg, out: Path, args, deepall: bool) -> None:
    domains, splits = _splits(cfg)
    h = _held_out_index(cfg, domains)
    sources = [tr for k, (tr, _) in enumerate(splits) if k != h]
    diagnostics = splits[h][1] if h is not None else None
    tcfg = cfgmod.train_config_from(cfg)
    digest = cfgmod.config_digest(cfg)
    every = cfg["train"]["checkpoint_every"]

    def checkpoint(i, params, _task):
        if every and i % every == 0:
            (out / "checkpoints").mkdir(exist_ok=True)
            save_params(out / "checkpoints" / f"params_{i:06d}.npz", params, digest)

    fn = train_deepall if deepall else train
    params, logs = fn(sources, tcfg, diagnostics, on_iteration=checkpoint)
    write_episodes(logs, out / "episodes.csv")
    save_params(out / "params.npz", params, digest)

    method = "DeepAll" if deepall else "ETTA"
    results = [
        RunResult(splits[k][1].name, method, "ACC", acc, 0.0, [acc], digest, extra={"role": "source"})
        for k, acc in ((k, domain_accuracy(params, splits[k][1])) for k in range(len(splits)) if k != h)
    ]
    if h is not None:
        acc = domain_accuracy(params, diagnostics)
        results.append(RunResult(diagnostics.name, method, "ACC", acc, 0.0, [acc], digest, extra={"role": "unseen"}))
    save_results(results, out)


def _cmd_lodo(cfg, out: Path, args) -> None:
    domains = cfgmod.build_domains(cfg)
    results = leave_one_domain_out(
        domains, cfgmod.method_specs(cfg), cfg["eval"]["seeds"], cfgmod.split_spec_from(cfg), jobs=args.jobs
    )
    save_results(results, out)


def _cmd_gap_area(cfg, out: Path, args) -> None:
    domains, splits = _splits(cfg)
    h = _held_out_index(cfg, domains)
    if h is None:
        raise cfgmod.ConfigError("gap-area needs data.held_out (the diagnostics domain)")
    sources = [tr for k, (tr, _) in enumerate(splits) if k != h]
    results = []
    for m in cfgmod.method_specs(cfg):
        if m.kind != "etta":
            continue
        areas = []
        for seed in cfg["eval"]["seeds"]:
            _, logs = train(sources, m.config.replace(seed=seed), splits[h][1])
            write_episodes(logs, out / f"episodes_{m.name}_seed{seed}.csv")
            areas.append(overfit_gap_area(logs, cfg["eval"]["burn_in"], cfg["eval"]["smooth_window"]))
        results.append(RunResult(
            domains[h].name, m.name, "gap_area", float(np.mean(areas)), float(np.std(areas)), areas,
            cfgmod.config_digest(cfg),
        ))
    if not results:
        raise cfgmod.ConfigError("gap-area needs at least one method of kind 'etta'")
    save_results(results, out)


def _cmd_export(cfg, out: Path, args) -> None:
    ckpt = args.checkpoint or cfg["eval"]["checkpoint"]
    if not ckpt:
        raise UsageError("export-embeddings needs --checkpoint or eval.checkpoint")
    params, _ = load_params(ckpt)
    export_embeddings(params, cfgmod.build_domains(cfg), out / "embeddings.csv")


HANDLERS = {
    "generate-data": _cmd_generate,
    "train": lambda c, o, a: _single_run(c, o, a, deepall=False),
    "deepall": lambda c, o, a: _single_run(c, o, a, deepall=True),
    "lodo": _cmd_lodo,
    "gap-area": _cmd_gap_area,
    "export-embeddings": _cmd_export,
}


def _fail(kind: str, message: str) -> None:
    print(f"etta-error kind={kind} message={json.dumps(message)}", file=sys.stderr)


def run_command(argv: Sequence[str]) -> int:
    try:
        args = build_parser().parse_args(list(argv))
        overrides = dict(cfgmod.parse_override(s) for s in args.set)
        cfg = cfgmod.load_config(args.config, overrides)
        out = _output_dir(args, cfg)
    except (UsageError, cfgmod.ConfigError) as e:
        _fail("usage", str(e))
        return 2
    except Exception as e:  # noqa: BLE001 - reported as one line
        _fail("runtime", str(e))
        return 1
    try:
        (out / "config.resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        HANDLERS[args.command](cfg, out, args)
    except (UsageError, cfgmod.ConfigError) as e:
        _fail("usage", str(e))
        return 2
    except Exception as e:  # noqa: BLE001
        _fail("runtime", f"{type(e).__name__}: {e}")
        return 1
    return 0


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
