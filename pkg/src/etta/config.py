"""Experiment configuration: a nested JSON document with dotted-path overrides.

Unknown keys are errors. Defaults are the full-scale training settings;
the desk-scale configs under ``demos/`` override the rates and budget.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

from .domain_data import DomainDataset, SplitSpec, generate_synthetic_domains, load_domain_dir
from .episodes import MixRatioSchedule
from .evaluation import MethodSpec
from .metatrain import TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


DEFAULTS: dict[str, Any] = {
    "data": {
        "family": "rotated_two_moons",
        "domain_params": [0.0, 30.0, 60.0, 90.0],
        "samples_per_domain": 400,
        "noise": 0.1,
        "num_classes": 2,
        "seed": 0,
        "paths": [],
        "train_fraction": 0.7,
        "split_seed": 0,
        "held_out": None,
    },
    "model": {"hidden": 64, "d_z": 32, "temperature": 0.1},
    "train": {
        "alpha": 5e-5,
        "beta": 5e-5,
        "gamma1": 1.0,
        "gamma2": 0.5,
        "clip_norm": 2.0,
        "iterations": 10000,
        "inner_steps": 1,
        "batch_per_domain": 120,
        "n_te": 120,
        "meta_objective_mode": "se",
        "sampler_mode": "mts",
        "second_order": True,
        "seed": 0,
        "class_balanced": True,
        "swap_optimizers": False,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "checkpoint_every": 0,
    },
    "mts": {"mode": "uniform_range", "r_ho": 1.0, "r_ho_lo": 0.0, "r_ho_hi": 1.0},
    "eval": {
        "seeds": [0, 1, 2],
        "methods": [
            {"name": "DeepAll", "kind": "deepall", "set": {}},
            {"name": "ETTA-SE", "kind": "etta", "set": {}},
        ],
        "output_dir": None,
        "burn_in": 0,
        "smooth_window": 1,
        "checkpoint": None,
    },
}

# sections a method's "set" block may touch
METHOD_SECTIONS = ("model", "train", "mts")


def _check_type(key: str, value, default) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
    return value


def _merge(base: dict, update: Mapping, prefix: str = "") -> dict:
    for k, v in update.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, Mapping):
                raise ConfigError(f"{key}: expected a section object")
            _merge(base[k], v, key + ".")
        else:
            base[k] = _check_type(key, v, DEFAULTS_FLAT.get(key, base[k]))
    return base


def _flatten(d: Mapping, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


DEFAULTS_FLAT = _flatten(DEFAULTS)


def parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def set_dotted(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, p in enumerate(parts[:-1]):
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    leaf = parts[-1]
    if leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[leaf] = _check_type(dotted, value, DEFAULTS_FLAT.get(dotted, node[leaf]))


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    return key.strip(), parse_value(raw)


def resolve(raw: Mapping | None = None, overrides: Mapping[str, Any] | None = None) -> dict:
    """Defaults merged with ``raw`` then with dotted ``overrides``; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if raw:
        _merge(cfg, raw)
    for k, v in (overrides or {}).items():
        set_dotted(cfg, k, v)
    validate(cfg)
    return cfg


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return resolve(raw, overrides)


def config_digest(cfg: Mapping) -> str:
    """Content hash over the canonical config; the output location is excluded."""
    c = copy.deepcopy(dict(cfg))
    c["eval"] = {k: v for k, v in c["eval"].items() if k != "output_dir"}
    blob = json.dumps(c, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def schedule_from(cfg: Mapping) -> MixRatioSchedule:
    m = cfg["mts"]
    return MixRatioSchedule(m["mode"], m["r_ho"], m["r_ho_lo"], m["r_ho_hi"])


def train_config_from(cfg: Mapping) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k != "checkpoint_every"}
    return TrainConfig(
        **t,
        schedule=schedule_from(cfg),
        temperature=cfg["model"]["temperature"],
        hidden=cfg["model"]["hidden"],
        d_z=cfg["model"]["d_z"],
    )


def method_specs(cfg: Mapping) -> list[MethodSpec]:
    specs = []
    for i, m in enumerate(cfg["eval"]["methods"]):
        local = copy.deepcopy(dict(cfg))
        for k, v in m.get("set", {}).items():
            if k.split(".")[0] not in METHOD_SECTIONS:
                raise ConfigError(f"eval.methods[{i}].set: key {k!r} outside {METHOD_SECTIONS}")
            set_dotted(local, k, v)
        specs.append(MethodSpec(m["name"], m["kind"], train_config_from(local)))
    return specs


def build_domains(cfg: Mapping) -> list[DomainDataset]:
    d = cfg["data"]
    if d["paths"]:
        return [load_domain_dir(p) for p in d["paths"]]
    return generate_synthetic_domains(
        d["family"], len(d["domain_params"]), d["samples_per_domain"], d["domain_params"], d["seed"],
        noise=d["noise"], num_classes=d["num_classes"],
    )


def split_spec_from(cfg: Mapping) -> SplitSpec:
    return SplitSpec(cfg["data"]["train_fraction"], cfg["data"]["split_seed"])


def validate(cfg: Mapping) -> None:
    """Build every typed object once so bad values fail before any work starts."""
    try:
        schedule_from(cfg)
        train_config_from(cfg)
        split_spec_from(cfg)
        for i, m in enumerate(cfg["eval"]["methods"]):
            if not isinstance(m, Mapping) or set(m) - {"name", "kind", "set"} or not {"name", "kind"} <= set(m):
                raise ConfigError(f"eval.methods[{i}] must have keys name, kind and optional set")
        names = [m["name"] for m in cfg["eval"]["methods"]]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate method names {names}")
        method_specs(cfg)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if not cfg["eval"]["seeds"]:
        raise ConfigError("eval.seeds must be nonempty")
    if cfg["train"]["checkpoint_every"] < 0:
        raise ConfigError("train.checkpoint_every must be >= 0")
