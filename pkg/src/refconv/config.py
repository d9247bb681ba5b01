"""Run configuration: a JSON file validated against explicit defaults.

Unknown keys are rejected and every validation problem is reported in one
pass. The resolved form (all defaults filled in) is what run directories
record, so a run is reproducible from its resolved config plus the seed.
"""

from __future__ import annotations

import json
from pathlib import Path

DEFAULTS = {
    "model": "tiny_dw",
    "seed": 0,
    "data": {
        "kind": "synth",              # cifar10 | synth | blobs
        "path": "data/cifar-10-batches-bin",
        "fraction": 1.0,
        "resize_224": False,
        "n_train": 10000,
        "n_test": 2000,
        "classes": 10,
        "noise": 1.5,
        "augment": True,
    },
    "train": {
        "optimizer": "sgd",
        "momentum": 0.9,
        "base_lr": 0.05,
        "weight_decay": 4e-5,
        "batch_size": 128,
        "epochs": 30,
        "warmup_epochs": 2,
        "schedule": "cosine",
        "precision": "float32",
    },
    "surgery": {
        "init": "xavier",             # xavier | zero
        "shortcut": True,
        "basis": "pretrained",        # pretrained | random
        "basis_trainable": False,
        "map_kernel": 3,
        "freeze_untouched": False,
    },
    "analysis": {
        "channels": 64,
        "resolution": 25,
        "span": 1.0,
        "subset": 1024,
        "batch_size": 256,
    },
}

_CHOICES = {
    ("data", "kind"): ("cifar10", "synth", "blobs"),
    ("train", "optimizer"): ("sgd",),
    ("train", "schedule"): ("cosine",),
    ("train", "precision"): ("float32", "float64"),
    ("surgery", "init"): ("xavier", "zero"),
    ("surgery", "basis"): ("pretrained", "random"),
}


class ConfigError(ValueError):
    pass


def _merge(defaults: dict, given: dict, prefix: str, problems: list) -> dict:
    out = {}
    for key, dval in defaults.items():
        if key in given:
            gval = given[key]
            if isinstance(dval, dict):
                if isinstance(gval, dict):
                    out[key] = _merge(dval, gval, f"{prefix}{key}.", problems)
                else:
                    problems.append(f"{prefix}{key}: expected a section, got {gval!r}")
                    out[key] = dval
            else:
                if isinstance(dval, bool) and not isinstance(gval, bool):
                    problems.append(f"{prefix}{key}: expected true/false, got {gval!r}")
                    out[key] = dval
                elif isinstance(dval, (int, float)) and not isinstance(dval, bool) \
                        and not isinstance(gval, (int, float)):
                    problems.append(f"{prefix}{key}: expected a number, got {gval!r}")
                    out[key] = dval
                elif isinstance(dval, str) and not isinstance(gval, str):
                    problems.append(f"{prefix}{key}: expected a string, got {gval!r}")
                    out[key] = dval
                else:
                    out[key] = gval
        else:
            out[key] = json.loads(json.dumps(dval)) if isinstance(dval, dict) else dval
    for key in given:
        if key not in defaults:
            problems.append(f"{prefix}{key}: unknown key")
    return out


def _check_values(cfg: dict, problems: list) -> None:
    from .models import ZOO_IDS
    if cfg["model"] not in ZOO_IDS:
        problems.append(f"model: {cfg['model']!r} not in {ZOO_IDS}")
    if not isinstance(cfg["seed"], int):
        problems.append(f"seed: expected an integer, got {cfg['seed']!r}")
    for (section, key), choices in _CHOICES.items():
        v = cfg[section][key]
        if v not in choices:
            problems.append(f"{section}.{key}: {v!r} not in {choices}")
    d = cfg["data"]
    if not (0.0 < d["fraction"] <= 1.0):
        problems.append(f"data.fraction: must be in (0, 1], got {d['fraction']}")
    for key in ("n_train", "n_test", "classes"):
        if not (isinstance(d[key], int) and d[key] > 0):
            problems.append(f"data.{key}: must be a positive integer, got {d[key]!r}")
    t = cfg["train"]
    if t["epochs"] < 0 or t["warmup_epochs"] < 0:
        problems.append("train.epochs and train.warmup_epochs must be >= 0")
    elif t["epochs"] > 0 and t["warmup_epochs"] >= t["epochs"]:
        problems.append("train.warmup_epochs must be < train.epochs")
    if t["batch_size"] < 2:
        problems.append("train.batch_size must be >= 2")
    if t["base_lr"] <= 0:
        problems.append("train.base_lr must be positive")
    s = cfg["surgery"]
    if s["map_kernel"] < 1 or s["map_kernel"] % 2 == 0:
        problems.append(f"surgery.map_kernel: must be odd positive, got {s['map_kernel']}")
    a = cfg["analysis"]
    if a["resolution"] < 3 or a["resolution"] % 2 == 0:
        problems.append(f"analysis.resolution: must be odd >= 3, got {a['resolution']}")
    if a["span"] <= 0:
        problems.append("analysis.span must be positive")
    if a["channels"] < 1 or a["subset"] < 1 or a["batch_size"] < 1:
        problems.append("analysis.channels/subset/batch_size must be positive")


def resolve_config(given: dict) -> dict:
    """Merge onto defaults, rejecting unknown keys; raise with every problem."""
    problems: list[str] = []
    cfg = _merge(DEFAULTS, given, "", problems)
    # ill-typed values were replaced by defaults above, so the value checks
    # always run and every problem is reported in one pass
    _check_values(cfg, problems)
    if problems:
        raise ConfigError("invalid config:\n  - " + "\n  - ".join(problems))
    return cfg


def load_config(path=None) -> dict:
    if path is None:
        return resolve_config({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        given = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(given, dict):
        raise ConfigError("config must be a JSON object")
    return resolve_config(given)


def save_resolved(cfg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return path
