"""Run configuration: a JSON document with one section per pipeline stage."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, fields
from pathlib import Path

from .data import SyntheticConfig
from .tracking import TrackerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


EXTRA = {
    "synth": {"n_sequences": 5},
    "train": {"val_fraction": 0.2, "val_names": None},
    "track": {},
    "eval": {"iou_threshold": 0.5},
    "gradcheck": {"n_graphs": 50, "m_max": 8, "n_frames": 3, "gamma": 0.1, "step": 1e-5,
                  "tol": 1e-4, "loss": "L2"},
}
SCHEMA = {"synth": SyntheticConfig, "train": TrainConfig, "track": TrackerConfig}


def defaults() -> dict:
    cfg = {"seed": 0}
    for sec, extra in EXTRA.items():
        base = asdict(SCHEMA[sec]()) if sec in SCHEMA else {}
        base.pop("seed", None)
        base.update(copy.deepcopy(extra))
        cfg[sec] = base
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _merge(dst: dict, src: dict, prefix: str = "") -> None:
    for k, v in src.items():
        if k not in dst:
            raise ConfigError(f"unknown config key {prefix}{k!r}")
        if isinstance(dst[k], dict) and isinstance(v, dict):
            _merge(dst[k], v, f"{prefix}{k}.")
        else:
            dst[k] = v


def load_config(path=None, overrides=(), seed=None) -> dict:
    """Defaults, then the JSON file, then ``key=value`` dotted overrides, then ``seed``."""
    cfg = defaults()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        _merge(cfg, doc)
    for key, value in overrides:
        set_dotted(cfg, key, _parse_value(value) if isinstance(value, str) else value)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def section(cfg: dict, name: str):
    """Typed config object for ``name`` with the run seed filled in."""
    cls = SCHEMA[name]
    keys = {f.name for f in fields(cls)}
    kw = {k: v for k, v in cfg[name].items() if k in keys}
    if "seed" in keys:
        kw["seed"] = cfg["seed"]
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def validate(cfg: dict) -> None:
    for name in SCHEMA:
        section(cfg, name)
    g = cfg["gradcheck"]
    if not isinstance(g["gamma"], (int, float)) or not g["gamma"] > 0:
        raise ConfigError("gradcheck: gamma must be > 0")
    if g["loss"] not in ("L1", "L2"):
        raise ConfigError("gradcheck: loss must be L1 or L2")
    if not 0 < cfg["eval"]["iou_threshold"] <= 1:
        raise ConfigError("eval: iou_threshold must lie in (0, 1]")
    if not 0 <= cfg["train"]["val_fraction"] < 1:
        raise ConfigError("train: val_fraction must lie in [0, 1)")
