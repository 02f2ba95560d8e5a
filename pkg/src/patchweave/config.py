"""Run configuration: a flat UTF-8 key=value file with typed, validated keys.

One ``key=value`` pair per line, ``#`` starts a comment, blank lines are
skipped. Unknown keys are rejected so typos fail loudly instead of silently
falling back to defaults.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .coords import PatchLayout
from .data import DATASET_KINDS
from .layers import ArchConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """A config file or config value the run cannot proceed with."""


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default). Defaults are the toy-scale settings; every key
# here is documented in the README.
SCHEMA: dict[str, tuple] = {
    "layout.grid_h": (int, 4),
    "layout.grid_w": (int, 4),
    "layout.macro_rows": (int, 2),
    "layout.macro_cols": (int, 2),
    "layout.micro_size": (int, 4),
    "layout.topology": (str, "planar"),
    "arch.latent_dim": (int, 16),
    "arch.base_channels": (int, 32),
    "arch.projection": (_bool, True),
    "arch.latent_head": (_bool, False),
    "train.batch": (int, 32),
    "train.lr_g": (float, 1e-4),
    "train.lr_d": (float, 4e-4),
    "train.beta1": (float, 0.0),
    "train.beta2": (float, 0.999),
    "train.adam_eps": (float, 1e-8),
    "train.gp_weight": (float, 10.0),
    "train.coord_weight": (float, 100.0),
    "train.latent_weight": (float, 1.0),
    "train.sampling": (str, "discrete"),
    "train.power_iters": (int, 1),
    "train.steps": (int, 1000),
    "train.snapshot_every": (int, 250),
    "data.kind": (str, "gradient_hue"),
    "data.count": (int, 64),
    "data.seed": (int, 0),
    "data.heldout_fraction": (float, 0.1),
    "data.folder": (str, ""),
    "eval.count": (int, 64),
}


def parse_config_text(text: str) -> dict:
    """Parse key=value lines into a fully-defaulted, typed mapping."""
    values = dict()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    for key, (_, default) in SCHEMA.items():
        values.setdefault(key, default)
    return values


def load_config(path) -> dict:
    """Read and parse a config file; missing file is a config error."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    values = parse_config_text(text)
    folder = values["data.folder"]
    if values["data.kind"] == "folder" and not folder:
        raise ConfigError("data.kind=folder requires data.folder")
    if folder and not Path(folder).is_dir():
        raise ConfigError(f"data.folder does not exist: {folder}")
    return values


def default_config() -> dict:
    return {key: default for key, (_, default) in SCHEMA.items()}


def _section(values: dict, prefix: str) -> dict:
    cut = len(prefix)
    return {k[cut:]: v for k, v in values.items() if k.startswith(prefix)}


def build_layout(values: dict) -> PatchLayout:
    try:
        return PatchLayout(**_section(values, "layout."))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_arch(values: dict) -> ArchConfig:
    try:
        return ArchConfig(**_section(values, "arch."))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_train_config(values: dict) -> TrainConfig:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    section = {k: v for k, v in _section(values, "train.").items() if k in fields}
    try:
        return TrainConfig(**section)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def validate_data_section(values: dict) -> None:
    kind = values["data.kind"].replace("-", "_")
    if kind != "folder" and kind not in DATASET_KINDS and kind != "blobs":
        raise ConfigError(
            f"data.kind must be one of {DATASET_KINDS + ('folder',)}, got {values['data.kind']!r}")
    if values["data.count"] < 2:
        raise ConfigError(f"data.count must be >= 2, got {values['data.count']}")
    if not 0.0 < values["data.heldout_fraction"] < 1.0:
        raise ConfigError("data.heldout_fraction must be in (0, 1)")
