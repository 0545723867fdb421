"""Flat ``key = value`` configuration files.

Blank lines and lines starting with ``#`` are ignored. Keys are the field
names of :class:`~ngdenoise.train.TrainConfig` and
:class:`~ngdenoise.model.ModelConfig`, plus ``sigma_min``/``sigma_max`` for
the training noise range and a few path and runtime keys. Values are parsed
by type; ``sigma = auto`` selects a random level per image.
"""
from __future__ import annotations

from pathlib import Path

from .model import ModelConfig
from .noisesim import Pattern
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _sigma(v):
    return None if str(v).strip().lower() == "auto" else float(v)


def _floats(v):
    if isinstance(v, (list, tuple)):
        return tuple(float(x) for x in v)
    return tuple(float(x) for x in str(v).replace(",", " ").split())


def _pattern(v):
    return Pattern(str(v).strip().lower()).value


def _str(v):
    return str(v)


TRAIN_KEYS = {
    "steps": _int, "batch": _int, "patch": _int, "lr": _float, "beta1": _float,
    "beta2": _float, "eps": _float, "seed": _int, "validate_every": _int,
    "sigma": _sigma, "sigma_min": _float, "sigma_max": _float, "pattern": _pattern,
    "val_sigmas": _floats, "val_seed": _int, "val_crop": _int,
}
MODEL_KEYS = {
    "channels": _int, "growth": _int, "conv_layers": _int, "rdb_count": _int,
    "rrdb_count": _int, "residual_scale": _float, "slope": _float, "attention_kernel": _int,
}
PATH_KEYS = {"data": _str, "val": _str, "out": _str, "threads": _int}
KEYS = {**TRAIN_KEYS, **MODEL_KEYS, **PATH_KEYS}


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def load(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_text(text, str(path))


def merge(*layers: dict) -> dict:
    """Later layers win; ``None`` values (flags not given) are skipped."""
    out = {}
    for layer in layers:
        for k, v in layer.items():
            if v is None:
                continue
            if k not in KEYS:
                raise ConfigError(f"unknown key {k!r}")
            out[k] = v
    return out


def build_train_config(values: dict) -> TrainConfig:
    tr = {k: v for k, v in values.items() if k in TRAIN_KEYS and k not in ("sigma_min", "sigma_max")}
    if "sigma_min" in values or "sigma_max" in values:
        tr["sigma_range"] = (values.get("sigma_min", 0.0), values.get("sigma_max", 75.0))
    md = {k: v for k, v in values.items() if k in MODEL_KEYS}
    try:
        return TrainConfig(**tr, model=ModelConfig(**md))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def train_config_items(cfg: TrainConfig) -> dict:
    """Flatten a TrainConfig back into config-file keys."""
    d = cfg.to_dict()
    model = d.pop("model")
    lo, hi = d.pop("sigma_range")
    d["sigma_min"], d["sigma_max"] = lo, hi
    if d["sigma"] is None:
        d["sigma"] = "auto"
    return {**d, **model}


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def dump(values: dict, header: str = "") -> str:
    lines = [f"# {line}" for line in header.splitlines()]
    lines += [f"{k} = {_fmt(v)}" for k, v in values.items()]
    return "\n".join(lines) + "\n"


def write_run_cfg(directory, values: dict, header: str = "") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "run.cfg"
    path.write_text(dump(values, header), encoding="utf-8")
    return path
