"""Flat ``key = value`` configuration files for pretraining runs.

Top-level keys map to TrainConfig fields, ``model.<name>`` to ModelConfig
fields and ``lambda.<modality>`` to reconstruction weights. ``#`` starts a
comment. ``manifest`` and ``out_dir`` are required.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .model import ModelConfig
from .tiles import MODALITIES, ConfigurationError
from .train import TrainConfig

REQUIRED = ("manifest", "out_dir")

DESCRIPTIONS = {
    "manifest": "path to a dataset index file or the directory holding index.tsv",
    "out_dir": "directory for checkpoints, the metrics log and the run manifest",
    "epochs": "passes over the data when steps = 0",
    "steps": "optimizer steps to take; 0 derives the count from epochs",
    "batch_size": "tiles per step",
    "lr_base": "peak learning rate reached after warmup",
    "weight_decay": "decoupled AdamW weight decay",
    "beta1": "AdamW first-moment decay",
    "beta2": "AdamW second-moment decay",
    "adam_eps": "AdamW denominator epsilon",
    "warmup_steps": "linear warmup length; -1 uses 5% of the total steps",
    "grad_clip": "global gradient-norm clip; 0 disables",
    "mask_ratio": "fraction of patches hidden from the encoder",
    "target_fraction": "fraction of patches used as latent-prediction targets",
    "ema_momentum": "target-encoder EMA momentum",
    "alpha": "weight of the latent-prediction loss",
    "beta": "weight of the caption-tile contrastive loss",
    "temperature": "contrastive similarity temperature",
    "normalize_targets": "standardise each reconstruction target patch by its own statistics",
    "compute_skipped_branches": "evaluate zero-weight branches anyway (for equivalence checks)",
    "seed": "seed for batch order and masks",
    "failure_budget": "unreadable tiles tolerated before aborting",
}


class ConfigParseError(ConfigurationError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"field '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.key = key


def _field_types(cls) -> dict[str, type]:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    out = {}
    for f in dataclasses.fields(cls):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        if t in hints:
            out[f.name] = hints[t]
    return out


_TRAIN_TYPES = _field_types(TrainConfig)
_MODEL_TYPES = _field_types(ModelConfig)
_MODALITY_NAMES = [m.name for m in MODALITIES]


def _convert(raw: str, typ: type, line: int, key: str):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigParseError(f"expected {typ.__name__}, got {raw!r}", line, key) from None


def parse_config(text: str, overrides: dict | None = None) -> TrainConfig:
    train_kw, model_kw = {}, {}
    lambdas = {m.name: m.loss_weight for m in MODALITIES}
    seen = {}
    for n, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError("expected 'key = value'", n)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigParseError("empty key", n)
        if key in seen:
            raise ConfigParseError(f"duplicate key (first set on line {seen[key]})", n, key)
        seen[key] = n
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in _MODEL_TYPES:
                raise ConfigParseError("unknown model field", n, key)
            model_kw[name] = _convert(value, _MODEL_TYPES[name], n, key)
        elif key.startswith("lambda."):
            name = key[len("lambda."):]
            if name not in lambdas:
                raise ConfigParseError(f"unknown modality (known: {', '.join(_MODALITY_NAMES)})", n, key)
            lambdas[name] = _convert(value, float, n, key)
        elif key in _TRAIN_TYPES:
            train_kw[key] = _convert(value, _TRAIN_TYPES[key], n, key)
        else:
            raise ConfigParseError("unknown field", n, key)
    for key, value in (overrides or {}).items():
        if key in _TRAIN_TYPES:
            train_kw[key] = value
        elif key == "lambdas":
            lambdas.update(value)
        else:
            raise ConfigParseError("unknown override", None, key)
    for key in REQUIRED:
        if not train_kw.get(key):
            raise ConfigParseError("missing required field", None, key)
    try:
        return TrainConfig(model=ModelConfig(**model_kw), lambdas=lambdas, **train_kw)
    except ConfigurationError as exc:
        raise ConfigParseError(str(exc)) from None


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), overrides)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def format_config(cfg: TrainConfig) -> str:
    """Canonical form with every default materialised; parses back to an equal config."""
    lines = []
    for name in sorted(_TRAIN_TYPES):
        lines.append(f"{name} = {_fmt(getattr(cfg, name))}")
    for name in _MODALITY_NAMES:
        lines.append(f"lambda.{name} = {_fmt(float(cfg.lambdas[name]))}")
    for name in sorted(_MODEL_TYPES):
        lines.append(f"model.{name} = {_fmt(getattr(cfg.model, name))}")
    return "\n".join(lines) + "\n"


def config_reference() -> str:
    """Markdown table of every config key with its type and default."""
    base = TrainConfig()
    rows = ["| key | type | default | meaning |", "|---|---|---|---|"]
    for name in sorted(_TRAIN_TYPES):
        req = " (required)" if name in REQUIRED else ""
        rows.append(f"| `{name}` | {_TRAIN_TYPES[name].__name__} | `{_fmt(getattr(base, name))}` | "
                    f"{DESCRIPTIONS.get(name, '')}{req} |")
    for name in _MODALITY_NAMES:
        rows.append(f"| `lambda.{name}` | float | `{_fmt(float(base.lambdas[name]))}` | "
                    f"reconstruction weight for {name} |")
    for name in sorted(_MODEL_TYPES):
        rows.append(f"| `model.{name}` | {_MODEL_TYPES[name].__name__} | `{_fmt(getattr(base.model, name))}` | "
                    f"model hyperparameter |")
    return "\n".join(rows) + "\n"
