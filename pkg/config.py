"""
config.py

Flat ``section.key = value`` configuration files and environment settings.

- Lines are UTF-8; blank lines and lines starting with ``#`` are ignored.
- Values are JSON literals (numbers, lists, strings, true/false, null); a value
  that is not valid JSON is taken as a bare string.
- Unknown or repeated keys are errors, so a misspelled hyperparameter never
  silently falls back to its default.

Environment (a ``.env`` file is honoured through python-dotenv):
- LWFR_LOG_LEVEL: default log level for the CLI.
- LWFR_ARCH_PRESETS: alternative architecture presets JSON (read by model_zoo).
"""

from __future__ import annotations

import json
import logging
import os
from typing import Any, Dict, Mapping, Optional

from dotenv import load_dotenv

from errors import InvalidConfig, IoFailure
from margin_loss import MarginConfig
from model_zoo import arch_from_preset
from optim import LrSchedule, SamConfig, SgdConfig
from trainer import TrainConfig
from utils import normalize_name

logger = logging.getLogger(__name__)

# Optional .env loading; a missing file is fine
try:
    load_dotenv()
except Exception:
    pass

DEFAULT_LOG_LEVEL = "INFO"

KNOWN_KEYS = (
    "arch.preset",
    "arch.width_mult",
    "arch.embedding_dim",
    "arch.input_size",
    "arch.channel_round",
    "arch.channel_override",
    "arch.stage_repeats",
    "optim.kind",
    "optim.rho",
    "optim.momentum",
    "optim.weight_decay",
    "schedule.stage_lrs",
    "schedule.stage_boundaries",
    "schedule.gamma",
    "schedule.total_epochs",
    "loss.scale",
    "loss.margin",
    "train.batch_size",
    "train.epochs",
    "train.seed",
    "train.checkpoint_epochs",
    "train.checkpoint_dir",
    "train.val_pairs",
    "train.save_optimizer_state",
)


def env_log_level() -> str:
    return os.getenv("LWFR_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def parse_config_text(text: str) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        key = key.strip()
        if not sep or not key:
            raise InvalidConfig(f"line {lineno}: expected 'section.key = value'")
        if key not in KNOWN_KEYS:
            raise InvalidConfig(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise InvalidConfig(f"line {lineno}: {key} set twice")
        values[key] = _parse_value(raw.strip())
    return values


def _typed(values: Mapping[str, Any], key: str, kind, default):
    if key not in values or values[key] is None:
        return default
    v = values[key]
    try:
        if kind is bool:
            if not isinstance(v, bool):
                raise TypeError("expected true or false")
            return v
        if kind is list:
            if not isinstance(v, list):
                raise TypeError("expected a list")
            return v
        if kind is int and (isinstance(v, bool) or (isinstance(v, float) and not v.is_integer())):
            raise TypeError("expected an integer")
        return kind(v)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"{key}: {exc} (got {v!r})") from None


def build_train_config(values: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> TrainConfig:
    """Validated TrainConfig from parsed values; ``overrides`` use the same keys and win."""
    values = {**values, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    unknown = sorted(set(values) - set(KNOWN_KEYS))
    if unknown:
        raise InvalidConfig(f"unknown keys: {unknown}")

    arch = arch_from_preset(
        _typed(values, "arch.preset", str, "mobilefacenet"),
        width_mult=values.get("arch.width_mult"),
        embedding_dim=values.get("arch.embedding_dim"),
        input_size=values.get("arch.input_size"),
        channel_round=values.get("arch.channel_round"),
        per_stage_channel_override=values.get("arch.channel_override"),
        stage_repeats=values.get("arch.stage_repeats"),
    )
    base_sched = LrSchedule()
    schedule = LrSchedule(
        stage_lrs=[float(v) for v in _typed(values, "schedule.stage_lrs", list, base_sched.stage_lrs)],
        stage_boundaries=[int(v) for v in _typed(values, "schedule.stage_boundaries", list, base_sched.stage_boundaries)],
        decay_gamma=_typed(values, "schedule.gamma", float, base_sched.decay_gamma),
        total_epochs=_typed(values, "schedule.total_epochs", int, base_sched.total_epochs),
    )
    val_pairs = values.get("train.val_pairs") or {}
    if isinstance(val_pairs, list):
        val_pairs = {normalize_name(os.path.splitext(os.path.basename(p))[0]): p for p in val_pairs}
    if not isinstance(val_pairs, dict):
        raise InvalidConfig("train.val_pairs must be a JSON object name -> pair file, or a list of pair files")
    ckpt_epochs = values.get("train.checkpoint_epochs")

    cfg = TrainConfig(
        arch=arch,
        optim_kind=_typed(values, "optim.kind", str, "sam"),
        sgd=SgdConfig(
            momentum=_typed(values, "optim.momentum", float, SgdConfig.momentum),
            weight_decay=_typed(values, "optim.weight_decay", float, SgdConfig.weight_decay),
        ),
        sam=SamConfig(rho=_typed(values, "optim.rho", float, SamConfig.rho)),
        schedule=schedule,
        loss=MarginConfig(
            scale=_typed(values, "loss.scale", float, MarginConfig.scale),
            margin=_typed(values, "loss.margin", float, MarginConfig.margin),
        ),
        batch_size=_typed(values, "train.batch_size", int, 128),
        epochs=_typed(values, "train.epochs", int, schedule.total_epochs),
        seed=_typed(values, "train.seed", int, 0),
        val_pairs={str(k): str(v) for k, v in val_pairs.items()},
        checkpoint_dir=_typed(values, "train.checkpoint_dir", str, None),
        checkpoint_epochs=None if ckpt_epochs is None else [int(e) for e in _typed(values, "train.checkpoint_epochs", list, [])],
        save_optimizer_state=_typed(values, "train.save_optimizer_state", bool, True),
    )
    cfg.validate()
    return cfg


def load_train_config(path: Optional[str], overrides: Optional[Mapping[str, Any]] = None) -> TrainConfig:
    """Read a config file (None means all defaults) and apply CLI overrides."""
    values: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                values = parse_config_text(fh.read())
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
    cfg = build_train_config(values, overrides)
    logger.debug("train config: %s", cfg.to_dict())
    return cfg
