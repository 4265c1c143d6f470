"""Run configuration: one JSON file with nested sections per component.

Parsing is strict: unknown keys and malformed values are rejected with the
offending section and field named, and a parsed config serializes back to an
equivalent file (round-trip safe). Cross-section consistency (auxiliary loss
weights vs branch count, image size vs encoder depth, class counts) is
checked by :func:`validate_run_config`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .networks import DecoderSpec, EncoderSpec
from .synth import SyntheticTask


@dataclass
class TrainSettings:
    steps: int = 500
    batch: int = 4
    seed: int = 1
    learning_rate: float = 5e-4
    init_std: float = 0.0
    train_samples: int = 16

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.init_std < 0:
            raise ConfigError("init_std must be >= 0")
        if self.train_samples < 1:
            raise ConfigError("train_samples must be >= 1")


@dataclass
class RunConfig:
    encoder: EncoderSpec
    decoder: DecoderSpec
    loss: LossConfig
    task: SyntheticTask
    train: TrainSettings
    output_dir: str = "runs/run"


_SECTIONS = {
    "encoder": EncoderSpec,
    "decoder": DecoderSpec,
    "loss": LossConfig,
    "task": SyntheticTask,
    "train": TrainSettings,
}
_TUPLE_FIELDS = {"channels", "block_channels", "aux_weights", "image_size"}


def _build_section(name: str, cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{name}' must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': "
                          + ", ".join(unknown))
    kwargs = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"section '{name}': {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{name}': {exc}") from None


def parse_config(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, "
                          f"column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"output_dir"})
    if unknown:
        raise ConfigError("unknown top-level key(s): " + ", ".join(unknown))
    missing = sorted(set(_SECTIONS) - set(raw))
    if missing:
        raise ConfigError("missing required section(s): " + ", ".join(missing))
    sections = {name: _build_section(name, cls, raw[name])
                for name, cls in _SECTIONS.items()}
    output_dir = raw.get("output_dir", "runs/run")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")
    return RunConfig(output_dir=output_dir, **sections)


def _section_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def serialize_config(cfg: RunConfig) -> str:
    doc = {name: _section_dict(getattr(cfg, name)) for name in _SECTIONS}
    doc["output_dir"] = cfg.output_dir
    return json.dumps(doc, indent=2) + "\n"


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(serialize_config(cfg))


def expected_branch_count(cfg: RunConfig) -> int:
    if cfg.decoder.prototype in ("cascade", "scale_wise"):
        return cfg.encoder.k
    return 1


def validate_run_config(cfg: RunConfig) -> None:
    """Cross-section checks that single sections cannot see."""
    k = cfg.encoder.k
    divisor = 2 ** (k - 1)
    bad = [s for s in cfg.task.image_size if s % divisor != 0]
    if bad:
        raise ConfigError(
            f"task.image_size {list(cfg.task.image_size)} is invalid: every "
            f"extent must be divisible by 2^(k-1) = {divisor} for k = {k}")
    if len(cfg.task.image_size) != cfg.encoder.spatial_dims:
        raise ConfigError(
            f"task.image_size has {len(cfg.task.image_size)} dims but "
            f"encoder.spatial_dims is {cfg.encoder.spatial_dims}")
    if cfg.task.num_classes != cfg.decoder.num_classes:
        raise ConfigError(
            f"task.num_classes ({cfg.task.num_classes}) must equal "
            f"decoder.num_classes ({cfg.decoder.num_classes})")
    expected = expected_branch_count(cfg)
    if len(cfg.loss.aux_weights) != expected:
        raise ConfigError(
            f"loss.aux_weights has {len(cfg.loss.aux_weights)} entries but the "
            f"'{cfg.decoder.prototype}' decoder produces {expected} branch(es)")
