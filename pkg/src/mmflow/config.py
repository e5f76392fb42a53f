"""Model/training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

AUDIO_LATENT_RATE = 43
VIDEO_RATE = 24
TEXT_EMBED_DIM = 768
MAX_ABS_POSITIONS = 4000


class ConfigError(ValueError):
    """Raised for malformed config files or violated config invariants."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture, optimisation and sampling hyperparameters.

    The defaults describe a desk-scale network; widths and depths scale up
    without code changes.

    ``audio_latent_rate``, ``video_rate``, ``text_embed_dim`` and
    ``max_abs_positions`` are fixed by the feature providers and are only
    present so they are serialised with every checkpoint.
    """

    d_model: int = 128
    d_cond: int = 128
    n_joint_layers: int = 4
    n_unimodal_layers: int = 2
    n_heads: int = 4
    d_latent: int = 16
    audio_latent_rate: int = AUDIO_LATENT_RATE
    video_rate: int = VIDEO_RATE
    text_embed_dim: int = TEXT_EMBED_DIM
    max_abs_positions: int = MAX_ABS_POSITIONS
    frame_budget: int = 512
    max_seconds: int = 10
    rope_base: float = 10000.0
    cfg_scale: float = 4.5
    sample_steps: int = 25
    t_start: float = 0.05
    lr_base: float = 1e-5
    weight_decay: float = 0.001
    ema_decay: float = 0.999
    seed: int = 0
    # provider feature widths
    video_dim: int = 1024
    sync_dim: int = 768
    # network details
    d_fourier: int = 256
    mlp_ratio: int = 4
    n_convnext_blocks: int = 4
    vocab_file: str = ""
    # schedule / optimiser
    warmup_steps: int = 1000
    inv_gamma: float = 1e6
    power: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # training data handling
    batch_size: int = 8
    p_drop: float = 0.1
    p_drop_all: float = 0.1
    checkpoint_interval: int = 1000

    def __post_init__(self) -> None:
        validate_config(self)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def validate_config(cfg: ModelConfig) -> None:
    positive = ("d_model", "d_cond", "n_joint_layers", "n_heads", "d_latent",
                "frame_budget", "max_seconds", "sample_steps", "video_dim",
                "sync_dim", "d_fourier", "mlp_ratio", "warmup_steps",
                "batch_size", "checkpoint_interval")
    for name in positive:
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)}")
    for name in ("n_unimodal_layers", "n_convnext_blocks", "seed"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be non-negative")
    fixed = {
        "audio_latent_rate": AUDIO_LATENT_RATE,
        "video_rate": VIDEO_RATE,
        "text_embed_dim": TEXT_EMBED_DIM,
        "max_abs_positions": MAX_ABS_POSITIONS,
    }
    for name, value in fixed.items():
        if getattr(cfg, name) != value:
            raise ConfigError(f"{name} is fixed at {value}, got {getattr(cfg, name)}")
    if cfg.d_model % cfg.n_heads != 0:
        raise ConfigError(
            f"d_model mod n_heads must be 0 ({cfg.d_model} mod {cfg.n_heads} = "
            f"{cfg.d_model % cfg.n_heads})")
    if cfg.head_dim % 2 != 0:
        raise ConfigError(f"head dim must be even for rotary encoding, got {cfg.head_dim}")
    if cfg.d_fourier % 2 != 0:
        raise ConfigError("d_fourier must be even")
    if cfg.frame_budget > cfg.max_abs_positions:
        raise ConfigError(
            f"frame_budget ({cfg.frame_budget}) exceeds max_abs_positions "
            f"({cfg.max_abs_positions})")
    if cfg.audio_latent_rate * cfg.max_seconds > cfg.frame_budget:
        raise ConfigError(
            f"audio_latent_rate * max_seconds ({cfg.audio_latent_rate * cfg.max_seconds}) "
            f"exceeds frame_budget ({cfg.frame_budget})")
    if cfg.rope_base <= 0 or cfg.cfg_scale <= 0 or cfg.lr_base <= 0:
        raise ConfigError("rope_base, cfg_scale and lr_base must be positive")
    if not 0.0 <= cfg.t_start < 1.0:
        raise ConfigError(f"t_start must lie in [0, 1), got {cfg.t_start}")
    if cfg.weight_decay < 0:
        raise ConfigError("weight_decay must be non-negative")
    if not 0.0 < cfg.ema_decay < 1.0:
        raise ConfigError(f"ema_decay must lie in (0, 1), got {cfg.ema_decay}")
    for name in ("p_drop", "p_drop_all"):
        if not 0.0 <= getattr(cfg, name) <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1]")
    if cfg.inv_gamma <= 0 or cfg.power < 0:
        raise ConfigError("inv_gamma must be positive and power non-negative")


_FIELD_TYPES = {f.name: f.type for f in fields(ModelConfig)}


def _parse_value(key: str, raw: str, lineno: int):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {kind}, got {raw!r}") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return raw


def parse_config(text: str) -> ModelConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, lineno)
    return ModelConfig(**values)


def load_config(path) -> ModelConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: ModelConfig) -> str:
    """Canonical serialisation: every field, declaration order, ``repr`` floats."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.type == "str":
            lines.append(f'{f.name} = "{value}"')
        else:
            lines.append(f"{f.name} = {value!r}")
    return "\n".join(lines) + "\n"


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
