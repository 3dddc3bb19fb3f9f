"""Run configuration: every hyperparameter with its default and validation."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import tomli

from .diffusion import FUSION_STRATEGIES
from .errors import ConfigError
from .losses import SYMMETRIC_CE_MODES, validate_lambdas
from .vision import HEAD_POOLING

# One-line help per key, used by the CLI epilogs.
KEY_HELP = {
    "d": "PCA output bands",
    "patch": "patch side length (odd)",
    "T": "diffusion steps",
    "beta_start": "first beta of the linear schedule",
    "beta_end": "last beta of the linear schedule",
    "enc_filters": "encoder residual block widths",
    "dec_filters": "decoder residual block widths",
    "dec_out_channels": "per-branch decoder feature conv width (x2 = fused decoder channels)",
    "temb_dim": "sinusoidal timestep embedding size",
    "mfe_channels": "3D feature encoder channels",
    "head_pooling": "avg | flatten before the heads",
    "fusion_strategy": "|".join(FUSION_STRATEGIES),
    "shared_dim": "width s of the shared prompt/image space",
    "text_width": "text transformer width",
    "text_heads": "text transformer heads",
    "text_layers": "text transformer layers",
    "vocab_size": "token embedding rows (BPE target size)",
    "context_length": "token sequence length",
    "refiner_depth": "prompt refiner transformer blocks (e)",
    "refiner_heads": "prompt refiner attention heads",
    "alpha": "weight of the self-categorical consistency term",
    "lambdas": "weights of (classification, noise, consistency); must sum to 1",
    "symmetric_ce": "anchor | simple class-to-sample target rule",
    "temperature_init": "initial similarity scale",
    "learn_temperature": "train the similarity scale",
    "lr": "Adam learning rate",
    "epochs": "training epochs",
    "batch_size": "samples per class-balanced batch",
    "train_per_class": "training pixels per class (int or list)",
    "seed": "model init / sampling seed",
    "split_seed": "train/test split seed",
    "repeat_seeds": "seeds for repeated runs",
    "text_weights": "optional .npz/.pt state dict for the text tower (empty = train from scratch)",
    "predict_t": "timestep used at inference (zero noise)",
    "predict_batch": "patches per inference batch",
    "deterministic": "force deterministic kernels",
}


@dataclass
class RunConfig:
    d: int = 15
    patch: int = 25
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    enc_filters: tuple = (32, 64, 64)
    dec_filters: tuple = (64, 32, 32)
    dec_out_channels: int = 48
    temb_dim: int = 128
    mfe_channels: int = 16
    head_pooling: str = "avg"
    fusion_strategy: str = "rdaf"
    shared_dim: int = 512
    text_width: int = 512
    text_heads: int = 8
    text_layers: int = 3
    vocab_size: int = 49152
    context_length: int = 77
    refiner_depth: int = 3
    refiner_heads: int = 8
    alpha: float = 0.2
    lambdas: tuple = (0.6, 0.2, 0.2)
    symmetric_ce: str = "anchor"
    temperature_init: float = 1 / 0.07
    learn_temperature: bool = True
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    train_per_class: Any = 10
    seed: int = 0
    split_seed: int = 0
    repeat_seeds: tuple = (0,)
    predict_t: int = 1
    predict_batch: int = 256
    deterministic: bool = True
    text_weights: str = ""

    def __post_init__(self):
        for name in ("enc_filters", "dec_filters", "lambdas", "repeat_seeds"):
            setattr(self, name, tuple(getattr(self, name)))
        if isinstance(self.train_per_class, list):
            self.train_per_class = tuple(self.train_per_class)

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Small widths for CPU tests; loss weights, alpha and e stay at defaults."""
        base = dict(
            d=8, patch=9, T=50, enc_filters=(8, 16, 16), dec_filters=(16, 8, 8),
            dec_out_channels=12, temb_dim=16, mfe_channels=4, shared_dim=32,
            text_width=32, text_heads=4, refiner_heads=4, vocab_size=512,
            epochs=200, batch_size=30, temperature_init=1 / 0.07,
        )
        base.update(overrides)
        return cls(**base)

    def validate(self) -> "RunConfig":
        _pos_int = lambda name: _check(self, name, lambda v: isinstance(v, int) and v >= 1, "a positive integer")
        for name in ("d", "patch", "T", "dec_out_channels", "temb_dim", "mfe_channels", "shared_dim",
                     "text_width", "text_heads", "text_layers", "vocab_size", "context_length",
                     "refiner_depth", "refiner_heads", "epochs", "batch_size", "predict_batch"):
            _pos_int(name)
        if self.patch % 2 == 0:
            raise ConfigError("patch", f"must be odd, got {self.patch}")
        if self.patch < 5:
            raise ConfigError("patch", f"must be >= 5, got {self.patch}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("beta_end", "need 0 < beta_start <= beta_end < 1")
        if len(self.enc_filters) < 1 or len(self.enc_filters) != len(self.dec_filters):
            raise ConfigError("dec_filters", "encoder and decoder need the same number of levels")
        if any(not isinstance(f, int) or f < 1 for f in self.enc_filters + self.dec_filters):
            raise ConfigError("enc_filters", "filter counts must be positive integers")
        if self.fusion_strategy not in FUSION_STRATEGIES:
            raise ConfigError("fusion_strategy", f"must be one of {FUSION_STRATEGIES}")
        if self.head_pooling not in HEAD_POOLING:
            raise ConfigError("head_pooling", f"must be one of {HEAD_POOLING}")
        if self.symmetric_ce not in SYMMETRIC_CE_MODES:
            raise ConfigError("symmetric_ce", f"must be one of {SYMMETRIC_CE_MODES}")
        if self.text_width % self.text_heads:
            raise ConfigError("text_heads", "must divide text_width")
        if self.shared_dim % self.refiner_heads:
            raise ConfigError("refiner_heads", "must divide shared_dim")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", f"must lie in [0, 1], got {self.alpha}")
        validate_lambdas(self.lambdas)
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError("lr", f"must be > 0, got {self.lr}")
        if not self.temperature_init > 0:
            raise ConfigError("temperature_init", "must be > 0")
        if not 1 <= self.predict_t <= self.T:
            raise ConfigError("predict_t", f"must lie in 1..T={self.T}")
        if self.context_length < 3:
            raise ConfigError("context_length", "must be >= 3")
        tpc = self.train_per_class
        counts = tpc if isinstance(tpc, tuple) else (tpc,)
        if not counts or any(not isinstance(c, int) or c < 0 for c in counts):
            raise ConfigError("train_per_class", "must be a non-negative integer or list of them")
        return self

    def train_counts(self, n_classes: int) -> list[int]:
        tpc = self.train_per_class
        if isinstance(tpc, tuple):
            if len(tpc) != n_classes:
                raise ConfigError("train_per_class", f"lists {len(tpc)} counts for {n_classes} classes")
            return list(tpc)
        return [int(tpc)] * n_classes

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        flat = _flatten(data)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(flat) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown config key")
        cfg = cls(**flat)
        return cfg.validate()


def _check(cfg, name, pred, what):
    v = getattr(cfg, name)
    if isinstance(v, bool) or not pred(v):
        raise ConfigError(name, f"must be {what}, got {v!r}")


def _flatten(data: dict) -> dict:
    """Merge nested TOML sections into one flat key space."""
    flat: dict = {}
    for k, v in data.items():
        if isinstance(v, dict):
            flat.update(_flatten(v))
        else:
            flat[k] = v
    return flat


def load_config(path: str | Path | None, base: RunConfig | None = None) -> RunConfig:
    """Read a TOML (or JSON) config; keys it omits keep ``base``'s values."""
    base = base or RunConfig()
    if path is None:
        return base.validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix.lower() == ".json" else tomli.loads(text)
    except (json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from exc
    merged = base.to_dict()
    merged.update(_flatten(data))
    return RunConfig.from_dict(merged)


def dump_toml(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return json.dumps(v)
    return repr(v)
