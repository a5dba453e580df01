"""Flat ``key=value`` experiment configuration with dotted namespaces.

A config file holds one ``key = value`` per line; ``#`` starts a comment.
Overrides use the same syntax on the command line (``--set stage2.lr=1e-3``).
Unknown keys are rejected; values are coerced to the type of the default.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "deterministic": False,
    # image encoder
    "model.variant": "vit",
    "model.patch": 8,
    "model.stride": 8,
    "model.depth": 2,
    "model.width": 64,
    "model.heads": 4,
    "model.cnn_channels": "16,32,64,128",
    "model.proj_dim": 32,
    "model.dropout": 0.0,
    # text encoder
    "text.ctx_len": 16,
    "text.width": 64,
    "text.depth": 2,
    "text.heads": 4,
    # prompt
    "prompt.M": 4,
    "prompt.prefix": "a photo of a",
    "prompt.init_std": 0.02,
    # side information
    "sie.enabled": False,
    "sie.lambda": 1.0,
    "sie.apply_to": "cls_only",
    # losses
    "loss.tau": 1.0 / 0.07,
    "loss.epsilon": 0.1,
    "loss.margin": 0.3,
    "loss.w_id": "auto",
    "loss.w_tri": "auto",
    "loss.w_i2tce": "auto",
    "loss.w_i2t": 0.0,
    "loss.w_t2i": 0.0,
    "loss.pre_triplet": True,
    # stage 0: toy contrastive pretraining
    "stage0.epochs": 20,
    "stage0.lr": 1e-3,
    "stage0.batch": 64,
    "stage0.warmup_epochs": 2,
    "stage0.augment": True,
    # stage 1: prompt fitting
    "stage1.epochs": 30,
    "stage1.lr": 3.5e-4,
    "stage1.batch": 64,
    "stage1.averaged_steps": 1,
    # stage 2: image encoder fine-tuning
    "stage2.epochs": 30,
    "stage2.lr": 3.5e-4,
    "stage2.warmup_epochs": 5,
    "stage2.warmup_start_lr": 3.5e-6,
    "stage2.milestones": "15,25",
    "stage2.gamma": 0.1,
    "stage2.P": 16,
    "stage2.K": 4,
    "stage2.weight_decay": 0.0,
    "stage2.train_image_proj": True,
    "stage2.train_text_proj": False,
    # augmentation
    "aug.flip_p": 0.5,
    "aug.pad": 2,
    "aug.erase_p": 0.5,
    "aug.erase_min": 0.02,
    "aug.erase_max": 0.4,
    # evaluation
    "eval.feature_mode": "img+post",
    "eval.metric": "cosine",
    "eval.batch": 256,
}

ALIASES = {"M": "prompt.M"}


def _coerce(key, raw, default):
    if not isinstance(raw, str):
        raw_s = None
    else:
        raw_s = raw.strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            if raw_s.lower() in ("1", "true", "yes", "on"):
                return True
            if raw_s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw) if raw_s is None else int(raw_s)
        if isinstance(default, float):
            return float(raw) if raw_s is None else float(raw_s)
        if default == "auto":
            if raw_s is not None and raw_s == "auto":
                return "auto"
            return float(raw) if raw_s is None else float(raw_s)
        return raw if raw_s is None else raw_s
    except (TypeError, ValueError, AttributeError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


class Config(dict):
    """A resolved flat configuration; every key of ``DEFAULTS`` is present."""

    def __init__(self, values=None):
        super().__init__(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key, value):
        key = ALIASES.get(key, key)
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self[key] = _coerce(key, value, DEFAULTS[key])
        return self

    def updated(self, **overrides) -> "Config":
        out = Config(dict(self))
        for k, v in overrides.items():
            out.set(k.replace("__", "."), v)
        return out

    def ints(self, key) -> tuple:
        raw = str(self[key]).strip()
        return tuple(int(p) for p in raw.split(",") if p.strip()) if raw else ()

    def to_text(self) -> str:
        return "".join(f"{k} = {self[k]}\n" for k in sorted(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_file(cls, path, overrides=()) -> "Config":
        cfg = cls(parse_text(Path(path).read_text()))
        return cfg.apply_overrides(overrides)

    def apply_overrides(self, overrides) -> "Config":
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must be key=value, got {item!r}")
            k, v = item.split("=", 1)
            self.set(k.strip(), v)
        return self


def parse_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
