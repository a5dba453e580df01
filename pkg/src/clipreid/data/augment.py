"""Train-time augmentation: flip -> pad -> random crop -> random erasing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class AugmentationConfig:
    flip_p: float = 0.5
    pad: int = 2
    crop: tuple | None = None  # defaults to the input size
    erase_p: float = 0.5
    erase_area: tuple = (0.02, 0.4)
    erase_ratio: tuple = (0.3, 3.3)

    def __post_init__(self):
        if self.pad < 0:
            raise ConfigError("pad must be non-negative")
        lo, hi = self.erase_area
        if not 0 < lo <= hi <= 1:
            raise ConfigError("erase area range must satisfy 0 < lo <= hi <= 1")


def augment(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator,
            fill=None) -> np.ndarray:
    """Augment one ``H x W x C`` float image; ``fill`` is the per-channel erase value."""
    out = image
    H, W = image.shape[:2]
    if cfg.flip_p > 0 and rng.random() < cfg.flip_p:
        out = out[:, ::-1]
    ch, cw = cfg.crop or (H, W)
    if ch > H + 2 * cfg.pad or cw > W + 2 * cfg.pad:
        raise ConfigError("crop size exceeds padded image")
    if cfg.pad > 0 or (ch, cw) != (H, W):
        padded = np.pad(out, ((cfg.pad, cfg.pad), (cfg.pad, cfg.pad), (0, 0)))
        top = int(rng.integers(0, padded.shape[0] - ch + 1))
        left = int(rng.integers(0, padded.shape[1] - cw + 1))
        out = padded[top:top + ch, left:left + cw]
    if cfg.erase_p > 0 and rng.random() < cfg.erase_p:
        out = random_erase(out, cfg, rng, fill)
    return np.ascontiguousarray(out)


def random_erase(image, cfg: AugmentationConfig, rng, fill=None, max_tries: int = 100):
    H, W, C = image.shape
    fill = np.zeros(C) if fill is None else np.asarray(fill)
    area = H * W
    for _ in range(max_tries):
        target = rng.uniform(*cfg.erase_area) * area
        log_r = rng.uniform(math.log(cfg.erase_ratio[0]), math.log(cfg.erase_ratio[1]))
        aspect = math.exp(log_r)
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if 0 < h < H and 0 < w < W and cfg.erase_area[0] * area <= h * w <= cfg.erase_area[1] * area:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            out = image.copy()
            out[top:top + h, left:left + w] = fill
            return out
    return image
