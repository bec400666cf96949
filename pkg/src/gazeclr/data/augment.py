"""Appearance-only augmentation pipeline.

Order is fixed: crop+resize, gaussian blur, color jitter, grayscale,
autocontrast. All operate on float arrays in [0,1] and return the same
shape. With every probability at 0 and crop scale pinned to [1,1] the
pipeline is a bitwise identity, which tests rely on.

The crop is the one geometric member of the set; the photometric subset
(blur, jitter, grayscale, autocontrast) provably leaves the gaze target's
image position unchanged, and the label-invariance property is asserted
for that subset only.
"""

from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np

from ..exceptions import ConfigError

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class AugmentationConfig:
    crop_scale_range: tuple = (0.8, 1.0)
    blur_kernel_fraction: float = 0.1
    blur_sigma_range: tuple = (0.1, 2.0)
    blur_prob: float = 1.0
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    color_jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    autocontrast_prob: float = 0.5
    seed: Optional[int] = None

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"crop_scale_range must be within (0, 1], got {self.crop_scale_range}")
        for name in ("blur_prob", "color_jitter_prob", "grayscale_prob", "autocontrast_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {p}")
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} strength must be nonnegative")

    @classmethod
    def identity(cls):
        """No-op pipeline; augment() returns a bitwise-equal copy."""
        return cls(
            crop_scale_range=(1.0, 1.0),
            blur_prob=0.0,
            color_jitter_prob=0.0,
            grayscale_prob=0.0,
            autocontrast_prob=0.0,
        )

    @classmethod
    def photometric_only(cls, **overrides):
        """Full pipeline minus the spatial crop."""
        return cls(crop_scale_range=(1.0, 1.0), **overrides)


def _crop_resize(image, lo, hi, draw):
    h, w = image.shape[:2]
    scale = float(draw.uniform(lo, hi))
    ch = max(1, int(round(scale * h)))
    cw = max(1, int(round(scale * w)))
    y0 = int(draw.integers(0, h - ch + 1))
    x0 = int(draw.integers(0, w - cw + 1))
    crop = image[y0 : y0 + ch, x0 : x0 + cw]
    return cv2.resize(crop, (w, h), interpolation=cv2.INTER_LINEAR)


def _blur(image, cfg, draw):
    k = int(round(cfg.blur_kernel_fraction * min(image.shape[:2])))
    k = max(3, k | 1)
    sigma = float(draw.uniform(*cfg.blur_sigma_range))
    return cv2.GaussianBlur(image, (k, k), sigmaX=sigma)


def _grayscale(image):
    luma = image @ _LUMA
    return np.repeat(luma[:, :, None], 3, axis=2)


def _color_jitter(image, cfg, draw):
    out = image
    b = float(draw.uniform(max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness))
    out = np.clip(out * b, 0.0, 1.0)
    c = float(draw.uniform(max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast))
    mean = float((out @ _LUMA).mean())
    out = np.clip(mean + c * (out - mean), 0.0, 1.0)
    s = float(draw.uniform(max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation))
    gray = _grayscale(out)
    out = np.clip(gray + s * (out - gray), 0.0, 1.0)
    if cfg.hue > 0.0:
        delta = float(draw.uniform(-cfg.hue, cfg.hue))
        hsv = cv2.cvtColor(out.astype(np.float32), cv2.COLOR_RGB2HSV)
        hsv[:, :, 0] = np.mod(hsv[:, :, 0] + delta * 360.0, 360.0)
        out = np.clip(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB), 0.0, 1.0)
    return out


def _autocontrast(image):
    out = image.copy()
    for ch in range(3):
        lo = out[:, :, ch].min()
        hi = out[:, :, ch].max()
        if hi > lo:
            out[:, :, ch] = (out[:, :, ch] - lo) / (hi - lo)
    return out


def augment(image, cfg, draw=None):
    """Apply one random draw of the pipeline to a [0,1] float image."""
    if draw is None:
        draw = np.random.default_rng(cfg.seed)
    out = np.asarray(image, dtype=np.float32).copy()

    lo, hi = cfg.crop_scale_range
    if not (lo == 1.0 and hi == 1.0):
        out = _crop_resize(out, lo, hi, draw)
    if cfg.blur_prob > 0.0 and draw.uniform() < cfg.blur_prob:
        out = _blur(out, cfg, draw)
    if cfg.color_jitter_prob > 0.0 and draw.uniform() < cfg.color_jitter_prob:
        out = _color_jitter(out, cfg, draw)
    if cfg.grayscale_prob > 0.0 and draw.uniform() < cfg.grayscale_prob:
        out = _grayscale(out)
    if cfg.autocontrast_prob > 0.0 and draw.uniform() < cfg.autocontrast_prob:
        out = _autocontrast(out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
