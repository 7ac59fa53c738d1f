"""Synthetic degradations used to build (clean, noisy) training pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class DegradationSpec:
    kind: str = "gaussian_additive"
    sigma: float = 0.2
    looks: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian_additive", "gamma_speckle"):
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.looks < 1:
            raise ValueError("looks must be >= 1")


def degrade(x0, spec: DegradationSpec, rng: np.random.Generator | None = None, clamp: bool = True) -> np.ndarray:
    """Corrupt an image in the [-1, 1] domain.

    Gaussian noise is additive in normalized units. Gamma speckle is applied to
    the intensity (x + 1) / 2 and multiplies it by Gamma(L, 1/L) noise, which has
    mean 1 and coefficient of variation 1/sqrt(L).
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    x0 = np.asarray(x0, dtype=np.float64)
    if spec.kind == "gaussian_additive":
        if spec.sigma == 0:
            return x0.copy()
        out = x0 + spec.sigma * rng.standard_normal(x0.shape)
    else:
        intensity = (x0 + 1.0) / 2.0
        speckle = rng.gamma(spec.looks, 1.0 / spec.looks, size=x0.shape)
        out = intensity * speckle * 2.0 - 1.0
    if clamp:
        np.clip(out, -1.0, 1.0, out=out)
    return out


def make_textures(count: int, size: int = 64, channels: int = 1, seed: int = 0,
                  smoothness: tuple[float, float] = (2.0, 4.0), amplitude: float = 0.8) -> np.ndarray:
    """Smooth random fields in [-amplitude, amplitude], shape (count, size, size, channels).

    Each texture is white noise low-passed by a Gaussian whose width is drawn
    from ``smoothness``, then min-max rescaled.
    """
    rng = np.random.default_rng(seed)
    out = np.empty((count, size, size, channels))
    for i in range(count):
        width = rng.uniform(*smoothness)
        for c in range(channels):
            field = ndimage.gaussian_filter(rng.standard_normal((size, size)), width, mode="wrap")
            lo, hi = field.min(), field.max()
            out[i, :, :, c] = amplitude * (2.0 * (field - lo) / (hi - lo) - 1.0)
    return out
