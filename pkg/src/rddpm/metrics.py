"""Image quality metrics on intensity images (peak 1 by default).

Images from the diffusion domain [-1, 1] are mapped with :func:`to_intensity`
before scoring. Degenerate cases (identical images, constant regions) return
``inf`` or ``nan`` instead of raising; :class:`MetricsReport` turns those into
flags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal


def to_intensity(x):
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; ``inf`` when the images are identical."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_2d(a, b, peak, k1, k2, win):
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    if a.shape[0] < win.shape[0] or a.shape[1] < win.shape[1]:
        # too small for a local window: one global window with uniform weights
        mu_a, mu_b = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        cov = np.mean((a - mu_a) * (b - mu_b))
        return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))

    def filt(x):
        return signal.convolve2d(x, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak: float = 1.0, k1: float = 0.01, k2: float = 0.03, win_size: int = 11,
         sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows, averaged over channels.

    Images smaller than the window fall back to global statistics.
    """
    a, b = _same_shape(a, b)
    if np.array_equal(a, b):
        return 1.0
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = gaussian_window(win_size, sigma)
    vals = [_ssim_2d(a[..., c], b[..., c], peak, k1, k2, win) for c in range(a.shape[-1])]
    return float(np.mean(vals))


def enl(img, roi: tuple[int, int, int, int] | None = None) -> float:
    """Equivalent number of looks mean^2 / var over ``roi = (row, col, height, width)``.

    The variance uses the N - 1 denominator, so the 2x2 region {1, 1, 3, 3}
    scores 3.0. Returns ``inf`` for a constant region.
    """
    img = np.asarray(img, dtype=np.float64)
    if roi is not None:
        r, c, h, w = roi
        if r < 0 or c < 0 or r + h > img.shape[0] or c + w > img.shape[1]:
            raise ValueError(f"roi {roi} outside image of shape {img.shape[:2]}")
        img = img[r:r + h, c:c + w]
    if img.size < 4:
        raise ValueError("roi must contain at least 4 values")
    var = img.var(ddof=1)
    if var == 0:
        return math.inf
    return float(img.mean() ** 2 / var)


def _gradient_mass(x):
    x = x - x.mean()
    return np.abs(np.diff(x, axis=1)).sum() + np.abs(np.diff(x, axis=0)).sum()


def epi(denoised, reference) -> float:
    """Edge preservation index: total absolute forward difference of ``denoised``
    over that of ``reference``. ``nan`` if the reference is flat."""
    d, r = _same_shape(denoised, reference)
    den = _gradient_mass(r)
    if den == 0:
        return math.nan
    return float(_gradient_mass(d) / den)


def seam_ratio(img, m) -> float:
    """Mean |forward difference| across the lines of a non-overlapping m-grid,
    divided by the mean |forward difference| everywhere else.

    ``m`` may be a window side or a :class:`~rddpm.regional.WindowPlan`.
    Returns ``nan`` when the image has no grid lines or no differences.
    """
    m = getattr(m, "m", m)
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    dh = np.abs(np.diff(x, axis=1))  # between column j and j+1
    dv = np.abs(np.diff(x, axis=0))
    hmask = (np.arange(1, x.shape[1]) % m) == 0
    vmask = (np.arange(1, x.shape[0]) % m) == 0
    if not hmask.any() and not vmask.any():
        return math.nan
    boundary = np.concatenate([dh[:, hmask].ravel(), dv[vmask].ravel()])
    interior = np.concatenate([dh[:, ~hmask].ravel(), dv[~vmask].ravel()])
    if interior.size == 0:
        return math.nan
    bmean, imean = boundary.mean(), interior.mean()
    if imean == 0:
        return math.nan if bmean == 0 else math.inf
    return float(bmean / imean)


@dataclass
class MetricsReport:
    psnr_db: float | None = None
    ssim_percent: float | None = None
    enl: float | None = None
    epi: float | None = None
    seam_ratio: float | None = None
    roi: tuple[int, int, int, int] | None = None
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("psnr_db", "ssim_percent", "enl", "epi", "seam_ratio"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                self.flags.append(f"{name}:{'inf' if v == math.inf else 'undefined'}")
                setattr(self, name, None)
        if self.ssim_percent is not None and not 0.0 <= self.ssim_percent <= 100.0:
            # SSIM can dip below zero for anti-correlated images
            self.ssim_percent = min(max(self.ssim_percent, 0.0), 100.0)
            self.flags.append("ssim_percent:clipped")

    FIELDS = ("psnr_db", "ssim_percent", "enl", "epi", "seam_ratio")

    def to_text(self) -> str:
        lines = []
        for name in self.FIELDS:
            v = getattr(self, name)
            lines.append(f"{name}: {'absent' if v is None else f'{v:.6g}'}")
        lines.append(f"roi: {'none' if self.roi is None else ','.join(map(str, self.roi))}")
        lines.append(f"flags: {';'.join(self.flags) if self.flags else 'none'}")
        return "\n".join(lines) + "\n"

    def csv_row(self, name: str = "") -> list:
        return [name] + ["" if getattr(self, f) is None else repr(getattr(self, f)) for f in self.FIELDS] + [
            ";".join(self.flags)]


def evaluate(restored, reference=None, roi=None, m: int | None = None) -> MetricsReport:
    """Score images in the [-1, 1] domain. Full-reference metrics need ``reference``."""
    out = to_intensity(restored)
    kw = {"roi": roi}
    if reference is not None:
        ref = to_intensity(reference)
        kw["psnr_db"] = psnr(out, ref)
        kw["ssim_percent"] = 100.0 * ssim(out, ref)
        kw["epi"] = epi(out, ref)
    kw["enl"] = enl(out[..., 0] if out.ndim == 3 else out, roi)
    if m is not None:
        kw["seam_ratio"] = seam_ratio(out, m)
    return MetricsReport(**kw)
