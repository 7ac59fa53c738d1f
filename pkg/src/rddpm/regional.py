"""Regional restoration: overlap-averaged noise estimates over sliding windows.

An image of any size is reflection-padded on the bottom/right so that m x m
windows placed every n pixels tile it exactly. At each reverse step every
window gets its own noise estimate. The estimates are summed into a global
grid in row-major window order and divided by the per-pixel coverage count.
The step itself, including its noise draw, then runs once on the full image.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .sampler import SamplerConfig, ddpm_step, run_chain, sample
from .schedule import NoiseSchedule


def _padded_length(length: int, m: int, n: int) -> int:
    if length <= m:
        return m
    return m + math.ceil((length - m) / n) * n


@dataclass(frozen=True)
class WindowPlan:
    image_height: int
    image_width: int
    m: int
    n: int
    padded_height: int
    padded_width: int
    origins: tuple[tuple[int, int], ...]
    coverage: np.ndarray  # (padded_height, padded_width) int

    @property
    def padding(self) -> tuple[int, int]:
        """(bottom, right) pad amounts."""
        return self.padded_height - self.image_height, self.padded_width - self.image_width

    @property
    def num_windows(self) -> int:
        return len(self.origins)

    def pad(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img)
        if img.shape[:2] != (self.image_height, self.image_width):
            raise ValueError(
                f"image {img.shape[:2]} does not match plan {(self.image_height, self.image_width)}"
            )
        bottom, right = self.padding
        if bottom == 0 and right == 0:
            return img
        return np.pad(img, ((0, bottom), (0, right), (0, 0)), mode="reflect")

    def crop(self, img: np.ndarray) -> np.ndarray:
        return img[: self.image_height, : self.image_width]


def plan_windows(H: int, W: int, m: int = 64, n: int = 16) -> WindowPlan:
    if H < 1 or W < 1:
        raise ValueError("image dimensions must be positive")
    if not m >= n >= 1:
        raise ValueError(f"need m >= n >= 1, got m={m}, n={n}")
    if m % n:
        raise ValueError(f"window side m={m} must be a multiple of stride n={n}")
    hp, wp = _padded_length(H, m, n), _padded_length(W, m, n)
    rows = range(0, hp - m + 1, n)
    cols = range(0, wp - m + 1, n)
    origins = tuple((r, c) for r in rows for c in cols)
    # separable: coverage is the outer product of 1-D counts
    cov_r = np.zeros(hp, dtype=np.int64)
    cov_c = np.zeros(wp, dtype=np.int64)
    for r in rows:
        cov_r[r:r + m] += 1
    for c in cols:
        cov_c[c:c + m] += 1
    coverage = np.outer(cov_r, cov_c)
    coverage.setflags(write=False)
    return WindowPlan(H, W, m, n, hp, wp, origins, coverage)


def _batches(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def regional_epsilon(x_t, condition, t: int, model, plan: WindowPlan, s: NoiseSchedule,
                     batch_size: int = 8, workers: int = 1, executor: ThreadPoolExecutor | None = None) -> np.ndarray:
    """Global noise estimate obtained by averaging per-window estimates.

    Windows are evaluated ``batch_size`` at a time, optionally on ``workers``
    threads. Accumulation always happens in row-major window order, so the
    result does not depend on ``batch_size`` or ``workers``.
    """
    x_t = np.asarray(x_t)
    condition = np.asarray(condition)
    if x_t.shape != condition.shape:
        raise ValueError("x_t and condition must have the same shape")
    xp = plan.pad(x_t)
    cp = plan.pad(condition)
    m = plan.m
    acc = np.zeros(xp.shape, dtype=np.float64)

    def evaluate(origins):
        xw = np.stack([xp[r:r + m, c:c + m] for r, c in origins])
        cw = np.stack([cp[r:r + m, c:c + m] for r, c in origins])
        return model.predict(xw, cw, t, s)

    batches = list(_batches(plan.origins, batch_size))
    if workers > 1 or executor is not None:
        own = executor is None
        pool = executor or ThreadPoolExecutor(max_workers=workers)
        try:
            # bounded look-ahead keeps live scratch at O(workers * batch * m^2)
            for group in _batches(batches, max(workers, 1)):
                for origins, est in zip(group, pool.map(evaluate, group)):
                    for (r, c), e in zip(origins, est):
                        acc[r:r + m, c:c + m] += e
        finally:
            if own:
                pool.shutdown()
    else:
        for origins in batches:
            est = evaluate(origins)
            for (r, c), e in zip(origins, est):
                acc[r:r + m, c:c + m] += e
    acc /= plan.coverage[:, :, None]
    return plan.crop(acc)


def regional_sample_step(x_t, condition, t: int, model, plan: WindowPlan, s: NoiseSchedule, noise,
                         cfg: SamplerConfig = SamplerConfig(), **eval_kw) -> np.ndarray:
    """One DDPM step driven by the overlap-averaged estimate; ``noise`` covers the whole image."""
    eps = regional_epsilon(x_t, condition, t, model, plan, s, **eval_kw)
    return ddpm_step(x_t, eps, t, s, noise, cfg.variance_choice)


def regional_despeckle(condition, model, s: NoiseSchedule, cfg: SamplerConfig, m: int = 64, n: int = 16,
                       workers: int = 1, batch_size: int = 8,
                       callback: Callable[[int, int], None] | None = None) -> np.ndarray:
    """Full reverse chain on an image of any size; output has the input's shape, clamped to [-1, 1]."""
    condition = np.asarray(condition, dtype=np.float64)
    if condition.ndim != 3:
        raise ValueError("condition must be (H, W, C)")
    plan = plan_windows(condition.shape[0], condition.shape[1], m, n)
    init_rng, noise_rng = cfg.generators()
    x_T = init_rng.standard_normal(condition.shape)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        def eps_fn(x, t):
            return regional_epsilon(x, condition, t, model, plan, s, batch_size=batch_size,
                                    workers=workers, executor=pool)

        x0 = run_chain(x_T, eps_fn, s, cfg, noise_rng, callback)
    finally:
        if pool is not None:
            pool.shutdown()
    return np.clip(x0, -1.0, 1.0)


def independent_windows_despeckle(condition, model, s: NoiseSchedule, cfg: SamplerConfig, m: int = 64,
                                  n: int | None = None) -> np.ndarray:
    """Baseline: every window runs its own reverse chain; results are averaged afterwards.

    With ``n == m`` (the default) this is plain non-overlapping block stitching.
    Each window draws its own initial state and step noise.
    """
    condition = np.asarray(condition, dtype=np.float64)
    n = m if n is None else n
    plan = plan_windows(condition.shape[0], condition.shape[1], m, n)
    cp = plan.pad(condition)
    windows = np.stack([cp[r:r + m, c:c + m] for r, c in plan.origins])
    outs = sample(windows, model, s, cfg)
    acc = np.zeros(cp.shape)
    for (r, c), o in zip(plan.origins, outs):
        acc[r:r + m, c:c + m] += o
    acc /= plan.coverage[:, :, None]
    return plan.crop(acc)
