"""Noise schedule and closed-form forward/posterior quantities.

All public functions take 1-based timesteps ``t in [1, T]``. Internally the
tables are stored 0-based, so ``betas[t - 1]`` is beta_t. The convention
alpha_bar_0 = 1 is used wherever t - 1 reaches zero.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed float64 tables for a linear beta schedule."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variances: np.ndarray

    def __post_init__(self):
        for arr in (self.betas, self.alphas, self.alpha_bars, self.posterior_variances):
            arr.setflags(write=False)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self.check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        """alpha_bar_t, with alpha_bar_0 = 1."""
        t = int(t)
        if t == 0:
            return 1.0
        return float(self.alpha_bars[self.check_t(t) - 1])

    def posterior_variance(self, t: int) -> float:
        return float(self.posterior_variances[self.check_t(t) - 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "beta", "alpha", "alpha_bar", "posterior_variance"])
        for i in range(self.T):
            writer.writerow([
                i + 1,
                repr(float(self.betas[i])),
                repr(float(self.alphas[i])),
                repr(float(self.alpha_bars[i])),
                repr(float(self.posterior_variances[i])),
            ])
        return buf.getvalue()


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    T = int(T)
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError("beta bounds must lie in (0, 1)")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")

    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    # linspace endpoints are exact, pin them anyway against rounding in the interior formula
    betas[0] = beta_start
    betas[-1] = beta_end
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars_prev = np.concatenate(([1.0], alpha_bars[:-1]))
    posterior_variances = (1.0 - alpha_bars_prev) / (1.0 - alpha_bars) * betas
    return NoiseSchedule(T, betas, alphas, alpha_bars, posterior_variances)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def q_sample(x0, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    """Draw x_t from q(x_t | x_0) given the standard-normal draw ``eps``."""
    _check_same_shape(x0, eps, "q_sample")
    ab = s.alpha_bar(s.check_t(t))
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def posterior_mean(x_t, eps_hat, t: int, s: NoiseSchedule) -> np.ndarray:
    """Mean of p(x_{t-1} | x_t) when the predicted noise is ``eps_hat``."""
    _check_same_shape(x_t, eps_hat, "posterior_mean")
    t = s.check_t(t)
    beta, alpha, ab = s.beta(t), s.alpha(t), s.alpha_bar(t)
    return (np.asarray(x_t) - beta / np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(alpha)


def posterior_mean_from_x0(x_t, x0, t: int, s: NoiseSchedule) -> np.ndarray:
    """Mean of q(x_{t-1} | x_t, x_0) written in terms of x_0 directly."""
    _check_same_shape(x_t, x0, "posterior_mean_from_x0")
    t = s.check_t(t)
    beta, alpha = s.beta(t), s.alpha(t)
    ab, ab_prev = s.alpha_bar(t), s.alpha_bar(t - 1)
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * np.asarray(x0) + ct * np.asarray(x_t)


def predict_x0_from_eps(x_t, eps_hat, t: int, s: NoiseSchedule) -> np.ndarray:
    _check_same_shape(x_t, eps_hat, "predict_x0_from_eps")
    ab = s.alpha_bar(s.check_t(t))
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)
