"""Conditional reverse diffusion: DDPM ancestral steps and DDIM steps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .schedule import NoiseSchedule, posterior_mean, predict_x0_from_eps

EpsFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddpm"
    num_inference_steps: int | None = None  # None means every step, T
    eta: float = 0.0
    variance_choice: str = "beta"
    seed: int = 0
    noise_seed: int | None = None  # per-step noise stream; derived from seed when None

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.variance_choice not in ("beta", "posterior"):
            raise ValueError(f"unknown variance choice {self.variance_choice!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.num_inference_steps is not None and self.num_inference_steps < 1:
            raise ValueError("num_inference_steps must be >= 1")

    def steps(self, s: NoiseSchedule) -> int:
        k = s.T if self.num_inference_steps is None else int(self.num_inference_steps)
        if k > s.T:
            raise ValueError(f"num_inference_steps {k} exceeds T={s.T}")
        if self.kind == "ddpm" and k != s.T:
            raise ValueError("ddpm sampling runs all T steps; use kind='ddim' for fewer")
        return k

    def generators(self) -> tuple[np.random.Generator, np.random.Generator]:
        """(init generator for x_T, generator for per-step noise)."""
        init_ss, noise_ss = np.random.SeedSequence(self.seed).spawn(2)
        if self.noise_seed is not None:
            noise_ss = np.random.SeedSequence([self.noise_seed, 1])
        return np.random.default_rng(init_ss), np.random.default_rng(noise_ss)


def ddim_timesteps(T: int, k: int) -> list[int]:
    """k strictly decreasing timesteps from T down to 1, uniformly spaced."""
    if not 1 <= k <= T:
        raise ValueError(f"need 1 <= k <= T, got k={k}, T={T}")
    if k == 1:
        return [T]
    # floor(x + 0.5) keeps values distinct whenever the spacing is >= 1
    ts = np.floor(np.linspace(T, 1, k) + 0.5).astype(int)
    return [int(t) for t in ts]


def step_variance(t: int, s: NoiseSchedule, variance_choice: str = "beta") -> float:
    if variance_choice == "beta":
        return s.beta(t)
    if variance_choice == "posterior":
        return s.posterior_variance(t)
    raise ValueError(f"unknown variance choice {variance_choice!r}")


def ddpm_step(x_t, eps_hat, t: int, s: NoiseSchedule, noise, variance_choice: str = "beta") -> np.ndarray:
    """x_{t-1} = mu(x_t, eps_hat) + sigma_t * noise."""
    t = s.check_t(t)
    if np.shape(noise) != np.shape(x_t):
        raise ValueError("noise shape must match x_t")
    if t == 1 and np.any(np.asarray(noise) != 0):
        raise ValueError("the final step (t=1) must be deterministic; pass zero noise")
    mean = posterior_mean(x_t, eps_hat, t, s)
    if t == 1:
        return mean
    return mean + np.sqrt(step_variance(t, s, variance_choice)) * np.asarray(noise)


def ddim_sigma(t: int, t_prev: int, s: NoiseSchedule, eta: float) -> float:
    ab, ab_prev = s.alpha_bar(t), s.alpha_bar(t_prev)
    return eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)


def ddim_step(x_t, eps_hat, t: int, t_prev: int, s: NoiseSchedule, noise, eta: float) -> np.ndarray:
    t = s.check_t(t)
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev={t_prev} must satisfy 0 <= t_prev < t={t}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    x0_hat = predict_x0_from_eps(x_t, eps_hat, t, s)
    ab_prev = s.alpha_bar(t_prev)
    sigma = ddim_sigma(t, t_prev, s, eta)
    direction = np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0))
    out = np.sqrt(ab_prev) * x0_hat + direction * np.asarray(eps_hat)
    if sigma > 0:
        out = out + sigma * np.asarray(noise)
    return out


def run_chain(x_T: np.ndarray, eps_fn: EpsFn, s: NoiseSchedule, cfg: SamplerConfig,
              noise_rng: np.random.Generator, callback: Callable[[int, int], None] | None = None) -> np.ndarray:
    """Iterate the reverse process from ``x_T``; no clamping is applied."""
    k = cfg.steps(s)
    x = np.array(x_T, dtype=np.float64)
    if cfg.kind == "ddpm":
        for i, t in enumerate(range(s.T, 0, -1)):
            eps_hat = eps_fn(x, t)
            noise = noise_rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
            x = ddpm_step(x, eps_hat, t, s, noise, cfg.variance_choice)
            if callback is not None:
                callback(i, t)
    else:
        ts = ddim_timesteps(s.T, k)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            eps_hat = eps_fn(x, t)
            if cfg.eta > 0 and t_prev > 0:
                noise = noise_rng.standard_normal(x.shape)
            else:
                noise = np.zeros_like(x)
            x = ddim_step(x, eps_hat, t, t_prev, s, noise, cfg.eta)
            if callback is not None:
                callback(i, t)
    return x


def sample(condition, denoiser, s: NoiseSchedule, cfg: SamplerConfig, x_T=None,
           callback: Callable[[int, int], None] | None = None) -> np.ndarray:
    """Draw x_0 given ``condition`` over the whole image in one piece.

    Output is clamped to [-1, 1]; intermediate states are not.
    """
    condition = np.asarray(condition, dtype=np.float64)
    if condition.ndim < 3:
        raise ValueError("condition must be (..., H, W, C)")
    window = getattr(denoiser, "window", None)
    if window is not None and condition.shape[-3:-1] != (window, window):
        raise ValueError(f"denoiser accepts {window}x{window} inputs, got {condition.shape[-3:-1]}")
    init_rng, noise_rng = cfg.generators()
    if x_T is None:
        x_T = init_rng.standard_normal(condition.shape)
    elif np.shape(x_T) != condition.shape:
        raise ValueError("x_T shape must match condition")

    def eps_fn(x, t):
        return denoiser.predict(x, condition, t, s)

    x0 = run_chain(x_T, eps_fn, s, cfg, noise_rng, callback)
    return np.clip(x0, -1.0, 1.0)
