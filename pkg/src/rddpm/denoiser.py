"""Noise estimators eps_theta(x_t, condition, t) and their training loop.

Every model exposes ``predict(x_t, condition, t, schedule)`` on arrays shaped
``(..., H, W, C)``. The condition enters only through channel concatenation
with ``x_t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tinycnn
from .schedule import NoiseSchedule, q_sample


def _check_inputs(x_t, condition, t, s: NoiseSchedule):
    x_t = np.asarray(x_t)
    condition = np.asarray(condition)
    if x_t.shape != condition.shape:
        raise ValueError(f"x_t {x_t.shape} and condition {condition.shape} differ in shape")
    if x_t.ndim < 3:
        raise ValueError("images must be (..., H, W, C)")
    return x_t, condition, s.check_t(t)


class ConstantZero:
    kind = "constant_zero"
    window = None

    def predict(self, x_t, condition, t, s: NoiseSchedule) -> np.ndarray:
        x_t, _, _ = _check_inputs(x_t, condition, t, s)
        return np.zeros_like(x_t)


@dataclass(frozen=True)
class OracleGaussian:
    """Exact eps predictor when every pixel of x_0 is i.i.d. N(mu0, s0_sq).

    The condition is ignored. Useful as a ground truth for the sampling math.
    """

    mu0: float = 0.3
    s0_sq: float = 0.04
    kind = "oracle_gaussian"
    window = None

    def __post_init__(self):
        if not self.s0_sq > 0:
            raise ValueError("s0_sq must be positive")

    def posterior_x0(self, x_t, t: int, s: NoiseSchedule):
        ab = s.alpha_bar(t)
        return (np.sqrt(ab) * self.s0_sq * x_t + (1.0 - ab) * self.mu0) / (ab * self.s0_sq + 1.0 - ab)

    def predict(self, x_t, condition, t, s: NoiseSchedule) -> np.ndarray:
        x_t, _, t = _check_inputs(x_t, condition, t, s)
        ab = s.alpha_bar(t)
        x0 = self.posterior_x0(x_t, t, s)
        return (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)


class TinyCNN:
    """Trainable conditional noise estimator backed by :mod:`rddpm.tinycnn`."""

    kind = "tiny_cnn"
    window = None

    def __init__(self, arch: tinycnn.Architecture | None = None, params: np.ndarray | None = None,
                 seed: int = 0, dtype=np.float32):
        self.arch = arch or tinycnn.Architecture()
        self.seed = seed
        if params is None:
            params = self.arch.init_params(seed, dtype=dtype)
        params = np.asarray(params)
        self.arch.unpack(params)
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        self.params = params

    @property
    def channels(self) -> int:
        return self.arch.channels

    def predict(self, x_t, condition, t, s: NoiseSchedule) -> np.ndarray:
        x_t, condition, t = _check_inputs(x_t, condition, t, s)
        if x_t.shape[-1] != self.channels:
            raise ValueError(f"model expects {self.channels} channels, got {x_t.shape[-1]}")
        lead = x_t.shape[:-3]
        hwc = x_t.shape[-3:]
        xb = x_t.reshape((-1,) + hwc)
        cb = condition.reshape((-1,) + hwc)
        x = np.concatenate([xb, cb], axis=-1).astype(self.params.dtype, copy=False)
        temb = tinycnn.time_embedding(np.full(xb.shape[0], t), s.T, self.arch.temb_dim)
        out = tinycnn.forward(self.arch, self.params, x, temb)
        return out.reshape(lead + hwc).astype(x_t.dtype, copy=False)


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    batch_size: int = 4
    num_iterations: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Adam":
        return cls(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

    def update(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step_count += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.step_count)
        vhat = self.v / (1 - self.beta2 ** self.step_count)
        params -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(params.dtype)


def loss_and_grad(model: TinyCNN, x0, condition, ts, eps, s: NoiseSchedule):
    """Mean squared eps error and its parameter gradient for one batch."""
    ab = s.alpha_bars[np.asarray(ts) - 1].reshape(-1, 1, 1, 1)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    dtype = model.params.dtype
    x = np.concatenate([x_t, condition], axis=-1).astype(dtype)
    temb = tinycnn.time_embedding(ts, s.T, model.arch.temb_dim)
    pred, cache = tinycnn.forward(model.arch, model.params, x, temb, return_cache=True)
    diff = pred - eps.astype(dtype)
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    upstream = (2.0 / diff.size) * diff
    grad = tinycnn.backward_from_cache(model.arch, model.params, cache, upstream)
    return loss, grad


def train_step(model: TinyCNN, x0, condition, s: NoiseSchedule, rng: np.random.Generator, opt: Adam) -> float:
    """One Adam update on the simplified eps-prediction loss; returns the batch loss.

    ``x0`` and ``condition`` are batches shaped (B, H, W, C). Timesteps are drawn
    uniformly from [1, T] and noise from N(0, 1), one of each per item.
    """
    if getattr(model, "kind", None) != "tiny_cnn":
        raise TypeError(f"model kind {getattr(model, 'kind', None)!r} is not trainable")
    x0 = np.asarray(x0)
    condition = np.asarray(condition)
    if x0.shape != condition.shape or x0.ndim != 4:
        raise ValueError("x0 and condition must both be (B, H, W, C) with equal shapes")
    ts = rng.integers(1, s.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    loss, grad = loss_and_grad(model, x0, condition, ts, eps, s)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    opt.update(model.params, grad)
    return loss


def train(model: TinyCNN, clean: np.ndarray, noisy: np.ndarray, s: NoiseSchedule, cfg: TrainConfig,
          log_every: int = 0, logger=None) -> list[float]:
    """Run ``cfg.num_iterations`` steps on minibatches drawn from paired arrays (N, H, W, C)."""
    rng = np.random.default_rng(cfg.seed)
    opt = Adam.from_config(cfg)
    losses = []
    n = clean.shape[0]
    for it in range(cfg.num_iterations):
        idx = rng.integers(0, n, size=cfg.batch_size)
        losses.append(train_step(model, clean[idx], noisy[idx], s, rng, opt))
        if logger is not None and log_every and (it + 1) % log_every == 0:
            logger.info("iter %d loss %.5f", it + 1, float(np.mean(losses[-log_every:])))
    return losses
