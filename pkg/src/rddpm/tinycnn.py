"""Three-layer convolutional noise estimator with hand-written gradients.

Layout is channels-last: inputs are ``(B, H, W, C_in)``. Architecture::

    x ─ conv3x3(F) ─ silu ─ conv3x3(F) + proj(temb) ─ silu ─ conv3x3(C) ─ eps

All convolutions use zero "same" padding. Every matmul is issued per batch
item with a fixed shape, so a window gives the same bits whether it is
evaluated alone or inside a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ARCH_ID = "tinycnn-v1"


@dataclass(frozen=True)
class Architecture:
    channels: int = 1
    features: int = 32
    temb_dim: int = 32

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        c, f, d = self.channels, self.features, self.temb_dim
        return {
            "w1": (3, 3, 2 * c, f),
            "b1": (f,),
            "w2": (3, 3, f, f),
            "b2": (f,),
            "wt": (d, f),
            "w3": (3, 3, f, c),
            "b3": (c,),
        }

    @property
    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.shapes.values())

    def unpack(self, params: np.ndarray) -> dict[str, np.ndarray]:
        if params.ndim != 1 or params.size != self.num_params:
            raise ValueError(
                f"parameter array has {params.size} entries, architecture needs {self.num_params}"
            )
        out, i = {}, 0
        for name, shape in self.shapes.items():
            n = math.prod(shape)
            out[name] = params[i:i + n].reshape(shape)
            i += n
        return out

    def init_params(self, seed: int, dtype=np.float32) -> np.ndarray:
        rng = np.random.default_rng(seed)
        params = np.zeros(self.num_params, dtype=dtype)
        p = self.unpack(params)
        c, f, d = self.channels, self.features, self.temb_dim
        p["w1"][...] = rng.standard_normal(p["w1"].shape) * math.sqrt(2.0 / (9 * 2 * c))
        p["w2"][...] = rng.standard_normal(p["w2"].shape) * math.sqrt(2.0 / (9 * f))
        p["wt"][...] = rng.standard_normal(p["wt"].shape) / math.sqrt(d)
        # w3, b3 stay zero: the untrained net predicts eps = 0
        return params


def time_embedding(t, T: int, dim: int = 32) -> np.ndarray:
    """Sinusoidal features of t/T, shape ``(len(t), dim)``."""
    tau = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    ang = tau[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _sigmoid(z):
    # tanh form: no overflow for large |z|
    return 0.5 + 0.5 * np.tanh(0.5 * z)


def silu(z):
    return z * _sigmoid(z)


def silu_grad(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _pad_flat(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> zero-padded, row-flattened (B, (H+3)*(W+2), C).

    A 3x3 tap (dy, dx) then reads the contiguous slice starting at
    ``dy*(W+2) + dx``; one spare bottom row keeps the last slice in bounds.
    """
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 3, w + 2, c), dtype=x.dtype)
    xp[:, 1:h + 1, 1:w + 1, :] = x
    return xp.reshape(b, (h + 3) * (w + 2), c)


# inputs with at most this many channels use a single patch matmul
_NARROW = 4


def _offsets(w: int):
    return [dy * (w + 2) + dx for dy in range(3) for dx in range(3)]


def _flat_cols(xpf: np.ndarray, w: int, n: int) -> np.ndarray:
    """Patch matrix (B, n, 9*C) over the padded-flat layout, tap order (dy, dx, c)."""
    c = xpf.shape[-1]
    cols = np.empty((xpf.shape[0], n, 9 * c), dtype=xpf.dtype)
    for k, off in enumerate(_offsets(w)):
        cols[:, :, k * c:(k + 1) * c] = xpf[:, off:off + n]
    return cols


def _conv(xpf: np.ndarray, kern: np.ndarray, bias: np.ndarray, h: int, w: int) -> np.ndarray:
    """3x3 'same' convolution of a padded-flat input; returns (B, H, W, C_out).

    Narrow inputs go through one patch matmul, wide ones through nine
    shifted matmuls. Both are stacked matmuls, which numpy issues per item.
    """
    n = h * (w + 2)
    cin, cout = kern.shape[2], kern.shape[3]
    if cin <= _NARROW:
        acc = np.matmul(_flat_cols(xpf, w, n), kern.reshape(9 * cin, cout))
    else:
        kern = kern.reshape(9, cin, cout)
        acc = None
        for k, off in enumerate(_offsets(w)):
            term = np.matmul(xpf[:, off:off + n], kern[k])
            acc = term if acc is None else np.add(acc, term, out=acc)
    out = acc.reshape(xpf.shape[0], h, w + 2, cout)[:, :, :w, :]
    return out + bias


def _conv_backward(xpf: np.ndarray, kern: np.ndarray, dz: np.ndarray, need_input: bool = True):
    """Weight gradient and (optionally) input gradient of :func:`_conv`."""
    b, h, w, cout = dz.shape
    n = h * (w + 2)
    dzf = np.zeros((b, h, w + 2, cout), dtype=dz.dtype)
    dzf[:, :, :w, :] = dz
    dzf = dzf.reshape(b, n, cout)
    cin = kern.shape[2]
    if cin <= _NARROW and not need_input:
        cols = _flat_cols(xpf, w, n)
        dkern = np.matmul(cols.transpose(0, 2, 1), dzf).sum(axis=0)
        return dkern.reshape(3, 3, cin, cout), None
    kern = kern.reshape(9, cin, cout)
    dkern = np.empty_like(kern)
    dxpf = np.zeros(xpf.shape, dtype=dz.dtype) if need_input else None
    for k, off in enumerate(_offsets(w)):
        xs = xpf[:, off:off + n]
        dkern[k] = np.matmul(xs.transpose(0, 2, 1), dzf).sum(axis=0)
        if need_input:
            dxpf[:, off:off + n] += np.matmul(dzf, kern[k].T)
    dx = None
    if need_input:
        dx = dxpf.reshape(b, h + 3, w + 2, -1)[:, 1:h + 1, 1:w + 1, :]
    return dkern, dx


def forward(arch: Architecture, params: np.ndarray, x: np.ndarray, temb: np.ndarray, return_cache: bool = False):
    """Run the network on ``x`` of shape (B, H, W, 2C) with ``temb`` of shape (B, D)."""
    p = arch.unpack(params)
    if x.ndim != 4 or x.shape[-1] != 2 * arch.channels:
        raise ValueError(f"expected (B, H, W, {2 * arch.channels}) input, got {x.shape}")
    bsz, h, w, _ = x.shape
    temb = np.asarray(temb, dtype=params.dtype)
    if temb.shape != (bsz, arch.temb_dim):
        raise ValueError(f"time embedding shape {temb.shape} != {(bsz, arch.temb_dim)}")

    xpf1 = _pad_flat(np.asarray(x, dtype=params.dtype))
    z1 = _conv(xpf1, p["w1"], p["b1"], h, w)
    xpf2 = _pad_flat(silu(z1))
    proj = temb @ p["wt"]
    z2 = _conv(xpf2, p["w2"], p["b2"], h, w) + proj[:, None, None, :]
    xpf3 = _pad_flat(silu(z2))
    out = _conv(xpf3, p["w3"], p["b3"], h, w)
    if return_cache:
        return out, (xpf1, z1, xpf2, z2, xpf3, temb)
    return out


def backward_from_cache(arch: Architecture, params: np.ndarray, cache, upstream: np.ndarray) -> np.ndarray:
    p = arch.unpack(params)
    xpf1, z1, xpf2, z2, xpf3, temb = cache
    if upstream.shape != z1.shape[:3] + (arch.channels,):
        raise ValueError(f"upstream gradient shape {upstream.shape} does not match output")
    grad = np.zeros_like(params)
    g = arch.unpack(grad)

    d3 = upstream.astype(params.dtype, copy=False)
    dw3, da2 = _conv_backward(xpf3, p["w3"], d3)
    g["w3"][...] = dw3.reshape(g["w3"].shape)
    g["b3"][...] = d3.sum(axis=(0, 1, 2))

    dz2 = da2 * silu_grad(z2)
    g["b2"][...] = dz2.sum(axis=(0, 1, 2))
    g["wt"][...] = temb.T @ dz2.sum(axis=(1, 2))
    dw2, da1 = _conv_backward(xpf2, p["w2"], dz2)
    g["w2"][...] = dw2.reshape(g["w2"].shape)

    dz1 = da1 * silu_grad(z1)
    g["b1"][...] = dz1.sum(axis=(0, 1, 2))
    dw1, _ = _conv_backward(xpf1, p["w1"], dz1, need_input=False)
    g["w1"][...] = dw1.reshape(g["w1"].shape)
    return grad


def backward(arch: Architecture, params: np.ndarray, x: np.ndarray, temb: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(forward(...) * upstream)`` with respect to ``params``."""
    _, cache = forward(arch, params, x, temb, return_cache=True)
    return backward_from_cache(arch, params, cache, upstream)
