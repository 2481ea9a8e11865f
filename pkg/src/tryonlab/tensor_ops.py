"""Dense-tensor numerics every other module builds on.

Arrays are contiguous row-major floats. Model state lives in float32;
reductions (means, variances, losses) accumulate in float64 so that
finite-difference gradient checks stay meaningful. All functions are
pure and dtype-preserving: feed float64 in and the whole computation
runs in float64, which is how the gradient-check tests operate.

Forward operations that participate in training have a matching
``*_backward`` companion; there is no autodiff, the reverse-mode passes
are written out by hand and tested against :func:`finite_diff_gradient`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .errors import NumericFailure

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d input")
    return axis % ndim


def softmax(logits: Array, axis: int = -1) -> Array:
    """Numerically stabilized softmax along ``axis``.

    The maximum is subtracted before exponentiation, so arbitrarily
    large logits saturate instead of overflowing. Slices along ``axis``
    sum to 1.
    """
    logits = np.asarray(logits)
    axis = _check_axis(axis, logits.ndim)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def softmax_backward(grad_out: Array, probs: Array, axis: int = -1) -> Array:
    """Gradient of softmax given its output ``probs``."""
    inner = np.sum(grad_out * probs, axis=axis, keepdims=True)
    return probs * (grad_out - inner)


def layer_norm(x: Array, gain: Array, bias: Array, eps: float = 1e-5) -> Array:
    """Normalize the last axis to zero mean / unit variance, then scale.

    Statistics are accumulated in float64. ``eps`` guards the zero
    variance case (a constant vector maps to ``bias``); ``eps == 0`` is
    accepted for inputs whose variance is known to be positive.
    """
    x = np.asarray(x)
    gain = np.asarray(gain)
    bias = np.asarray(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ValueError(
            f"gain/bias shapes {gain.shape}/{bias.shape} do not match last axis {x.shape[-1]}"
        )
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    normed = (x64 - mean) / np.sqrt(var + eps)
    out = normed * gain + bias
    return out.astype(x.dtype)


def layer_norm_forward(x: Array, gain: Array, bias: Array, eps: float = 1e-5):
    """Like :func:`layer_norm` but also returns the cache for backward."""
    x = np.asarray(x)
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = (x64 - mean) * inv_std
    out = (normed * gain + bias).astype(x.dtype)
    cache = (normed, inv_std, gain, x.dtype)
    return out, cache


def layer_norm_backward(grad_out: Array, cache):
    """Backward pass of layer_norm; returns (d_x, d_gain, d_bias)."""
    normed, inv_std, gain, dtype = cache
    g = grad_out.astype(np.float64)
    d_gain = np.sum(g * normed, axis=tuple(range(g.ndim - 1)))
    d_bias = np.sum(g, axis=tuple(range(g.ndim - 1)))
    gn = g * gain
    n = normed.shape[-1]
    d_x = inv_std * (
        gn
        - gn.mean(axis=-1, keepdims=True)
        - normed * np.sum(gn * normed, axis=-1, keepdims=True) / n
    )
    return d_x.astype(dtype), d_gain.astype(dtype), d_bias.astype(dtype)


def gelu(x: Array) -> Array:
    """Exact (erf-based) GELU."""
    x = np.asarray(x)
    return (0.5 * x * (1.0 + special.erf(x * _INV_SQRT2))).astype(x.dtype)


def gelu_backward(grad_out: Array, x: Array) -> Array:
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (grad_out * (cdf + x * pdf)).astype(x.dtype)


def linear_forward(x: Array, w: Array, b: Array | None = None):
    """``x @ w (+ b)`` with the cache needed for backward.

    ``x`` is ``[..., in]``, ``w`` is ``[in, out]``.
    """
    out = x @ w
    if b is not None:
        out = out + b
    return out, (x, w)


def linear_backward(grad_out: Array, cache, with_bias: bool = True):
    """Returns (d_x, d_w, d_b); ``d_b`` is None when ``with_bias`` is False."""
    x, w = cache
    d_x = grad_out @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    d_w = x2.T @ g2
    d_b = g2.sum(axis=0) if with_bias else None
    return d_x, d_w, d_b


def finite_diff_gradient(f: Callable[[Array], float], x: Array, h: float = 1e-3) -> Array:
    """Central-difference gradient estimate of a scalar function.

    Element ``i`` of the result is ``(f(x + h e_i) - f(x - h e_i)) / 2h``.
    Probing runs in float64 regardless of the dtype of ``x``; ``f`` must
    be deterministic.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValueError(f"step size h={h} outside [1e-5, 1e-2]")
    x0 = np.asarray(x, dtype=np.float64)
    f0 = float(f(x0))
    if not np.isfinite(f0):
        raise NumericFailure(f"f(x) is not finite: {f0}")
    grad = np.zeros_like(x0)
    flat = x0.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x0))
        flat[i] = orig - h
        fm = float(f(x0))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class GradCheckReport:
    """Worst-case disagreement between an analytic and a numeric gradient."""

    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= 1e-3


def check_gradient(
    f: Callable[[Array], float],
    x: Array,
    analytic: Array,
    h: float = 1e-3,
    max_probes: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare ``analytic`` against central finite differences of ``f``.

    When ``max_probes`` is given and smaller than ``x.size``, a random
    subset of coordinates is probed (one central difference each)
    instead of the full gradient. The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)`` with a floor tied to the gradient
    magnitude so that near-zero components do not dominate.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValueError(f"step size h={h} outside [1e-5, 1e-2]")
    x0 = np.asarray(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x0.shape:
        raise ValueError("analytic gradient shape does not match x")
    n_total = x0.size
    if max_probes is not None and max_probes < n_total:
        if rng is None:
            rng = np.random.default_rng(0)
        probe = np.sort(rng.choice(n_total, size=max_probes, replace=False))
    else:
        probe = np.arange(n_total)

    floor = max(1e-6 * float(np.max(np.abs(analytic), initial=0.0)), 1e-8)
    flat = x0.ravel()
    a_flat = analytic.ravel()
    worst = GradCheckReport(0.0, int(probe[0]) if probe.size else 0, 0.0, 0.0)
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x0))
        flat[i] = orig - h
        fm = float(f(x0))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericFailure(f"non-finite loss while probing index {i}")
        num = (fp - fm) / (2.0 * h)
        ana = a_flat[i]
        rel = abs(ana - num) / max(abs(ana), abs(num), floor)
        if rel >= worst.max_rel_error:
            worst = GradCheckReport(float(rel), int(i), float(ana), float(num))
    return worst
