"""Small dense differentiable core: affine/ReLU layers, stable softmax, RNG and gradient checks.

Everything runs in float64. Matrices are plain ``numpy.ndarray`` objects; the
only wrapper is :class:`Parameter`, which pairs a value with its gradient
accumulator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array shapes do not conform."""


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and optional sub-keys.

    ``make_rng(seed, epoch)`` and ``make_rng(seed, epoch, 1)`` give independent
    streams, which is how the training loop splits randomness.
    """
    # sub-keys go into spawn_key, which (unlike extra entropy words) keeps
    # trailing zeros significant: (seed, 1) and (seed, 1, 0) differ
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Spawn ``n`` independent child generators."""
    return list(rng.spawn(n))


def gaussian_sample(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape, dtype=DTYPE)


# ---------------------------------------------------------------------------
# Parameters and layers
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def affine_forward(x: np.ndarray, W: Parameter, b: Parameter) -> np.ndarray:
    """``x @ W + b`` with ``x`` of shape (N, in) and ``W`` of shape (in, out)."""
    if x.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"affine: x{tuple(x.shape)} incompatible with W{W.shape} / b{b.shape}")
    return x @ W.value + b.value


def affine_backward(upstream: np.ndarray, x: np.ndarray, W: Parameter, b: Parameter) -> np.ndarray:
    """Accumulate into ``W.grad`` / ``b.grad`` and return the gradient w.r.t. ``x``."""
    if upstream.shape != (x.shape[0], W.shape[1]):
        raise ShapeError(f"affine backward: upstream{tuple(upstream.shape)} vs output ({x.shape[0]}, {W.shape[1]})")
    W.grad += x.T @ upstream
    b.grad += upstream.sum(axis=0)
    return upstream @ W.value.T


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(upstream: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return upstream * (x > 0.0)


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by 1/(1-rate)."""
    if rate <= 0.0:
        return np.ones(shape, dtype=DTYPE)
    keep = rng.random(shape) >= rate
    return keep.astype(DTYPE) / (1.0 - rate)


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------


def logsumexp(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=DTYPE)
    return logits - logsumexp(logits, axis=axis, keepdims=True)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis=axis))


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def numeric_gradient(f: Callable[[], float], value: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``value`` (perturbed in place, then restored)."""
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(
    f: Callable[[], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Compare analytic and central-difference gradients.

    ``f`` evaluates the scalar at the current values of ``params`` and returns
    ``(value, grads)`` with one analytic gradient per entry of ``params``.
    ``params`` are perturbed in place. Returns the maximum over all entries of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    _, analytic = f()
    analytic = [np.array(g, dtype=DTYPE, copy=True) for g in analytic]
    worst = 0.0
    for p, g in zip(params, analytic):
        num = numeric_gradient(lambda: f()[0], p, h=h)
        worst = max(worst, relative_error(g, num))
    return worst


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))
