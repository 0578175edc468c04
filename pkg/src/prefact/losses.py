"""Training objectives and uncertainty measures, each returning analytic gradients.

Losses are sums over samples (the training loop rescales by batch size).
"""

from __future__ import annotations

import math

import numpy as np

from .model import MODES, HypothesisSet
from .numerics import DTYPE, ShapeError, log_softmax, logsumexp

LOG2 = math.log(2.0)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum of squared errors ``sum_i ||pred_i - target_i||^2`` and its gradient."""
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: pred{pred.shape} vs target{target.shape}")
    diff = pred - target
    return float(np.sum(diff * diff)), 2.0 * diff


def _check_classes(true_class: np.ndarray, num_classes: int) -> np.ndarray:
    true_class = np.asarray(true_class, dtype=np.int64)
    if np.any((true_class < 0) | (true_class >= num_classes)):
        raise ValueError(f"class index out of range [0, {num_classes})")
    return true_class


def cross_entropy_loss(logits: np.ndarray, true_class) -> tuple[float, np.ndarray]:
    """``-sum log softmax(logits)[true_class]``; logits (N, C) or (C,)."""
    logits = np.asarray(logits, dtype=DTYPE)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    y = _check_classes(np.atleast_1d(true_class), logits.shape[1])
    logp = log_softmax(logits)
    rows = np.arange(len(y))
    loss = -float(np.sum(logp[rows, y]))
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return loss, (grad[0] if single else grad)


def laplace_nll(a: np.ndarray, logb: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """``sum |gt - a| / exp(logb) + logb`` (the constant log 2 is dropped).

    Returns ``(loss, d/da, d/dlogb)``.
    """
    a = np.asarray(a, dtype=DTYPE)
    logb = np.asarray(logb, dtype=DTYPE)
    gt = np.asarray(gt, dtype=DTYPE)
    if not (a.shape == logb.shape == gt.shape):
        raise ShapeError(f"laplace_nll: a{a.shape}, logb{logb.shape}, gt{gt.shape}")
    r = gt - a
    inv_b = np.exp(-logb)
    absr = np.abs(r)
    loss = float(np.sum(absr * inv_b + logb))
    da = -np.sign(r) * inv_b
    dlogb = 1.0 - absr * inv_b
    return loss, da, dlogb


def best_hypothesis_index(hypotheses: np.ndarray, gt: np.ndarray):
    """Index of the hypothesis nearest (L2) to ``gt``; lowest index wins ties.

    ``hypotheses`` is (T, D) with ``gt`` (D,), or batched (N, T, D) with ``gt`` (N, D).
    """
    h = np.asarray(hypotheses, dtype=DTYPE)
    g = np.asarray(gt, dtype=DTYPE)
    dist = np.sqrt(np.sum((h - g[..., None, :]) ** 2, axis=-1))
    idx = np.argmin(dist, axis=-1)
    return int(idx) if h.ndim == 2 else idx


def wta_hypothesis_loss(
    hs: HypothesisSet, gt: np.ndarray, best: np.ndarray | None = None
) -> tuple[float, HypothesisSet, np.ndarray]:
    """Winner-takes-all Laplace NLL: only the hypothesis closest to ``gt`` is penalized per sample.

    Returns ``(loss, grads, best_index)``; gradients of the losing hypotheses are exactly zero.
    """
    gt = np.asarray(gt, dtype=DTYPE).reshape(hs.num_samples, -1)
    if best is None:
        best = best_hypothesis_index(hs.median, gt)
    rows = np.arange(hs.num_samples)
    loss, da, dlogb = laplace_nll(hs.median[rows, best], hs.logscale[rows, best], gt)
    grads = HypothesisSet.zeros_like(hs)
    grads.median[rows, best] = da
    grads.logscale[rows, best] = dlogb
    return loss, grads, best


def _noisy_rows(logits, log_sigma, y, eps):
    """Per-row noisy-logit loss and gradients. logits (M, C), log_sigma (M,), eps (M, S, C)."""
    sigma = np.exp(log_sigma)
    u = logits[:, None, :] + sigma[:, None, None] * eps
    logp = log_softmax(u)  # (M, S, C)
    rows = np.arange(len(y))
    logq = logp[rows, :, y]  # (M, S)
    S = eps.shape[1]
    log_mean = logsumexp(logq, axis=1) - math.log(S)
    loss = -log_mean
    w = np.exp(logq - logsumexp(logq, axis=1, keepdims=True))  # (M, S), sums to 1
    # d(-log mean_t q_t)/du_t = -w_t (onehot - p_t)
    du = np.exp(logp) * w[:, :, None]
    du[rows, :, y] -= w
    dlogits = du.sum(axis=1)
    dlog_sigma = sigma * np.sum(du * eps, axis=(1, 2))
    return loss, dlogits, dlog_sigma


def noisy_logit_class_loss(
    logits: np.ndarray,
    log_sigma,
    true_class,
    num_samples: int,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Negative log of the softmax probability averaged over Gaussian-corrupted logits.

    The logits are perturbed ``num_samples`` times by ``exp(log_sigma) * eps``
    (reparameterized, so gradients reach both ``logits`` and ``log_sigma``).
    Pass ``noise`` of shape (N, num_samples, C) to freeze the draws.
    Returns ``(loss, d/dlogits, d/dlog_sigma)`` with the input shapes.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    logits = np.asarray(logits, dtype=DTYPE)
    single = logits.ndim == 1
    L = logits[None, :] if single else logits
    ls = np.atleast_1d(np.asarray(log_sigma, dtype=DTYPE)).reshape(len(L))
    y = _check_classes(np.atleast_1d(true_class), L.shape[1])
    if noise is None:
        if rng is None:
            raise ValueError("need rng or frozen noise")
        noise = rng.standard_normal((len(L), num_samples, L.shape[1]))
    noise = np.asarray(noise, dtype=DTYPE).reshape(len(L), num_samples, L.shape[1])
    loss, dl, ds = _noisy_rows(L, ls, y, noise)
    if single:
        return float(loss[0]), dl[0], ds.reshape(np.shape(log_sigma))
    return float(np.sum(loss)), dl, ds


def regression_entropy(logb: np.ndarray) -> tuple[np.ndarray, float]:
    """Laplace entropy ``log(2 e b)`` per dimension, and its mean."""
    h = LOG2 + 1.0 + np.asarray(logb, dtype=DTYPE)
    return h, float(np.mean(h))


def classification_entropy(probs: np.ndarray) -> float:
    """Shannon entropy in nats, with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=DTYPE)
    if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError("probabilities must be non-negative and sum to 1")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def logits_entropy(logits: np.ndarray) -> np.ndarray:
    """Entropy of softmax(logits) along the last axis (batched, no validation)."""
    logp = log_softmax(logits)
    return -np.sum(np.exp(logp) * logp, axis=-1)


ASSIGNMENTS = ("average", "winner", "relaxed")


def class_weights(best: np.ndarray, T: int, assignment: str, relax_eps: float = 0.05) -> np.ndarray:
    """Per-sample weights (N, T) of each hypothesis in the classification loss.

    ``average``: 1/T each. ``winner``: 1 for the WTA winner, 0 elsewhere.
    ``relaxed``: ``1 - relax_eps`` for the winner and ``relax_eps / (T - 1)``
    for the others. Rows always sum to 1.
    """
    if assignment not in ASSIGNMENTS:
        raise ValueError(f"class assignment must be one of {ASSIGNMENTS}")
    N = len(best)
    if assignment == "average":
        return np.full((N, T), 1.0 / T)
    onehot = np.zeros((N, T))
    onehot[np.arange(N), best] = 1.0
    if assignment == "winner" or T == 1:
        return onehot
    return onehot * (1.0 - relax_eps) + (1.0 - onehot) * (relax_eps / (T - 1))


def combined_loss(
    mode: str,
    hs: HypothesisSet,
    future_features: np.ndarray,
    action_labels: np.ndarray,
    object_labels: np.ndarray,
    lambda_reg: float = 1.0,
    rng: np.random.Generator | None = None,
    noise: tuple[np.ndarray, np.ndarray] | None = None,
    class_assignment: str = "relaxed",
    relax_eps: float = 0.05,
) -> tuple[float, HypothesisSet, dict]:
    """Mode-dependent objective.

    * ``c``: action + object cross-entropy
    * ``r``: squared feature error
    * ``rc``: cross-entropy + ``lambda_reg`` * squared feature error
    * ``mh``: WTA Laplace NLL + noisy-logit losses for action and object

    Labels of -1 mark unlabeled samples, which only enter feature terms.
    In ``mh`` mode ``class_assignment`` sets how each sample's classification
    loss is spread over hypotheses (see :func:`class_weights`). ``noise`` optionally freezes the
    logit-noise draws as ``(action_eps, object_eps)`` shaped (N, T, T, C).
    """
    mode = mode.lower()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    y_a = np.asarray(action_labels, dtype=np.int64)
    y_o = np.asarray(object_labels, dtype=np.int64)
    lab = y_a >= 0
    grads = HypothesisSet.zeros_like(hs)
    parts: dict[str, float] = {}
    N, T = hs.num_samples, hs.num_hypotheses

    if mode in ("c", "rc"):
        for name, logits, y, g in (
            ("action", hs.action_logits, y_a, grads.action_logits),
            ("object", hs.object_logits, y_o, grads.object_logits),
        ):
            if lab.any():
                val, dl = cross_entropy_loss(logits[lab, 0], y[lab])
                g[lab, 0] = dl
            else:
                val = 0.0
            parts[name] = val
    if mode in ("r", "rc"):
        val, dp = mse_loss(hs.median[:, 0], future_features)
        scale = 1.0 if mode == "r" else lambda_reg
        parts["feature"] = scale * val
        grads.median[:, 0] = scale * dp
    if mode == "mh":
        val, g, best = wta_hypothesis_loss(hs, future_features)
        parts["feature"] = val
        grads.median[:] = g.median
        grads.logscale[:] = g.logscale
        weights = class_weights(best, T, class_assignment, relax_eps)
        idx = np.flatnonzero(lab)
        for task, logits, log_sigma, y, g_l, g_s, k in (
            ("action", hs.action_logits, hs.action_log_sigma, y_a, grads.action_logits, grads.action_log_sigma, 0),
            ("object", hs.object_logits, hs.object_log_sigma, y_o, grads.object_logits, grads.object_log_sigma, 1),
        ):
            if len(idx) == 0:
                parts[task] = 0.0
                continue
            C = logits.shape[-1]
            eps = noise[k][idx] if noise is not None else rng.standard_normal((len(idx), T, T, C))
            M = len(idx) * T
            loss_rows, dl, ds = _noisy_rows(
                logits[idx].reshape(M, C), log_sigma[idx].reshape(M), np.repeat(y[idx], T), eps.reshape(M, T, C)
            )
            w = weights[idx]
            parts[task] = float(np.sum(w * loss_rows.reshape(len(idx), T)))
            g_l[idx] = dl.reshape(len(idx), T, C) * w[..., None]
            g_s[idx] = ds.reshape(len(idx), T) * w
    total = float(sum(parts.values()))
    return total, grads, parts


def class_uncertainty(hs: HypothesisSet) -> np.ndarray:
    """Per-hypothesis ranking key: mean of action and object softmax entropies, shape (N, T)."""
    return 0.5 * (logits_entropy(hs.action_logits) + logits_entropy(hs.object_logits))
