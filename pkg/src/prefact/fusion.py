"""Hypothesis selection by class certainty, certainty-weighted fusion, and a linear probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .losses import class_uncertainty, cross_entropy_loss, regression_entropy
from .model import HypothesisSet
from .numerics import DTYPE, make_rng
from .training import sgd_nesterov_step

SELECTIONS = ("best", "top3", "all")
COMBINES = ("concat", "mult")
EPS = 1e-6


@dataclass(frozen=True)
class FusionSpec:
    selection: str = "all"
    combine: str = "mult"

    def __post_init__(self):
        object.__setattr__(self, "selection", self.selection.lower())
        object.__setattr__(self, "combine", self.combine.lower())
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}")
        if self.combine not in COMBINES:
            raise ValueError(f"combine must be one of {COMBINES}")

    @property
    def name(self) -> str:
        return f"{self.selection.upper()}_{self.combine}"

    def count(self, T: int) -> int:
        return {"best": 1, "top3": 3, "all": T}[self.selection]

    def output_length(self, T: int, D: int) -> int:
        return self.count(T) * (2 * D if self.combine == "concat" else D)


@dataclass(frozen=True, eq=False)
class FusedVector:
    values: np.ndarray
    provenance: tuple[int, ...]


def certainty_from_uncertainty(uncertainties, eps: float = EPS) -> np.ndarray:
    """Min-max normalize into [eps, 1 - eps] and flip, so larger uncertainty -> smaller certainty.

    A constant input maps to 0.5 everywhere.
    """
    u = np.asarray(uncertainties, dtype=DTYPE)
    if u.size == 0:
        raise ValueError("need at least one uncertainty value")
    lo, hi = float(u.min()), float(u.max())
    if hi - lo <= 0.0:
        return np.full_like(u, 0.5)
    n = eps + (1.0 - 2.0 * eps) * (u - lo) / (hi - lo)
    return np.clip(1.0 - n, eps, 1.0 - eps)


def select_hypotheses(hs: HypothesisSet, spec: FusionSpec | str) -> list[int]:
    """Hypothesis indices for one sample, most class-certain first (ties: lowest index)."""
    selection = spec.selection if isinstance(spec, FusionSpec) else spec.lower()
    if hs.num_samples != 1:
        raise ValueError("select_hypotheses works on a single sample; use select_batch")
    return [int(i) for i in select_batch(hs, selection)[0]]


def select_batch(hs: HypothesisSet, selection: str) -> np.ndarray:
    T = hs.num_hypotheses
    if selection == "all":
        return np.tile(np.arange(T), (hs.num_samples, 1))
    k = {"best": 1, "top3": 3}.get(selection)
    if k is None:
        raise ValueError(f"selection must be one of {SELECTIONS}")
    if T < k:
        raise ValueError(f"{selection.upper()} selection needs at least {k} hypotheses, model has {T}")
    order = np.argsort(class_uncertainty(hs), axis=1, kind="stable")
    return order[:, :k]


def certainty_vectors(hs: HypothesisSet) -> np.ndarray:
    """Per-dimension feature certainties (N, T, D), normalized over each sample's T*D entropies."""
    h, _ = regression_entropy(hs.logscale)
    out = np.empty_like(h)
    for i in range(hs.num_samples):
        out[i] = certainty_from_uncertainty(h[i])
    return out


def fuse(hs: HypothesisSet, indices, combine: str, certainties: np.ndarray | None = None) -> FusedVector:
    """Fuse the selected hypotheses of one sample.

    ``concat`` stacks ``[median_k ; certainty_k]`` blocks, ``mult`` stacks
    ``median_k * certainty_k``; block order follows ``indices``.
    """
    if hs.num_samples != 1:
        raise ValueError("fuse works on a single sample; use fuse_batch")
    idx = [int(i) for i in indices]
    if any(i < 0 or i >= hs.num_hypotheses for i in idx):
        raise IndexError(f"hypothesis index out of range [0, {hs.num_hypotheses})")
    c = certainty_vectors(hs)[0] if certainties is None else np.asarray(certainties, dtype=DTYPE)
    a = hs.median[0]
    if combine == "concat":
        blocks = [np.concatenate([a[k], c[k]]) for k in idx]
    elif combine == "mult":
        blocks = [a[k] * c[k] for k in idx]
    else:
        raise ValueError(f"combine must be one of {COMBINES}")
    return FusedVector(np.concatenate(blocks), tuple(idx))


def fuse_batch(hs: HypothesisSet, spec: FusionSpec) -> np.ndarray:
    """Fused vectors for every sample, shape (N, spec.output_length(T, D))."""
    idx = select_batch(hs, spec.selection)
    c = certainty_vectors(hs)
    rows = np.arange(hs.num_samples)[:, None]
    a = hs.median[rows, idx]  # (N, k, D)
    cc = c[rows, idx]
    if spec.combine == "concat":
        blocks = np.concatenate([a, cc], axis=-1)
    else:
        blocks = a * cc
    return blocks.reshape(hs.num_samples, -1)


def fused_dataset(
    fused: np.ndarray, video_ids, segment_indices, actions, objects, num_actions: int, num_objects: int,
    action_names: dict[int, str] | None = None, object_names: dict[int, str] | None = None,
) -> Dataset:
    """Wrap fused vectors (one per pair, labeled with the future activity) as a Dataset for export."""
    return Dataset(
        dim=fused.shape[1],
        num_actions=num_actions,
        num_objects=num_objects,
        video_ids=video_ids,
        segment_indices=segment_indices,
        action_ids=actions,
        object_ids=objects,
        features=fused,
        action_names=action_names or {},
        object_names=object_names or {},
    )


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class LinearProbe:
    W: np.ndarray
    b: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, X) -> np.ndarray:
        Z = (np.asarray(X, dtype=DTYPE) - self.mean) / self.scale
        return Z @ self.W + self.b

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)


def probe_train(
    X,
    y,
    num_classes: int | None = None,
    seed: int = 0,
    epochs: int = 100,
    lr: float = 0.05,
    batch_size: int = 64,
    momentum: float = 0.9,
    weight_decay: float = 0.0005,
) -> LinearProbe:
    """Softmax regression on standardized inputs, trained with Nesterov SGD."""
    X = np.asarray(X, dtype=DTYPE)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("probe needs at least two classes in the training labels")
    C = int(num_classes if num_classes is not None else y.max() + 1)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    W = np.zeros((X.shape[1], C))
    b = np.zeros(C)
    state: list = [None, None]
    for epoch in range(epochs):
        perm = make_rng(seed, 7, epoch).permutation(len(Z))
        for s in range(0, len(Z), batch_size):
            i = perm[s : s + batch_size]
            _, dl = cross_entropy_loss(Z[i] @ W + b, y[i])
            dl /= len(i)
            sgd_nesterov_step([W, b], [Z[i].T @ dl, dl.sum(axis=0)], state, lr, momentum, weight_decay)
    return LinearProbe(W, b, mean, scale)


def probe_eval(probe: LinearProbe, X, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(probe.predict(X) == y))
