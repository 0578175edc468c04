"""Mini-batch SGD with Nesterov momentum, weight decay and LR decay on validation plateaus."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import evaluation
from .data import ConfigError, Dataset, pair_indices
from .losses import ASSIGNMENTS, combined_loss
from .model import TranslationNet, backward, forward, forward_with_cache
from .numerics import global_norm, make_rng

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc_action", "val_acc_object", "lr")

# sub-stream keys for make_rng(seed, ...)
_SPLIT, _SHUFFLE, _DROPOUT, _NOISE, _VAL_NOISE = 1, 2, 3, 4, 5


class NumericalError(RuntimeError):
    """Loss or gradient became NaN/Inf."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0005
    initial_lr: float = 0.007
    lr_decay_factor: float = 10.0
    patience: int = 10
    max_epochs: int = 80
    seed: int = 0
    mode: str = "mh"
    lambda_reg: float = 1.0
    delta: int = 1
    val_fraction: float = 0.15
    grad_clip: float = 40.0
    class_assignment: str = "relaxed"
    relax_eps: float = 0.05

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1 or self.delta < 1:
            raise ConfigError("batch_size, max_epochs, patience and delta must be >= 1")
        if self.initial_lr <= 0 or self.lr_decay_factor <= 0:
            raise ConfigError("initial_lr and lr_decay_factor must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.lambda_reg < 0:
            raise ConfigError("momentum, weight_decay and lambda_reg must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.class_assignment not in ASSIGNMENTS:
            raise ConfigError(f"class_assignment must be one of {ASSIGNMENTS}")
        if not 0.0 <= self.relax_eps <= 1.0:
            raise ConfigError("relax_eps must lie in [0, 1]")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc_action: float
    val_acc_object: float
    lr: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, History):
            return NotImplemented
        # NaN-aware, bitwise comparison
        return len(self) == len(other) and all(
            np.array_equal(self.column(f), other.column(f), equal_nan=True) for f in HISTORY_FIELDS
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_FIELDS)
            for r in self.records:
                w.writerow([r.epoch] + [format(getattr(r, f), ".17g") for f in HISTORY_FIELDS[1:]])


def sgd_nesterov_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: list[np.ndarray | None],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In-place Nesterov update.

    ``g = grad + wd * p``; ``v = momentum * v + g``; ``p -= lr * (g + momentum * v)``.
    ``state`` holds one velocity buffer per parameter (``None`` until first use).
    """
    for i, (p, g) in enumerate(zip(params, grads)):
        d = g + weight_decay * p if weight_decay else g
        if momentum:
            v = state[i]
            v = d.copy() if v is None else momentum * v + d
            state[i] = v
            d = d + momentum * v
        p -= lr * d


@dataclass
class PairData:
    present: np.ndarray
    future: np.ndarray
    actions: np.ndarray
    objects: np.ndarray

    def __len__(self) -> int:
        return len(self.present)

    def take(self, idx) -> "PairData":
        return PairData(self.present[idx], self.future[idx], self.actions[idx], self.objects[idx])

    @property
    def labeled(self) -> np.ndarray:
        return self.actions >= 0

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.present, self.future, self.actions, self.objects)

    @staticmethod
    def concat(a: "PairData", b: "PairData") -> "PairData":
        return PairData(*(np.concatenate([x, y]) for x, y in zip(a.arrays(), b.arrays())))


def make_pairs(dataset: Dataset, delta: int, videos: np.ndarray | None = None) -> PairData:
    p, f = pair_indices(dataset, delta)
    if videos is not None:
        keep = np.isin(dataset.video_ids[p], videos)
        p, f = p[keep], f[keep]
    return PairData(
        present=dataset.features[p],
        future=dataset.features[f],
        actions=dataset.action_ids[f],
        objects=dataset.object_ids[f],
    )


def split_videos(dataset: Dataset, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random video-level split; returns (train_videos, val_videos)."""
    videos = dataset.videos()
    n_val = int(round(fraction * len(videos)))
    if fraction > 0 and len(videos) >= 2:
        n_val = min(max(n_val, 1), len(videos) - 1)
    else:
        n_val = 0
    perm = make_rng(seed, _SPLIT).permutation(len(videos))
    val = np.sort(videos[perm[:n_val]])
    train = np.sort(videos[perm[n_val:]])
    return train, val


def _clip(grads: list[np.ndarray], max_norm: float) -> None:
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericalError("non-finite gradient norm")
    if max_norm and norm > max_norm:
        for g in grads:
            g *= max_norm / norm


def evaluate_loss(model: TranslationNet, pairs: PairData, config: TrainConfig) -> float:
    """Mean per-sample objective with inference-mode forward and fixed noise draws."""
    if len(pairs) == 0:
        return float("nan")
    data = pairs if config.mode != "c" else pairs.take(pairs.labeled)
    if len(data) == 0:
        return float("nan")
    rng = make_rng(config.seed, _VAL_NOISE)
    total = 0.0
    for s in range(0, len(data), 1024):
        b = data.take(slice(s, s + 1024))
        hs = forward(model, b.present)
        val, _, _ = combined_loss(
            config.mode, hs, b.future, b.actions, b.objects, config.lambda_reg, rng,
            class_assignment=config.class_assignment, relax_eps=config.relax_eps,
        )
        total += val
    return total / len(data)


def train(
    model: TranslationNet,
    dataset: Dataset,
    config: TrainConfig,
    extra: Dataset | None = None,
) -> tuple[TranslationNet, History]:
    """Train ``model`` in place on horizon-``delta`` pairs of ``dataset``.

    Videos are split into train/validation at ``val_fraction``. ``extra``
    (typically unlabeled) joins the training side only, so validation stays
    comparable across runs with and without it.
    """
    config.validate()
    mode = config.mode.lower()
    if mode != model.config.mode:
        raise ConfigError(f"train mode {mode!r} does not match model mode {model.config.mode!r}")
    train_videos, val_videos = split_videos(dataset, config.val_fraction, config.seed)
    tr = make_pairs(dataset, config.delta, train_videos)
    va = make_pairs(dataset, config.delta, val_videos)
    if extra is not None:
        tr = PairData.concat(tr, make_pairs(extra, config.delta))
    if len(tr) + len(va) == 0:
        raise ConfigError(f"no segment pairs at horizon {config.delta}")
    if mode != "r" and not (tr.labeled.any() or va.labeled.any()):
        raise ConfigError(f"mode {mode!r} needs labeled pairs, but none are labeled (use mode 'r')")
    if mode == "c":
        tr = tr.take(tr.labeled)
    if len(tr) == 0:
        raise ConfigError("training split is empty")

    params = model.parameters()
    state: list[np.ndarray | None] = [None] * len(params)
    lr = config.initial_lr
    best = math.inf
    stale = 0
    history = History()
    for epoch in range(1, config.max_epochs + 1):
        perm = make_rng(config.seed, _SHUFFLE, epoch).permutation(len(tr))
        drop_rng = make_rng(config.seed, _DROPOUT, epoch)
        noise_rng = make_rng(config.seed, _NOISE, epoch)
        total = 0.0
        for s in range(0, len(tr), config.batch_size):
            b = tr.take(perm[s : s + config.batch_size])
            n = len(b)
            model.zero_grad()
            hs, cache = forward_with_cache(model, b.present, train_mode=True, rng=drop_rng)
            val, grads, _ = combined_loss(
                mode, hs, b.future, b.actions, b.objects, config.lambda_reg, noise_rng,
                class_assignment=config.class_assignment, relax_eps=config.relax_eps,
            )
            if not math.isfinite(val):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            for a in grads.arrays():
                a /= n
            backward(model, cache, grads)
            g = [p.grad for p in params]
            _clip(g, config.grad_clip)
            sgd_nesterov_step([p.value for p in params], g, state, lr, config.momentum, config.weight_decay)
            total += val
        train_loss = total / len(tr)
        val_loss = evaluate_loss(model, va, config)
        acc_a, acc_o = _val_accuracy(model, va, mode)
        history.records.append(EpochRecord(epoch, train_loss, val_loss, acc_a, acc_o, lr))
        log.info("epoch %d train %.6g val %.6g acc %.4f/%.4f lr %.3g", epoch, train_loss, val_loss, acc_a, acc_o, lr)

        monitor = val_loss if math.isfinite(val_loss) else train_loss
        if not math.isfinite(monitor):
            raise NumericalError(f"non-finite loss at epoch {epoch}")
        if monitor < best:
            best = monitor
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                lr /= config.lr_decay_factor
                stale = 0
    model.metadata.update({"delta": config.delta, "mode": mode, "seed": config.seed})
    return model, history


def _val_accuracy(model: TranslationNet, pairs: PairData, mode: str) -> tuple[float, float]:
    if mode == "r" or len(pairs) == 0 or not pairs.labeled.any():
        return float("nan"), float("nan")
    lab = pairs.take(pairs.labeled)
    pa, po = evaluation.predict_labels(forward(model, lab.present), "best")
    return float(np.mean(pa == lab.actions)), float(np.mean(po == lab.objects))


def parameters_equal(a: TranslationNet, b: TranslationNet) -> bool:
    return all(np.array_equal(p.value, q.value) for p, q in zip(a.parameters(), b.parameters()))

