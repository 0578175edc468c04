"""Accuracy, reliability diagrams, sparsification curves, and CSV/SVG report emission."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .losses import class_uncertainty, logits_entropy, regression_entropy
from .model import HypothesisSet
from .numerics import log_softmax

DEFAULT_FRACTIONS = tuple(round(0.05 * i, 2) for i in range(20))


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    if predictions.shape != labels.shape:
        raise ValueError(f"predictions {predictions.shape} and labels {labels.shape} differ in shape")
    return float(np.count_nonzero(predictions == labels)) / len(labels)


def task_accuracies(pred_action, pred_object, true_action, true_object) -> dict[str, float]:
    pa, po = np.asarray(pred_action), np.asarray(pred_object)
    ya, yo = np.asarray(true_action), np.asarray(true_object)
    return {
        "action": accuracy(pa, ya),
        "object": accuracy(po, yo),
        "joint": accuracy((pa == ya) & (po == yo), np.ones(len(ya), dtype=bool)),
    }


# ---------------------------------------------------------------------------
# Predictions from hypothesis sets
# ---------------------------------------------------------------------------


def hypothesis_labels(hs: HypothesisSet) -> tuple[np.ndarray, np.ndarray]:
    """Argmax action and object per hypothesis, each (N, T)."""
    return np.argmax(hs.action_logits, axis=-1), np.argmax(hs.object_logits, axis=-1)


def predict_labels(hs: HypothesisSet, how: str = "best") -> tuple[np.ndarray, np.ndarray]:
    """Single (action, object) prediction per sample.

    ``best``: the hypothesis with the lowest class uncertainty.
    ``mean``: argmax of the softmax averaged over hypotheses.
    """
    if how == "best":
        k = np.argmin(class_uncertainty(hs), axis=1)
        acts, objs = hypothesis_labels(hs)
        rows = np.arange(hs.num_samples)
        return acts[rows, k], objs[rows, k]
    if how == "mean":
        pa = np.exp(log_softmax(hs.action_logits)).mean(axis=1)
        po = np.exp(log_softmax(hs.object_logits)).mean(axis=1)
        return np.argmax(pa, axis=-1), np.argmax(po, axis=-1)
    raise ValueError(f"unknown prediction rule {how!r}")


def oracle_labels(hs: HypothesisSet, true_action, true_object) -> tuple[np.ndarray, np.ndarray]:
    """Per sample, the hypothesis that gets the most tasks right (ties: lowest index)."""
    acts, objs = hypothesis_labels(hs)
    ya = np.asarray(true_action)[:, None]
    yo = np.asarray(true_object)[:, None]
    score = (acts == ya).astype(int) + (objs == yo).astype(int)
    k = np.argmax(score, axis=1)
    rows = np.arange(hs.num_samples)
    return acts[rows, k], objs[rows, k]


def normalized_certainty(logits: np.ndarray) -> np.ndarray:
    """``1 - H(softmax(logits)) / log C`` in [0, 1]."""
    C = logits.shape[-1]
    if C < 2:
        return np.ones(logits.shape[:-1])
    return np.clip(1.0 - logits_entropy(logits) / math.log(C), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Reliability and sparsification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float | None
    accuracy: float | None


def reliability_diagram(confidences, correct, num_bins: int = 10) -> list[ReliabilityBin]:
    """Equal-width bins over [0, 1]; a confidence of exactly 1.0 lands in the top bin."""
    conf = np.asarray(confidences, dtype=float).reshape(-1)
    ok = np.asarray(correct, dtype=float).reshape(-1)
    if conf.shape != ok.shape:
        raise ValueError("confidences and correct flags differ in length")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    idx = np.minimum((conf * num_bins).astype(int), num_bins - 1)
    bins = []
    for b in range(num_bins):
        m = idx == b
        n = int(m.sum())
        bins.append(
            ReliabilityBin(
                lower=b / num_bins,
                upper=(b + 1) / num_bins,
                count=n,
                mean_confidence=float(conf[m].mean()) if n else None,
                accuracy=float(ok[m].mean()) if n else None,
            )
        )
    return bins


def _retained_means(order: np.ndarray, values: np.ndarray, fractions: Sequence[float]) -> list[tuple[float, float]]:
    n = len(values)
    ranked = values[order]
    csum = np.concatenate([[0.0], np.cumsum(ranked)])
    out = []
    for f in fractions:
        keep = max(n - int(math.floor(f * n + 1e-9)), 1)
        out.append((float(f), float(csum[keep] / keep)))
    return out


def sparsification_curve(
    uncertainties, errors, fractions: Sequence[float] = DEFAULT_FRACTIONS
) -> tuple[list[tuple[float, float]], list[tuple[float, float]]]:
    """Mean error of the retained samples as the most uncertain ones are removed.

    Returns ``(curve, oracle)``; the oracle ranks by the true error instead.
    Ties in either ranking keep sample order.
    """
    u = np.asarray(uncertainties, dtype=float).reshape(-1)
    e = np.asarray(errors, dtype=float).reshape(-1)
    if u.shape != e.shape:
        raise ValueError("uncertainties and errors differ in length")
    if len(u) == 0:
        return [], []
    fr = list(fractions)
    if any(b <= a for a, b in zip(fr, fr[1:])) or (fr and (fr[0] < 0 or fr[-1] >= 1)):
        raise ValueError("fractions must increase strictly within [0, 1)")
    curve = _retained_means(np.argsort(u, kind="stable"), e, fr)
    oracle = _retained_means(np.argsort(e, kind="stable"), e, fr)
    return curve, oracle


@dataclass
class CalibrationReport:
    bins: list[ReliabilityBin] = field(default_factory=list)
    sparsification: list[tuple[float, float]] = field(default_factory=list)
    oracle_sparsification: list[tuple[float, float]] = field(default_factory=list)


def build_report(confidences, correct, uncertainties, errors, num_bins: int = 10) -> CalibrationReport:
    curve, oracle = sparsification_curve(uncertainties, errors)
    return CalibrationReport(reliability_diagram(confidences, correct, num_bins), curve, oracle)


def bin_spearman(bins: Sequence[ReliabilityBin]) -> float:
    """Spearman correlation between mean confidence and accuracy over occupied bins."""
    occ = [b for b in bins if b.count > 0]
    if len(occ) < 2:
        return float("nan")
    rho = spearmanr([b.mean_confidence for b in occ], [b.accuracy for b in occ]).statistic
    return float(rho)


# ---------------------------------------------------------------------------
# Model-level evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    predictions: dict[str, np.ndarray]
    accuracies: dict[str, dict[str, float]]
    reports: dict[str, CalibrationReport]


def evaluate_hypotheses(hs: HypothesisSet, future_features, true_action, true_object) -> EvalResult:
    """Accuracy (best / mean / oracle selection), classification and feature calibration reports.

    Rows with label -1 enter only the feature report.
    """
    gt = np.asarray(future_features, dtype=float)
    ya = np.asarray(true_action)
    yo = np.asarray(true_object)
    rows = np.arange(hs.num_samples)

    dist = np.sqrt(np.sum((hs.median - gt[:, None, :]) ** 2, axis=-1))
    k_feat = np.argmin(dist, axis=1)
    feat_err = np.mean(np.abs(hs.median[rows, k_feat] - gt), axis=1)
    feat_unc = regression_entropy(hs.logscale[rows, k_feat])[0].mean(axis=1)

    best_a, best_o = predict_labels(hs, "best")
    preds = {"best_action": best_a, "best_object": best_o}
    reports: dict[str, CalibrationReport] = {}
    accs: dict[str, dict[str, float]] = {}

    lab = ya >= 0
    if lab.any():
        mean_a, mean_o = predict_labels(hs, "mean")
        or_a, or_o = oracle_labels(hs, ya, yo)
        preds.update(mean_action=mean_a, mean_object=mean_o, oracle_action=or_a, oracle_object=or_o)
        for name, (pa, po) in {"best": (best_a, best_o), "mean": (mean_a, mean_o), "oracle": (or_a, or_o)}.items():
            accs[name] = task_accuracies(pa[lab], po[lab], ya[lab], yo[lab])
        k_best = np.argmin(class_uncertainty(hs), axis=1)
        for task, logits, y in (("action", hs.action_logits, ya), ("object", hs.object_logits, yo)):
            L = logits[lab]
            conf = normalized_certainty(L)  # (n, T), pooled over hypotheses
            correct = np.argmax(L, axis=-1) == y[lab][:, None]
            sel = L[np.arange(len(L)), k_best[lab]]
            ce = -log_softmax(sel)[np.arange(len(L)), y[lab]]
            reports[task] = build_report(conf.reshape(-1), correct.reshape(-1), logits_entropy(sel), ce)
    # feature reliability: certainty from the entropy of the closest hypothesis,
    # "correct" meaning an error at or below the median error
    fe_conf = 1.0 - _minmax(feat_unc)
    fe_ok = feat_err <= np.median(feat_err)
    reports["feature"] = build_report(fe_conf, fe_ok, feat_unc, feat_err)
    preds["feature_error"] = feat_err
    preds["feature_uncertainty"] = feat_unc
    return EvalResult(preds, accs, reports)


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi - lo <= 0:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def _g(x) -> str:
    return "" if x is None else format(float(x), ".17g")


def write_reliability_csv(bins: Sequence[ReliabilityBin], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lower", "bin_upper", "count", "mean_confidence", "accuracy"])
        for b in bins:
            w.writerow([_g(b.lower), _g(b.upper), b.count, _g(b.mean_confidence), _g(b.accuracy)])


def write_sparsification_csv(curve, oracle, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["removed_fraction", "metric", "oracle_metric"])
        for (f, m), (_, o) in zip(curve, oracle):
            w.writerow([_g(f), _g(m), _g(o)])


def read_reliability_csv(path) -> list[ReliabilityBin]:
    def opt(v):
        return float(v) if v != "" else None

    with open(path, newline="", encoding="utf-8") as fh:
        return [
            ReliabilityBin(float(r["bin_lower"]), float(r["bin_upper"]), int(r["count"]),
                           opt(r["mean_confidence"]), opt(r["accuracy"]))
            for r in csv.DictReader(fh)
        ]


def read_sparsification_csv(path) -> tuple[list[tuple[float, float]], list[tuple[float, float]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    curve = [(float(r["removed_fraction"]), float(r["metric"])) for r in rows]
    oracle = [(float(r["removed_fraction"]), float(r["oracle_metric"])) for r in rows]
    return curve, oracle


_W, _H, _PAD = 480, 360, 50


def _svg_frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    x0, y0, x1, y1 = _PAD, _H - _PAD, _W - 20, 30
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="18" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="{(x0 + x1) // 2}" y="{_H - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{(y0 + y1) // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {(y0 + y1) // 2})">{ylabel}</text>',
    ]


def _sx(x: float, lo: float = 0.0, hi: float = 1.0) -> float:
    return _PAD + (x - lo) / (hi - lo) * (_W - 20 - _PAD)


def _sy(y: float, lo: float, hi: float) -> float:
    span = hi - lo if hi > lo else 1.0
    return (_H - _PAD) - (y - lo) / span * (_H - _PAD - 30)


def reliability_svg(bins: Sequence[ReliabilityBin], title: str) -> str:
    out = _svg_frame(title, "confidence", "accuracy")
    out.append(f'<line x1="{_sx(0):.2f}" y1="{_sy(0, 0, 1):.2f}" x2="{_sx(1):.2f}" y2="{_sy(1, 0, 1):.2f}" '
               'stroke="gray" stroke-dasharray="4 4"/>')
    for b in bins:
        if b.count == 0:
            continue
        x, w = _sx(b.lower), _sx(b.upper) - _sx(b.lower)
        top = _sy(b.accuracy, 0, 1)
        out.append(f'<rect x="{x:.2f}" y="{top:.2f}" width="{w:.2f}" height="{_sy(0, 0, 1) - top:.2f}" '
                   'fill="steelblue" fill-opacity="0.7" stroke="black"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def sparsification_svg(curve, oracle, title: str, ylabel: str = "mean error") -> str:
    out = _svg_frame(title, "fraction removed", ylabel)
    if curve:
        ys = [m for _, m in curve] + [m for _, m in oracle]
        lo, hi = min(ys), max(ys)
        for pts, color in ((curve, "steelblue"), (oracle, "darkorange")):
            coords = " ".join(f"{_sx(f):.2f},{_sy(m, lo, hi):.2f}" for f, m in pts)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(report: CalibrationReport, out_dir, name: str = "report") -> list[Path]:
    """Write ``<name>_reliability.{csv,svg}`` and ``<name>_sparsification.{csv,svg}``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    paths = [
        out / f"{name}_reliability.csv",
        out / f"{name}_reliability.svg",
        out / f"{name}_sparsification.csv",
        out / f"{name}_sparsification.svg",
    ]
    write_reliability_csv(report.bins, paths[0])
    paths[1].write_text(reliability_svg(report.bins, f"{name} reliability"), encoding="utf-8")
    write_sparsification_csv(report.sparsification, report.oracle_sparsification, paths[2])
    paths[3].write_text(
        sparsification_svg(report.sparsification, report.oracle_sparsification, f"{name} sparsification"),
        encoding="utf-8",
    )
    return paths


def render_report_dir(report_dir, out_dir=None) -> list[Path]:
    """Re-render every SVG from the CSV files in ``report_dir``, into ``out_dir`` (default: alongside)."""
    d = Path(report_dir)
    out = d if out_dir is None else Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for p in sorted(d.glob("*_reliability.csv")):
        svg = out / (p.stem + ".svg")
        svg.write_text(reliability_svg(read_reliability_csv(p), p.stem.replace("_", " ")), encoding="utf-8")
        written.append(svg)
    for p in sorted(d.glob("*_sparsification.csv")):
        curve, oracle = read_sparsification_csv(p)
        svg = out / (p.stem + ".svg")
        svg.write_text(sparsification_svg(curve, oracle, p.stem.replace("_", " ")), encoding="utf-8")
        written.append(svg)
    return written
