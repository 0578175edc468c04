"""Non-learned future-label baselines: largest class, copy current label, sequential rule mining."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import PairSample


@dataclass(frozen=True)
class Rule:
    antecedent: int
    consequent: int
    support: float
    confidence: float
    lift: float
    count: int = 0


class LargestClass:
    """Constant predictor of the most frequent training label (ties: lowest id)."""

    def __init__(self, label: int):
        self.label = int(label)

    def predict(self, n_or_inputs=1) -> np.ndarray:
        n = n_or_inputs if isinstance(n_or_inputs, int) else len(n_or_inputs)
        return np.full(n, self.label, dtype=np.int64)

    def __call__(self, *_):
        return self.label


def largest_class(labels: Iterable[int | None]) -> LargestClass:
    vals = [int(v) for v in labels if v is not None and int(v) >= 0]
    if not vals:
        raise ValueError("largest_class needs at least one labeled sample")
    counts = Counter(vals)
    top = max(counts.values())
    return LargestClass(min(k for k, c in counts.items() if c == top))


def copy_current_label(pairs: Sequence[PairSample], track: str = "action", classifier=None) -> np.ndarray:
    """Predict the future label as the present one.

    By default the present segment's ground-truth label is copied; pass
    ``classifier`` (features -> label) to copy a predicted present label instead.
    """
    out = []
    for p in pairs:
        if classifier is not None:
            out.append(int(classifier(p.present.features)))
        else:
            lab = p.present.action_id if track == "action" else p.present.object_id
            out.append(-1 if lab is None else int(lab))
    return np.asarray(out, dtype=np.int64)


def transitions(sequences: Iterable[Sequence[int | None]], delta: int = 1) -> list[tuple[int, int]]:
    """All (label[t], label[t + delta]) pairs where both labels are present."""
    if delta < 1:
        raise ValueError("delta must be >= 1")
    out = []
    for seq in sequences:
        for t in range(len(seq) - delta):
            x, y = seq[t], seq[t + delta]
            if x is not None and y is not None and x >= 0 and y >= 0:
                out.append((int(x), int(y)))
    return out


def mine_rules_from_transitions(pairs: Iterable[tuple[int, int]]) -> list[Rule]:
    """Support, confidence and lift for every observed x -> y transition.

    Sorted by confidence descending, then support descending, then (antecedent, consequent).
    """
    pair_counts = Counter((int(x), int(y)) for x, y in pairs)
    total = sum(pair_counts.values())
    if total == 0:
        raise ValueError("rule mining needs at least one transition")
    ante = Counter()
    cons = Counter()
    for (x, y), c in pair_counts.items():
        ante[x] += c
        cons[y] += c
    rules = []
    for (x, y), c in pair_counts.items():
        conf = c / ante[x]
        rules.append(Rule(x, y, c / total, conf, conf / (cons[y] / total), c))
    rules.sort(key=lambda r: (-r.confidence, -r.support, r.antecedent, r.consequent))
    return rules


def mine_rules(sequences: Iterable[Sequence[int | None]], delta: int = 1) -> list[Rule]:
    return mine_rules_from_transitions(transitions(sequences, delta))


def modal_consequent(rules: Sequence[Rule]) -> int:
    mass: dict[int, float] = {}
    for r in rules:
        mass[r.consequent] = mass.get(r.consequent, 0.0) + r.support
    top = max(mass.values())
    return min(k for k, v in mass.items() if v == top)


def rule_predict(rules: Sequence[Rule], current: int, fallback: int | None = None) -> int:
    """Consequent of the most confident rule for ``current``.

    Confidence ties go to higher support, then the lowest consequent id. An
    unseen antecedent falls back to ``fallback`` or, if not given, to the most
    frequent consequent.
    """
    if not rules:
        raise ValueError("no rules")
    best = None
    for r in rules:
        if r.antecedent != current:
            continue
        key = (-r.confidence, -r.support, r.consequent)
        if best is None or key < best[0]:
            best = (key, r.consequent)
    if best is not None:
        return best[1]
    return modal_consequent(rules) if fallback is None else int(fallback)


class RulePredictor:
    def __init__(self, rules: Sequence[Rule], fallback: int | None = None):
        self.rules = list(rules)
        self.fallback = modal_consequent(self.rules) if fallback is None else int(fallback)
        self._table: dict[int, int] = {}
        for r in self.rules:
            self._table.setdefault(r.antecedent, rule_predict(self.rules, r.antecedent, self.fallback))

    def __call__(self, current: int) -> int:
        return self._table.get(int(current), self.fallback)

    def predict(self, currents: Iterable[int]) -> np.ndarray:
        return np.array([self(c) for c in currents], dtype=np.int64)


def write_rules_csv(rules: Sequence[Rule], path, names: dict[int, str] | None = None) -> None:
    def nm(i):
        return names.get(i, str(i)) if names else str(i)

    ordered = sorted(rules, key=lambda r: (-r.confidence, -r.support, r.antecedent, r.consequent))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["antecedent", "consequent", "support", "confidence", "lift"])
        for r in ordered:
            w.writerow([nm(r.antecedent), nm(r.consequent), format(r.support, ".17g"),
                        format(r.confidence, ".17g"), format(r.lift, ".17g")])
