"""Feature datasets: synthetic Markov-chain generator, file I/O, horizon pairing and holdout splits.

A :class:`Dataset` stores its segments column-wise (one array per field) so the
training loop can index features without copying per segment. Labels use ``-1``
for "absent"; :class:`Segment` exposes them as ``None``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .numerics import DTYPE, make_rng

MAGIC = "PREFACT1"
UNLABELED = -1
PRESETS = ("cycle", "bimodal", "uniform")
PROTOTYPE_KINDS = ("state", "factored")


class DataFormatError(ValueError):
    """Malformed dataset file or inconsistent dataset contents."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ConfigError(ValueError):
    """Invalid generator or training configuration."""


@dataclass(frozen=True, eq=False)
class Segment:
    video_id: int
    segment_index: int
    features: np.ndarray
    action_id: int | None = None
    object_id: int | None = None

    @property
    def labeled(self) -> bool:
        return self.action_id is not None

    def __eq__(self, other):
        if not isinstance(other, Segment):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.segment_index == other.segment_index
            and self.action_id == other.action_id
            and self.object_id == other.object_id
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True)
class PairSample:
    present: Segment
    future: Segment
    horizon: int


@dataclass(eq=False)
class Dataset:
    dim: int
    num_actions: int
    num_objects: int
    video_ids: np.ndarray
    segment_indices: np.ndarray
    action_ids: np.ndarray
    object_ids: np.ndarray
    features: np.ndarray
    action_names: dict[int, str] = field(default_factory=dict)
    object_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.video_ids = np.asarray(self.video_ids, dtype=np.int64).reshape(-1)
        self.segment_indices = np.asarray(self.segment_indices, dtype=np.int64).reshape(-1)
        self.action_ids = np.asarray(self.action_ids, dtype=np.int64).reshape(-1)
        self.object_ids = np.asarray(self.object_ids, dtype=np.int64).reshape(-1)
        self.features = np.asarray(self.features, dtype=DTYPE).reshape(-1, self.dim)
        if not self.action_names:
            self.action_names = {i: f"action{i}" for i in range(self.num_actions)}
        if not self.object_names:
            self.object_names = {i: f"object{i}" for i in range(self.num_objects)}
        self.validate()

    # -- invariants ---------------------------------------------------------

    def validate(self) -> None:
        n = len(self.video_ids)
        for name in ("segment_indices", "action_ids", "object_ids"):
            if len(getattr(self, name)) != n:
                raise DataFormatError(f"{name} has {len(getattr(self, name))} entries, expected {n}")
        if self.features.shape != (n, self.dim):
            raise DataFormatError(f"features shape {self.features.shape} != ({n}, {self.dim})")
        act_absent = self.action_ids == UNLABELED
        obj_absent = self.object_ids == UNLABELED
        if np.any(act_absent != obj_absent):
            raise DataFormatError("action and object labels must be both present or both absent")
        lab = ~act_absent
        if np.any((self.action_ids[lab] < 0) | (self.action_ids[lab] >= self.num_actions)):
            raise DataFormatError(f"action id out of range [0, {self.num_actions})")
        if np.any((self.object_ids[lab] < 0) | (self.object_ids[lab] >= self.num_objects)):
            raise DataFormatError(f"object id out of range [0, {self.num_objects})")
        if n > 1:
            same = self.video_ids[1:] == self.video_ids[:-1]
            if np.any(self.video_ids[1:] < self.video_ids[:-1]):
                raise DataFormatError("segments must be grouped by ascending video_id")
            if np.any(same & (self.segment_indices[1:] <= self.segment_indices[:-1])):
                raise DataFormatError("segment_index must increase within a video")
        if not np.all(np.isfinite(self.features)):
            raise DataFormatError("non-finite feature value")

    # -- views --------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.video_ids)

    def segment(self, i: int) -> Segment:
        a = int(self.action_ids[i])
        o = int(self.object_ids[i])
        return Segment(
            video_id=int(self.video_ids[i]),
            segment_index=int(self.segment_indices[i]),
            features=self.features[i],
            action_id=None if a == UNLABELED else a,
            object_id=None if o == UNLABELED else o,
        )

    @property
    def segments(self) -> list[Segment]:
        return [self.segment(i) for i in range(len(self))]

    def __iter__(self) -> Iterator[Segment]:
        return (self.segment(i) for i in range(len(self)))

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.action_ids != UNLABELED

    def videos(self) -> np.ndarray:
        return np.unique(self.video_ids)

    def subset(self, mask: np.ndarray) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(
            dim=self.dim,
            num_actions=self.num_actions,
            num_objects=self.num_objects,
            video_ids=self.video_ids[mask],
            segment_indices=self.segment_indices[mask],
            action_ids=self.action_ids[mask],
            object_ids=self.object_ids[mask],
            features=self.features[mask],
            action_names=dict(self.action_names),
            object_names=dict(self.object_names),
        )

    def without_labels(self) -> "Dataset":
        out = self.subset(np.ones(len(self), dtype=bool))
        out.action_ids[:] = UNLABELED
        out.object_ids[:] = UNLABELED
        return out

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.num_actions == other.num_actions
            and self.num_objects == other.num_objects
            and self.action_names == other.action_names
            and self.object_names == other.object_names
            and np.array_equal(self.video_ids, other.video_ids)
            and np.array_equal(self.segment_indices, other.segment_indices)
            and np.array_equal(self.action_ids, other.action_ids)
            and np.array_equal(self.object_ids, other.object_ids)
            and np.array_equal(self.features, other.features)
        )


def from_segments(
    segments: Sequence[Segment],
    dim: int,
    num_actions: int,
    num_objects: int,
    action_names: dict[int, str] | None = None,
    object_names: dict[int, str] | None = None,
) -> Dataset:
    def lab(v):
        return UNLABELED if v is None else int(v)

    feats = np.array([s.features for s in segments], dtype=DTYPE).reshape(-1, dim)
    return Dataset(
        dim=dim,
        num_actions=num_actions,
        num_objects=num_objects,
        video_ids=[s.video_id for s in segments],
        segment_indices=[s.segment_index for s in segments],
        action_ids=[lab(s.action_id) for s in segments],
        object_ids=[lab(s.object_id) for s in segments],
        features=feats,
        action_names=action_names or {},
        object_names=object_names or {},
    )


def concat(first: Dataset, second: Dataset, renumber: bool = True) -> Dataset:
    """Append ``second`` after ``first``; its videos are renumbered past ``first``'s."""
    if (first.dim, first.num_actions, first.num_objects) != (second.dim, second.num_actions, second.num_objects):
        raise DataFormatError("cannot merge datasets with different (D, A, O)")
    offset = int(first.video_ids.max()) + 1 if (renumber and len(first)) else 0
    return Dataset(
        dim=first.dim,
        num_actions=first.num_actions,
        num_objects=first.num_objects,
        video_ids=np.concatenate([first.video_ids, second.video_ids + offset]),
        segment_indices=np.concatenate([first.segment_indices, second.segment_indices]),
        action_ids=np.concatenate([first.action_ids, second.action_ids]),
        object_ids=np.concatenate([first.object_ids, second.object_ids]),
        features=np.concatenate([first.features, second.features]),
        action_names=dict(first.action_names),
        object_names=dict(first.object_names),
    )


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    dim: int = 16
    num_actions: int = 6
    num_objects: int = 6
    # allowed (action, object) pairs; one Markov state per pair
    activities: list[tuple[int, int]] | None = None
    transition: str | np.ndarray = "cycle"
    noise_sigma: float = 0.1
    episodes: int = 100
    length: int = 10
    seed: int = 0
    # "state": one unit prototype per activity; "factored": normalize(action + object prototype)
    prototype: str = "state"

    def resolved_activities(self) -> list[tuple[int, int]]:
        if self.activities is not None:
            return [(int(a), int(o)) for a, o in self.activities]
        n = max(self.num_actions, self.num_objects)
        return [(i % self.num_actions, i % self.num_objects) for i in range(n)]

    def transition_matrix(self) -> np.ndarray:
        return transition_matrix(self.transition, len(self.resolved_activities()))

    def validate(self) -> None:
        if self.dim < 1 or self.num_actions < 1 or self.num_objects < 1:
            raise ConfigError("dim, num_actions and num_objects must be >= 1")
        if self.episodes < 1 or self.length < 1:
            raise ConfigError("episodes and length must be >= 1")
        if not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.prototype not in PROTOTYPE_KINDS:
            raise ConfigError(f"prototype must be one of {PROTOTYPE_KINDS}")
        acts = self.resolved_activities()
        if not acts:
            raise ConfigError("activity list is empty")
        if len(set(acts)) != len(acts):
            raise ConfigError("activity list contains duplicates")
        for a, o in acts:
            if not (0 <= a < self.num_actions and 0 <= o < self.num_objects):
                raise ConfigError(f"activity ({a}, {o}) outside vocabulary")
        self.transition_matrix()


def transition_matrix(spec: str | np.ndarray, n_states: int) -> np.ndarray:
    """Build a preset matrix or validate an explicit row-stochastic one."""
    if isinstance(spec, str):
        if spec == "cycle":
            return np.roll(np.eye(n_states), 1, axis=1)
        if spec == "bimodal":
            if n_states < 3:
                raise ConfigError("bimodal preset needs at least 3 activities")
            m = np.zeros((n_states, n_states))
            for s in range(n_states):
                m[s, (s + 1) % n_states] = 0.5
                m[s, (s + 2) % n_states] = 0.5
            return m
        if spec == "uniform":
            return np.full((n_states, n_states), 1.0 / n_states)
        raise ConfigError(f"unknown transition preset {spec!r}; expected one of {PRESETS}")
    m = np.asarray(spec, dtype=DTYPE)
    if m.shape != (n_states, n_states):
        raise ConfigError(f"transition matrix shape {m.shape} != ({n_states}, {n_states})")
    for r, row in enumerate(m):
        if np.any(row < 0) or not np.all(np.isfinite(row)):
            raise ConfigError(f"transition matrix row {r} has negative or non-finite entries")
        if abs(row.sum() - 1.0) > 1e-9:
            raise ConfigError(f"transition matrix row {r} sums to {row.sum()!r}, not 1")
    return m


def factored_transition(
    activities: Sequence[tuple[int, int]], action_matrix: np.ndarray, object_matrix: np.ndarray
) -> np.ndarray:
    """State transition where action and object evolve independently.

    Probability mass that would land on a pair missing from ``activities`` is
    dropped and the row renormalized.
    """
    n = len(activities)
    m = np.zeros((n, n))
    for i, (a, o) in enumerate(activities):
        for j, (a2, o2) in enumerate(activities):
            m[i, j] = action_matrix[a, a2] * object_matrix[o, o2]
        total = m[i].sum()
        if total <= 0:
            raise ConfigError(f"activity {(a, o)} has no reachable successor")
        m[i] /= total
    return m


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Sample ``episodes`` videos of ``length`` segments from a Markov chain over activities.

    Prototypes are drawn once from the seeded generator; every segment's
    features are its state's prototype plus ``noise_sigma`` Gaussian noise.
    """
    config.validate()
    acts = config.resolved_activities()
    trans = config.transition_matrix()
    n_states = len(acts)
    rng = make_rng(config.seed)

    if config.prototype == "state":
        protos = _unit_rows(rng.standard_normal((n_states, config.dim)))
    else:
        act_p = rng.standard_normal((config.num_actions, config.dim))
        obj_p = rng.standard_normal((config.num_objects, config.dim))
        protos = _unit_rows(np.array([act_p[a] + obj_p[o] for a, o in acts]))

    cdf = np.cumsum(trans, axis=1)
    cdf[:, -1] = 1.0
    E, L = config.episodes, config.length
    states = np.empty((E, L), dtype=np.int64)
    states[:, 0] = rng.integers(0, n_states, size=E)
    u = rng.random((E, L))
    for t in range(1, L):
        prev = states[:, t - 1]
        states[:, t] = np.minimum((u[:, t][:, None] >= cdf[prev]).sum(axis=1), n_states - 1)
    noise = rng.standard_normal((E, L, config.dim))

    flat = states.reshape(-1)
    feats = protos[flat] + config.noise_sigma * noise.reshape(-1, config.dim)
    pairs = np.array(acts, dtype=np.int64)
    return Dataset(
        dim=config.dim,
        num_actions=config.num_actions,
        num_objects=config.num_objects,
        video_ids=np.repeat(np.arange(E), L),
        segment_indices=np.tile(np.arange(L), E),
        action_ids=pairs[flat, 0],
        object_ids=pairs[flat, 1],
        features=feats,
    )


def generate_linear(
    dim: int, episodes: int, length: int, seed: int, num_actions: int = 1, num_objects: int = 1
) -> tuple[Dataset, np.ndarray]:
    """Unlabeled videos driven by a fixed random orthogonal map: ``x[t+1] = x[t] @ Q``.

    Returns the dataset and ``Q``. The map is drawn from ``seed`` alone, so
    datasets with different ``episodes`` share it; starting points use a
    separate stream keyed by ``episodes``.
    """
    q, r = np.linalg.qr(make_rng(seed).standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    rng = make_rng(seed, 1, episodes)
    x = np.empty((episodes, length, dim))
    x[:, 0] = rng.standard_normal((episodes, dim))
    for t in range(1, length):
        x[:, t] = x[:, t - 1] @ q
    n = episodes * length
    ds = Dataset(
        dim=dim,
        num_actions=num_actions,
        num_objects=num_objects,
        video_ids=np.repeat(np.arange(episodes), length),
        segment_indices=np.tile(np.arange(length), episodes),
        action_ids=np.full(n, UNLABELED),
        object_ids=np.full(n, UNLABELED),
        features=x.reshape(n, dim),
    )
    return ds, q


# ---------------------------------------------------------------------------
# Pairing and filtering
# ---------------------------------------------------------------------------


def pair_indices(dataset: Dataset, delta: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices ``(present, future)`` of all in-video pairs ``delta`` segments apart."""
    if delta < 1:
        raise ValueError(f"horizon must be >= 1, got {delta}")
    present, future = [], []
    vids = dataset.video_ids
    idx = dataset.segment_indices
    bounds = np.flatnonzero(np.diff(vids)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(vids)]])
    for s, e in zip(starts, ends):
        pos = {int(idx[k]): k for k in range(s, e)}
        for k in range(s, e):
            j = pos.get(int(idx[k]) + delta)
            if j is not None:
                present.append(k)
                future.append(j)
    return np.asarray(present, dtype=np.int64), np.asarray(future, dtype=np.int64)


def pair_segments(dataset: Dataset, delta: int = 1) -> list[PairSample]:
    p, f = pair_indices(dataset, delta)
    return [PairSample(dataset.segment(i), dataset.segment(j), delta) for i, j in zip(p, f)]


def holdout_filter(dataset: Dataset, excluded_pairs: Iterable[tuple[int, int]]) -> tuple[Dataset, Dataset]:
    """Split off every segment whose (action, object) label is in ``excluded_pairs``."""
    excluded = {(int(a), int(o)) for a, o in excluded_pairs}
    mask = np.zeros(len(dataset), dtype=bool)
    for a, o in excluded:
        mask |= (dataset.action_ids == a) & (dataset.object_ids == o)
    return dataset.subset(~mask), dataset.subset(mask)


def label_sequences(dataset: Dataset, track: str) -> list[list[int | None]]:
    """Per-video label lists for ``track`` ('action' or 'object'), positioned by segment_index."""
    ids = dataset.action_ids if track == "action" else dataset.object_ids
    out: list[list[int | None]] = []
    for vid in dataset.videos():
        rows = np.flatnonzero(dataset.video_ids == vid)
        seq: list[int | None] = [None] * (int(dataset.segment_indices[rows].max()) + 1)
        for r in rows:
            v = int(ids[r])
            seq[int(dataset.segment_indices[r])] = None if v == UNLABELED else v
        out.append(seq)
    return out


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    lines = [f"{MAGIC} {dataset.dim} {dataset.num_actions} {dataset.num_objects}"]
    lines += [f"act {i} {name}" for i, name in sorted(dataset.action_names.items())]
    lines += [f"obj {i} {name}" for i, name in sorted(dataset.object_names.items())]
    for i in range(len(dataset)):
        head = [
            str(int(dataset.video_ids[i])),
            str(int(dataset.segment_indices[i])),
            str(int(dataset.action_ids[i])),
            str(int(dataset.object_ids[i])),
        ]
        lines.append("\t".join(head + [_fmt(v) for v in dataset.features[i]]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.ds"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise DataFormatError("empty file", line=1)
    head = lines[0].split()
    if len(head) != 4 or head[0] != MAGIC:
        raise DataFormatError(f"expected header '{MAGIC} <D> <A> <O>'", line=1)
    try:
        D, A, O = (int(v) for v in head[1:])
    except ValueError:
        raise DataFormatError("non-integer header field", line=1) from None
    act_names: dict[int, str] = {}
    obj_names: dict[int, str] = {}
    vids, segs, acts, objs, feats = [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith(("act ", "obj ")):
            parts = line.split(maxsplit=2)
            if len(parts) != 3:
                raise DataFormatError("vocab line needs '<kind> <id> <name>'", line=lineno)
            try:
                vid = int(parts[1])
            except ValueError:
                raise DataFormatError("non-integer vocab id", line=lineno) from None
            (act_names if parts[0] == "act" else obj_names)[vid] = parts[2]
            continue
        fields = line.split()
        if len(fields) != 4 + D:
            raise DataFormatError(f"expected {D} features, found {len(fields) - 4}", line=lineno)
        try:
            v, s, a, o = (int(x) for x in fields[:4])
            row = [float(x) for x in fields[4:]]
        except ValueError:
            raise DataFormatError("unparsable number", line=lineno) from None
        if (a == UNLABELED) != (o == UNLABELED):
            raise DataFormatError("labels must be both present or both -1", line=lineno)
        if a != UNLABELED and not (0 <= a < A and 0 <= o < O):
            raise DataFormatError(f"label ({a}, {o}) outside vocabulary", line=lineno)
        if not all(math.isfinite(x) for x in row):
            raise DataFormatError("non-finite feature", line=lineno)
        vids.append(v)
        segs.append(s)
        acts.append(a)
        objs.append(o)
        feats.append(row)
    return Dataset(
        dim=D,
        num_actions=A,
        num_objects=O,
        video_ids=np.asarray(vids, dtype=np.int64),
        segment_indices=np.asarray(segs, dtype=np.int64),
        action_ids=np.asarray(acts, dtype=np.int64),
        object_ids=np.asarray(objs, dtype=np.int64),
        features=np.asarray(feats, dtype=DTYPE).reshape(-1, D),
        action_names=act_names,
        object_names=obj_names,
    )
