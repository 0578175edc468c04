"""Feature translation network: FC trunk followed by T hypothesis heads.

Each hypothesis head emits, for one input feature vector, a Laplace median and
log-scale per feature dimension, action and object logits, and one log noise
scale per classification task. All heads are packed into one affine layer whose
output is reshaped to (N, T, K) with K = 2D + A + O + 2.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (
    DTYPE,
    Parameter,
    ShapeError,
    affine_backward,
    affine_forward,
    dropout_mask,
    relu_backward,
    relu_forward,
)

MODES = ("c", "r", "rc", "mh")
LOG_CLAMP = 10.0
MODEL_MAGIC = b"PFMODEL1"


class ModelFormatError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_dim: int
    num_actions: int
    num_objects: int
    hidden: list[int] = field(default_factory=lambda: [1024, 512])
    num_hypotheses: int = 8
    dropout: float = 0.3
    mode: str = "mh"

    def __post_init__(self):
        self.mode = self.mode.lower()
        self.hidden = [int(h) for h in self.hidden]
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "mh":
            self.num_hypotheses = 1
        if self.num_hypotheses < 1:
            raise ValueError("num_hypotheses must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if min(self.input_dim, self.num_actions, self.num_objects) < 1:
            raise ValueError("input_dim, num_actions and num_objects must be >= 1")

    @property
    def head_width(self) -> int:
        return 2 * self.input_dim + self.num_actions + self.num_objects + 2


@dataclass(eq=False)
class HypothesisSet:
    """Batched hypotheses; every array has leading shape (N, T)."""

    median: np.ndarray
    logscale: np.ndarray
    action_logits: np.ndarray
    object_logits: np.ndarray
    action_log_sigma: np.ndarray
    object_log_sigma: np.ndarray

    FIELDS = ("median", "logscale", "action_logits", "object_logits", "action_log_sigma", "object_log_sigma")

    @property
    def num_samples(self) -> int:
        return self.median.shape[0]

    @property
    def num_hypotheses(self) -> int:
        return self.median.shape[1]

    def __len__(self) -> int:
        return self.num_samples

    def __getitem__(self, idx) -> "HypothesisSet":
        if isinstance(idx, (int, np.integer)):
            idx = slice(int(idx), int(idx) + 1)
        return HypothesisSet(*(getattr(self, f)[idx] for f in self.FIELDS))

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f) for f in self.FIELDS]

    @classmethod
    def zeros_like(cls, other: "HypothesisSet") -> "HypothesisSet":
        return cls(*(np.zeros_like(a) for a in other.arrays()))

    def equals(self, other: "HypothesisSet") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


class TranslationNet:
    def __init__(self, config: ModelConfig, trunk: list[tuple[Parameter, Parameter]], head: tuple[Parameter, Parameter]):
        self.config = config
        self.trunk = trunk
        self.head = head
        self.metadata: dict = {}

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for i, (W, b) in enumerate(self.trunk):
            out += [(f"trunk{i}.W", W), (f"trunk{i}.b", b)]
        out += [("head.W", self.head[0]), ("head.b", self.head[1])]
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "TranslationNet":
        trunk = [(Parameter(W.value.copy()), Parameter(b.value.copy())) for W, b in self.trunk]
        head = (Parameter(self.head[0].value.copy()), Parameter(self.head[1].value.copy()))
        net = TranslationNet(ModelConfig(**asdict(self.config)), trunk, head)
        net.metadata = dict(self.metadata)
        return net


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(config: ModelConfig, rng: np.random.Generator) -> TranslationNet:
    """Glorot-uniform weights, zero biases (so log-scales start at 0 and noise scales at 1)."""
    trunk = []
    width = config.input_dim
    for h in config.hidden:
        trunk.append((Parameter(_glorot(rng, width, h, (width, h))), Parameter(np.zeros(h))))
        width = h
    T, K = config.num_hypotheses, config.head_width
    # one Glorot draw per hypothesis group so T does not change the per-head scale
    W = np.concatenate([_glorot(rng, width, K, (width, K)) for _ in range(T)], axis=1)
    head = (Parameter(W), Parameter(np.zeros(T * K)))
    return TranslationNet(config, trunk, head)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    mask: np.ndarray | None
    head_input: np.ndarray
    raw: np.ndarray


def _split(config: ModelConfig, raw: np.ndarray) -> HypothesisSet:
    D, A, O = config.input_dim, config.num_actions, config.num_objects
    o = np.cumsum([0, D, D, A, O, 1, 1])
    return HypothesisSet(
        median=raw[..., o[0] : o[1]],
        logscale=np.clip(raw[..., o[1] : o[2]], -LOG_CLAMP, LOG_CLAMP),
        action_logits=raw[..., o[2] : o[3]],
        object_logits=raw[..., o[3] : o[4]],
        action_log_sigma=np.clip(raw[..., o[4]], -LOG_CLAMP, LOG_CLAMP),
        object_log_sigma=np.clip(raw[..., o[5]], -LOG_CLAMP, LOG_CLAMP),
    )


def forward_with_cache(
    model: TranslationNet,
    features: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[HypothesisSet, ForwardCache]:
    cfg = model.config
    x = np.asarray(features, dtype=DTYPE)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeError(f"expected features of length {cfg.input_dim}, got shape {np.shape(features)}")
    inputs, pre = [], []
    h = x
    for W, b in model.trunk:
        inputs.append(h)
        z = affine_forward(h, W, b)
        pre.append(z)
        h = relu_forward(z)
    mask = None
    if train_mode and model.trunk and cfg.dropout > 0.0:
        if rng is None:
            raise ValueError("train_mode forward needs an rng for dropout")
        mask = dropout_mask(rng, h.shape, cfg.dropout)
        h = h * mask
    raw = affine_forward(h, *model.head).reshape(x.shape[0], cfg.num_hypotheses, cfg.head_width)
    return _split(cfg, raw), ForwardCache(inputs, pre, mask, h, raw)


def forward(
    model: TranslationNet,
    features: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> HypothesisSet:
    """Run the network on one feature vector (D,) or a batch (N, D)."""
    return forward_with_cache(model, features, train_mode, rng)[0]


def backward(model: TranslationNet, cache: ForwardCache, grads: HypothesisSet) -> np.ndarray:
    """Accumulate parameter gradients from output gradients; returns d(loss)/d(input)."""
    cfg = model.config
    raw = cache.raw
    g = np.concatenate(
        [
            grads.median,
            grads.logscale,
            grads.action_logits,
            grads.object_logits,
            grads.action_log_sigma[..., None],
            grads.object_log_sigma[..., None],
        ],
        axis=-1,
    )
    D, A, O = cfg.input_dim, cfg.num_actions, cfg.num_objects
    clamped = np.zeros(cfg.head_width, dtype=bool)
    clamped[D : 2 * D] = True
    clamped[2 * D + A + O :] = True
    outside = clamped & ((raw < -LOG_CLAMP) | (raw > LOG_CLAMP))
    g = np.where(outside, 0.0, g)
    g = g.reshape(raw.shape[0], -1)
    dh = affine_backward(g, cache.head_input, *model.head)
    if cache.mask is not None:
        dh = dh * cache.mask
    for (W, b), x_in, z in zip(reversed(model.trunk), reversed(cache.inputs), reversed(cache.pre)):
        dz = relu_backward(dh, z)
        dh = affine_backward(dz, x_in, W, b)
    return dh


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def serialize(model: TranslationNet, path) -> None:
    meta = json.dumps({"config": asdict(model.config), "metadata": model.metadata}, sort_keys=True).encode("utf-8")
    chunks = [MODEL_MAGIC, struct.pack("<I", len(meta)), meta]
    params = model.named_parameters()
    chunks.append(struct.pack("<I", len(params)))
    for name, p in params:
        nb = name.encode("ascii")
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", p.value.ndim))
        chunks.append(struct.pack(f"<{p.value.ndim}Q", *p.value.shape))
    for _, p in params:
        chunks.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError(f"truncated model file (need {n} bytes at offset {self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(path) -> TranslationNet:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model {path}: {exc}") from exc
    r = _Reader(buf)
    if r.take(len(MODEL_MAGIC)) != MODEL_MAGIC:
        raise ModelFormatError("bad magic, not a PFMODEL1 file")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
        config = ModelConfig(**meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"bad model header: {exc}") from exc
    (count,) = r.unpack("<I")
    table = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("ascii", errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        table.append((name, shape))
    # reference layout from the config; the file must match it exactly
    ref = init_model(config, np.random.default_rng(0))
    expected = [(n, p.value.shape) for n, p in ref.named_parameters()]
    if [(n, tuple(s)) for n, s in table] != expected:
        raise ModelFormatError("parameter shape table does not match the model config")
    values = []
    for _, shape in table:
        n = int(np.prod(shape)) if shape else 1
        values.append(np.frombuffer(r.take(8 * n), dtype="<f8").astype(DTYPE).reshape(shape))
    if r.pos != len(buf):
        raise ModelFormatError(f"{len(buf) - r.pos} trailing bytes after parameters")
    for (_, p), v in zip(ref.named_parameters(), values):
        p.value = v
        p.grad = np.zeros_like(v)
    ref.metadata = meta.get("metadata", {})
    return ref
