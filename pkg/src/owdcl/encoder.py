"""Two-layer tanh feature extractor with a linear head, trained by hand-written backprop.

Layout: ``x (d_in) -> tanh(x W1 + b1) (hidden) -> h W2 + b2 (feature) -> f H (logits)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, FormatError, InsufficientClassSamples, NonFiniteLoss
from .numerics import GaussianStats, gaussian_from_features, l2_normalize_rows

CHECKPOINT_MAGIC = b"OWCK"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderParams:
    w1: np.ndarray  # (d_in, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, feature_dim)
    b2: np.ndarray  # (feature_dim,)
    head: np.ndarray  # (feature_dim, num_classes)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w2.shape[1]

    @property
    def num_classes(self) -> int:
        return self.head.shape[1]

    def tensors(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    def copy(self) -> "EncoderParams":
        return type(self)(*(t.copy() for t in self.tensors()))

    def equals(self, other: "EncoderParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.tensors(), other.tensors()))

    def validate(self) -> None:
        h = self.w1.shape[1]
        d = self.w2.shape[1]
        if self.b1.shape != (h,) or self.w2.shape[0] != h or self.b2.shape != (d,) or self.head.shape[0] != d:
            raise DimensionMismatch("inconsistent encoder parameter shapes")
        for t in self.tensors():
            if not np.all(np.isfinite(t)):
                raise NonFiniteLoss("encoder parameters contain non-finite values")


class GradientSet(EncoderParams):
    """Gradients, one array per parameter tensor."""

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "GradientSet":
        return cls(*(np.zeros_like(t) for t in params.tensors()))

    def scaled(self, c: float) -> "GradientSet":
        return GradientSet(*(c * t for t in self.tensors()))

    def __add__(self, other: EncoderParams) -> "GradientSet":
        return GradientSet(*(a + b for a, b in zip(self.tensors(), other.tensors())))


def init_params(input_dim: int, hidden: int, feature_dim: int, num_classes: int,
                rng: np.random.Generator) -> EncoderParams:
    def uni(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return EncoderParams(
        w1=uni(input_dim, (input_dim, hidden)),
        b1=uni(input_dim, (hidden,)),
        w2=uni(hidden, (hidden, feature_dim)),
        b2=uni(hidden, (feature_dim,)),
        head=uni(feature_dim, (feature_dim, num_classes)),
    )


@dataclass
class ForwardCache:
    x: np.ndarray
    hidden: np.ndarray
    features: np.ndarray


def _as_batch(params: EncoderParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(x.shape[0], -1) if x.ndim > 2 else x
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionMismatch(f"input has {x.shape[-1] if x.ndim else 0} values per sample, "
                                f"encoder expects {params.input_dim}")
    return x


def forward_batch(params: EncoderParams, x) -> ForwardCache:
    """Features for a batch of flattened inputs, keeping activations for backprop."""
    x = _as_batch(params, x)
    hidden = np.tanh(x @ params.w1 + params.b1)
    features = hidden @ params.w2 + params.b2
    return ForwardCache(x, hidden, features)


def forward(params: EncoderParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return forward_batch(params, x).features[0]


def forward_logits(params: EncoderParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.size == params.input_dim
    xb = x.reshape(1, -1) if single else x
    logits = forward_batch(params, xb).features @ params.head
    return logits[0] if single else logits


def backward(params: EncoderParams, cache: ForwardCache, grad_features: np.ndarray,
             grad_head: np.ndarray | None = None) -> GradientSet:
    """Reverse-mode pass from d(loss)/d(features) to parameter gradients."""
    grad_features = np.asarray(grad_features, dtype=np.float64)
    if grad_features.shape != cache.features.shape:
        raise DimensionMismatch("feature gradient shape does not match the forward batch")
    gw2 = cache.hidden.T @ grad_features
    gb2 = grad_features.sum(axis=0)
    gpre = (grad_features @ params.w2.T) * (1.0 - cache.hidden ** 2)
    gw1 = cache.x.T @ gpre
    gb1 = gpre.sum(axis=0)
    ghead = np.zeros_like(params.head) if grad_head is None else grad_head
    return GradientSet(gw1, gb1, gw2, gb2, ghead)


def sgd_step(params: EncoderParams, grads: EncoderParams, lr: float) -> EncoderParams:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if lr == 0:
        return params.copy()
    return EncoderParams(*(p - lr * g for p, g in zip(params.tensors(), grads.tensors())))


def cross_entropy(params: EncoderParams, x, labels: np.ndarray) -> tuple[float, GradientSet]:
    """Mean softmax cross-entropy of the head logits; ``labels`` are 0-based."""
    cache = forward_batch(params, x)
    logits = cache.features @ params.head
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    if not np.isfinite(loss):
        raise NonFiniteLoss("cross-entropy diverged during pretraining")
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    ghead = cache.features.T @ dlogits
    return loss, backward(params, cache, dlogits @ params.head.T, ghead)


@dataclass
class PretrainConfig:
    hidden: int = 64
    feature_dim: int = 32
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 1337


@dataclass
class PretrainOutput:
    params: EncoderParams
    prototypes: np.ndarray  # (m, feature_dim), unit rows
    source_stats: GaussianStats
    train_accuracy: float
    loss_history: list


def class_prototypes(features: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class mean feature, L2-normalized. ``labels`` are 1-based."""
    means = np.stack([features[labels == k].mean(axis=0) for k in range(1, num_classes + 1)])
    unit, _ = l2_normalize_rows(means)
    return unit


def pretrain(images, labels, num_classes: int, config: PretrainConfig | None = None) -> PretrainOutput:
    """Supervised source training, then source prototypes and feature statistics.

    ``labels`` are 1-based class ids in ``1..num_classes``. Final parameters are
    rounded to float32 so that they survive a checkpoint round-trip bit-exactly.
    """
    config = config or PretrainConfig()
    labels = np.asarray(labels, dtype=np.int64)
    x = np.asarray(images, dtype=np.float64).reshape(len(labels), -1)
    if num_classes < 1:
        raise InsufficientClassSamples("need at least one class")
    counts = np.bincount(labels, minlength=num_classes + 1)
    if labels.min() < 1 or labels.max() > num_classes:
        raise InsufficientClassSamples(f"labels must lie in 1..{num_classes}")
    for k in range(1, num_classes + 1):
        if counts[k] < 2:
            raise InsufficientClassSamples(f"class {k} has {counts[k]} samples, need >= 2")

    rng = np.random.default_rng(config.seed)
    params = init_params(x.shape[1], config.hidden, config.feature_dim, num_classes, rng)
    target = labels - 1
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        epoch_loss = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = cross_entropy(params, x[idx], target[idx])
            params = sgd_step(params, grads, config.lr)
            epoch_loss += loss * len(idx)
        history.append(epoch_loss / len(x))

    params = EncoderParams(*(t.astype(np.float32).astype(np.float64) for t in params.tensors()))
    features = forward_batch(params, x).features
    acc = float(np.mean(np.argmax(features @ params.head, axis=1) == target))
    return PretrainOutput(
        params=params,
        prototypes=class_prototypes(features, labels, num_classes),
        source_stats=gaussian_from_features(features),
        train_accuracy=acc,
        loss_history=history,
    )


def write_checkpoint(path, params: EncoderParams) -> None:
    """Little-endian: magic, u32 version, u32 layer count, then (u32 rows, u32 cols, f32 data) per layer."""
    tensors = params.tensors()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for t in tensors:
        mat = t.reshape(1, -1) if t.ndim == 1 else t
        out.append(struct.pack("<II", *mat.shape))
        out.append(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def read_checkpoint(path) -> EncoderParams:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (expected magic {CHECKPOINT_MAGIC.decode()!r})")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if count != 5:
        raise FormatError(f"{path}: expected 5 layers, found {count}")
    offset = 12
    tensors = []
    for _ in range(count):
        if offset + 8 > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        rows, cols = struct.unpack_from("<II", data, offset)
        offset += 8
        nbytes = 4 * rows * cols
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        mat = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols)
        offset += nbytes
        tensors.append(mat.astype(np.float64))
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes after last layer")
    w1, b1, w2, b2, head = tensors
    params = EncoderParams(w1, b1.reshape(-1), w2, b2.reshape(-1), head)
    params.validate()
    return params
