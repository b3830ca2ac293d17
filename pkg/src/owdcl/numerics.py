"""Vector arithmetic, normalization, cosine similarity and diagonal Gaussians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVariance, DimensionMismatch, EmptyBatch, ZeroVector

EPSILON_NORM = 1e-12
VARIANCE_FLOOR = 1e-6


def as_feature(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D feature vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature vector has non-finite entries")
    return arr


def check_same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"length {a.shape[-1]} vs {b.shape[-1]}")


def l2_normalize(v) -> np.ndarray:
    v = as_feature(v)
    norm = float(np.sqrt(np.dot(v, v)))
    if norm <= EPSILON_NORM:
        raise ZeroVector("cannot normalize a vector with L2 norm <= %g" % EPSILON_NORM)
    return v / norm


def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize each row; returns ``(unit_rows, norms)`` for use in backprop."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(norms <= EPSILON_NORM):
        raise ZeroVector("row with L2 norm <= %g" % EPSILON_NORM)
    return x / norms[:, None], norms


def l2_normalize_rows_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. normalized rows back to the raw rows."""
    radial = np.einsum("ij,ij->i", unit, grad_unit)
    return (grad_unit - unit * radial[:, None]) / norms[:, None]


def cosine_sim(a, b) -> float:
    a = as_feature(a)
    b = as_feature(b)
    check_same_length(a, b)
    na = float(np.sqrt(np.dot(a, a)))
    nb = float(np.sqrt(np.dot(b, b)))
    if na <= EPSILON_NORM or nb <= EPSILON_NORM:
        raise ZeroVector("cosine similarity of a zero vector")
    # a/na . b/nb; the product is commutative so the result is exactly symmetric
    s = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, s))


@dataclass(frozen=True)
class GaussianStats:
    """Diagonal Gaussian: per-coordinate mean and variance."""

    mean: np.ndarray
    variance: np.ndarray
    count: int = 0

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.variance, dtype=np.float64)
        if mean.shape != var.shape or mean.ndim != 1:
            raise DimensionMismatch(f"mean {mean.shape} vs variance {var.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "variance": self.variance.tolist(), "count": self.count}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["variance"], dtype=np.float64), int(d.get("count", 0)))


def gaussian_from_features(features, floor: float = VARIANCE_FLOOR) -> GaussianStats:
    """Population mean/variance of a set of feature rows, variance floored."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyBatch("need at least one feature row")
    mean = x.mean(axis=0)
    var = np.maximum(((x - mean) ** 2).mean(axis=0), floor)
    return GaussianStats(mean, var, x.shape[0])


def _check_kl_inputs(p: GaussianStats, q: GaussianStats, floor: float) -> None:
    if p.dim != q.dim:
        raise DimensionMismatch(f"KL between {p.dim}-d and {q.dim}-d Gaussians")
    # tolerate values that were floored in float32 storage
    lim = floor * (1 - 1e-6)
    if np.any(p.variance < lim) or np.any(q.variance < lim):
        raise DegenerateVariance("variance below floor %g" % floor)


def kl_diag_gaussian(p: GaussianStats, q: GaussianStats, floor: float = VARIANCE_FLOOR) -> float:
    """KL(p || q) for diagonal Gaussians."""
    _check_kl_inputs(p, q, floor)
    vp, vq = p.variance, q.variance
    diff = p.mean - q.mean
    terms = 0.5 * (np.log(vq / vp) + (vp + diff * diff) / vq - 1.0)
    return max(0.0, float(terms.sum()))


def kl_diag_gaussian_grad_q(p: GaussianStats, q: GaussianStats) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of KL(p || q) with respect to q's mean and variance."""
    vp, vq = p.variance, q.variance
    diff = q.mean - p.mean
    d_mean = diff / vq
    d_var = 0.5 * (1.0 / vq - (vp + diff * diff) / (vq * vq))
    return d_mean, d_var


def ema_update_gaussian(current: GaussianStats, batch_features, beta: float,
                        floor: float = VARIANCE_FLOOR) -> GaussianStats:
    """Momentum update of ``current`` toward the batch's population statistics."""
    x = np.asarray(batch_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyBatch("EMA update needs a non-empty batch")
    if x.shape[1] != current.dim:
        raise DimensionMismatch(f"batch features are {x.shape[1]}-d, stats are {current.dim}-d")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if beta == 1.0:
        return current
    bmean = x.mean(axis=0)
    bvar = ((x - bmean) ** 2).mean(axis=0)
    mean = beta * current.mean + (1.0 - beta) * bmean
    var = np.maximum(beta * current.variance + (1.0 - beta) * bvar, floor)
    return GaussianStats(mean, var, current.count + x.shape[0])
