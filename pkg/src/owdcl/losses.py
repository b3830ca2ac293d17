"""Training objectives for the adaptation phase, each with its analytic gradient.

Loss terms work on feature matrices (one row per sample). Functions suffixed
``_grad`` return ``(value, gradients...)``; the plain forms return the value only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatch, EmptyCenters, EmptyPrototypeBank, LabelNotInBank, NonUnitNorm
from .numerics import (
    GaussianStats,
    VARIANCE_FLOOR,
    kl_diag_gaussian,
    kl_diag_gaussian_grad_q,
    l2_normalize,
    l2_normalize_rows,
    l2_normalize_rows_backward,
)

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class LossWeights:
    gamma1: float = 0.8  # pair temperature
    gamma2: float = 0.4  # cluster temperature
    alpha1: float = 1.0
    alpha2: float = 2.0
    delta: float = 0.1  # prototype softmax temperature

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "delta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number, got {v}")
        for name in ("alpha1", "alpha2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be non-negative, got {v}")


def _check_unit(x: np.ndarray, what: str) -> None:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise NonUnitNorm(f"{what} rows must be unit-norm")


def _logsumexp(s: np.ndarray, axis: int) -> np.ndarray:
    m = s.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(s - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _softmax(s: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _symmetric_nt_xent(a: np.ndarray, b: np.ndarray, temperature: float):
    """Sum over rows and columns of the diagonal cross-entropy of ``a b^T / t``.

    Row i anchors ``a_i`` against every ``b_k``; column j anchors ``b_j`` against
    every ``a_k``. Positives sit on the diagonal.
    """
    s = (a @ b.T) / temperature
    diag = np.diag(s)
    value = float((_logsumexp(s, 1) - diag).sum() + (_logsumexp(s, 0) - diag).sum())
    ds = _softmax(s, 1) + _softmax(s, 0) - 2.0 * np.eye(s.shape[0])
    return value, ds @ b / temperature, ds.T @ a / temperature


def nt_xent_pairs_grad(v: np.ndarray, vp: np.ndarray, gamma1: float, alpha1: float):
    """Pair NT-XENT over unit features of both views; returns ``(loss, dv, dvp)``.

    Negatives are cross-view only; the two anchor directions are summed and the
    result is averaged over the ``B`` pairs, then scaled by ``alpha1``.
    """
    v = np.asarray(v, dtype=np.float64)
    vp = np.asarray(vp, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] == 0:
        raise EmptyBatch("pair loss needs at least one pair")
    if v.shape != vp.shape:
        raise ValueError("view feature matrices differ in shape")
    _check_unit(v, "view A")
    _check_unit(vp, "view B")
    n = v.shape[0]
    value, dv, dvp = _symmetric_nt_xent(v, vp, gamma1)
    c = alpha1 / n
    return c * value, c * dv, c * dvp


def nt_xent_pairs(v, vp, gamma1: float, alpha1: float) -> float:
    return nt_xent_pairs_grad(v, vp, gamma1, alpha1)[0]


def outlier_scores(unit_features: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """``1 - max_k cos(f_i, d_k)`` for unit feature rows and unit prototype rows."""
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.ndim != 2 or prototypes.shape[0] == 0:
        raise EmptyPrototypeBank("outlier score needs at least one prototype")
    sims = np.clip(unit_features @ prototypes.T, -1.0, 1.0)
    return 1.0 - sims.max(axis=1)


def outlier_score(f, source_prototypes) -> float:
    u = l2_normalize(f)
    return float(outlier_scores(u[None, :], source_prototypes)[0])


def expanded_outlier_score(f, source_prototypes, strong_prototypes) -> float:
    """Outlier score over the union of source and strong prototypes."""
    src = np.asarray(source_prototypes, dtype=np.float64).reshape(-1, np.shape(f)[0])
    strong = np.asarray(strong_prototypes, dtype=np.float64).reshape(-1, np.shape(f)[0])
    return outlier_score(f, np.vstack([src, strong]))


def prototype_nll_grad(unit_features: np.ndarray, bank: np.ndarray, labels: np.ndarray, delta: float):
    """Mean ``-log softmax(<d_k, f> / delta)[label]``; labels are 0-based rows of ``bank``.

    Returns ``(loss, d_unit_features)``.
    """
    unit_features = np.asarray(unit_features, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = unit_features.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(unit_features)
    if bank.ndim != 2 or bank.shape[0] == 0:
        raise EmptyPrototypeBank("prototype loss needs a non-empty bank")
    if labels.min() < 0 or labels.max() >= bank.shape[0]:
        raise LabelNotInBank(f"label outside bank of size {bank.shape[0]}")
    logits = unit_features @ bank.T / delta
    rows = np.arange(n)
    value = float((_logsumexp(logits, 1) - logits[rows, labels]).sum()) / n
    dlogits = _softmax(logits, 1)
    dlogits[rows, labels] -= 1.0
    return value, dlogits @ bank / (delta * n)


def prototype_nll(f, bank, label: int, delta: float) -> float:
    """Single-sample prototype NLL; ``f`` is normalized before scoring."""
    u = l2_normalize(f)
    return prototype_nll_grad(u[None, :], bank, np.array([label]), delta)[0]


@dataclass
class BatchCenters:
    classes: np.ndarray  # 1-based source class ids present in the batch
    centers: np.ndarray  # (len(classes), d) mean over both views
    members: list = field(default_factory=list)  # row indices per class

    def __len__(self) -> int:
        return len(self.classes)

    def as_dict(self) -> dict:
        return {int(k): c for k, c in zip(self.classes, self.centers)}


def batch_class_centers(features_a: np.ndarray, features_b: np.ndarray, labels: np.ndarray) -> BatchCenters:
    """Mean feature over both views of every pair carrying the same pseudo-label."""
    features_a = np.asarray(features_a, dtype=np.float64)
    features_b = np.asarray(features_b, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    d = features_a.shape[1] if features_a.ndim == 2 else 0
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == k) for k in classes]
    if len(classes) == 0:
        return BatchCenters(classes, np.zeros((0, d)), members)
    centers = np.stack([(features_a[idx].sum(0) + features_b[idx].sum(0)) / (2 * len(idx)) for idx in members])
    return BatchCenters(classes, centers, members)


def nt_xent_clusters_grad(centers: BatchCenters, source_prototypes: np.ndarray, gamma2: float, alpha2: float):
    """Cluster-to-prototype NT-XENT; returns ``(loss, d_centers)``.

    Positives pair each batch centre with its class prototype; negatives are the
    other classes present in the batch. Summed over classes and both directions.
    """
    if len(centers) == 0:
        raise EmptyCenters("no pseudo-labelled weak pairs in the batch")
    vc, norms = l2_normalize_rows(centers.centers)
    vs, _ = l2_normalize_rows(np.asarray(source_prototypes, dtype=np.float64)[centers.classes - 1])
    value, dvc, _ = _symmetric_nt_xent(vc, vs, gamma2)
    return alpha2 * value, alpha2 * l2_normalize_rows_backward(vc, norms, dvc)


def nt_xent_clusters(centers: BatchCenters, source_prototypes, gamma2: float, alpha2: float) -> float:
    return nt_xent_clusters_grad(centers, source_prototypes, gamma2, alpha2)[0]


def kld_grad(source: GaussianStats, previous_target: GaussianStats, weak_features: np.ndarray,
             beta: float, floor: float = VARIANCE_FLOOR):
    """``KL(source || target)`` where target is the momentum update with this batch.

    Returns ``(value, d_weak_features, updated_target)``. The previous target
    statistics are constants; gradient flows through the batch moments only.
    """
    weak_features = np.asarray(weak_features, dtype=np.float64)
    if weak_features.ndim != 2 or weak_features.shape[0] == 0:
        return kl_diag_gaussian(source, previous_target, floor), np.zeros_like(weak_features), previous_target
    n = weak_features.shape[0]
    bmean = weak_features.mean(axis=0)
    centered = weak_features - bmean
    bvar = (centered ** 2).mean(axis=0)
    raw_var = beta * previous_target.variance + (1.0 - beta) * bvar
    target = GaussianStats(beta * previous_target.mean + (1.0 - beta) * bmean,
                           np.maximum(raw_var, floor), previous_target.count + n)
    value = kl_diag_gaussian(source, target, floor)
    d_mean, d_var = kl_diag_gaussian_grad_q(source, target)
    d_var = np.where(raw_var > floor, d_var, 0.0)
    grad = (1.0 - beta) * (d_mean[None, :] / n + d_var[None, :] * 2.0 * centered / n)
    return value, grad, target


TERMS = ("ps", "nt", "pc_wea", "pc_str", "kld")


@dataclass
class TermBreakdown:
    ps: float = 0.0
    nt: float = 0.0
    pc_wea: float = 0.0
    pc_str: float = 0.0
    kld: float = 0.0

    def as_dict(self) -> dict:
        return {t: getattr(self, t) for t in TERMS}

    @property
    def total(self) -> float:
        # fixed summation order
        return self.ps + self.nt + self.pc_wea + self.pc_str + self.kld


@dataclass
class BatchLossState:
    """Everything the composite loss needs besides the encoder parameters.

    Pseudo-labels, prototype snapshots and the previous target statistics are
    held fixed while the loss is differentiated.
    """

    weak_idx: np.ndarray  # sample rows flagged weak
    weak_labels: np.ndarray  # 1-based source class per weak row
    strong_idx: np.ndarray
    strong_labels: np.ndarray  # 0-based index into strong_prototypes
    source_prototypes: np.ndarray
    strong_prototypes: np.ndarray
    source_stats: GaussianStats
    target_stats: GaussianStats
    beta: float = 0.99


def composite_loss(features_a: np.ndarray, features_b: np.ndarray, state: BatchLossState,
                   weights: LossWeights, use_ps: bool = True, use_cs: bool = True):
    """Total adaptation loss and its gradient w.r.t. both views' raw features.

    Returns ``(breakdown, d_features_a, d_features_b, updated_target_stats)``.
    Disabled terms contribute exactly zero.
    """
    features_a = np.asarray(features_a, dtype=np.float64)
    features_b = np.asarray(features_b, dtype=np.float64)
    ga = np.zeros_like(features_a)
    gb = np.zeros_like(features_b)
    terms = TermBreakdown()
    target = state.target_stats
    if not (use_ps or use_cs):
        return terms, ga, gb, target
    va, na = l2_normalize_rows(features_a)
    vb, nb = l2_normalize_rows(features_b)
    gva = np.zeros_like(va)
    gvb = np.zeros_like(vb)

    if use_ps:
        terms.ps, dva, dvb = nt_xent_pairs_grad(va, vb, weights.gamma1, weights.alpha1)
        gva += dva
        gvb += dvb

    if use_cs:
        m = state.source_prototypes.shape[0]
        wi = state.weak_idx
        if len(wi):
            centers = batch_class_centers(features_a[wi], features_b[wi], state.weak_labels)
            terms.nt, dc = nt_xent_clusters_grad(centers, state.source_prototypes, weights.gamma2, weights.alpha2)
            for row, idx in enumerate(centers.members):
                share = dc[row] / (2 * len(idx))
                ga[wi[idx]] += share
                gb[wi[idx]] += share
            terms.pc_wea, du = prototype_nll_grad(va[wi], state.source_prototypes, state.weak_labels - 1,
                                                  weights.delta)
            gva[wi] += du
        si = state.strong_idx
        if len(si):
            bank = np.vstack([state.source_prototypes, state.strong_prototypes])
            terms.pc_str, du = prototype_nll_grad(va[si], bank, state.strong_labels + m, weights.delta)
            gva[si] += du
        terms.kld, dw, target = kld_grad(state.source_stats, state.target_stats, features_a[wi], state.beta)
        if len(wi):
            ga[wi] += dw

    ga += l2_normalize_rows_backward(va, na, gva)
    gb += l2_normalize_rows_backward(vb, nb, gvb)
    return terms, ga, gb, target
