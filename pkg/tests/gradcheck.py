"""Finite-difference gradient checks for the adaptation losses, shared by several test files.

Each loss term is restated here as a function of raw view features
``(fa, fb) -> (value, d_fa, d_fb)`` and chained through the encoder, so the
check covers normalization, centre sharing and the parameter backward pass.
"""

from dataclasses import dataclass

import numpy as np

from owdcl.encoder import EncoderParams, backward, forward_batch, init_params
from owdcl.losses import (
    BatchLossState,
    LossWeights,
    batch_class_centers,
    composite_loss,
    kld_grad,
    nt_xent_clusters_grad,
    nt_xent_pairs_grad,
    prototype_nll_grad,
)
from owdcl.numerics import GaussianStats, l2_normalize_rows, l2_normalize_rows_backward

EPS = 1e-4
TOL = 1e-3
TERM_NAMES = ("ps", "nt", "pc_wea", "pc_str", "kld", "composite")


@dataclass
class GradConfig:
    params: EncoderParams
    xa: np.ndarray
    xb: np.ndarray
    state: BatchLossState
    weights: LossWeights


def random_config(seed: int) -> GradConfig:
    rng = np.random.default_rng([seed, 77])
    d_in, h, d, m = 6, 5, 4, 3
    n = int(rng.integers(4, 11))
    params = init_params(d_in, h, d, m, rng)
    xa = rng.uniform(size=(n, d_in))
    xb = np.clip(xa + rng.normal(0, 0.1, size=xa.shape), 0, 1)
    order = rng.permutation(n)
    n_weak = int(rng.integers(2, n - 1))
    weak_idx = np.sort(order[:n_weak])
    strong_idx = np.sort(order[n_weak:])
    labels = rng.integers(1, m + 1, size=n_weak)
    labels[:2] = rng.choice(np.arange(1, m + 1), size=2, replace=False)  # at least two classes
    source = rng.normal(size=(m, d))
    source /= np.linalg.norm(source, axis=1, keepdims=True)
    strong = rng.normal(size=(2, d))
    strong /= np.linalg.norm(strong, axis=1, keepdims=True)
    state = BatchLossState(
        weak_idx=weak_idx,
        weak_labels=labels,
        strong_idx=strong_idx,
        strong_labels=rng.integers(0, 2, size=len(strong_idx)),
        source_prototypes=source,
        strong_prototypes=strong,
        source_stats=GaussianStats(rng.normal(0, 0.3, d), rng.uniform(0.05, 0.5, d)),
        target_stats=GaussianStats(rng.normal(0, 0.3, d), rng.uniform(0.05, 0.5, d)),
        beta=float(rng.uniform(0.5, 0.95)),
    )
    weights = LossWeights(gamma1=float(rng.uniform(0.3, 1.0)), gamma2=float(rng.uniform(0.3, 1.0)),
                          alpha1=float(rng.uniform(0.5, 2.0)), alpha2=float(rng.uniform(0.5, 2.0)),
                          delta=float(rng.uniform(0.1, 0.5)))
    return GradConfig(params, xa, xb, state, weights)


def term_ps(fa, fb, st, w):
    va, na = l2_normalize_rows(fa)
    vb, nb = l2_normalize_rows(fb)
    value, dva, dvb = nt_xent_pairs_grad(va, vb, w.gamma1, w.alpha1)
    return value, l2_normalize_rows_backward(va, na, dva), l2_normalize_rows_backward(vb, nb, dvb)


def term_nt(fa, fb, st, w):
    wi = st.weak_idx
    centers = batch_class_centers(fa[wi], fb[wi], st.weak_labels)
    value, dc = nt_xent_clusters_grad(centers, st.source_prototypes, w.gamma2, w.alpha2)
    ga, gb = np.zeros_like(fa), np.zeros_like(fb)
    for row, idx in enumerate(centers.members):
        ga[wi[idx]] += dc[row] / (2 * len(idx))
        gb[wi[idx]] += dc[row] / (2 * len(idx))
    return value, ga, gb


def _pc(fa, fb, rows, bank, labels, delta):
    va, na = l2_normalize_rows(fa)
    value, du = prototype_nll_grad(va[rows], bank, labels, delta)
    gva = np.zeros_like(va)
    gva[rows] = du
    return value, l2_normalize_rows_backward(va, na, gva), np.zeros_like(fb)


def term_pc_wea(fa, fb, st, w):
    return _pc(fa, fb, st.weak_idx, st.source_prototypes, st.weak_labels - 1, w.delta)


def term_pc_str(fa, fb, st, w):
    bank = np.vstack([st.source_prototypes, st.strong_prototypes])
    m = st.source_prototypes.shape[0]
    return _pc(fa, fb, st.strong_idx, bank, st.strong_labels + m, w.delta)


def term_kld(fa, fb, st, w):
    value, dw, _ = kld_grad(st.source_stats, st.target_stats, fa[st.weak_idx], st.beta)
    ga = np.zeros_like(fa)
    ga[st.weak_idx] = dw
    return value, ga, np.zeros_like(fb)


def term_composite(fa, fb, st, w):
    terms, ga, gb, _ = composite_loss(fa, fb, st, w, True, True)
    return terms.total, ga, gb


TERMS = {"ps": term_ps, "nt": term_nt, "pc_wea": term_pc_wea, "pc_str": term_pc_str, "kld": term_kld,
         "composite": term_composite}


def _loss(params, cfg, term):
    n = len(cfg.xa)
    feats = forward_batch(params, np.vstack([cfg.xa, cfg.xb])).features
    return TERMS[term](feats[:n], feats[n:], cfg.state, cfg.weights)


def analytic_grads(cfg: GradConfig, term: str):
    n = len(cfg.xa)
    cache = forward_batch(cfg.params, np.vstack([cfg.xa, cfg.xb]))
    _, ga, gb = TERMS[term](cache.features[:n], cache.features[n:], cfg.state, cfg.weights)
    return backward(cfg.params, cache, np.vstack([ga, gb]))


def max_relative_error(cfg: GradConfig, term: str, eps: float = EPS) -> float:
    """Worst ``|analytic - numeric| / (|analytic| + 1e-6)`` over every encoder parameter."""
    grads = analytic_grads(cfg, term)
    params = cfg.params.copy()
    worst = 0.0
    for name in ("w1", "b1", "w2", "b2"):
        t = getattr(params, name)
        g = getattr(grads, name)
        for idx in np.ndindex(t.shape):
            orig = t[idx]
            t[idx] = orig + eps
            fp = _loss(params, cfg, term)[0]
            t[idx] = orig - eps
            fm = _loss(params, cfg, term)[0]
            t[idx] = orig
            numeric = (fp - fm) / (2 * eps)
            worst = max(worst, abs(g[idx] - numeric) / (abs(g[idx]) + 1e-6))
    return worst
