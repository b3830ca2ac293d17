"""One-pass streaming test-time training loop and open-world metrics.

Per batch: build positive pairs, score outliers, refresh the threshold, assign
pseudo-labels, record predictions with the current parameters, then take one
SGD step on the composite loss.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import encoder
from .augment import make_pairs
from .encoder import EncoderParams, PretrainOutput
from .errors import DimensionMismatch, EmptyBatch, FormatError, NonFiniteLoss, UndefinedMetric
from .losses import BatchLossState, LossWeights, composite_loss
from .numerics import GaussianStats, l2_normalize_rows
from .prototypes import OutlierTracker, PrototypeBank, assign

log = logging.getLogger(__name__)

FEATURE_DUMP_MAGIC = b"OWFD"


@dataclass(frozen=True)
class AdaptConfig:
    gamma1: float = 0.8
    gamma2: float = 0.4
    alpha1: float = 1.0
    alpha2: float = 2.0
    delta: float = 0.1
    lr: float = 0.001
    batch_size: int = 256
    queue_capacity: int = 100
    window: int = 512
    beta: float = 0.99
    alpha1_decayed: float = 0.1
    alpha1_switch_batch: int = 20
    use_ps: bool = True
    use_cs: bool = True
    seed: int = 1337

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        self.weights_for(1)  # validates the loss hyperparameters

    def alpha1_at(self, batch: int) -> float:
        """Pair-loss weight for the 1-based ``batch``; decays after the switch batch."""
        return self.alpha1 if batch <= self.alpha1_switch_batch else self.alpha1_decayed

    def weights_for(self, batch: int) -> LossWeights:
        return LossWeights(self.gamma1, self.gamma2, self.alpha1_at(batch), self.alpha2, self.delta)

    def to_dict(self) -> dict:
        return asdict(self)


def harmonic_accuracy(acc_s: float, acc_n: float) -> float:
    if acc_s + acc_n == 0:
        return 0.0
    return 2.0 * acc_s * acc_n / (acc_s + acc_n)


@dataclass
class MetricsAccumulator:
    correct_weak: int = 0
    total_weak: int = 0
    rejected_strong: int = 0
    total_strong: int = 0

    def update(self, predicted: Iterable[int], truth: Iterable[int], num_source: int) -> None:
        for p, y in zip(predicted, truth):
            if y <= num_source:
                self.total_weak += 1
                self.correct_weak += int(p == y)
            else:
                self.total_strong += 1
                self.rejected_strong += int(p > num_source)

    @property
    def seen(self) -> int:
        return self.total_weak + self.total_strong


def metrics(acc: MetricsAccumulator) -> tuple[float, float, float]:
    """``(Acc_S, Acc_N, Acc_H)`` as fractions."""
    if acc.total_weak == 0 or acc.total_strong == 0:
        raise UndefinedMetric(f"need weak and strong samples (saw {acc.total_weak} weak, "
                              f"{acc.total_strong} strong)")
    s = acc.correct_weak / acc.total_weak
    n = acc.rejected_strong / acc.total_strong
    return s, n, harmonic_accuracy(s, n)


def metrics_or_none(acc: MetricsAccumulator) -> tuple:
    s = acc.correct_weak / acc.total_weak if acc.total_weak else None
    n = acc.rejected_strong / acc.total_strong if acc.total_strong else None
    h = harmonic_accuracy(s, n) if s is not None and n is not None else None
    return s, n, h


@dataclass
class BatchResult:
    batch: int
    indices: list
    labels: list
    predictions: list
    os: list
    os_hat: list
    losses: dict
    tau_star: float | None
    queue_len: int
    acc_s: float | None
    acc_n: float | None
    acc_h: float | None
    alpha1: float
    pair_cosine: float
    num_source_classes: int

    def to_json(self) -> dict:
        return {
            "batch": self.batch,
            "losses": self.losses,
            "tau_star": self.tau_star,
            "queue_len": self.queue_len,
            "acc_s": self.acc_s,
            "acc_n": self.acc_n,
            "acc_h": self.acc_h,
            "alpha1": self.alpha1,
            "pair_cosine": self.pair_cosine,
            "num_source_classes": self.num_source_classes,
            "samples": {
                "index": self.indices,
                "label": self.labels,
                "pred": self.predictions,
                "os": self.os,
                "os_hat": self.os_hat,
            },
        }


class Session:
    """Mutable state of one adaptation run. Strictly sequential."""

    def __init__(self, pretrained: PretrainOutput, config: AdaptConfig, stream_size: int | None = None,
                 keep_features: bool = False):
        self.config = config
        self.params: EncoderParams = pretrained.params.copy()
        self.bank = PrototypeBank(pretrained.prototypes, config.queue_capacity)
        self.tracker = OutlierTracker(config.window)
        self.source_stats: GaussianStats = pretrained.source_stats
        self.target_stats: GaussianStats = pretrained.source_stats
        self.rng = np.random.default_rng(config.seed)
        self.acc = MetricsAccumulator()
        self.batches_done = 0
        self.consumed = np.zeros(stream_size, dtype=bool) if stream_size is not None else None
        self.keep_features = keep_features
        self.feature_rows: list[np.ndarray] = []

    @property
    def num_source(self) -> int:
        return self.bank.num_source

    def _mark_consumed(self, indices: np.ndarray) -> None:
        if self.consumed is None:
            return
        if np.any(self.consumed[indices]):
            raise AssertionError("one-pass violation: record consumed twice")
        self.consumed[indices] = True


def adapt_batch(session: Session, images, labels=None, indices=None) -> BatchResult:
    """Predict then adapt on one batch. ``labels`` are used for metrics only."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0] if images.ndim >= 2 else 0
    if n == 0:
        raise EmptyBatch("adapt_batch needs at least one sample")
    if indices is None:
        indices = np.arange(session.acc.seen, session.acc.seen + n)
    indices = np.asarray(indices, dtype=np.int64)
    session._mark_consumed(indices)
    cfg = session.config
    batch_no = session.batches_done + 1
    m = session.num_source

    view_a, view_b = make_pairs(images, session.rng)
    cache = encoder.forward_batch(session.params, np.concatenate([view_a, view_b]))
    fa, fb = cache.features[:n], cache.features[n:]
    ua, _ = l2_normalize_rows(fa)
    ub, _ = l2_normalize_rows(fb)
    pair_cos = float(np.mean(np.einsum("ij,ij->i", ua, ub)))

    sims = np.clip(ua @ session.bank.source.T, -1.0, 1.0)
    os_scores = 1.0 - sims.max(axis=1)
    tau = session.tracker.update(np.clip(os_scores, 0.0, 1.0))

    pseudo = []
    os_hat = np.empty(n)
    for i in range(n):
        near = session.bank.nearest_strong(fa[i])
        os_hat[i] = os_scores[i] if near is None else min(os_scores[i], 1.0 - near[1])
        pseudo.append(assign(fa[i], session.bank, tau))
    preds = [p.target_label(m) for p in pseudo]
    truth = [int(y) for y in labels] if labels is not None else [0] * n
    if labels is not None:
        session.acc.update(preds, truth, m)
    if session.keep_features:
        session.feature_rows.append(np.column_stack([fa, preds, truth]))

    weak_idx = np.array([i for i, p in enumerate(pseudo) if not p.is_strong], dtype=np.int64)
    weak_labels = np.array([pseudo[i].index for i in weak_idx], dtype=np.int64)
    position = {s: k for k, s in enumerate(session.bank.strong_serials)}
    strong_rows = [(i, position[p.serial]) for i, p in enumerate(pseudo) if p.is_strong and p.serial in position]
    state = BatchLossState(
        weak_idx=weak_idx,
        weak_labels=weak_labels,
        strong_idx=np.array([i for i, _ in strong_rows], dtype=np.int64),
        strong_labels=np.array([k for _, k in strong_rows], dtype=np.int64),
        source_prototypes=session.bank.source,
        strong_prototypes=session.bank.strong,
        source_stats=session.source_stats,
        target_stats=session.target_stats,
        beta=cfg.beta,
    )
    weights = cfg.weights_for(batch_no)
    terms, ga, gb, new_target = composite_loss(fa, fb, state, weights, cfg.use_ps, cfg.use_cs)
    total = terms.total
    if not np.isfinite(total):
        raise NonFiniteLoss(f"batch {batch_no}: non-finite loss {terms.as_dict()}")
    if cfg.use_ps or cfg.use_cs:
        grads = encoder.backward(session.params, cache, np.concatenate([ga, gb]))
        session.params = encoder.sgd_step(session.params, grads, cfg.lr)
        session.params.validate()
    if cfg.use_cs:
        session.target_stats = new_target

    session.batches_done = batch_no
    s, nr, h = metrics_or_none(session.acc)
    return BatchResult(
        batch=batch_no,
        indices=indices.tolist(),
        labels=truth,
        predictions=preds,
        os=os_scores.tolist(),
        os_hat=os_hat.tolist(),
        losses=terms.as_dict(),
        tau_star=tau,
        queue_len=len(session.bank),
        acc_s=s,
        acc_n=nr,
        acc_h=h,
        alpha1=weights.alpha1,
        pair_cosine=pair_cos,
        num_source_classes=m,
    )


@dataclass
class RunReport:
    batches: list = field(default_factory=list)
    acc_s: float | None = None
    acc_n: float | None = None
    acc_h: float | None = None
    metrics_defined: bool = False
    samples: int = 0
    params: EncoderParams | None = None
    bank: PrototypeBank | None = None
    tau_history: list = field(default_factory=list)
    features: np.ndarray | None = None

    def summary(self) -> dict:
        return {
            "acc_s": self.acc_s,
            "acc_n": self.acc_n,
            "acc_h": self.acc_h,
            "metrics_defined": self.metrics_defined,
            "samples": self.samples,
            "batches": len(self.batches),
            "final_queue_len": len(self.bank) if self.bank is not None else 0,
            "final_tau_star": self.tau_history[-1] if self.tau_history else None,
        }


def run_one_pass(pretrained: PretrainOutput, stream, config: AdaptConfig,
                 on_batch: Callable[[BatchResult], None] | None = None,
                 keep_features: bool = False) -> RunReport:
    """Stream ``stream`` (a Dataset) once, in order, in batches of ``config.batch_size``."""
    total = len(stream.labels)
    if total and stream.images[0].size != pretrained.params.input_dim:
        raise DimensionMismatch(f"stream images have {stream.images[0].size} pixels, "
                                f"encoder expects {pretrained.params.input_dim}")
    session = Session(pretrained, config, stream_size=total, keep_features=keep_features)
    report = RunReport()
    for start in range(0, total, config.batch_size):
        idx = np.arange(start, min(start + config.batch_size, total))
        result = adapt_batch(session, stream.images[idx], stream.labels[idx], idx)
        report.batches.append(result)
        if on_batch is not None:
            on_batch(result)
        log.debug("batch %d acc_h=%s tau=%s queue=%d", result.batch, result.acc_h, result.tau_star,
                  result.queue_len)
    if session.consumed is not None and not session.consumed.all():
        raise AssertionError("one-pass violation: some records were never consumed")
    report.samples = session.acc.seen
    report.acc_s, report.acc_n, report.acc_h = metrics_or_none(session.acc)
    report.metrics_defined = report.acc_h is not None
    report.params = session.params
    report.bank = session.bank
    report.tau_history = list(session.tracker.history)
    if keep_features and session.feature_rows:
        report.features = np.vstack(session.feature_rows)
    return report


def write_results_line(fh, result: BatchResult) -> None:
    fh.write(json.dumps(result.to_json(), separators=(",", ":")) + "\n")
    fh.flush()


def write_feature_dump(path, features: np.ndarray, feature_dim: int) -> None:
    """f32 records: ``feature_dim`` features, predicted label, true label."""
    rows = np.asarray(features, dtype="<f4").reshape(-1, feature_dim + 2)
    header = FEATURE_DUMP_MAGIC + struct.pack("<III", 1, rows.shape[0], feature_dim)
    Path(path).write_bytes(header + rows.tobytes())


def read_feature_dump(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_DUMP_MAGIC:
        raise FormatError(f"{path}: not a feature dump")
    _, count, d = struct.unpack_from("<III", data, 4)
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(count, d + 2).astype(np.float64)
