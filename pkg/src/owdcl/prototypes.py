"""Prototype bank, outlier-score threshold tracking and pseudo-label assignment."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyPrototypeBank
from .numerics import l2_normalize

GRID_STEPS = 100  # thresholds k / GRID_STEPS for k = 0..GRID_STEPS
DEFAULT_QUEUE_CAPACITY = 100
DEFAULT_WINDOW = 512


class PrototypeBank:
    """Fixed source prototypes plus a bounded FIFO queue of strong-OOD prototypes.

    Every strong prototype gets a permanent serial id on insertion; its label in
    the target label space is ``m + 1 + serial``.
    """

    def __init__(self, source_prototypes, capacity: int = DEFAULT_QUEUE_CAPACITY):
        source = np.array(source_prototypes, dtype=np.float64, ndmin=2)
        if source.shape[0] == 0:
            raise EmptyPrototypeBank("bank needs at least one source prototype")
        if capacity < 1:
            raise ValueError("strong prototype capacity must be >= 1")
        source.setflags(write=False)
        self.source = source
        self.capacity = capacity
        self._strong: deque[tuple[int, np.ndarray]] = deque()
        self._next_serial = 0
        self._matrix: np.ndarray | None = None
        self.evicted: list[int] = []

    @property
    def num_source(self) -> int:
        return self.source.shape[0]

    @property
    def dim(self) -> int:
        return self.source.shape[1]

    def __len__(self) -> int:
        return len(self._strong)

    @property
    def strong(self) -> np.ndarray:
        """Read-only ``(len, dim)`` matrix of strong prototypes in queue order."""
        if self._matrix is None:
            mat = np.stack([v for _, v in self._strong]) if self._strong else np.zeros((0, self.dim))
            mat.setflags(write=False)
            self._matrix = mat
        return self._matrix

    @property
    def strong_serials(self) -> list[int]:
        return [s for s, _ in self._strong]

    def add_strong(self, f) -> int:
        """Append a normalized snapshot of ``f``; evicts the oldest entry when full."""
        u = l2_normalize(f)
        if len(self._strong) == self.capacity:
            serial, _ = self._strong.popleft()
            self.evicted.append(serial)
        serial = self._next_serial
        self._next_serial += 1
        self._strong.append((serial, u))
        self._matrix = None
        return serial

    def nearest_source(self, f) -> tuple[int, float]:
        """``(class, cosine)`` of the closest source prototype; ties go to the lowest class."""
        k, sim = _best(self.source, l2_normalize(f))
        return k + 1, sim

    def nearest_strong(self, f) -> tuple[int, float] | None:
        """``(queue position, cosine)`` of the closest strong prototype, or None if empty."""
        if not self._strong:
            return None
        return _best(self.strong, l2_normalize(f))

    def to_dict(self) -> dict:
        return {
            "source": self.source.tolist(),
            "strong": self.strong.tolist(),
            "strong_serials": self.strong_serials,
            "capacity": self.capacity,
        }


def _best(prototypes: np.ndarray, unit: np.ndarray) -> tuple[int, float]:
    sims = np.clip(prototypes @ unit, -1.0, 1.0)
    k = int(np.argmax(sims))  # argmax returns the first maximum
    return k, float(sims[k])


def threshold_objective(scores: np.ndarray, k: int) -> float | None:
    """Sum of within-cluster variances for the split at ``k / GRID_STEPS``; None if a side is empty."""
    tau = k / GRID_STEPS
    upper = scores[scores > tau]
    lower = scores[scores <= tau]
    if len(upper) == 0 or len(lower) == 0:
        return None
    return float(np.var(upper) + np.var(lower))


def optimal_threshold(scores) -> float | None:
    """Grid threshold minimizing the two-cluster within-variance of ``scores``.

    Scores are clamped to [0, 1]. Among tied minimizers the upper median grid
    point is returned. None when no grid point yields two non-empty clusters.
    """
    s = np.sort(np.clip(np.asarray(scores, dtype=np.float64), 0.0, 1.0))
    if len(s) < 2:
        return None
    best = None
    argbest: list[int] = []
    cache: dict[int, float | None] = {}
    for k in range(GRID_STEPS + 1):
        split = int(np.searchsorted(s, k / GRID_STEPS, side="right"))
        if split not in cache:
            cache[split] = threshold_objective(s, k)
        obj = cache[split]
        if obj is None:
            continue
        if best is None or obj < best:
            best = obj
            argbest = [k]
        elif obj == best:
            argbest.append(k)
    if best is None:
        return None
    return argbest[len(argbest) // 2] / GRID_STEPS


@dataclass
class OutlierTracker:
    """Sliding window of recent outlier scores and the current optimal threshold."""

    window_size: int = DEFAULT_WINDOW
    window: deque = field(default_factory=deque)
    tau: float | None = None
    history: list = field(default_factory=list)

    def update(self, new_scores) -> float | None:
        for s in np.asarray(new_scores, dtype=np.float64).ravel():
            self.window.append(float(s))
            if len(self.window) > self.window_size:
                self.window.popleft()
        tau = optimal_threshold(np.fromiter(self.window, dtype=np.float64))
        if tau is not None:
            self.tau = tau
        self.history.append(self.tau)
        return self.tau


def update_threshold(tracker: OutlierTracker, new_scores) -> OutlierTracker:
    tracker.update(new_scores)
    return tracker


@dataclass(frozen=True)
class PseudoLabel:
    kind: str  # "weak" | "strong" | "new_strong"
    index: int  # source class (1-based) for weak; strong queue position otherwise
    serial: int = -1  # permanent strong prototype id

    @property
    def is_strong(self) -> bool:
        return self.kind != "weak"

    def target_label(self, num_source: int) -> int:
        return self.index if self.kind == "weak" else num_source + 1 + self.serial


def assign(f, bank: PrototypeBank, tau: float | None) -> PseudoLabel:
    """Pseudo-label one feature, growing the strong queue when nothing matches.

    With no threshold yet every sample is treated as weak.
    """
    u = l2_normalize(f)
    k, sim = _best(bank.source, u)
    if tau is None or 1.0 - sim <= tau:
        return PseudoLabel("weak", k + 1)
    pos, strong_sim = _best(bank.strong, u) if len(bank) else (-1, -1.0)
    if pos < 0 or 1.0 - strong_sim > tau:
        serial = bank.add_strong(u)
        return PseudoLabel("new_strong", len(bank) - 1, serial)
    return PseudoLabel("strong", pos, bank.strong_serials[pos])


def dump_bank(path, bank: PrototypeBank, tau_history) -> None:
    doc = bank.to_dict()
    doc["tau_history"] = list(tau_history)
    with open(path, "w") as fh:
        json.dump(doc, fh)
