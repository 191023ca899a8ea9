"""Exemplar store, herding order, and budget ledgers.

Two budget regimes: FIXED keeps a global total (in original-image units)
and evicts old-class tails as classes arrive; GROWING grants every class a
constant quota. Costs are the fractional per-exemplar values from the
compression accounting, so cheaper exemplars pack more per class.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .compression import CompressedExemplar
from .errors import BudgetExhausted

COST_EPS = 1e-9


class MemoryRegime(Enum):
    FIXED = "fixed"
    GROWING = "growing"


@dataclass(frozen=True)
class StoredExemplar:
    exemplar: CompressedExemplar
    phase: int
    checksum: str


@dataclass(frozen=True)
class LedgerEntry:
    class_id: int
    ref: str
    cost: float


@dataclass
class MemoryLedger:
    """Budget bookkeeping in original-image units."""

    regime: MemoryRegime
    budget: float
    entries: list[LedgerEntry] = field(default_factory=list)

    def share(self, classes_seen: int) -> float:
        """Budget available to one class: equal split under FIXED, the
        per-class quota under GROWING."""
        if self.regime is MemoryRegime.FIXED:
            return self.budget / classes_seen
        return self.budget

    def class_total(self, class_id: int) -> float:
        return sum(e.cost for e in self.entries if e.class_id == class_id)

    def total(self) -> float:
        return sum(e.cost for e in self.entries)

    def within_budget(self, classes_seen: int) -> bool:
        if self.regime is MemoryRegime.FIXED:
            return self.total() <= self.budget + COST_EPS
        classes = {e.class_id for e in self.entries}
        return all(self.class_total(c) <= self.budget + COST_EPS for c in classes)

    def rebuild_from_store(self, store: "ExemplarStore"):
        self.entries = [
            LedgerEntry(class_id=c, ref=se.exemplar.source_id, cost=se.exemplar.cost)
            for c in store.classes()
            for se in store.class_exemplars(c)
        ]


class ExemplarStore:
    """Per-class ordered exemplar lists; entries are immutable once stored."""

    def __init__(self):
        self._by_class: dict[int, list[StoredExemplar]] = {}

    def classes(self) -> list[int]:
        return sorted(self._by_class)

    def class_exemplars(self, class_id: int) -> list[StoredExemplar]:
        return list(self._by_class.get(class_id, []))

    def count(self, class_id: int | None = None) -> int:
        if class_id is not None:
            return len(self._by_class.get(class_id, []))
        return sum(len(v) for v in self._by_class.values())

    def mean_cost(self) -> float:
        costs = [se.exemplar.cost for v in self._by_class.values() for se in v]
        return float(np.mean(costs)) if costs else 0.0

    def add_class(self, class_id: int, exemplars: list[CompressedExemplar], phase: int):
        if class_id in self._by_class:
            raise ValueError(f"class {class_id} already stored; exemplars are immutable")
        self._by_class[class_id] = [
            StoredExemplar(exemplar=ex, phase=phase, checksum=exemplar_checksum(ex))
            for ex in exemplars
        ]

    def truncate_class(self, class_id: int, keep: int):
        """Drop the lowest-priority tail, keeping the first ``keep`` entries."""
        self._by_class[class_id] = self._by_class[class_id][:keep]

    def checksums(self) -> dict[str, str]:
        return {
            f"{c}/{i}": se.checksum
            for c in self.classes()
            for i, se in enumerate(self._by_class[c])
        }


def exemplar_checksum(ex: CompressedExemplar) -> str:
    from .archive import serialize_exemplar

    return hashlib.sha256(serialize_exemplar(ex)).hexdigest()


def herding_order(features: np.ndarray) -> np.ndarray:
    """Greedy order keeping the running mean of picks close to the class mean.

    At each step the sample minimizing the distance between the class mean
    and the mean-so-far-with-it is taken; exact ties go to the lowest index.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    n = len(features)
    if n == 0:
        raise ValueError("herding needs at least one sample")
    target = features.mean(axis=0)
    chosen_sum = np.zeros_like(target)
    remaining = np.ones(n, dtype=bool)
    order = np.empty(n, dtype=np.int64)
    for t in range(n):
        candidate_means = (chosen_sum[None, :] + features) / (t + 1)
        dists = np.linalg.norm(target[None, :] - candidate_means, axis=1)
        dists[~remaining] = np.inf
        pick = int(np.argmin(dists))
        order[t] = pick
        remaining[pick] = False
        chosen_sum += features[pick]
    return order


def pack_exemplars(order: np.ndarray, costs: np.ndarray, share: float) -> list[int]:
    """Admit the longest prefix of the herding order fitting in ``share``.

    Returns the admitted indices in herding order. Raises BudgetExhausted
    when even the first exemplar does not fit.
    """
    costs = np.asarray(costs, dtype=np.float64)
    admitted: list[int] = []
    spent = 0.0
    for idx in order:
        c = float(costs[idx])
        if spent + c > share + COST_EPS:
            break
        admitted.append(int(idx))
        spent += c
    if not admitted:
        raise BudgetExhausted(f"first exemplar cost {float(costs[order[0]]):.4f} exceeds share {share:.4f}")
    return admitted


def rebalance_fixed(ledger: MemoryLedger, store: ExemplarStore, classes_seen: int) -> MemoryLedger:
    """Shrink every class to the new equal share by dropping herding tails."""
    if ledger.regime is not MemoryRegime.FIXED:
        raise ValueError("rebalance applies to the FIXED regime only")
    share = ledger.share(classes_seen)
    for class_id in store.classes():
        exemplars = store.class_exemplars(class_id)
        total = sum(se.exemplar.cost for se in exemplars)
        keep = len(exemplars)
        while keep > 0 and total > share + COST_EPS:
            keep -= 1
            total -= exemplars[keep].exemplar.cost
        store.truncate_class(class_id, keep)
    ledger.rebuild_from_store(store)
    return ledger
