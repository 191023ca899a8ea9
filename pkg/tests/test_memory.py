import numpy as np
import pytest

from cimx.cam import BBox
from cimx.compression import Image, compress
from cimx.errors import BudgetExhausted
from cimx.memory import (
    ExemplarStore,
    MemoryLedger,
    MemoryRegime,
    herding_order,
    pack_exemplars,
    rebalance_fixed,
)

from conftest import quantized_image


def herding_oracle(features):
    """Brute-force greedy re-derivation of the order."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    target = features.mean(axis=0)
    order, chosen = [], []
    remaining = list(range(len(features)))
    while remaining:
        best, best_d = None, None
        for idx in remaining:
            cand = np.linalg.norm(target - (np.sum(features[chosen + [idx]], axis=0) / (len(chosen) + 1)))
            if best is None or cand < best_d:
                best, best_d = idx, cand
        order.append(best)
        chosen.append(best)
        remaining.remove(best)
    return np.array(order)


def make_exemplar(rng, label, cost_box=None, size=8):
    img = Image(pixels=quantized_image(rng, size, size), label=label, source_id=f"s{label}")
    box = cost_box or BBox(0, 0, size // 2 - 1, size - 1)
    return compress(img, box, 4.0)


def test_herding_first_pick_is_mean():
    order = herding_order(np.array([0.0, 1.0, 2.0]))
    assert order[0] == 1


def test_herding_tie_breaks_to_lowest_index():
    order = herding_order(np.array([0.0, 1.0, 2.0]))
    assert list(order) == [1, 0, 2]


def test_herding_single_sample():
    assert list(herding_order(np.array([4.2]))) == [0]


def test_herding_matches_oracle(rng):
    for _ in range(25):
        n = int(rng.integers(1, 12))
        d = int(rng.integers(1, 5))
        feats = rng.normal(size=(n, d))
        np.testing.assert_array_equal(herding_order(feats), herding_oracle(feats))


def test_herding_is_permutation(rng):
    feats = rng.normal(size=(20, 8))
    order = herding_order(feats)
    assert sorted(order) == list(range(20))


def test_pack_unit_costs():
    order = np.arange(40)
    admitted = pack_exemplars(order, np.ones(40), 20.0)
    assert admitted == list(range(20))


def test_pack_compressed_costs():
    order = np.arange(40)
    admitted = pack_exemplars(order, np.full(40, 0.625), 20.0)
    assert len(admitted) == 32


def test_pack_matches_greedy_prefix_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(1, 30))
        costs = rng.uniform(0.2, 1.0, size=n)
        order = rng.permutation(n)
        share = float(rng.uniform(1.0, 10.0))
        try:
            admitted = pack_exemplars(order, costs, share)
        except BudgetExhausted:
            assert costs[order[0]] > share
            continue
        spent = 0.0
        expect = []
        for idx in order:
            if spent + costs[idx] > share + 1e-9:
                break
            expect.append(int(idx))
            spent += costs[idx]
        assert admitted == expect


def test_pack_budget_exhausted():
    with pytest.raises(BudgetExhausted):
        pack_exemplars(np.array([0]), np.array([5.0]), 1.0)


def test_pack_dominates_unit_cost(rng):
    for _ in range(30):
        n = 25
        costs = rng.uniform(0.3, 1.0, size=n)
        order = rng.permutation(n)
        share = 8.0
        compressed = pack_exemplars(order, costs, share)
        baseline = pack_exemplars(order, np.ones(n), share)
        assert len(compressed) >= len(baseline)


def test_ledger_shares():
    fixed = MemoryLedger(regime=MemoryRegime.FIXED, budget=200.0)
    assert fixed.share(10) == 20.0
    assert fixed.share(20) == 10.0
    growing = MemoryLedger(regime=MemoryRegime.GROWING, budget=20.0)
    assert growing.share(10) == growing.share(20) == 20.0


def test_rebalance_truncates_tails(rng):
    store = ExemplarStore()
    ledger = MemoryLedger(regime=MemoryRegime.FIXED, budget=4.0)
    half_box = BBox(0, 0, 3, 7)  # half coverage at ratio 4 -> cost 0.625
    for class_id in (0, 1):
        exemplars = [make_exemplar(rng, class_id, half_box) for _ in range(5)]
        store.add_class(class_id, exemplars, phase=1)
    rebalance_fixed(ledger, store, classes_seen=2)
    # share 2.0 per class admits floor(2.0 / 0.625) = 3 exemplars
    assert store.count(0) == 3 and store.count(1) == 3
    assert ledger.within_budget(2)


def test_rebalance_keeps_priority_prefix(rng):
    store = ExemplarStore()
    ledger = MemoryLedger(regime=MemoryRegime.FIXED, budget=2.0)
    exemplars = [make_exemplar(rng, 0) for _ in range(6)]
    store.add_class(0, exemplars, phase=1)
    before = [se.checksum for se in store.class_exemplars(0)]
    rebalance_fixed(ledger, store, classes_seen=1)
    after = [se.checksum for se in store.class_exemplars(0)]
    assert after == before[: len(after)]


def test_rebalance_random_costs_invariant(rng):
    store = ExemplarStore()
    ledger = MemoryLedger(regime=MemoryRegime.FIXED, budget=6.0)
    for class_id in range(3):
        boxes = [
            BBox(0, 0, int(rng.integers(1, 8)), int(rng.integers(1, 8)))
            for _ in range(int(rng.integers(2, 9)))
        ]
        store.add_class(class_id, [make_exemplar(rng, class_id, b) for b in boxes], phase=1)
    rebalance_fixed(ledger, store, classes_seen=3)
    share = ledger.share(3)
    for class_id in range(3):
        total = sum(se.exemplar.cost for se in store.class_exemplars(class_id))
        assert total <= share + 1e-9
    assert ledger.total() <= ledger.budget + 1e-9


def test_store_immutability(rng):
    store = ExemplarStore()
    store.add_class(0, [make_exemplar(rng, 0) for _ in range(3)], phase=1)
    first = store.checksums()
    store.add_class(1, [make_exemplar(rng, 1) for _ in range(2)], phase=2)
    second = store.checksums()
    for key, digest in first.items():
        assert second[key] == digest
    with pytest.raises(ValueError):
        store.add_class(0, [make_exemplar(rng, 0)], phase=3)


def test_ledger_rebuild(rng):
    store = ExemplarStore()
    store.add_class(0, [make_exemplar(rng, 0) for _ in range(2)], phase=1)
    ledger = MemoryLedger(regime=MemoryRegime.GROWING, budget=20.0)
    ledger.rebuild_from_store(store)
    assert len(ledger.entries) == 2
    assert ledger.total() == pytest.approx(2 * 0.625)
