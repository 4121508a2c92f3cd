import itertools
import json
import math

import numpy as np
import pytest

from grpolab.sampler import (
    InsufficientPoolError,
    PoolItem,
    SamplePlan,
    balanced_sample,
    feasibility_shortfall,
    read_pool,
    score_candidate,
    split_disjoint,
    write_pool,
)
from grpolab.vocab import CANONICAL_NAMES, LabelSet, N_LABELS


def item(i, *names):
    return PoolItem(f"id{i}", LabelSet(names), {})


def synthetic_pool(n, seed, rare_prevalence=0.06):
    """Correlated multilabel pool; the last label is rare."""
    rng = np.random.default_rng(seed)
    prev = np.linspace(0.45, 0.1, N_LABELS)
    prev[-1] = rare_prevalence
    items = []
    for i in range(n):
        mask = rng.random(N_LABELS) < prev
        if not mask.any():
            mask[rng.integers(N_LABELS)] = True
        items.append(PoolItem(f"s{seed}-{i}", LabelSet.from_mask(mask), {"i": i}))
    return items


class TestScoreCandidate:
    def test_all_deficit(self):
        plan = SamplePlan(100, 0.05, 2.0)
        assert score_candidate(item(0, "Edema"), [0] * 14, 100, plan) == 5

    def test_surplus_penalized(self):
        plan = SamplePlan(100, 0.05, 2.0)
        counts = [0] * 14
        counts[3] = 10
        assert score_candidate(item(0, "Edema"), counts, 100, plan) == -10

    def test_mixed(self):
        plan = SamplePlan(100, 0.05, 2.0)
        counts = [0] * 14
        counts[0], counts[1] = 2, 6
        assert score_candidate(item(0, "Atelectasis", "Cardiomegaly"), counts, 100, plan) == 3 - 2


def test_plan_validation():
    assert SamplePlan(1000).target == 50
    assert SamplePlan(101, 0.05).target == 6
    with pytest.raises(ValueError):
        SamplePlan(10, min_fraction=0.0)
    with pytest.raises(ValueError):
        SamplePlan(10, overrepresentation_penalty=0.0)


def test_pool_item_requires_labels():
    with pytest.raises(ValueError):
        PoolItem("x", LabelSet(), {})


def test_whole_pool_forced():
    pool = synthetic_pool(30, 0)
    sel = balanced_sample(pool, SamplePlan(30, seed=3))
    assert sorted(i.id for i in sel) == sorted(i.id for i in pool)


def test_pool_too_small():
    with pytest.raises(InsufficientPoolError):
        balanced_sample(synthetic_pool(10, 0), SamplePlan(11))


def test_deterministic_under_seed():
    pool = synthetic_pool(500, 1)
    a = balanced_sample(pool, SamplePlan(100, seed=7))
    b = balanced_sample(pool, SamplePlan(100, seed=7))
    assert [i.id for i in a] == [i.id for i in b]


def test_greedy_trace_is_argmax():
    """Re-score every remaining candidate at each step; the pick must be maximal."""
    pool = synthetic_pool(200, 2)
    plan = SamplePlan(50, seed=0)
    sel = balanced_sample(pool, plan)
    counts = np.zeros(N_LABELS, dtype=int)
    remaining = {i.id: i for i in pool}
    for picked, traced in zip(sel, sel.trace):
        best = max(score_candidate(c, counts, plan.n, plan) for c in remaining.values())
        mine = score_candidate(picked, counts, plan.n, plan)
        assert mine == best == pytest.approx(traced)
        counts += picked.labels.mask()
        del remaining[picked.id]


def test_coverage_warning_when_infeasible():
    pool = [item(i, "Edema") for i in range(20)] + [item(99, "Fracture")]
    sel = balanced_sample(pool, SamplePlan(20, 0.1))
    assert sel.coverage_warning
    assert sel.shortfall["Fracture"] == 1
    assert feasibility_shortfall(pool, SamplePlan(20, 0.1))["Pneumonia"] == 2


def test_brute_force_eight_items():
    """Greedy coverage on a tiny instance is within one label slot of the best 4-subset."""
    names = ("Edema", "Fracture", "Pneumonia")
    pool = [
        item(0, "Edema"),
        item(1, "Edema"),
        item(2, "Edema", "Fracture"),
        item(3, "Edema", "Pneumonia"),
        item(4, "Edema"),
        item(5, "Fracture"),
        item(6, "Edema", "Fracture"),
        item(7, "Pneumonia"),
    ]
    plan = SamplePlan(4, min_fraction=0.5, overrepresentation_penalty=2.0, seed=0)
    target = plan.target

    def covered(items):
        counts = {n: sum(n in i.labels.names() for i in items) for n in names}
        return sum(min(c, target) for c in counts.values())

    best = max(covered(s) for s in itertools.combinations(pool, 4))
    assert covered(balanced_sample(pool, plan)) >= best - 1


@pytest.mark.parametrize("seed", range(5))
def test_coverage_guarantee(seed):
    pool = synthetic_pool(3000, seed)
    plan = SamplePlan(500, seed=seed)
    assert not feasibility_shortfall(pool, plan)
    sel = balanced_sample(pool, plan)
    assert len(sel) == 500
    assert min(sel.label_counts().values()) >= math.ceil(0.05 * 500)
    assert not sel.coverage_warning


def test_split_disjoint_partition():
    pool = synthetic_pool(300, 4)
    sft, rl = split_disjoint(pool, 200, 100, SamplePlan(200, seed=1))
    ids_a, ids_b = {i.id for i in sft}, {i.id for i in rl}
    assert not ids_a & ids_b
    assert ids_a | ids_b == {i.id for i in pool}


def test_split_disjoint_insufficient():
    with pytest.raises(InsufficientPoolError):
        split_disjoint(synthetic_pool(100, 0), 80, 30, SamplePlan(80))


def test_jsonl_roundtrip(tmp_path):
    pool = synthetic_pool(20, 5)
    path = tmp_path / "pool.jsonl"
    write_pool(path, pool)
    back = read_pool(path)
    assert [(i.id, i.labels, i.payload) for i in back] == [(i.id, i.labels, i.payload) for i in pool]
    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) == {"id", "labels", "payload"}
    assert all(l in CANONICAL_NAMES for l in first["labels"])


def test_read_pool_rejects_duplicates_and_bad_labels(tmp_path):
    path = tmp_path / "pool.jsonl"
    path.write_text('{"id": "a", "labels": ["Edema"], "payload": {}}\n' * 2)
    with pytest.raises(ValueError, match="duplicate"):
        read_pool(path)
    path.write_text('{"id": "a", "labels": ["Pneumonitis"], "payload": {}}\n')
    with pytest.raises(ValueError):
        read_pool(path)
