"""Merge sequencing, global ordering, replay and size accounting."""

from fractions import Fraction

import numpy as np
import pytest

from blockmerge import (
    DisjointSet,
    MergerConfig,
    SizeModel,
    block_merge_sequence,
    compute_merge_plan,
    global_merge_order,
    kmeans_baseline,
    naive_greedy_order,
    read_plan_jsonl,
    replay_to_size,
    size_of,
    write_plan_jsonl,
)
from blockmerge.scheduler import MergeEvent
from blockmerge.similarity import SimilarityMatrix, pairwise_all

from helpers import plan_signature, synthetic_tv
from oracles import size_oracle


def _matrix(values, block_id=0):
    return SimilarityMatrix(block_id=block_id, values=np.array(values, dtype=np.float32))


# -- union-find --------------------------------------------------------------

def test_dsu_basics():
    d = DisjointSet(5)
    d.union(2, 3)
    d.union(0, 4)
    d.union(0, 3)
    assert d.find(4) == d.find(2)
    assert d.find(1) != d.find(0)
    assert d.groups() == ((0, 2, 3, 4), (1,))


def test_dsu_matches_set_union_simulation():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 12))
        d = DisjointSet(n)
        sets = [{i} for i in range(n)]
        for _ in range(int(rng.integers(1, 2 * n))):
            i, j = int(rng.integers(n)), int(rng.integers(n))
            d.union(i, j)
            si = next(s for s in sets if i in s)
            sj = next(s for s in sets if j in s)
            if si is not sj:
                sets.remove(sj)
                si |= sj
        expected = tuple(tuple(sorted(s)) for s in sorted(sets, key=min))
        assert d.groups() == expected


# -- per-block sequences -----------------------------------------------------

def test_sequence_single_task_empty():
    assert block_merge_sequence(_matrix([[1.0]]), "min") == []


def test_sequence_two_tasks():
    mx = _matrix([[1.0, 0.25], [0.25, 1.0]])
    (ev,) = block_merge_sequence(mx, "min")
    assert (ev.left, ev.right) == ((0,), (1,))
    assert ev.score == pytest.approx(0.25)


def test_sequence_three_tasks_hand_case():
    mx = _matrix(
        [
            [1.0, 0.9, 0.2],
            [0.9, 1.0, 0.5],
            [0.2, 0.5, 1.0],
        ]
    )
    events = block_merge_sequence(mx, "min")
    assert [(e.left, e.right) for e in events] == [((0,), (1,)), ((0, 1), (2,))]
    assert events[0].score == pytest.approx(0.9)
    assert events[1].score == pytest.approx(0.2)  # min(0.2, 0.5)


def test_scores_non_increasing_within_block():
    rng = np.random.default_rng(1)
    for strategy in ("min", "max", "avg"):
        tv = synthetic_tv(rng, [32], num_tasks=7)
        mx = pairwise_all(tv)[0]
        events = block_merge_sequence(mx, strategy, tv)
        scores = [e.score for e in events]
        assert all(a >= b for a, b in zip(scores, scores[1:]))


@pytest.mark.parametrize("strategy", ["min", "max", "avg", "unified"])
def test_fast_path_equals_naive_oracle(strategy):
    rng = np.random.default_rng(2)
    for _ in range(6):
        dims = [int(d) for d in rng.integers(4, 65, size=int(rng.integers(1, 5)))]
        tv = synthetic_tv(rng, dims, num_tasks=int(rng.integers(2, 7)))
        fast = compute_merge_plan(tv, strategy=strategy)
        slow = naive_greedy_order(tv, strategy=strategy)
        assert plan_signature(fast) == plan_signature(slow)


def test_all_equal_similarities_tiebreak():
    tv = synthetic_tv(np.random.default_rng(3), [8], num_tasks=4)
    mx = _matrix(np.full((4, 4), 0.5))
    plan = naive_greedy_order(tv, "min", matrices=[mx])
    assert [(e.left, e.right) for e in plan.events] == [
        ((0,), (1,)),
        ((0, 1), (2,)),
        ((0, 1, 2), (3,)),
    ]
    fast = global_merge_order([block_merge_sequence(mx, "min")], strategy="min")
    assert plan_signature(fast) == plan_signature(plan)


# -- global ordering ---------------------------------------------------------

def _ev(block, left, right, score):
    return MergeEvent(block_id=block, left=left, right=right, score=score)


def test_single_block_plan_is_sequence():
    seq = [_ev(0, (0,), (1,), 0.7)]
    plan = global_merge_order([seq], "greedy")
    assert [e.score for e in plan.events] == [0.7]
    assert [e.seq for e in plan.events] == [0]


def test_two_block_interleave_sorted():
    seqs = [
        [_ev(0, (0,), (1,), 0.9), _ev(0, (0, 1), (2,), 0.3)],
        [_ev(1, (0,), (2,), 0.8), _ev(1, (0, 2), (1,), 0.4)],
    ]
    plan = global_merge_order(seqs, "greedy")
    assert [e.score for e in plan.events] == [0.9, 0.8, 0.4, 0.3]


def test_right_to_left_policy():
    seqs = [[_ev(b, (0,), (1,), 0.5)] for b in range(3)]
    plan = global_merge_order(seqs, "right_to_left")
    assert [e.block_id for e in plan.events] == [2, 1, 0]
    plan = global_merge_order(seqs, "left_to_right")
    assert [e.block_id for e in plan.events] == [0, 1, 2]


def test_random_policy_seeded_and_order_preserving():
    rng = np.random.default_rng(4)
    tv = synthetic_tv(rng, [16, 16, 16], num_tasks=5)
    a = compute_merge_plan(tv, order_policy="random", seed=7)
    b = compute_merge_plan(tv, order_policy="random", seed=7)
    c = compute_merge_plan(tv, order_policy="random", seed=8)
    assert plan_signature(a) == plan_signature(b)
    assert plan_signature(a) != plan_signature(c)
    greedy = compute_merge_plan(tv)
    for block in range(3):
        in_block = [(e.left, e.right) for e in a.events if e.block_id == block]
        reference = [(e.left, e.right) for e in greedy.events if e.block_id == block]
        assert in_block == reference  # dendrogram order kept within each block


# -- replay and sizes --------------------------------------------------------

def test_replay_target_m_applies_nothing():
    tv = synthetic_tv(np.random.default_rng(5), [8, 8], num_tasks=4)
    plan = compute_merge_plan(tv)
    sm = SizeModel.from_partition(tv.partition)
    asg = replay_to_size(plan, tv, Fraction(4), sm)
    assert asg.applied_events == 0
    assert asg.size == Fraction(4)
    assert all(groups == ((0,), (1,), (2,), (3,)) for groups in asg.block_groups)


def test_replay_target_one_dense_full_merge():
    tv = synthetic_tv(np.random.default_rng(6), [8, 16], num_tasks=4)
    plan = compute_merge_plan(tv)
    sm = SizeModel.from_partition(tv.partition)
    asg = replay_to_size(plan, tv, Fraction(1), sm)
    assert asg.size == Fraction(1)
    assert all(len(groups) == 1 for groups in asg.block_groups)


def test_replay_incremental_size_matches_scratch_dense_and_masked():
    rng = np.random.default_rng(7)
    tv = synthetic_tv(rng, [8, 24, 16], num_tasks=5)
    plan = compute_merge_plan(tv)
    for cfg in (None, MergerConfig.for_algorithm("emr"), MergerConfig.for_algorithm("consensus")):
        sm = SizeModel.from_partition(tv.partition, cfg)
        for k in range(len(plan.events) + 1):
            prefix = plan.events[:k]
            sub = plan.__class__(
                events=prefix, strategy=plan.strategy, order_policy=plan.order_policy,
                seed=plan.seed, num_tasks=plan.num_tasks, num_blocks=plan.num_blocks,
                block_keys=plan.block_keys,
            )
            asg = replay_to_size(sub, tv, Fraction(0), sm)
            assert asg.applied_events == k
            scratch = sm.size_of(asg.block_groups)
            assert asg.size == scratch
            oracle = size_oracle(
                asg.block_groups, sm.block_nbytes, sm.block_dims, sm.masked, sm.scalars
            )
            assert asg.size == oracle


def test_dense_fractional_steps():
    tv = synthetic_tv(np.random.default_rng(8), [8, 24], num_tasks=3)
    plan = compute_merge_plan(tv)
    sm = SizeModel.from_partition(tv.partition)
    unit = sm.unit_bytes
    sizes = []
    for k in range(len(plan.events) + 1):
        sub = plan.__class__(
            events=plan.events[:k], strategy=plan.strategy, order_policy=plan.order_policy,
            seed=plan.seed, num_tasks=plan.num_tasks, num_blocks=plan.num_blocks,
        )
        sizes.append(replay_to_size(sub, tv, Fraction(0), sm).size)
    for prev, cur, ev in zip(sizes, sizes[1:], plan.events):
        assert prev - cur == Fraction(sm.block_nbytes[ev.block_id], unit)
    assert sizes[0] == Fraction(3) and sizes[-1] == Fraction(1)


def test_replay_groups_match_set_union_simulation():
    rng = np.random.default_rng(17)
    tv = synthetic_tv(rng, [8, 16, 8], num_tasks=6)
    plan = compute_merge_plan(tv)
    sm = SizeModel.from_partition(tv.partition)
    for k in (0, 3, 7, len(plan.events)):
        sub = plan.__class__(
            events=plan.events[:k], strategy=plan.strategy, order_policy=plan.order_policy,
            seed=plan.seed, num_tasks=plan.num_tasks, num_blocks=plan.num_blocks,
        )
        asg = replay_to_size(sub, tv, Fraction(0), sm)
        sets = [[{t} for t in range(6)] for _ in range(3)]
        for ev in plan.events[:k]:
            block = sets[ev.block_id]
            si = next(s for s in block if ev.left[0] in s)
            sj = next(s for s in block if ev.right[0] in s)
            block.remove(sj)
            si |= sj
        expected = [
            tuple(tuple(sorted(s)) for s in sorted(block, key=min)) for block in sets
        ]
        assert asg.block_groups == expected


def test_replay_below_floor_returns_full_merge():
    tv = synthetic_tv(np.random.default_rng(9), [8], num_tasks=3)
    plan = compute_merge_plan(tv)
    sm = SizeModel.from_partition(tv.partition, MergerConfig.for_algorithm("emr"))
    asg = replay_to_size(plan, tv, Fraction(0), sm)
    assert asg.applied_events == len(plan.events)
    assert asg.size == Fraction(2) + Fraction(3, 32)


def test_size_of_free_function():
    tv = synthetic_tv(np.random.default_rng(10), [8, 8], num_tasks=2)
    plan = compute_merge_plan(tv)
    sm = SizeModel.from_partition(tv.partition)
    asg = replay_to_size(plan, tv, Fraction(2), sm)
    assert size_of(asg, sm) == asg.size


# -- k-means baseline --------------------------------------------------------

def test_kmeans_extremes():
    tv = synthetic_tv(np.random.default_rng(11), [16, 16], num_tasks=5)
    all_single = kmeans_baseline(tv, k=5, seed=0)
    assert all(groups == ((0,), (1,), (2,), (3,), (4,)) for groups in all_single.block_groups)
    assert all_single.size == Fraction(5)
    one = kmeans_baseline(tv, k=1, seed=0)
    assert all(groups == ((0, 1, 2, 3, 4),) for groups in one.block_groups)
    assert one.size == Fraction(1)


def test_kmeans_exact_k_and_size():
    tv = synthetic_tv(np.random.default_rng(12), [16, 8, 24], num_tasks=6)
    for k in (2, 3, 4):
        asg = kmeans_baseline(tv, k=k, seed=3)
        assert all(len(groups) == k for groups in asg.block_groups)
        assert asg.size == Fraction(k)


def test_kmeans_recovers_planted_clusters():
    rng = np.random.default_rng(13)
    dims = [32, 32]
    centers = [rng.normal(size=d) for d in dims]
    tv = synthetic_tv(rng, dims, num_tasks=6)
    for b, d in enumerate(dims):
        for task in range(6):
            side = 1.0 if task < 3 else -1.0
            tv.block_vectors[b][task] = (
                side * 10.0 * centers[b] + rng.normal(scale=0.01, size=d)
            ).astype(np.float32)
    asg = kmeans_baseline(tv, k=2, seed=0)
    assert all(groups == ((0, 1, 2), (3, 4, 5)) for groups in asg.block_groups)


def test_kmeans_deterministic():
    tv = synthetic_tv(np.random.default_rng(14), [16], num_tasks=6)
    a = kmeans_baseline(tv, k=3, seed=5)
    b = kmeans_baseline(tv, k=3, seed=5)
    assert a.block_groups == b.block_groups


# -- exports -----------------------------------------------------------------

def test_assignment_json_export(tmp_path):
    import json

    from blockmerge import write_assignment_json

    tv = synthetic_tv(np.random.default_rng(16), [8, 8], num_tasks=4)
    plan = compute_merge_plan(tv)
    sm = SizeModel.from_partition(tv.partition)
    asg = replay_to_size(plan, tv, Fraction(2), sm)
    path = str(tmp_path / "groups.json")
    write_assignment_json(asg, tv.partition.block_keys, path)
    obj = json.load(open(path))
    assert set(obj) == {"b0", "b1"}
    for key, groups in obj.items():
        members = sorted(t for g in groups for t in g)
        assert members == [0, 1, 2, 3]


def test_plan_jsonl_round_trip(tmp_path):
    tv = synthetic_tv(np.random.default_rng(15), [8, 8], num_tasks=4)
    plan = compute_merge_plan(tv, seed=1)
    path = str(tmp_path / "plan.jsonl")
    write_plan_jsonl(plan, path)
    back = read_plan_jsonl(path, num_tasks=4, num_blocks=2)
    assert plan_signature(back) == plan_signature(plan)
    assert [e.seq for e in back.events] == list(range(len(plan.events)))
