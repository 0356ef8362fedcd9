"""Merge scheduling: per-block merge sequences, global ordering, and replay.

The pipeline is bottom-up agglomeration per block followed by a global
interleave. Per block, groups are repeatedly merged by highest linkage score;
for the matrix-backed strategies (min/max/avg) the sequence is produced by
nearest-neighbor-chain clustering on dissimilarity 1 - s (complete, single
and average linkage respectively), which matches the direct greedy argmax
exactly under the canonical tie-break. The ``unified`` strategy recomputes
group representatives after every merge, so it runs the greedy loop
directly. Global ordering interleaves the per-block sequences (min-heap of
block heads for greedy, concatenation for left-/right-to-left, seeded
uniform interleave for random), and ``replay_to_size`` walks the plan with
one union-find per block, tracking the deployed size in exact rationals
until the target is reached.

Sizes are expressed in *model units*: stored bytes divided by the bytes of
one full fine-tuned mergeable parameter set.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from .mergers import MergerConfig
from .similarity import SimilarityMatrix, cosine, group_mean, group_similarity, map_blocks, pairwise_all
from .task_space import BlockPartition, TaskVectorSet

ModelUnits = Fraction

ORDER_POLICIES = ("greedy", "left_to_right", "right_to_left", "random")


class DisjointSet:
    """Union-find with path compression and union by size."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:  # path compression
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i: int, j: int) -> int:
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return ri
        if self.size[ri] < self.size[rj]:
            ri, rj = rj, ri
        self.parent[rj] = ri
        self.size[ri] += self.size[rj]
        return ri

    def groups(self) -> tuple[tuple[int, ...], ...]:
        """Partition as tuples of member ids, each sorted, ordered by min member."""
        by_root: dict[int, list[int]] = {}
        for i in range(len(self.parent)):
            by_root.setdefault(self.find(i), []).append(i)
        return tuple(tuple(sorted(g)) for g in sorted(by_root.values(), key=lambda g: g[0]))


@dataclass(frozen=True)
class MergeEvent:
    """One candidate merge: ``left`` and ``right`` are disjoint sorted task
    tuples with min(left) < min(right). ``seq`` is the global order index
    (-1 before interleaving)."""

    block_id: int
    left: tuple[int, ...]
    right: tuple[int, ...]
    score: float
    seq: int = -1

    def key(self) -> tuple:
        return (-self.score, self.block_id, self.left[0], self.right[0])


@dataclass(frozen=True)
class MergePlan:
    events: tuple[MergeEvent, ...]
    strategy: str
    order_policy: str
    seed: int | None
    num_tasks: int
    num_blocks: int
    block_keys: tuple[str, ...] = ()


@dataclass
class GroupAssignment:
    """Per-block partition of tasks after replaying a plan prefix."""

    block_groups: list[tuple[tuple[int, ...], ...]]
    applied_events: int
    size: ModelUnits


def _pair_event(block_id: int, ga, gb, score: float) -> MergeEvent:
    left, right = sorted((tuple(sorted(ga)), tuple(sorted(gb))), key=lambda g: g[0])
    return MergeEvent(block_id=block_id, left=left, right=right, score=float(score))


# ---------------------------------------------------------------------------
# Per-block sequences
# ---------------------------------------------------------------------------

def _nn_chain_tree(dis: np.ndarray, linkage: str) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Nearest-neighbor-chain agglomeration over a dissimilarity matrix.

    Returns the merge pairs (member tuples) of the dendrogram, in chain
    discovery order. Valid for the reducible linkages used here (complete,
    single, average).
    """
    m = dis.shape[0]
    d = dis.astype(np.float64).copy()
    np.fill_diagonal(d, np.inf)
    active = np.ones(m, dtype=bool)
    sizes = np.ones(m)
    members: list[tuple[int, ...]] = [(i,) for i in range(m)]
    chain: list[int] = []
    merges = []
    for _ in range(m - 1):
        if not chain:
            chain.append(int(np.flatnonzero(active)[0]))
        while True:
            a = chain[-1]
            prev = chain[-2] if len(chain) >= 2 else -1
            row = np.where(active, d[a], np.inf)
            row = row.copy()
            row[a] = np.inf
            c = int(np.argmin(row))
            if prev >= 0 and row[prev] == row[c]:
                c = prev  # prefer the chain predecessor on ties (termination)
            if c == prev:
                chain.pop()
                chain.pop()
                break
            chain.append(c)
        lo, hi = (a, c) if a < c else (c, a)
        merges.append((members[lo], members[hi]))
        if linkage == "complete":
            newrow = np.maximum(d[lo], d[hi])
        elif linkage == "single":
            newrow = np.minimum(d[lo], d[hi])
        elif linkage == "average":
            newrow = (sizes[lo] * d[lo] + sizes[hi] * d[hi]) / (sizes[lo] + sizes[hi])
        else:
            raise ValueError(f"unknown linkage {linkage!r}")
        d[lo], d[:, lo] = newrow, newrow
        d[lo, lo] = np.inf
        d[hi], d[:, hi] = np.inf, np.inf
        active[hi] = False
        sizes[lo] += sizes[hi]
        members[lo] = tuple(sorted(members[lo] + members[hi]))
    return merges


def _order_tree_events(
    matrix: SimilarityMatrix,
    merges,
    strategy: str,
    tv: TaskVectorSet | None,
) -> list[MergeEvent]:
    """Score dendrogram merges canonically and emit them in greedy order
    (best key first, never before both sides exist)."""
    scored = []
    for lm, rm in merges:
        s = group_similarity(matrix, lm, rm, strategy, tv)
        scored.append(_pair_event(matrix.block_id, lm, rm, s))
    live = {(k,) for k in range(matrix.num_tasks)}
    remaining = list(scored)
    out: list[MergeEvent] = []
    while remaining:
        ready = [e for e in remaining if e.left in live and e.right in live]
        best = min(ready, key=MergeEvent.key)
        remaining.remove(best)
        live.discard(best.left)
        live.discard(best.right)
        live.add(tuple(sorted(best.left + best.right)))
        out.append(best)
    return out


def _unified_sequence(matrix: SimilarityMatrix, tv: TaskVectorSet) -> list[MergeEvent]:
    """Direct greedy merging where each group is represented by the plain
    average of its members (no precomputable linkage)."""
    m = matrix.num_tasks
    block_id = matrix.block_id
    groups: dict[int, tuple[int, ...]] = {i: (i,) for i in range(m)}
    reps: dict[int, np.ndarray] = {i: group_mean(tv, block_id, (i,)) for i in range(m)}
    scores: dict[tuple[int, int], float] = {}
    slots = sorted(groups)
    for idx, i in enumerate(slots):
        for j in slots[idx + 1 :]:
            scores[(i, j)] = cosine(reps[i], reps[j])
    events: list[MergeEvent] = []
    for _ in range(m - 1):
        best_pair = None
        best_key = None
        for (i, j), s in sorted(scores.items()):
            ev = _pair_event(block_id, groups[i], groups[j], s)
            if best_key is None or ev.key() < best_key:
                best_key = ev.key()
                best_pair = (i, j, ev)
        i, j, ev = best_pair
        events.append(ev)
        keep, drop = min(i, j), max(i, j)
        groups[keep] = tuple(sorted(groups[i] + groups[j]))
        del groups[drop]
        reps[keep] = group_mean(tv, block_id, groups[keep])
        del reps[drop]
        scores = {p: s for p, s in scores.items() if drop not in p and keep not in p}
        for other in groups:
            if other == keep:
                continue
            pair = (min(keep, other), max(keep, other))
            scores[pair] = cosine(reps[keep], reps[other])
    return events


_LINKAGE_FOR_STRATEGY = {"min": "complete", "max": "single", "avg": "average"}


def block_merge_sequence(
    matrix: SimilarityMatrix,
    strategy: str = "min",
    tv: TaskVectorSet | None = None,
) -> list[MergeEvent]:
    """Sequence of M-1 merges for one block, highest linkage first.

    Equals the naive greedy argmax under the canonical tie-break
    (score desc, min member id asc, other group's min id asc).
    """
    if matrix.num_tasks <= 1:
        return []
    if strategy == "unified":
        if tv is None:
            raise ValueError("unified strategy needs the task vectors")
        return _unified_sequence(matrix, tv)
    linkage = _LINKAGE_FOR_STRATEGY.get(strategy)
    if linkage is None:
        raise ValueError(f"unknown strategy {strategy!r}")
    dis = 1.0 - matrix.values.astype(np.float64)
    merges = _nn_chain_tree(dis, linkage)
    return _order_tree_events(matrix, merges, strategy, tv)


# ---------------------------------------------------------------------------
# Global ordering
# ---------------------------------------------------------------------------

def global_merge_order(
    sequences: list[list[MergeEvent]],
    policy: str = "greedy",
    seed: int | None = None,
    strategy: str = "min",
    block_keys: tuple[str, ...] = (),
    num_tasks: int | None = None,
) -> MergePlan:
    """Interleave per-block sequences into one global MergePlan.

    greedy merges the block heads through a min-heap (globally sorted by
    score for the monotone strategies); left_to_right / right_to_left
    concatenate in block order; random draws the next block uniformly with a
    seeded generator, preserving each block's internal order.
    """
    order: list[MergeEvent] = []
    if policy == "greedy":
        heap = []
        for b, seq in enumerate(sequences):
            if seq:
                heapq.heappush(heap, (seq[0].key(), b, 0))
        while heap:
            _, b, i = heapq.heappop(heap)
            order.append(sequences[b][i])
            if i + 1 < len(sequences[b]):
                heapq.heappush(heap, (sequences[b][i + 1].key(), b, i + 1))
    elif policy == "left_to_right":
        for seq in sequences:
            order.extend(seq)
    elif policy == "right_to_left":
        for seq in reversed(sequences):
            order.extend(seq)
    elif policy == "random":
        rng = random.Random(0 if seed is None else seed)
        pointers = {b: 0 for b, seq in enumerate(sequences) if seq}
        alive = sorted(pointers)
        while alive:
            b = alive[rng.randrange(len(alive))]
            order.append(sequences[b][pointers[b]])
            pointers[b] += 1
            if pointers[b] == len(sequences[b]):
                alive.remove(b)
    else:
        raise ValueError(f"unknown order policy {policy!r}; expected one of {ORDER_POLICIES}")

    events = tuple(replace(ev, seq=i) for i, ev in enumerate(order))
    m = num_tasks if num_tasks is not None else (max((len(s) for s in sequences), default=0) + 1)
    return MergePlan(
        events=events,
        strategy=strategy,
        order_policy=policy,
        seed=seed,
        num_tasks=m,
        num_blocks=len(sequences),
        block_keys=tuple(block_keys),
    )


def compute_merge_plan(
    tv: TaskVectorSet,
    strategy: str = "min",
    order_policy: str = "greedy",
    seed: int | None = None,
    matrices: list[SimilarityMatrix] | None = None,
) -> MergePlan:
    """Similarity matrices -> per-block sequences -> global plan."""
    if matrices is None:
        matrices = pairwise_all(tv)
    sequences = map_blocks(lambda mx: block_merge_sequence(mx, strategy, tv), matrices)
    return global_merge_order(
        sequences,
        policy=order_policy,
        seed=seed,
        strategy=strategy,
        block_keys=tuple(tv.partition.block_keys),
        num_tasks=tv.num_tasks,
    )


def naive_greedy_order(
    tv: TaskVectorSet,
    strategy: str = "min",
    matrices: list[SimilarityMatrix] | None = None,
) -> MergePlan:
    """Reference scheduler: at every step scan all (block, group pair)
    candidates and apply the best under the canonical tie-break. Cubic in M;
    used as the testing oracle for the chain+heap fast path."""
    if matrices is None:
        matrices = pairwise_all(tv)
    state: list[list[tuple[int, ...]]] = [
        [(k,) for k in range(tv.num_tasks)] for _ in matrices
    ]
    events: list[MergeEvent] = []
    total = sum(max(0, tv.num_tasks - 1) for _ in matrices)
    for seq in range(total):
        best: MergeEvent | None = None
        for b, groups in enumerate(state):
            for i in range(len(groups)):
                for j in range(i + 1, len(groups)):
                    s = group_similarity(matrices[b], groups[i], groups[j], strategy, tv)
                    ev = _pair_event(b, groups[i], groups[j], s)
                    if best is None or ev.key() < best.key():
                        best = ev
        events.append(replace(best, seq=seq))
        groups = state[best.block_id]
        groups.remove(best.left)
        groups.remove(best.right)
        groups.append(tuple(sorted(best.left + best.right)))
    return MergePlan(
        events=tuple(events),
        strategy=strategy,
        order_policy="greedy",
        seed=None,
        num_tasks=tv.num_tasks,
        num_blocks=len(matrices),
        block_keys=tuple(tv.partition.block_keys),
    )


# ---------------------------------------------------------------------------
# Size accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SizeModel:
    """Exact byte accounting for deployed artifacts.

    Dense families store one weight block per group. Mask families store,
    per merged group, one dense unified block plus a 1-bit-per-parameter
    mask per member, and the pretrained block once for any block containing
    a merged group; per-member rescaling scalars (emr) are reported in the
    byte breakdown but excluded from the unit value, matching the convention
    that their cost is negligible.
    """

    block_nbytes: tuple[int, ...]
    block_dims: tuple[int, ...]
    masked: bool = False
    scalars: bool = False

    @staticmethod
    def from_partition(part: BlockPartition, cfg: MergerConfig | None = None) -> "SizeModel":
        masked = bool(cfg and cfg.masked)
        scalars = bool(cfg and cfg.has_rescalers)
        return SizeModel(
            block_nbytes=tuple(part.block_nbytes),
            block_dims=tuple(part.block_dims),
            masked=masked,
            scalars=scalars,
        )

    @property
    def unit_bytes(self) -> int:
        return sum(self.block_nbytes)

    def mask_nbytes(self, block_id: int) -> int:
        return (self.block_dims[block_id] + 7) // 8

    def initial_size(self, num_tasks: int) -> ModelUnits:
        return Fraction(num_tasks)

    def stored_bytes(self, block_groups) -> dict[str, int]:
        """Byte breakdown {dense, mask, pretrained, scalar} for a partition
        state (scalar bytes reported, not counted in units)."""
        dense = mask = pretrained = scalar = 0
        for b, groups in enumerate(block_groups):
            bb = self.block_nbytes[b]
            mb = self.mask_nbytes(b)
            any_multi = False
            for g in groups:
                if len(g) == 1 or not self.masked:
                    dense += bb
                else:
                    any_multi = True
                    dense += bb
                    mask += len(g) * mb
                    if self.scalars:
                        scalar += 4 * len(g)
            if self.masked and any_multi:
                pretrained += bb
        return {"dense": dense, "mask": mask, "pretrained": pretrained, "scalar": scalar}

    def size_of(self, block_groups) -> ModelUnits:
        parts = self.stored_bytes(block_groups)
        counted = parts["dense"] + parts["mask"] + parts["pretrained"]
        return Fraction(counted, self.unit_bytes)

    def merge_delta(
        self, block_id: int, left_size: int, right_size: int, block_had_merged: bool
    ) -> ModelUnits:
        """Exact unit change from replacing two groups with their union."""
        bb = self.block_nbytes[block_id]
        if not self.masked:
            return Fraction(-bb, self.unit_bytes)
        mb = self.mask_nbytes(block_id)

        def cost(sz: int) -> int:
            return bb + (sz * mb if sz > 1 else 0)

        delta = cost(left_size + right_size) - cost(left_size) - cost(right_size)
        if not block_had_merged:
            delta += bb  # pretrained block becomes necessary
        return Fraction(delta, self.unit_bytes)


def size_of(assignment: GroupAssignment, sm: SizeModel) -> ModelUnits:
    """Deployed size of an assignment, recomputed from scratch."""
    return sm.size_of(assignment.block_groups)


def replay_to_size(
    plan: MergePlan,
    tv: TaskVectorSet,
    target: ModelUnits,
    sm: SizeModel,
) -> GroupAssignment:
    """Apply plan events in order until the tracked size first drops to
    ``target`` or the plan is exhausted (targets below the family's floor
    just return the fully merged state)."""
    if tv.num_tasks != plan.num_tasks or len(tv.block_vectors) != plan.num_blocks:
        raise ValueError("plan and task vectors disagree on tasks/blocks")
    target = Fraction(target)
    m = plan.num_tasks
    dsus = [DisjointSet(m) for _ in range(plan.num_blocks)]
    merged_groups = [0] * plan.num_blocks
    size = sm.initial_size(m)
    applied = 0
    if size > target:
        for ev in plan.events:
            b = ev.block_id
            ra = dsus[b].find(ev.left[0])
            rb = dsus[b].find(ev.right[0])
            if ra == rb:
                raise ValueError(f"plan event {ev.seq} re-merges an existing group")
            la, lb = dsus[b].size[ra], dsus[b].size[rb]
            size += sm.merge_delta(b, la, lb, merged_groups[b] > 0)
            merged_groups[b] += 1 - (la > 1) - (lb > 1)
            dsus[b].union(ra, rb)
            applied += 1
            if size <= target:
                break
    return GroupAssignment(
        block_groups=[d.groups() for d in dsus],
        applied_events=applied,
        size=size,
    )


# ---------------------------------------------------------------------------
# Fixed-K per-block clustering baseline
# ---------------------------------------------------------------------------

def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    chosen = [int(rng.integers(m))]
    centers[0] = x[chosen[0]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            pick = next(i for i in range(m) if i not in chosen)
        else:
            r = rng.random() * total
            pick = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            pick = min(pick, m - 1)
        chosen.append(pick)
        centers[c] = x[pick]
        d2 = np.minimum(d2, ((x - centers[c]) ** 2).sum(axis=1))
    return centers


def _fix_empty_clusters(labels: np.ndarray, d2: np.ndarray, k: int) -> np.ndarray:
    labels = labels.copy()
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.nonzero(counts == 0)[0]
        if empty.size == 0:
            return labels
        e = int(empty[0])
        movable = np.nonzero(counts[labels] > 1)[0]
        own = d2[movable, labels[movable]]
        labels[int(movable[int(np.argmax(own))])] = e
        # re-seeded cluster holds exactly the farthest point for this round


def _kmeans_block(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100) -> np.ndarray:
    m = x.shape[0]
    xn = x.astype(np.float64)
    norms = np.sqrt((xn * xn).sum(axis=1))
    xn = xn / np.where(norms == 0.0, 1.0, norms)[:, None]
    centers = _kmeans_pp_init(xn, k, rng)
    prev = None
    for _ in range(max_iter):
        d2 = ((xn[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        labels = _fix_empty_clusters(labels, d2, k)
        if prev is not None and np.array_equal(labels, prev):
            break
        prev = labels
        for c in range(k):
            centers[c] = xn[labels == c].mean(axis=0)
    return prev if prev is not None else np.zeros(m, dtype=int)


def kmeans_baseline(
    tv: TaskVectorSet,
    k: int,
    seed: int = 0,
    sm: SizeModel | None = None,
) -> GroupAssignment:
    """Per-block k-means++ clustering of the task vectors into exactly K
    groups (the fixed-cluster-count baseline; no fractional sizes)."""
    if not 1 <= k <= tv.num_tasks:
        raise ValueError(f"k must be in [1, {tv.num_tasks}], got {k}")
    if sm is None:
        sm = SizeModel.from_partition(tv.partition)
    block_groups = []
    for b, x in enumerate(tv.block_vectors):
        labels = _kmeans_block(x, k, np.random.default_rng([seed, b]))
        clusters: dict[int, list[int]] = {}
        for task, lab in enumerate(labels):
            clusters.setdefault(int(lab), []).append(task)
        block_groups.append(
            tuple(tuple(sorted(g)) for g in sorted(clusters.values(), key=lambda g: g[0]))
        )
    assignment = GroupAssignment(
        block_groups=block_groups,
        applied_events=sum(tv.num_tasks - k for _ in tv.block_vectors),
        size=Fraction(0),
    )
    assignment.size = sm.size_of(assignment.block_groups)
    return assignment


def write_assignment_json(
    assignment: GroupAssignment, block_keys: Sequence[str], path: str
) -> None:
    """Export the per-block task grouping as {block_key: [[task ids], ...]}."""
    obj = {
        key: [list(g) for g in groups]
        for key, groups in zip(block_keys, assignment.block_groups)
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Plan serialization (JSON lines)
# ---------------------------------------------------------------------------

def write_plan_jsonl(plan: MergePlan, path: str) -> None:
    """One event per line: {"seq", "block", "left", "right", "score"} with
    the score rounded to float32."""
    with open(path, "w", encoding="utf-8") as fh:
        for ev in plan.events:
            fh.write(
                json.dumps(
                    {
                        "seq": ev.seq,
                        "block": ev.block_id,
                        "left": list(ev.left),
                        "right": list(ev.right),
                        "score": float(np.float32(ev.score)),
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


def read_plan_jsonl(
    path: str,
    strategy: str = "min",
    order_policy: str = "greedy",
    seed: int | None = None,
    num_tasks: int | None = None,
    num_blocks: int | None = None,
    block_keys: tuple[str, ...] = (),
) -> MergePlan:
    events = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            events.append(
                MergeEvent(
                    block_id=int(obj["block"]),
                    left=tuple(obj["left"]),
                    right=tuple(obj["right"]),
                    score=float(obj["score"]),
                    seq=int(obj["seq"]),
                )
            )
    events.sort(key=lambda e: e.seq)
    if num_tasks is None:
        num_tasks = max((len(e.left) + len(e.right) for e in events), default=1)
    if num_blocks is None:
        num_blocks = max((e.block_id for e in events), default=-1) + 1
    return MergePlan(
        events=tuple(events),
        strategy=strategy,
        order_policy=order_policy,
        seed=seed,
        num_tasks=num_tasks,
        num_blocks=num_blocks,
        block_keys=block_keys,
    )
