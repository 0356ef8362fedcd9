"""Per-block cosine similarity matrices and group linkage scores.

Linkage strategies map two groups' member-pair similarities to one score:

* ``min``  -- lowest cosine over cross pairs (the default driving merging)
* ``max``  -- highest cosine over cross pairs
* ``avg``  -- unweighted mean over all cross pairs
* ``unified`` -- cosine between the plain averages of each group's members
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import LengthMismatch, OverlappingGroups
from .task_space import TaskVectorSet

STRATEGIES = ("min", "max", "avg", "unified")


def worker_count() -> int:
    """Parallel workers for block-wise loops, capped by BLOCKMERGE_THREADS."""
    raw = os.environ.get("BLOCKMERGE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def map_blocks(fn, items: Sequence) -> list:
    """Apply fn over independent per-block work items, optionally threaded.
    Output order matches input order regardless of worker count."""
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class SimilarityMatrix:
    """Symmetric M x M float32 cosine matrix for one block, diagonal fixed
    to 1. Tasks whose block vector is exactly zero get similarity 0 to
    everything and are listed in ``zero_tasks``."""

    block_id: int
    values: np.ndarray
    zero_tasks: tuple[int, ...] = ()

    @property
    def num_tasks(self) -> int:
        return self.values.shape[0]


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; zero-norm inputs yield 0."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape or u.ndim != 1:
        raise LengthMismatch(f"cosine needs equal-length flat vectors, got {u.shape} and {v.shape}")
    u64 = u.astype(np.float64, copy=False)
    v64 = v.astype(np.float64, copy=False)
    nu = float(np.dot(u64, u64)) ** 0.5
    nv = float(np.dot(v64, v64)) ** 0.5
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u64, v64) / (nu * nv), -1.0, 1.0))


def pairwise_block_similarity(tv: TaskVectorSet, block_id: int) -> SimilarityMatrix:
    """All-pairs cosine over the block's task vectors (float64 accumulation,
    result stored float32)."""
    x = tv.block_vectors[block_id].astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    xn = x / safe[:, None]
    s = xn @ xn.T
    np.clip(s, -1.0, 1.0, out=s)
    s[zero, :] = 0.0
    s[:, zero] = 0.0
    out = s.astype(np.float32)
    np.fill_diagonal(out, np.float32(1.0))
    return SimilarityMatrix(
        block_id=block_id,
        values=out,
        zero_tasks=tuple(int(i) for i in np.nonzero(zero)[0]),
    )


def pairwise_all(tv: TaskVectorSet) -> list[SimilarityMatrix]:
    return map_blocks(lambda b: pairwise_block_similarity(tv, b), range(len(tv.block_vectors)))


def group_mean(tv: TaskVectorSet, block_id: int, members: Iterable[int]) -> np.ndarray:
    """Plain average of member task vectors, accumulated in float64 in
    ascending task order (the canonical representative for ``unified``)."""
    members = sorted(members)
    acc = np.zeros(tv.block_vectors[block_id].shape[1], dtype=np.float64)
    for k in members:
        acc += tv.block_vectors[block_id][k]
    acc /= len(members)
    return acc


def group_similarity(
    matrix: SimilarityMatrix,
    a: Iterable[int],
    b: Iterable[int],
    strategy: str = "min",
    tv: TaskVectorSet | None = None,
) -> float:
    """Linkage score between two disjoint task groups.

    min/max/avg read only the precomputed matrix; ``unified`` recomputes the
    cosine of the two group averages and needs ``tv``.
    """
    a = sorted(a)
    b = sorted(b)
    if not a or not b:
        raise ValueError("groups must be non-empty")
    if set(a) & set(b):
        raise OverlappingGroups(f"groups overlap: {sorted(set(a) & set(b))}")
    if strategy == "unified":
        if tv is None:
            raise ValueError("unified strategy needs the task vectors")
        return cosine(group_mean(tv, matrix.block_id, a), group_mean(tv, matrix.block_id, b))
    sub = matrix.values[np.ix_(a, b)]
    if strategy == "min":
        return float(sub.min())
    if strategy == "max":
        return float(sub.max())
    if strategy == "avg":
        return float(np.mean(sub.astype(np.float64)))
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
