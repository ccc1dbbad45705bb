"""Fixed-radius neighbour search on a uniform grid with cell edge R."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

_STENCIL = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class NeighborList:
    """CSR adjacency: neighbours of query ``q`` are ``indices[offsets[q]:offsets[q+1]]``.

    ``rel_offsets`` holds ``points[i] - queries[q]`` for each stored pair and
    ``distances`` its Euclidean norm. Neighbour indices are ascending per query.
    """

    offsets: np.ndarray
    indices: np.ndarray
    rel_offsets: np.ndarray
    distances: np.ndarray
    radius: float

    @property
    def n_queries(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_pairs(self) -> int:
        return len(self.indices)

    @cached_property
    def query_index(self) -> np.ndarray:
        """Query id of every stored pair (same length as ``indices``)."""
        return np.repeat(np.arange(self.n_queries), np.diff(self.offsets))

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors(self, q: int) -> np.ndarray:
        return self.indices[self.offsets[q]:self.offsets[q + 1]]

    def pairs(self) -> set:
        return set(zip(self.query_index.tolist(), self.indices.tolist()))


def _check(name, a):
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite coordinates")
    return a


def build_neighbors(queries, points, R: float) -> NeighborList:
    """All pairs (q, i) with ``|points[i] - queries[q]| < R``, self pairs included."""
    if not R > 0:
        raise ValueError(f"radius must be positive, got {R}")
    queries = _check("queries", queries)
    points = _check("points", points)
    dtype = np.result_type(queries.dtype, points.dtype, np.float32)
    Q, N = len(queries), len(points)
    if Q == 0 or N == 0:
        return NeighborList(
            np.zeros(Q + 1, np.int64), np.zeros(0, np.int64), np.zeros((0, 3), dtype), np.zeros(0, dtype), float(R)
        )

    q64 = queries.astype(np.float64)
    p64 = points.astype(np.float64)
    qcell = np.floor(q64 / R).astype(np.int64)
    pcell = np.floor(p64 / R).astype(np.int64)
    lo = np.minimum(qcell.min(0), pcell.min(0)) - 1
    ext = np.maximum(qcell.max(0), pcell.max(0)) + 2 - lo
    if int(ext[0]) * int(ext[1]) * int(ext[2]) >= 2**62:
        raise ValueError("point cloud extent too large for the grid key space")

    def key(c):
        c = c - lo
        return (c[..., 0] * ext[1] + c[..., 1]) * ext[2] + c[..., 2]

    pkey = key(pcell)
    order = np.argsort(pkey, kind="stable")
    skey = pkey[order]

    nkey = key(qcell[:, None, :] + _STENCIL[None, :, :]).ravel()
    start = np.searchsorted(skey, nkey, side="left")
    stop = np.searchsorted(skey, nkey, side="right")
    cnt = stop - start
    total = int(cnt.sum())

    cand_q = np.repeat(np.repeat(np.arange(Q), 27), cnt)
    # position within each (query, cell) run, then map back into ``order``
    run_start = np.repeat(start - (np.cumsum(cnt) - cnt), cnt)
    cand_p = order[run_start + np.arange(total)]

    diff = p64[cand_p] - q64[cand_q]
    d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
    keep = d2 < R * R
    cand_q, cand_p, diff, d2 = cand_q[keep], cand_p[keep], diff[keep], d2[keep]

    srt = np.lexsort((cand_p, cand_q))
    cand_q, cand_p, diff, d2 = cand_q[srt], cand_p[srt], diff[srt], d2[srt]
    offsets = np.zeros(Q + 1, np.int64)
    np.cumsum(np.bincount(cand_q, minlength=Q), out=offsets[1:])
    return NeighborList(offsets, cand_p.astype(np.int64), diff.astype(dtype), np.sqrt(d2).astype(dtype), float(R))

