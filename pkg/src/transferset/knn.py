"""Exact blocked top-k search over embedding stores.

Scores are accumulated in float64 in ascending dimension order by a compiled
kernel, so a given (query, gallery) score is bit-identical no matter how the
gallery is partitioned into blocks or how query blocks are spread over
threads.  Search first ranks each block with a BLAS product, keeps every item
whose approximate key lies within a rigorous rounding bound of the current
k-th best, and re-scores only those with the exact kernel.  Candidates are ordered by the total order (score, item_id), which
makes block merges associative and the final rank lists schedule-independent.
"""
from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numba
import numpy as np

from .store import DualStore, EmbeddingStore

UNIT_TOL = 1e-5
_TILE = 256


class Metric(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"
    DUAL_AVG_COSINE = "dual_avg_cosine"

    @property
    def descending(self) -> bool:
        """True when larger scores rank first."""
        return self is not Metric.EUCLIDEAN

    @classmethod
    def parse(cls, value: "str | Metric") -> "Metric":
        if isinstance(value, Metric):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"dualavgcosine": "dual_avg_cosine", "dual": "dual_avg_cosine", "l2": "euclidean"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown metric {value!r}") from None


@dataclass(frozen=True)
class Neighbor:
    item_id: int
    score: float
    rank: int


@dataclass
class RankList:
    """Neighbors of one query, best first; ties broken by ascending item_id."""

    query_id: int
    metric: Metric
    ids: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def neighbors(self) -> list[Neighbor]:
        return [
            Neighbor(int(i), float(s), r + 1)
            for r, (i, s) in enumerate(zip(self.ids.tolist(), self.scores.tolist()))
        ]

    def to_json(self) -> dict:
        return {
            "query_id": int(self.query_id),
            "metric": self.metric.value,
            "neighbors": [[int(i), float(s)] for i, s in zip(self.ids.tolist(), self.scores.tolist())],
        }


Gallery = Union[EmbeddingStore, DualStore]


@numba.njit(nogil=True, cache=True)
def _block_kernel(q, g, out, euclidean):
    nq, d = q.shape
    ng = g.shape[0]
    acc = np.empty(_TILE)
    tile = np.empty((d, _TILE))
    for j0 in range(0, ng, _TILE):
        w = min(j0 + _TILE, ng) - j0
        for j in range(w):
            for t in range(d):
                tile[t, j] = g[j0 + j, t]
        for i in range(nq):
            for j in range(w):
                acc[j] = 0.0
            for t in range(d):
                qv = q[i, t]
                if euclidean:
                    for j in range(w):
                        diff = qv - tile[t, j]
                        acc[j] += diff * diff
                else:
                    for j in range(w):
                        acc[j] += qv * tile[t, j]
            for j in range(w):
                out[i, j0 + j] = acc[j]


@numba.njit(nogil=True, cache=True)
def _gather_kernel(qv, g, cols, out, euclidean):
    d = qv.shape[0]
    for p in range(cols.shape[0]):
        c = cols[p]
        acc = 0.0
        for t in range(d):
            if euclidean:
                diff = qv[t] - g[c, t]
                acc += diff * diff
            else:
                acc += qv[t] * g[c, t]
        out[p] = acc


def _as_f64(block: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(block, dtype=np.float64)


def _check_unit(block: np.ndarray, what: str) -> None:
    if block.shape[0] == 0:
        return
    norms = np.sqrt(np.einsum("ij,ij->i", block, block))
    off = np.abs(norms - 1.0) > UNIT_TOL
    if off.any():
        i = int(np.flatnonzero(off)[0])
        raise ValueError(f"{what} row {i} is not unit-norm (norm {norms[i]!r}); cosine needs normalized input")


def _raw_scores(q: np.ndarray, g: np.ndarray, euclidean: bool) -> np.ndarray:
    out = np.empty((q.shape[0], g.shape[0]), dtype=np.float64)
    _block_kernel(q, g, out, euclidean)
    if euclidean:
        np.sqrt(out, out=out)
    return out


def pairwise_scores(query_block, gallery_block, metric: "Metric | str", *, check_norms: bool = True) -> np.ndarray:
    """``q x g`` float64 matrix of metric scores.

    For :attr:`Metric.DUAL_AVG_COSINE` both arguments are ``(block_a, block_b)``
    pairs and the score is the mean of the two cosine similarities.
    """
    metric = Metric.parse(metric)
    if metric is Metric.DUAL_AVG_COSINE:
        if not (isinstance(query_block, tuple) and isinstance(gallery_block, tuple)):
            raise TypeError("dual_avg_cosine needs (block_a, block_b) pairs on both sides")
        sa = pairwise_scores(query_block[0], gallery_block[0], Metric.COSINE, check_norms=check_norms)
        sb = pairwise_scores(query_block[1], gallery_block[1], Metric.COSINE, check_norms=check_norms)
        return (sa + sb) / 2.0
    q = _as_f64(np.atleast_2d(query_block))
    g = _as_f64(np.atleast_2d(gallery_block))
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch: query dim {q.shape[1]} vs gallery dim {g.shape[1]}")
    if metric is Metric.COSINE and check_norms:
        _check_unit(q, "query")
        _check_unit(g, "gallery")
    return _raw_scores(q, g, metric is Metric.EUCLIDEAN)


def _sort_key(scores: np.ndarray, metric: Metric) -> np.ndarray:
    return -scores if metric.descending else scores


def _select(keys: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k best (key, id) pairs, in order."""
    if keys.shape[0] > k:
        kth = np.partition(keys, k - 1)[k - 1]
        cand = np.flatnonzero(keys <= kth)
    else:
        cand = np.arange(keys.shape[0])
    order = np.lexsort((ids[cand], keys[cand]))
    return cand[order[:k]]


class _Side:
    """Uniform access to one or two aligned matrices."""

    def __init__(self, obj, metric: Metric, what: str):
        if metric is Metric.DUAL_AVG_COSINE:
            if not isinstance(obj, (DualStore, tuple)):
                raise TypeError(f"dual_avg_cosine requires a DualStore {what}")
            if isinstance(obj, DualStore):
                self.mats = (obj.store_a.data, obj.store_b.data)
                self.checked = obj.normalized
            else:
                self.mats = (np.atleast_2d(obj[0]), np.atleast_2d(obj[1]))
                self.checked = False
        else:
            if isinstance(obj, DualStore):
                raise TypeError(f"{metric.value} takes a single store {what}, not a DualStore")
            if isinstance(obj, EmbeddingStore):
                self.mats = (obj.data,)
                self.checked = obj.normalized
            else:
                self.mats = (np.atleast_2d(obj),)
                self.checked = False
        self.dual = len(self.mats) == 2
        self.count = self.mats[0].shape[0]

    def block(self, start: int, stop: int):
        parts = tuple(_as_f64(m[start:stop]) for m in self.mats)
        return parts if self.dual else parts[0]


def _ids_of(obj, n: int) -> np.ndarray:
    if isinstance(obj, (EmbeddingStore, DualStore)):
        return obj.item_ids
    return np.arange(n, dtype=np.uint64)


_EPS = np.finfo(np.float64).eps


def _approx_keys(qb, gb, metric: Metric) -> tuple[np.ndarray, np.ndarray]:
    """BLAS-speed keys (squared distance or negated similarity) and a per-query error bound.

    The bound covers the rounding of both the BLAS product and the exact
    fixed-order kernel, with a wide safety factor, so any item whose exact key
    can beat a threshold has an approximate key within ``2 * bound`` of it.
    """
    if metric is Metric.DUAL_AVG_COSINE:
        keys = -((qb[0] @ gb[0].T) + (qb[1] @ gb[1].T)) / 2.0
        d = qb[0].shape[1]
        qn = np.maximum(np.linalg.norm(qb[0], axis=1), np.linalg.norm(qb[1], axis=1))
        gn = max(_max_norm(gb[0]), _max_norm(gb[1]))
        return keys, 16.0 * (d + 2) * _EPS * (qn * gn + 1e-300)
    d = qb.shape[1]
    qn = np.linalg.norm(qb, axis=1)
    gn = _max_norm(gb)
    if metric is Metric.EUCLIDEAN:
        keys = (qn**2)[:, None] + np.einsum("ij,ij->i", gb, gb)[None, :] - 2.0 * (qb @ gb.T)
        return keys, 16.0 * (d + 2) * _EPS * ((qn + gn) ** 2 + 1e-300)
    return -(qb @ gb.T), 16.0 * (d + 2) * _EPS * (qn * gn + 1e-300)


def _max_norm(block: np.ndarray) -> float:
    if block.shape[0] == 0:
        return 0.0
    return float(np.sqrt(np.einsum("ij,ij->i", block, block).max()))


def _exact_keys(qb, r: int, gb, cols: np.ndarray, metric: Metric) -> np.ndarray:
    """Exact keys for query row ``r`` against gallery rows ``cols`` (same arithmetic as pairwise_scores)."""
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    if metric is Metric.DUAL_AVG_COSINE:
        sa = np.empty(cols.shape[0])
        sb = np.empty(cols.shape[0])
        _gather_kernel(qb[0][r], gb[0], cols, sa, False)
        _gather_kernel(qb[1][r], gb[1], cols, sb, False)
        return -((sa + sb) / 2.0)
    out = np.empty(cols.shape[0])
    if metric is Metric.EUCLIDEAN:
        _gather_kernel(qb[r], gb, cols, out, True)
        return np.sqrt(out)
    _gather_kernel(qb[r], gb, cols, out, False)
    return -out


def _search_block(
    qside: _Side,
    q0: int,
    q1: int,
    query_ids: np.ndarray,
    gside: _Side,
    gallery_ids: np.ndarray,
    allowed: np.ndarray | None,
    k: int,
    metric: Metric,
    block_size: int,
    exclude_self: bool,
) -> list[tuple[np.ndarray, np.ndarray]]:
    qb = qside.block(q0, q1)
    nq = q1 - q0
    if metric is Metric.COSINE and not qside.checked:
        _check_unit(qb, "query")
    if metric is Metric.DUAL_AVG_COSINE and not qside.checked:
        _check_unit(qb[0], "query")
        _check_unit(qb[1], "query")
    best_keys = [np.empty(0) for _ in range(nq)]
    best_ids = [np.empty(0, dtype=np.uint64) for _ in range(nq)]
    euclid = metric is Metric.EUCLIDEAN
    for g0 in range(0, gside.count, block_size):
        g1 = min(g0 + block_size, gside.count)
        gids = gallery_ids[g0:g1]
        gb = gside.block(g0, g1)
        if not gside.checked and metric is not Metric.EUCLIDEAN:
            for part in gb if gside.dual else (gb,):
                _check_unit(part, "gallery")
        approx, bound = _approx_keys(qb, gb, metric)
        if allowed is not None:
            approx[:, ~allowed[g0:g1]] = np.inf
        if exclude_self:
            approx[gids[None, :] == query_ids[q0:q1, None]] = np.inf
        width = g1 - g0
        for r in range(nq):
            row = approx[r]
            m = bound[r]
            if width > k:
                thr = np.partition(row, k - 1)[k - 1] + 2.0 * m
            else:
                thr = np.inf
            if len(best_keys[r]) == k:
                cur = best_keys[r][-1]
                thr = min(thr, (cur * cur if euclid else cur) + m)
            cand = np.flatnonzero((row <= thr) & np.isfinite(row))
            if cand.size == 0:
                continue
            ck = np.concatenate([best_keys[r], _exact_keys(qb, r, gb, cand, metric)])
            ci = np.concatenate([best_ids[r], gids[cand]])
            keep = _select(ck, ci, k)
            best_keys[r], best_ids[r] = ck[keep], ci[keep]
    out = []
    for r in range(nq):
        keys, ids = best_keys[r], best_ids[r]
        scores = -keys if metric.descending else keys
        out.append((ids, scores + 0.0))
    return out


def top_k_batch(
    queries,
    gallery: Gallery,
    k: int,
    metric: "Metric | str" = Metric.EUCLIDEAN,
    block_size: int = 16384,
    *,
    exclude: Iterable[int] = (),
    exclude_self: bool = False,
    query_ids: Sequence[int] | None = None,
    threads: int = 1,
    query_block: int = 64,
) -> list[RankList]:
    """Exact top-k for every query.

    ``queries`` may be a store, a dual store, an array, or a pair of arrays
    (dual metric).  ``exclude`` removes gallery item ids from every result;
    ``exclude_self`` additionally drops the gallery row whose id equals the
    query's own id.  Output does not depend on ``block_size``, ``threads`` or
    ``query_block``.
    """
    metric = Metric.parse(metric)
    if block_size < 1 or query_block < 1:
        raise ValueError("block sizes must be >= 1")
    qside = _Side(queries, metric, "query set")
    gside = _Side(gallery, metric, "gallery")
    if qside.mats[0].shape[1] != gside.mats[0].shape[1]:
        raise ValueError(
            f"dimension mismatch: query dim {qside.mats[0].shape[1]} vs gallery dim {gside.mats[0].shape[1]}"
        )
    nq = qside.count
    qids = np.asarray(query_ids, dtype=np.uint64) if query_ids is not None else _ids_of(queries, nq)
    if len(qids) != nq:
        raise ValueError("query_ids length does not match number of queries")
    gids = _ids_of(gallery, gside.count)
    excl = np.fromiter((int(i) for i in exclude), dtype=np.uint64)
    allowed = None
    n_avail = gside.count
    if excl.size:
        allowed = ~np.isin(gids, excl)
        n_avail = int(allowed.sum())
    limit = n_avail - (1 if exclude_self and nq and np.isin(qids, gids).any() else 0)
    if not 1 <= k <= limit:
        raise ValueError(f"k={k} out of range [1, {limit}]")
    spans = [(s, min(s + query_block, nq)) for s in range(0, nq, query_block)]

    def run(span):
        return _search_block(
            qside, span[0], span[1], qids, gside, gids, allowed, k, metric, block_size, exclude_self
        )

    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, spans))
    else:
        parts = [run(s) for s in spans]
    results = []
    for (s0, _), part in zip(spans, parts):
        for off, (ids, scores) in enumerate(part):
            if len(ids) < k:
                raise ValueError(f"k={k} out of range for query {int(qids[s0 + off])}")
            results.append(RankList(int(qids[s0 + off]), metric, ids, scores))
    return results


def top_k(
    query,
    gallery: Gallery,
    k: int,
    metric: "Metric | str" = Metric.EUCLIDEAN,
    exclude: Iterable[int] = (),
    *,
    query_id: int = 0,
    exclude_self: bool = False,
    block_size: int = 16384,
) -> RankList:
    """Exact top-k for a single query vector (or ``(vec_a, vec_b)`` pair)."""
    metric = Metric.parse(metric)
    if metric is Metric.DUAL_AVG_COSINE:
        q = (np.atleast_2d(query[0]), np.atleast_2d(query[1]))
    else:
        q = np.atleast_2d(query)
    return top_k_batch(
        q, gallery, k, metric, block_size, exclude=exclude, exclude_self=exclude_self, query_ids=[query_id]
    )[0]


def min_distance_to_set(x: np.ndarray, queries: EmbeddingStore | np.ndarray) -> float:
    """Smallest Euclidean distance from ``x`` to any row of ``queries``."""
    mat = queries.data if isinstance(queries, EmbeddingStore) else np.atleast_2d(queries)
    if mat.shape[0] == 0:
        raise ValueError("query set is empty")
    return float(pairwise_scores(np.atleast_2d(x), mat, Metric.EUCLIDEAN).min())


def nearest_query(
    queries,
    gallery: Gallery,
    metric: "Metric | str" = Metric.EUCLIDEAN,
    block_size: int = 16384,
) -> tuple[np.ndarray, np.ndarray]:
    """Best score of each gallery row against the query set and the query row achieving it.

    Ties go to the lowest query row.  Returns ``(scores, query_rows)``, both of
    length ``gallery.count``.
    """
    metric = Metric.parse(metric)
    qside = _Side(queries, metric, "query set")
    gside = _Side(gallery, metric, "gallery")
    if qside.count == 0:
        raise ValueError("query set is empty")
    check = not (qside.checked and gside.checked)
    qb = qside.block(0, qside.count)
    best = np.empty(gside.count, dtype=np.float64)
    arg = np.empty(gside.count, dtype=np.int64)
    for g0 in range(0, gside.count, block_size):
        g1 = min(g0 + block_size, gside.count)
        keys = _sort_key(pairwise_scores(qb, gside.block(g0, g1), metric, check_norms=check), metric)
        a = np.argmin(keys, axis=0)
        arg[g0:g1] = a
        best[g0:g1] = keys[a, np.arange(g1 - g0)]
    scores = -best if metric.descending else best
    return scores + 0.0, arg
