"""Transfer-set retrieval strategies.

Query-balanced selection finds the smallest neighborhood size ``k`` whose
union over all queries reaches ``N`` distinct gallery items, keeps every item
some query ranks above ``k``, and then drops rank-``k`` items of randomly
ordered queries until exactly ``N`` remain.  Best-matches ranks the gallery by
distance to the nearest query; random selection samples uniformly.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .knn import Gallery, Metric, RankList, nearest_query, top_k_batch
from .rng import GENERATOR_ID, make_rng
from .store import DualStore, EmbeddingStore, ItemRecord

TASK_SPLITS = ("query", "task-train", "task-val", "task-test")


class Strategy(str, enum.Enum):
    RANDOM = "random"
    BEST_MATCHES = "best_matches"
    QUERY_BALANCED = "query_balanced"

    @classmethod
    def parse(cls, value: "str | Strategy") -> "Strategy":
        if isinstance(value, Strategy):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"bestmatches": "best_matches", "querybalanced": "query_balanced", "qb": "query_balanced"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown strategy {value!r}") from None


class UnreachableError(ValueError):
    """Requested set size exceeds the number of reachable gallery items."""


@dataclass
class CurationResult:
    selected: list[int]
    strategy: Strategy
    metric: Metric | None
    seed: int
    k_final: int = 0
    attribution: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    dropped: list[tuple[int, int]] = field(default_factory=list)
    generator: str = GENERATOR_ID

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "metric": None if self.metric is None else self.metric.value,
            "seed": int(self.seed),
            "generator": self.generator,
            "k_final": int(self.k_final),
            "selected": [int(i) for i in self.selected],
            "attribution": {
                str(q): [[int(i), int(r)] for i, r in pairs] for q, pairs in sorted(self.attribution.items())
            },
            "dropped": [[int(q), int(i)] for q, i in self.dropped],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CurationResult":
        metric = obj.get("metric")
        return cls(
            selected=[int(i) for i in obj["selected"]],
            strategy=Strategy.parse(obj["strategy"]),
            metric=None if metric is None else Metric.parse(metric),
            seed=int(obj["seed"]),
            k_final=int(obj.get("k_final", 0)),
            attribution={
                int(q): [(int(i), int(r)) for i, r in pairs] for q, pairs in obj.get("attribution", {}).items()
            },
            dropped=[(int(q), int(i)) for q, i in obj.get("dropped", [])],
            generator=obj.get("generator", GENERATOR_ID),
        )


def _min_ranks(lists: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Distinct item ids and the best (smallest) 1-based rank any list gives them."""
    if not lists:
        return np.empty(0, dtype=np.uint64), np.empty(0, dtype=np.int64)
    ids = np.concatenate([np.asarray(x, dtype=np.uint64) for x in lists])
    ranks = np.concatenate([np.arange(1, len(x) + 1, dtype=np.int64) for x in lists])
    order = np.lexsort((ranks, ids))
    ids, ranks = ids[order], ranks[order]
    first = np.ones(len(ids), dtype=bool)
    first[1:] = ids[1:] != ids[:-1]
    return ids[first], ranks[first]


def _id_lists(ranklists) -> list[np.ndarray]:
    return [rl.ids if isinstance(rl, RankList) else np.asarray(rl, dtype=np.uint64) for rl in ranklists]


def union_size_fn(ranklists):
    """Callable ``k -> |union of top-k over queries|`` backed by precomputed lists."""
    _, best = _min_ranks(_id_lists(ranklists))
    best.sort()
    return lambda k: int(np.searchsorted(best, k, side="right"))


def smallest_k(ranklists, n: int) -> int:
    """Smallest ``k >= 1`` whose top-k union over all queries holds at least ``n`` items.

    Each list must be a complete prefix of its query's ranking.  Uses an
    exponential probe followed by binary search, relying on the union size
    being non-decreasing in ``k``.
    """
    lists = _id_lists(ranklists)
    if n < 1:
        raise ValueError("n must be >= 1")
    if not lists:
        raise UnreachableError("no queries")
    size = union_size_fn(lists)
    k_max = max(len(x) for x in lists)
    if k_max == 0 or size(k_max) < n:
        raise UnreachableError(f"N={n} unreachable: only {size(k_max)} distinct items within rank {k_max}")
    hi = 1
    while hi < k_max and size(hi) < n:
        hi = min(hi * 2, k_max)
    lo = hi // 2 + 1 if hi > 1 else 1
    while lo < hi:
        mid = (lo + hi) // 2
        if size(mid) >= n:
            hi = mid
        else:
            lo = mid + 1
    return hi


def query_balanced_from_ranklists(
    ranklists: Sequence[RankList],
    n: int,
    seed: int,
    metric: Metric | None = None,
) -> CurationResult:
    """Query-balanced selection over precomputed rank lists (query order as given)."""
    k = smallest_k(ranklists, n)
    lists = _id_lists(ranklists)
    qids = [int(rl.query_id) for rl in ranklists]
    items, best = _min_ranks([x[:k] for x in lists])
    core = items[best <= k - 1]
    fringe = items[best == k]
    need = n - len(core)
    if not 0 < need <= len(fringe):
        raise AssertionError(f"inconsistent core/fringe split: |core|={len(core)}, |fringe|={len(fringe)}, N={n}")

    selected = set(int(i) for i in items)
    fringe_live = set(int(i) for i in fringe)
    dropped: list[tuple[int, int]] = []
    order = make_rng(seed, "query-balanced-drop").permutation(len(lists))
    pos = 0
    while len(fringe_live) > need:
        qi = int(order[pos % len(order)])
        pos += 1
        if len(lists[qi]) < k:
            continue
        item = int(lists[qi][k - 1])
        if item in fringe_live:
            fringe_live.discard(item)
            selected.discard(item)
            dropped.append((qids[qi], item))

    rank_of = {int(i): int(r) for i, r in zip(items, best)}
    chosen = sorted(selected, key=lambda i: (rank_of[i], i))
    attribution = {}
    for qid, ids in zip(qids, lists):
        attribution[qid] = [(int(i), r + 1) for r, i in enumerate(ids[:k].tolist()) if int(i) in selected]
    m = metric if metric is not None else (ranklists[0].metric if ranklists else None)
    return CurationResult(
        selected=chosen,
        strategy=Strategy.QUERY_BALANCED,
        metric=m,
        seed=seed,
        k_final=k,
        attribution=attribution,
        dropped=dropped,
    )


def available_count(gallery: Gallery, exclude: Iterable[int]) -> int:
    excl = set(int(i) for i in exclude)
    if not excl:
        return gallery.count
    return int((~np.isin(gallery.item_ids, np.fromiter(excl, dtype=np.uint64))).sum())


def query_balanced_select(
    queries,
    gallery: Gallery,
    n: int,
    metric: "Metric | str" = Metric.EUCLIDEAN,
    seed: int = 0,
    *,
    exclude: Iterable[int] = (),
    exclude_self: bool = False,
    block_size: int = 16384,
    threads: int = 1,
    query_ids: Sequence[int] | None = None,
) -> CurationResult:
    metric = Metric.parse(metric)
    exclude = list(exclude)
    avail = available_count(gallery, exclude)
    if n < 1 or n > avail:
        raise UnreachableError(f"N={n} unreachable: {avail} gallery items available")
    k_cap = min(n, avail - (1 if exclude_self else 0))
    if k_cap < 1:
        raise UnreachableError(f"N={n} unreachable")
    lists = top_k_batch(
        queries,
        gallery,
        k_cap,
        metric,
        block_size,
        exclude=exclude,
        exclude_self=exclude_self,
        query_ids=query_ids,
        threads=threads,
    )
    return query_balanced_from_ranklists(lists, n, seed, metric)


def best_matches_select(
    queries,
    gallery: Gallery,
    n: int,
    metric: "Metric | str" = Metric.EUCLIDEAN,
    *,
    exclude: Iterable[int] = (),
    block_size: int = 16384,
    query_ids: Sequence[int] | None = None,
    seed: int = 0,
) -> CurationResult:
    """The ``n`` gallery items closest to their nearest query; ties by item_id."""
    metric = Metric.parse(metric)
    gids = gallery.item_ids
    excl = np.fromiter((int(i) for i in exclude), dtype=np.uint64)
    mask = ~np.isin(gids, excl) if excl.size else np.ones(len(gids), dtype=bool)
    if not 1 <= n <= int(mask.sum()):
        raise ValueError(f"N={n} out of range [1, {int(mask.sum())}]")
    scores, arg = nearest_query(queries, gallery, metric, block_size)
    if query_ids is None:
        if isinstance(queries, (EmbeddingStore, DualStore)):
            query_ids = queries.item_ids
        else:
            first = queries[0] if isinstance(queries, tuple) else queries
            query_ids = np.arange(np.atleast_2d(first).shape[0])
    qids = np.asarray(query_ids, dtype=np.uint64)
    keys = -scores if metric.descending else scores
    rows = np.flatnonzero(mask)
    order = rows[np.lexsort((gids[rows], keys[rows]))][:n]
    attribution: dict[int, list[tuple[int, int]]] = {}
    for pos, row in enumerate(order.tolist(), 1):
        attribution.setdefault(int(qids[arg[row]]), []).append((int(gids[row]), pos))
    return CurationResult(
        selected=[int(gids[r]) for r in order],
        strategy=Strategy.BEST_MATCHES,
        metric=metric,
        seed=seed,
        attribution=dict(sorted(attribution.items())),
    )


def random_select(gallery: Gallery, n: int, seed: int, *, exclude: Iterable[int] = ()) -> CurationResult:
    """Uniform sample of ``n`` items without replacement."""
    gids = gallery.item_ids
    excl = np.fromiter((int(i) for i in exclude), dtype=np.uint64)
    pool = gids[~np.isin(gids, excl)] if excl.size else gids
    if not 1 <= n <= len(pool):
        raise ValueError(f"N={n} out of range [1, {len(pool)}]")
    pick = make_rng(seed, "random-select").choice(len(pool), size=n, replace=False)
    return CurationResult(
        selected=[int(pool[i]) for i in pick],
        strategy=Strategy.RANDOM,
        metric=None,
        seed=seed,
    )


def task_item_ids(records: Sequence[ItemRecord], task_splits: Iterable[str] = TASK_SPLITS) -> list[int]:
    """Ids of gallery rows tagged as target-task members."""
    tags = set(task_splits)
    return [r.item_id for r in records if r.split_tag in tags]


class NamespaceCollision(ValueError):
    """A query and a retrieved item share an item_id and split_tag but are different items."""


def _entry(rec: ItemRecord, role: str) -> dict:
    return {
        "item_id": int(rec.item_id),
        "role": role,
        "source_image_id": rec.source_image_id,
        "crop_index": int(rec.crop_index),
        "split_tag": rec.split_tag,
    }


def assemble_transfer_set(
    result: CurationResult,
    query_records: Sequence[ItemRecord],
    gallery_records: dict[int, ItemRecord] | Sequence[ItemRecord],
    include_queries: bool = True,
) -> list[dict]:
    """Transfer-set entries: query items first (if included), then selected items.

    An item id appearing on both sides is kept once, as a query, when both
    records describe the same image crop; distinct items that share an id must
    carry different split tags.
    """
    if not isinstance(gallery_records, dict):
        gallery_records = {r.item_id: r for r in gallery_records}
    retrieved = []
    for item in result.selected:
        try:
            retrieved.append(gallery_records[int(item)])
        except KeyError:
            raise KeyError(f"selected item {item} has no gallery record") from None
    if not include_queries:
        return [_entry(r, "retrieved") for r in retrieved]
    out = []
    seen: dict[int, list[ItemRecord]] = {}
    for rec in query_records:
        if any(_same_item(rec, o) for o in seen.get(rec.item_id, [])):
            continue
        seen.setdefault(rec.item_id, []).append(rec)
        out.append(_entry(rec, "query"))
    for rec in retrieved:
        prior = seen.get(rec.item_id, [])
        if any(_same_item(rec, o) for o in prior):
            continue
        if any(o.split_tag == rec.split_tag for o in prior):
            raise NamespaceCollision(
                f"item_id {rec.item_id} names different items in query and gallery with split_tag {rec.split_tag!r}"
            )
        seen.setdefault(rec.item_id, []).append(rec)
        out.append(_entry(rec, "retrieved"))
    return out


def _same_item(a: ItemRecord, b: ItemRecord) -> bool:
    return a.source_image_id == b.source_image_id and a.crop_index == b.crop_index
