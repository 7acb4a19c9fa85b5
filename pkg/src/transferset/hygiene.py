"""Post-retrieval quality control: duplicate removal and leak review.

Duplicates are judged on the original images behind retrieved crops using
the mean of two encoders' cosine similarities; leak candidates against the
target-task images use the max of the two.  Both comparisons are strict.
Leak candidates are never removed automatically: a report is written for
human review and only entries marked ``confirmed-leak`` are dropped.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .knn import _EPS, _check_unit, _gather_kernel
from .store import DualStore, ItemRecord

log = logging.getLogger(__name__)

DEDUP_THRESHOLD = 0.99
DECONTAM_THRESHOLD = 0.95
EVIDENCE_K = 5
PENDING, CONFIRMED, CLEARED = "pending", "confirmed-leak", "cleared"
STATUSES = (PENDING, CONFIRMED, CLEARED)


class PendingReviewError(ValueError):
    """A contamination report still has entries awaiting human review."""


def _require_normalized(dual: DualStore, what: str) -> None:
    if dual.normalized:
        return
    for store in (dual.store_a, dual.store_b):
        try:
            _check_unit(np.asarray(store.data, dtype=np.float64), what)
        except ValueError as exc:
            raise ValueError(f"{what} store {store.encoder_id!r} is not normalized: {exc}") from None


def _exact_pair_scores(qa, qb, ga, gb, row: int, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    sa = np.empty(len(cols))
    sb = np.empty(len(cols))
    _gather_kernel(qa[row], ga, cols, sa, False)
    _gather_kernel(qb[row], gb, cols, sb, False)
    return sa, sb


def _margin(d: int) -> float:
    # unit vectors: |BLAS dot - fixed-order dot| stays far below this
    return 16.0 * (d + 2) * _EPS


def find_duplicate_pairs(
    originals: DualStore,
    threshold: float = DEDUP_THRESHOLD,
    *,
    block_size: int = 2048,
    prefilter: bool = False,
) -> list[tuple[str, str, float]]:
    """Unordered pairs of source images whose averaged cosine similarity exceeds ``threshold``.

    Rows must be one per source image.  Pairs come back as
    ``(smaller_id, larger_id, avg_sim)`` sorted by id.  With ``prefilter`` a
    block is skipped when no first-encoder similarity reaches
    ``min(threshold - 0.05, 2 * threshold - 1)``; since the second encoder
    contributes at most 1, the average can only exceed ``threshold`` when the
    first similarity exceeds ``2 * threshold - 1``, so the skip never loses a pair.
    """
    _require_normalized(originals, "originals")
    srcs = [r.source_image_id for r in originals.records]
    if len(set(srcs)) != len(srcs):
        raise ValueError("originals must hold one row per source image")
    a = np.asarray(originals.store_a.data, dtype=np.float64)
    b = np.asarray(originals.store_b.data, dtype=np.float64)
    n = a.shape[0]
    m = _margin(max(a.shape[1], b.shape[1]))
    cut = min(threshold - 0.05, 2.0 * threshold - 1.0) - m
    pairs = []
    for i0 in range(0, n, block_size):
        i1 = min(i0 + block_size, n)
        for j0 in range(i0, n, block_size):
            j1 = min(j0 + block_size, n)
            approx_a = a[i0:i1] @ a[j0:j1].T
            if prefilter and approx_a.max() < cut:
                continue
            approx = (approx_a + b[i0:i1] @ b[j0:j1].T) / 2.0
            if j0 == i0:
                approx[np.tril_indices(i1 - i0, 0, j1 - j0)] = -np.inf
            rows, cols = np.nonzero(approx > threshold - 2.0 * m)
            for r in np.unique(rows):
                cc = cols[rows == r] + j0
                sa, sb = _exact_pair_scores(a, b, a, b, i0 + r, cc)
                avg = (sa + sb) / 2.0
                for c, v in zip(cc.tolist(), avg.tolist()):
                    if v > threshold:
                        x, y = sorted((srcs[i0 + r], srcs[c]))
                        pairs.append((x, y, v))
    pairs.sort()
    return pairs


@dataclass
class DuplicateClusters:
    clusters: list[list[str]]
    representatives: list[str]

    def rep_of(self) -> dict[str, str]:
        return {m: rep for members, rep in zip(self.clusters, self.representatives) for m in members}

    @property
    def duplicate_clusters(self) -> list[list[str]]:
        return [c for c in self.clusters if len(c) > 1]

    def size_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for c in self.clusters:
            hist[len(c)] = hist.get(len(c), 0) + 1
        return dict(sorted(hist.items()))

    def to_json(self) -> dict:
        return {"clusters": self.clusters, "representatives": self.representatives}


def cluster_duplicates(pairs: Iterable[tuple], universe: Iterable[str]) -> DuplicateClusters:
    """Connected components of the duplicate graph; the lexicographically smallest id represents each."""
    nodes = sorted(set(universe))
    parent = {u: u for u in nodes}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for pair in pairs:
        u, v = pair[0], pair[1]
        for end in (u, v):
            if end not in parent:
                raise ValueError(f"pair endpoint {end!r} is outside the universe")
        ru, rv = find(u), find(v)
        if ru != rv:
            if rv < ru:
                ru, rv = rv, ru
            parent[rv] = ru
    groups: dict[str, list[str]] = {}
    for u in nodes:
        groups.setdefault(find(u), []).append(u)
    clusters = sorted(groups.values(), key=lambda g: g[0])
    return DuplicateClusters(clusters=clusters, representatives=[g[0] for g in clusters])


def _source_of(crop) -> str:
    if isinstance(crop, ItemRecord):
        return crop.source_image_id
    return crop["source_image_id"]


def dedup_retain(crops: Sequence, clusters: DuplicateClusters) -> list:
    """Keep crops whose source image represents its cluster, in input order."""
    rep = clusters.rep_of()
    out = []
    for crop in crops:
        src = _source_of(crop)
        if src not in rep:
            raise ValueError(f"crop source image {src!r} is not in the clustering universe")
        if rep[src] == src:
            out.append(crop)
    return out


@dataclass
class Evidence:
    item_id: int
    source_image_id: str
    split_tag: str
    sim_a: float
    sim_b: float
    score: float


@dataclass
class FlaggedImage:
    source_image_id: str
    item_id: int
    max_similarity: float
    evidence: list[Evidence]
    status: str = PENDING


@dataclass
class ContaminationReport:
    flagged: list[FlaggedImage]
    threshold: float = DECONTAM_THRESHOLD
    evidence_k: int = EVIDENCE_K
    encoders: tuple[str, str] = ("", "")
    checked: int = 0
    task_set_size: int = 0
    task_splits: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "kind": "contamination_report",
            "schema": 1,
            "threshold": self.threshold,
            "evidence_k": self.evidence_k,
            "encoders": list(self.encoders),
            "checked": self.checked,
            "task_set_size": self.task_set_size,
            "task_splits": self.task_splits,
            "flagged": [asdict(f) for f in self.flagged],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ContaminationReport":
        if obj.get("kind") != "contamination_report" or obj.get("schema") != 1:
            raise ValueError("not a schema-1 contamination report")
        flagged = []
        for f in obj["flagged"]:
            status = f.get("status", PENDING)
            if status not in STATUSES:
                raise ValueError(f"{f.get('source_image_id')!r}: invalid status {status!r}")
            flagged.append(
                FlaggedImage(
                    source_image_id=str(f["source_image_id"]),
                    item_id=int(f["item_id"]),
                    max_similarity=float(f["max_similarity"]),
                    evidence=[Evidence(**e) for e in f["evidence"]],
                    status=status,
                )
            )
        return cls(
            flagged=flagged,
            threshold=float(obj["threshold"]),
            evidence_k=int(obj["evidence_k"]),
            encoders=tuple(obj.get("encoders", ("", ""))),
            checked=int(obj.get("checked", 0)),
            task_set_size=int(obj.get("task_set_size", 0)),
            task_splits=dict(obj.get("task_splits", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ContaminationReport":
        return cls.from_json(json.loads(Path(path).read_text()))

    def flagged_ids(self) -> list[str]:
        return [f.source_image_id for f in self.flagged]


def flag_contamination(
    retrieved: DualStore,
    task_set: DualStore,
    threshold: float = DECONTAM_THRESHOLD,
    evidence_k: int = EVIDENCE_K,
    *,
    block_size: int = 2048,
) -> ContaminationReport:
    """Flag retrieved originals whose max-of-two-encoders similarity to any task image exceeds ``threshold``."""
    if task_set.count == 0:
        raise ValueError("task set is empty")
    _require_normalized(retrieved, "retrieved")
    _require_normalized(task_set, "task set")
    ra = np.asarray(retrieved.store_a.data, dtype=np.float64)
    rb = np.asarray(retrieved.store_b.data, dtype=np.float64)
    sa_all = np.asarray(task_set.store_a.data, dtype=np.float64)
    sb_all = np.asarray(task_set.store_b.data, dtype=np.float64)
    s_ids = task_set.item_ids
    s_recs = task_set.records
    m = _margin(max(ra.shape[1], rb.shape[1]))
    kk = min(evidence_k, task_set.count)
    flagged = []
    for i0 in range(0, ra.shape[0], block_size):
        i1 = min(i0 + block_size, ra.shape[0])
        approx = np.maximum(ra[i0:i1] @ sa_all.T, rb[i0:i1] @ sb_all.T)
        for r in np.flatnonzero(approx.max(axis=1) > threshold - m):
            row = approx[r]
            kth = -np.partition(-row, kk - 1)[kk - 1]
            cols = np.flatnonzero(row >= min(kth, threshold) - 2.0 * m)
            sa, sb = _exact_pair_scores(ra, rb, sa_all, sb_all, i0 + int(r), cols)
            score = np.maximum(sa, sb)
            if not (score.max() > threshold):
                continue
            order = np.lexsort((s_ids[cols], -score))[:kk]
            evidence = [
                Evidence(
                    item_id=int(s_ids[cols[o]]),
                    source_image_id=s_recs[int(cols[o])].source_image_id,
                    split_tag=s_recs[int(cols[o])].split_tag,
                    sim_a=float(sa[o]),
                    sim_b=float(sb[o]),
                    score=float(score[o]),
                )
                for o in order
            ]
            rec = retrieved.records[i0 + int(r)]
            flagged.append(FlaggedImage(rec.source_image_id, int(rec.item_id), evidence[0].score, evidence))
    splits: dict[str, int] = {}
    for rec in s_recs:
        splits[rec.split_tag] = splits.get(rec.split_tag, 0) + 1
    return ContaminationReport(
        flagged=flagged,
        threshold=threshold,
        evidence_k=evidence_k,
        encoders=(retrieved.store_a.encoder_id, retrieved.store_b.encoder_id),
        checked=retrieved.count,
        task_set_size=task_set.count,
        task_splits=dict(sorted(splits.items())),
    )


def apply_confirmations(
    report: ContaminationReport,
    entries: Sequence,
    original: ContaminationReport | None = None,
) -> tuple[list, int]:
    """Drop every entry whose source image is a confirmed leak.

    ``original`` is the report as generated; when given, the reviewed report
    must flag exactly the same images.  Returns ``(kept, removed_count)``.
    """
    pending = [f.source_image_id for f in report.flagged if f.status == PENDING]
    if pending:
        raise PendingReviewError(f"{len(pending)} flagged images still pending review: {pending[:5]}")
    bad = [f.status for f in report.flagged if f.status not in STATUSES]
    if bad:
        raise ValueError(f"invalid statuses {bad}")
    if original is not None:
        known = set(original.flagged_ids())
        unknown = [i for i in report.flagged_ids() if i not in known]
        if unknown:
            raise ValueError(f"confirmation file references unflagged images: {unknown[:5]}")
        missing = known - set(report.flagged_ids())
        if missing:
            raise ValueError(f"confirmation file omits flagged images: {sorted(missing)[:5]}")
    leaks = {f.source_image_id for f in report.flagged if f.status == CONFIRMED}
    kept = [e for e in entries if _source_of(e) not in leaks]
    removed = len(entries) - len(kept)
    log.info("confirmed leaks: %d images, %d entries removed, %d kept", len(leaks), removed, len(kept))
    return kept, removed


def unique_sources(crops: Iterable) -> list[str]:
    """Distinct source image ids in first-seen order."""
    seen: dict[str, None] = {}
    for c in crops:
        seen.setdefault(_source_of(c), None)
    return list(seen)

