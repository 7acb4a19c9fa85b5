"""End-to-end curation: retrieve, de-duplicate, flag leaks, finalize.

Each stage writes a JSON manifest carrying a content digest: sha256 of the
canonical JSON of every field except ``timestamps``, ``runtime`` and the
digest itself.  A downstream stage recomputes its parent's digest and refuses
to run on a mismatch.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

from filelock import FileLock, Timeout

from .config import ConfigError, PipelineConfig
from .curation import (
    CurationResult,
    Strategy,
    assemble_transfer_set,
    best_matches_select,
    query_balanced_select,
    random_select,
    task_item_ids,
)
from .hygiene import (
    CONFIRMED,
    ContaminationReport,
    FlaggedImage,
    apply_confirmations,
    cluster_duplicates,
    dedup_retain,
    find_duplicate_pairs,
    flag_contamination,
    unique_sources,
)
from .knn import Metric
from .store import DualStore, EmbeddingStore, open_dual, open_store, store_digest

log = logging.getLogger(__name__)

SCHEMA = 1
VOLATILE_KEYS = ("timestamps", "runtime")


class DigestMismatch(ValueError):
    """A manifest's recorded content digest does not match its content."""


class UnresolvableError(ValueError):
    """Manifest items cannot be matched to store rows."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def content_digest(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k not in VOLATILE_KEYS}
    digests = dict(body.get("digests", {}))
    digests.pop("content", None)
    body["digests"] = digests
    return hashlib.sha256(canonical_json(body)).hexdigest()


def seal(manifest: dict) -> dict:
    manifest.setdefault("digests", {})["content"] = content_digest(manifest)
    return manifest


def verify(manifest: dict) -> str:
    recorded = manifest.get("digests", {}).get("content")
    actual = content_digest(manifest)
    if recorded != actual:
        raise DigestMismatch(f"manifest content digest mismatch: recorded {recorded}, computed {actual}")
    return actual


def load_manifest(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(data, dict) or data.get("schema") != SCHEMA:
        raise ValueError(f"{path}: not a schema-{SCHEMA} manifest")
    return data


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".transferset.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigError(f"another process is writing to {out_dir}") from None
    try:
        yield
    finally:
        lock.release()


def _open_pair(path_a: str | None, path_b: str | None, dual: bool) -> EmbeddingStore | DualStore:
    return open_dual(path_a, path_b) if dual else open_store(path_a)


def _input_digests(cfg: PipelineConfig, keys) -> dict[str, str]:
    return {k: store_digest(getattr(cfg, k)) for k in keys if getattr(cfg, k)}


def run_curate(cfg: PipelineConfig, out_path: str | Path) -> dict:
    """Retrieve the transfer set and write the curate-stage manifest."""
    cfg.validate("curate")
    out_path = Path(out_path)
    started = _now()
    t0 = time.perf_counter()
    strategy = cfg.strategy_enum
    metric = cfg.metric_enum
    dual = metric is Metric.DUAL_AVG_COSINE
    gallery = _open_pair(cfg.gallery_store, cfg.gallery_store_b, dual)
    exclude = task_item_ids(gallery.records, cfg.task_splits) if cfg.exclude_task_items else []
    queries = None
    if strategy is Strategy.RANDOM:
        result = random_select(gallery, cfg.n, cfg.seed, exclude=exclude)
    else:
        queries = _open_pair(cfg.query_store, cfg.query_store_b, dual)
        if strategy is Strategy.QUERY_BALANCED:
            result = query_balanced_select(
                queries,
                gallery,
                cfg.n,
                metric,
                cfg.seed,
                exclude=exclude,
                exclude_self=cfg.exclude_self,
                block_size=cfg.block_size,
                threads=cfg.threads,
            )
        else:
            result = best_matches_select(
                queries, gallery, cfg.n, metric, exclude=exclude, block_size=cfg.block_size, seed=cfg.seed
            )
    manifest = {
        "schema": SCHEMA,
        "stage": "curate",
        "config": cfg.echo(out_path.parent),
        **result.to_json(),
        "counts": {
            "queries": 0 if queries is None else queries.count,
            "gallery": gallery.count,
            "excluded": len(exclude),
            "retrieved": len(result.selected),
        },
        "digests": {"inputs": _input_digests(cfg, ("query_store", "query_store_b", "gallery_store", "gallery_store_b"))},
        "timestamps": {"started": started, "finished": _now()},
        "runtime": {"threads": cfg.threads, "block_size": cfg.block_size, "elapsed_s": time.perf_counter() - t0},
    }
    seal(manifest)
    with output_lock(out_path.parent):
        write_json(out_path, manifest)
    log.info("curate: %d items selected (k_final=%d)", len(result.selected), result.k_final)
    return manifest


def _originals(cfg: PipelineConfig, gallery_records) -> DualStore:
    if cfg.originals_store:
        return open_dual(cfg.originals_store, cfg.originals_store_b)
    if not all(r.is_whole_image for r in gallery_records):
        raise ConfigError("crop-level gallery needs originals_store/originals_store_b for hygiene")
    return open_dual(cfg.gallery_store, cfg.gallery_store_b)


def _records_for(store: EmbeddingStore, ids) -> list:
    out = []
    for i in ids:
        try:
            out.append(store.record(int(i)))
        except KeyError:
            raise UnresolvableError(f"selected item {i} not found in gallery store") from None
    return out


def _flagged_digest(report: ContaminationReport) -> str:
    key = sorted((f.source_image_id, f.item_id, f.max_similarity) for f in report.flagged)
    return hashlib.sha256(canonical_json(key)).hexdigest()


def run_hygiene(
    manifest_path: str | Path,
    cfg: PipelineConfig,
    out_path: str | Path,
    report_path: str | Path,
) -> tuple[dict, ContaminationReport]:
    """De-duplicate retrieved originals, flag possible leaks, write manifest and pending report."""
    parent = load_manifest(manifest_path)
    parent_digest = verify(parent)
    if parent.get("stage") != "curate":
        raise ValueError(f"hygiene expects a curate manifest, got stage {parent.get('stage')!r}")
    cfg.validate("hygiene")
    out_path, report_path = Path(out_path), Path(report_path)
    started = _now()
    gallery = open_store(cfg.gallery_store)
    crops = _records_for(gallery, parent["selected"])
    originals = _originals(cfg, gallery.records)
    row_of: dict[str, int] = {}
    for i, rec in enumerate(originals.records):
        row_of.setdefault(rec.source_image_id, i)
    sources = sorted(unique_sources(crops))
    missing = [s for s in sources if s not in row_of]
    if missing:
        raise UnresolvableError(f"{len(missing)} source images missing from originals store: {missing[:5]}")
    orig = originals.subset([row_of[s] for s in sources])
    pairs = find_duplicate_pairs(orig, cfg.dedup_threshold, block_size=max(1, min(cfg.block_size, 4096)))
    clusters = cluster_duplicates(pairs, sources)
    kept = dedup_retain(crops, clusters)
    reps = set(clusters.representatives)
    survivors = orig.subset([i for i, s in enumerate(sources) if s in reps])
    task = open_dual(cfg.task_store, cfg.task_store_b)
    report = flag_contamination(survivors, task, cfg.decontam_threshold, cfg.evidence_k)

    kept_ids = [r.item_id for r in kept]
    kept_set = set(kept_ids)
    removed = [int(i) for i in parent["selected"] if int(i) not in kept_set]
    manifest = {k: v for k, v in parent.items() if k not in ("digests", "timestamps", "runtime", "counts")}
    manifest.update(
        {
            "stage": "hygiene",
            "config": cfg.echo(out_path.parent),
            "selected": kept_ids,
            "dedup": {
                "threshold": cfg.dedup_threshold,
                "pairs": [[a, b, v] for a, b, v in pairs],
                "clusters": clusters.duplicate_clusters,
                "cluster_size_histogram": {str(k): v for k, v in clusters.size_histogram().items()},
                "removed": removed,
            },
            "contamination": {
                "threshold": cfg.decontam_threshold,
                "report": report_path.name,
                "flagged": report.flagged_ids(),
                "flagged_digest": _flagged_digest(report),
            },
            "counts": {
                **parent["counts"],
                "source_images": len(sources),
                "duplicate_clusters": len(clusters.duplicate_clusters),
                "duplicate_images_removed": len(sources) - len(reps),
                "removed_by_dedup": len(removed),
                "flagged": len(report.flagged),
            },
            "digests": {
                "inputs": {
                    **parent["digests"]["inputs"],
                    **_input_digests(cfg, ("originals_store", "originals_store_b", "task_store", "task_store_b")),
                },
                "parent": parent_digest,
            },
            "timestamps": {"started": started, "finished": _now()},
        }
    )
    seal(manifest)
    with output_lock(out_path.parent):
        report.save(report_path)
        write_json(out_path, manifest)
    log.info(
        "hygiene: %d duplicate clusters, %d crops removed, %d flagged",
        len(clusters.duplicate_clusters),
        len(removed),
        len(report.flagged),
    )
    return manifest, report


def run_finalize(
    manifest_path: str | Path,
    confirmation_path: str | Path,
    cfg: PipelineConfig,
    out_path: str | Path,
) -> dict:
    """Apply reviewed leak statuses, append queries, write the final run manifest."""
    parent = load_manifest(manifest_path)
    parent_digest = verify(parent)
    if parent.get("stage") != "hygiene":
        raise ValueError(f"finalize expects a hygiene manifest, got stage {parent.get('stage')!r}")
    cfg.validate("finalize")
    out_path = Path(out_path)
    started = _now()
    reviewed = ContaminationReport.load(confirmation_path)
    recorded = parent["contamination"]
    gallery = open_store(cfg.gallery_store)
    crops = _records_for(gallery, parent["selected"])
    if set(reviewed.flagged_ids()) == set(recorded["flagged"]) and _flagged_digest(reviewed) != recorded["flagged_digest"]:
        raise DigestMismatch("confirmation file evidence does not match the hygiene-stage report")
    kept, removed = apply_confirmations(reviewed, crops, _stub_report(recorded["flagged"]))
    confirmed = sorted(f.source_image_id for f in reviewed.flagged if f.status == CONFIRMED)

    result = CurationResult.from_json(parent)
    result.selected = [r.item_id for r in kept]
    query_records = []
    if cfg.include_queries:
        query_records = open_store(cfg.query_store).records
    entries = assemble_transfer_set(result, query_records, {r.item_id: r for r in kept}, cfg.include_queries)
    n_queries = len(query_records)
    final_size = len(entries)
    counts = {
        **parent["counts"],
        "confirmed_leaks": len(confirmed),
        "removed_by_confirmation": removed,
        "queries_included": n_queries,
        "query_overlaps": len(kept) + n_queries - final_size,
        "final_size": final_size,
    }
    manifest = {k: v for k, v in parent.items() if k not in ("digests", "timestamps", "runtime", "counts")}
    manifest.update(
        {
            "stage": "final",
            "config": cfg.echo(out_path.parent),
            "selected": result.selected,
            "confirmed_leaks": confirmed,
            "transfer_set": entries,
            "counts": counts,
            "digests": {
                "inputs": {
                    **parent["digests"]["inputs"],
                    **_input_digests(cfg, ("query_store",)),
                },
                "parent": parent_digest,
                "confirmation": hashlib.sha256(Path(confirmation_path).read_bytes()).hexdigest(),
            },
            "timestamps": {"started": started, "finished": _now()},
        }
    )
    seal(manifest)
    with output_lock(out_path.parent):
        write_json(out_path, manifest)
    log.info("finalize: %d entries (%d removed as confirmed leaks)", final_size, removed)
    return manifest


def _stub_report(flagged_ids) -> ContaminationReport:
    return ContaminationReport(flagged=[FlaggedImage(s, 0, 1.0, []) for s in flagged_ids])


def conservation_holds(counts: dict) -> bool:
    """final = retrieved - removed_by_dedup - removed_by_confirmation + (queries - overlaps)."""
    return counts["final_size"] == (
        counts["retrieved"]
        - counts["removed_by_dedup"]
        - counts["removed_by_confirmation"]
        + counts["queries_included"]
        - counts["query_overlaps"]
    )


def manifest_stats(manifest: dict) -> dict:
    """Attribution, rank and cluster-size summaries of any stage's manifest."""
    selected = set(int(i) for i in manifest["selected"])
    per_query: dict[str, int] = {}
    ranks: dict[int, int] = {}
    for qid, pairs in manifest.get("attribution", {}).items():
        live = [(int(i), int(r)) for i, r in pairs if int(i) in selected]
        per_query[qid] = len(live)
        for _, r in live:
            ranks[r] = ranks.get(r, 0) + 1
    counts = list(per_query.values())
    out = {
        "stage": manifest.get("stage"),
        "strategy": manifest.get("strategy"),
        "k_final": manifest.get("k_final", 0),
        "selected": len(selected),
        "per_query": dict(sorted(per_query.items(), key=lambda kv: int(kv[0]))),
        "per_query_min": min(counts) if counts else 0,
        "per_query_max": max(counts) if counts else 0,
        "rank_distribution": {str(k): v for k, v in sorted(ranks.items())},
    }
    if "dedup" in manifest:
        out["cluster_size_histogram"] = manifest["dedup"]["cluster_size_histogram"]
    if "counts" in manifest:
        out["counts"] = manifest["counts"]
    return out


def format_stats(stats: dict, width: int = 40) -> str:
    lines = [
        f"stage: {stats['stage']}  strategy: {stats['strategy']}  k_final: {stats['k_final']}",
        f"selected: {stats['selected']}  per-query contribution min/max: "
        f"{stats['per_query_min']}/{stats['per_query_max']}",
    ]
    per_query = stats["per_query"]
    if per_query:
        top = max(per_query.values()) or 1
        lines.append("attribution per query:")
        for qid, c in per_query.items():
            lines.append(f"  {qid:>10} {c:>7} {'#' * max(0, round(width * c / top))}")
    if stats["rank_distribution"]:
        lines.append("rank distribution:")
        for r, c in stats["rank_distribution"].items():
            lines.append(f"  rank {r:>6}: {c}")
    if "cluster_size_histogram" in stats:
        lines.append("cluster sizes:")
        for size, c in stats["cluster_size_histogram"].items():
            lines.append(f"  size {size:>4}: {c}")
    return "\n".join(lines)
