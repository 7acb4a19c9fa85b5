"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 unreachable N,
4 pending confirmations, 5 digest mismatch.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, PipelineConfig
from .curation import NamespaceCollision, UnreachableError
from .hygiene import PendingReviewError
from .pipeline import (
    DigestMismatch,
    UnresolvableError,
    format_stats,
    load_manifest,
    manifest_stats,
    run_curate,
    run_finalize,
    run_hygiene,
)
from .store import ItemRecord, StoreError, open_store, read_records, write_store

EXIT_OK, EXIT_VALIDATION, EXIT_UNREACHABLE, EXIT_PENDING, EXIT_DIGEST = 0, 2, 3, 4, 5

log = logging.getLogger("transferset")


class InputError(ValueError):
    pass


def _read_vectors(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        arr = np.load(path)
        if arr.ndim != 2:
            raise InputError(f"{path}: expected a 2-D array, got shape {arr.shape}")
        rows = arr.astype(np.float64)
    else:
        data = []
        width = None
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh)):
                if not row or all(not c.strip() for c in row):
                    continue
                try:
                    vals = [float(c) for c in row]
                except ValueError:
                    if lineno == 0 and not data:
                        continue  # header
                    raise InputError(f"row {len(data)}: non-numeric value") from None
                if width is None:
                    width = len(vals)
                elif len(vals) != width:
                    raise InputError(f"row {len(data)}: ragged input ({len(vals)} values, expected {width})")
                data.append(vals)
        if not data:
            raise InputError(f"{path}: no vectors")
        rows = np.array(data, dtype=np.float64)
    bad = ~np.isfinite(rows).all(axis=1)
    if bad.any():
        raise InputError(f"row {int(np.flatnonzero(bad)[0])}: non-finite value")
    return rows


def cmd_build_store(args) -> int:
    mat = _read_vectors(Path(args.vectors))
    if args.meta:
        records = read_records(args.meta)
    else:
        records = [
            ItemRecord(item_id=args.id_offset + i, source_image_id=f"img{args.id_offset + i}", split_tag=args.split_tag)
            for i in range(mat.shape[0])
        ]
    if args.normalize:
        norms = np.linalg.norm(mat, axis=1)
        zero = norms <= 1e-12
        if zero.any():
            raise InputError(f"row {int(np.flatnonzero(zero)[0])}: zero-norm vector cannot be normalized")
        mat = mat / norms[:, None]
    write_store(args.out, records, mat, normalized=args.normalize, encoder_id=args.encoder_id)
    norms = np.linalg.norm(mat, axis=1)
    print(f"count={mat.shape[0]} dim={mat.shape[1]}")
    print(f"norm min={norms.min():.6g} mean={norms.mean():.6g} max={norms.max():.6g}")
    return EXIT_OK


def cmd_validate(args) -> int:
    for path in args.stores:
        store = open_store(path)
        print(f"{path}: count={store.count} dim={store.dim} normalized={store.normalized} encoder={store.encoder_id!r}")
    print("OK")
    return EXIT_OK


def _config(args, stage: str) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {
        "strategy": getattr(args, "strategy", None),
        "metric": getattr(args, "metric", None),
        "n": getattr(args, "n", None),
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
        "block_size": getattr(args, "block_size", None),
        "include_queries": getattr(args, "include_queries", None),
    }
    for key in ("query_store", "query_store_b", "gallery_store", "gallery_store_b",
                "originals_store", "originals_store_b", "task_store", "task_store_b"):
        overrides[key] = getattr(args, key, None)
    return cfg.override(**overrides)


def cmd_curate(args) -> int:
    cfg = _config(args, "curate")
    manifest = run_curate(cfg, args.out)
    print(f"selected={len(manifest['selected'])} k_final={manifest['k_final']}")
    print(f"digest={manifest['digests']['content']}")
    return EXIT_OK


def cmd_hygiene(args) -> int:
    cfg = _config(args, "hygiene")
    out = Path(args.out)
    report = Path(args.report) if args.report else out.with_name("contamination_report.json")
    manifest, rep = run_hygiene(args.manifest, cfg, out, report)
    c = manifest["counts"]
    print(
        f"duplicate_clusters={c['duplicate_clusters']} duplicate_images_removed={c['duplicate_images_removed']} "
        f"removed_by_dedup={c['removed_by_dedup']} flagged={c['flagged']}"
    )
    print(f"report={report}")
    print(f"digest={manifest['digests']['content']}")
    return EXIT_OK


def cmd_finalize(args) -> int:
    cfg = _config(args, "finalize")
    manifest = run_finalize(args.manifest, args.confirmation, cfg, args.out)
    c = manifest["counts"]
    print(
        f"final_size={c['final_size']} removed_by_confirmation={c['removed_by_confirmation']} "
        f"queries_included={c['queries_included']}"
    )
    print(f"digest={manifest['digests']['content']}")
    return EXIT_OK


def cmd_stats(args) -> int:
    manifest = load_manifest(args.manifest)
    try:
        stats = manifest_stats(manifest)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed manifest: {exc}") from None
    if args.json:
        print(json.dumps(stats, indent=2, sort_keys=True))
    else:
        print(format_stats(stats))
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_losses_check(args) -> int:
    from .gradcheck import format_table, run_gradient_suite

    results = run_gradient_suite(trials=args.trials, seed=args.seed)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else 1


def cmd_make_fixture(args) -> int:
    from .fixtures import FixtureSpec, make_synthetic_fixture

    spec = FixtureSpec(
        seed=args.seed,
        crop_level=not args.image_level,
        plant_duplicates=args.plant_duplicates,
        plant_leaks=args.plant_leaks,
    )
    print(make_synthetic_fixture(args.out, spec))
    return EXIT_OK


def _add_store_flags(p: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transferset", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-store", help="build an embedding store from CSV or .npy vectors")
    p.add_argument("vectors")
    p.add_argument("--out", required=True)
    p.add_argument("--meta", help="JSONL item records, one per row")
    p.add_argument("--encoder-id", default="")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--split-tag", default="gallery")
    p.add_argument("--id-offset", type=int, default=0)
    p.set_defaults(func=cmd_build_store)

    p = sub.add_parser("validate", help="check store files")
    p.add_argument("stores", nargs="+")
    p.set_defaults(func=cmd_validate)

    all_stores = ("query_store", "query_store_b", "gallery_store", "gallery_store_b",
                  "originals_store", "originals_store_b", "task_store", "task_store_b")

    p = sub.add_parser("curate", help="retrieve a transfer set")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="manifest path")
    p.add_argument("--strategy")
    p.add_argument("--metric")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--block-size", type=int)
    p.add_argument("--include-queries", action=argparse.BooleanOptionalAction, default=None)
    _add_store_flags(p, all_stores)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("hygiene", help="de-duplicate and flag possible leaks")
    p.add_argument("manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _add_store_flags(p, all_stores)
    p.set_defaults(func=cmd_hygiene)

    p = sub.add_parser("finalize", help="apply reviewed leak statuses and write the final manifest")
    p.add_argument("manifest")
    p.add_argument("confirmation")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--include-queries", action=argparse.BooleanOptionalAction, default=None)
    _add_store_flags(p, all_stores)
    p.set_defaults(func=cmd_finalize)

    p = sub.add_parser("stats", help="summarize a manifest")
    p.add_argument("manifest")
    p.add_argument("--json", action="store_true", help="print JSON instead of text")
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("losses", help="loss kernel utilities")
    lsub = p.add_subparsers(dest="losses_command", required=True)
    c = lsub.add_parser("check", help="finite-difference gradient checks")
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_losses_check)

    p = sub.add_parser("make-fixture", help="write the synthetic demo fixture")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--image-level", action="store_true")
    p.add_argument("--plant-duplicates", type=int, default=0)
    p.add_argument("--plant-leaks", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UnreachableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE
    except PendingReviewError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PENDING
    except DigestMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIGEST
    except (ConfigError, StoreError, InputError, UnresolvableError, NamespaceCollision, ValueError,
            KeyError, OSError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
