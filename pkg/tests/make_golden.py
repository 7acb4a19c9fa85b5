"""Regenerate tests/golden/fixture_seed42.json from the brute-force oracle.

The selection (k, drops, order, attribution) comes from the slow oracle in
``oracles.py``; only the manifest layout (config echo, store digests) is taken
from the package.  Run from the repository root::

    python3 tests/make_golden.py
"""
from __future__ import annotations

import hashlib
import json
import sys
import tempfile
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))

from oracles import brute_query_balanced_full, full_rankings  # noqa: E402
from transferset.config import PipelineConfig  # noqa: E402
from transferset.fixtures import FixtureSpec, cluster_of, make_synthetic_fixture  # noqa: E402
from transferset.rng import GENERATOR_ID, make_rng  # noqa: E402
from transferset.store import open_store, store_digest  # noqa: E402

GOLDEN = HERE / "golden" / "fixture_seed42.json"
MANIFEST_REL = Path("out") / "manifest.json"


def oracle_manifest(fixture_dir: Path) -> dict:
    cfg = PipelineConfig.load(fixture_dir / "config.json")
    queries = open_store(cfg.query_store)
    gallery = open_store(cfg.gallery_store)
    G = gallery.data
    Q = queries.data
    ranks = full_rankings(Q, G, queries.item_ids.tolist(), gallery.item_ids.tolist(), cfg.metric)
    # the query-balanced candidate depth is capped at N
    ranks = {q: r[: cfg.n] for q, r in ranks.items()}
    order = make_rng(cfg.seed, "query-balanced-drop").permutation(len(ranks))
    sel = brute_query_balanced_full(ranks, cfg.n, order)
    out_dir = fixture_dir / MANIFEST_REL.parent
    body = {
        "schema": 1,
        "stage": "curate",
        "config": cfg.echo(out_dir),
        "strategy": cfg.strategy,
        "metric": cfg.metric,
        "seed": cfg.seed,
        "generator": GENERATOR_ID,
        "k_final": sel["k_final"],
        "selected": sel["selected"],
        "attribution": dict(sorted(sel["attribution"].items(), key=lambda kv: int(kv[0]))),
        "dropped": sel["dropped"],
        "counts": {"queries": queries.count, "gallery": gallery.count, "excluded": 0, "retrieved": cfg.n},
        "digests": {
            "inputs": {
                k: store_digest(getattr(cfg, k))
                for k in ("query_store", "query_store_b", "gallery_store", "gallery_store_b")
            }
        },
    }
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
    digest = hashlib.sha256(canon).hexdigest()
    src = {r.item_id: r.source_image_id for r in gallery.records}
    in_query = sum(cluster_of(src[i]) in (0, 1, 2) for i in sel["selected"])
    return {
        "fixture": {"seed": 42, "n": cfg.n, "metric": cfg.metric, "strategy": cfg.strategy},
        "content_digest": digest,
        "k_final": sel["k_final"],
        "selected_count": len(sel["selected"]),
        "query_cluster_fraction": in_query / len(sel["selected"]),
    }


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        make_synthetic_fixture(tmp, FixtureSpec())
        golden = oracle_manifest(Path(tmp))
    GOLDEN.parent.mkdir(exist_ok=True)
    GOLDEN.write_text(json.dumps(golden, indent=2, sort_keys=True) + "\n")
    print(json.dumps(golden, indent=2))


if __name__ == "__main__":
    main()
