"""Acceptance criteria 1-12.

Each test records one PASS/FAIL line (also repeated in the terminal summary).
Set TRANSFERSET_SKIP_PERF=1 to skip the 1M-row performance run.
"""
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import clustered_unit, dual_from, exact_dot_pair, rotated
from oracles import (
    brute_query_balanced,
    bfs_components,
    dual_scores,
    linear_smallest_k,
    loop_scores,
    naive_dot,
    naive_duplicate_pairs,
    sort_truncate,
    union_sizes,
)
from transferset import losses
from transferset.cli import main as cli_main
from transferset.config import PipelineConfig
from transferset.crops import sample_crop_rect
from transferset.curation import query_balanced_select, smallest_k
from transferset.fixtures import FixtureSpec, cluster_of, make_synthetic_fixture
from transferset.gradcheck import run_gradient_suite
from transferset.hygiene import cluster_duplicates, find_duplicate_pairs, flag_contamination
from transferset.knn import top_k, top_k_batch
from transferset.pipeline import load_manifest
from transferset.rng import make_rng
from transferset.store import DualStore, open_store, store_from_arrays

GOLDEN = Path(__file__).parent / "golden" / "fixture_seed42.json"
METRICS = ("euclidean", "cosine", "dual_avg_cosine")


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def ranking_digest(lists) -> str:
    h = hashlib.sha256()
    for rl in lists:
        h.update(rl.ids.tobytes())
        h.update(rl.scores.tobytes())
    return h.hexdigest()


def instance(rng, metric, nq, ng, d, dup_rows=0):
    """Query and gallery inputs for ``metric`` plus oracle score function."""
    A = rng.normal(size=(ng, d)).astype(np.float32)
    if dup_rows:
        src = rng.integers(0, ng, size=dup_rows)
        dst = rng.choice(ng, size=dup_rows, replace=False)
        A[dst] = A[src]
    Qa = rng.normal(size=(nq, d)).astype(np.float32)
    if metric == "euclidean":
        return Qa, store_from_arrays(A), lambda i: loop_scores(Qa[i], A, "euclidean")
    A = unit(A).astype(np.float32)
    Qa = unit(Qa).astype(np.float32)
    if metric == "cosine":
        return Qa, store_from_arrays(A, normalized=True), lambda i: loop_scores(Qa[i], A, "cosine")
    B = unit(rng.normal(size=(ng, d))).astype(np.float32)
    if dup_rows:
        B[dst] = B[src]
    Qb = unit(rng.normal(size=(nq, d))).astype(np.float32)
    gallery = DualStore(
        store_from_arrays(A, normalized=True, encoder_id="a"),
        store_from_arrays(B, normalized=True, encoder_id="b"),
    )
    return (Qa, Qb), gallery, lambda i: dual_scores(Qa[i], Qb[i], A, B)


class TestAcceptance:
    def test_01_query_balanced_oracle(self, record_criterion):
        t0 = time.perf_counter()
        mismatches = []
        for seed in range(200):
            rng = np.random.default_rng(seed)
            metric = METRICS[seed % 3]
            nq, ng, d = int(rng.integers(1, 11)), int(rng.integers(1, 201)), int(rng.integers(1, 17))
            n = int(rng.integers(1, min(100, ng) + 1))
            queries, gallery, scores = instance(rng, metric, nq, ng, d, dup_rows=ng // 10)
            res = query_balanced_select(queries, gallery, n, metric, seed)
            ranks = {
                q: sort_truncate(scores(q), range(ng), ng, metric != "euclidean") for q in range(nq)
            }
            order = make_rng(seed, "query-balanced-drop").permutation(nq)
            want, k = brute_query_balanced(ranks, n, order)
            if set(res.selected) != want or res.k_final != k or len(res.selected) != n:
                mismatches.append(seed)
        elapsed = time.perf_counter() - t0
        ok = not mismatches and elapsed < 30
        record_criterion(1, ok, f"query-balanced == brute force on 200 instances, mismatches={mismatches[:5]}, {elapsed:.1f}s")
        assert ok

    def test_02_smallest_k(self, record_criterion):
        t0 = time.perf_counter()
        bad = []
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            nq, ng = int(rng.integers(1, 11)), int(rng.integers(1, 120))
            lists = [rng.permutation(ng).tolist() for _ in range(nq)]
            if rng.random() < 0.3:  # heavy overlap
                lists = [lists[0]] * nq
            sizes = union_sizes(lists)
            monotone = all(a <= b for a, b in zip(sizes, sizes[1:]))
            for n in {1, ng, int(rng.integers(1, ng + 1))}:
                if smallest_k(lists, n) != linear_smallest_k(lists, n) or not monotone:
                    bad.append(seed)
        elapsed = time.perf_counter() - t0
        ok = not bad and elapsed < 10
        record_criterion(2, ok, f"smallest_k binary == linear scan, union monotone on 100 instances, bad={bad[:5]}, {elapsed:.1f}s")
        assert ok

    def test_03_knn_oracle(self, record_criterion):
        t0 = time.perf_counter()
        bad = []
        for seed in range(100):
            rng = np.random.default_rng(2000 + seed)
            metric = METRICS[seed % 3]
            ng, d = int(rng.integers(1, 1001)), int(rng.integers(1, 17))
            k = int(rng.integers(1, ng + 1))
            queries, gallery, scores = instance(rng, metric, 2, ng, d, dup_rows=ng // 5)
            lists = top_k_batch(queries, gallery, k, metric, block_size=int(rng.integers(1, 400)))
            for qi, rl in enumerate(lists):
                if rl.ids.tolist() != sort_truncate(scores(qi), range(ng), k, metric != "euclidean"):
                    bad.append((seed, metric))
        # an all-tied gallery: order must be pure item_id
        g = store_from_arrays(np.ones((50, 4), dtype=np.float32), id_offset=100)
        tie_ok = top_k(np.zeros(4), g, 10, "euclidean").ids.tolist() == list(range(100, 110))
        elapsed = time.perf_counter() - t0
        ok = not bad and tie_ok and elapsed < 20
        record_criterion(3, ok, f"top_k == sort-and-truncate, 100 instances x 3 metrics with duplicated rows, bad={bad[:5]}, {elapsed:.1f}s")
        assert ok

    def test_04_rank_equivalence(self, record_criterion):
        t0 = time.perf_counter()
        bad = []
        for seed in range(50):
            rng = np.random.default_rng(3000 + seed)
            ng, d = int(rng.integers(2, 300)), int(rng.integers(2, 33))
            G = unit(rng.normal(size=(ng, d))).astype(np.float32)
            G[: ng // 10] = G[ng - ng // 10:]  # exact ties
            Q = unit(rng.normal(size=(3, d))).astype(np.float32)
            eu = top_k_batch(Q, store_from_arrays(G, normalized=True), ng, "euclidean")
            co = top_k_batch(Q, store_from_arrays(G, normalized=True), ng, "cosine")
            if any(a.ids.tolist() != b.ids.tolist() for a, b in zip(eu, co)):
                bad.append(seed)
        elapsed = time.perf_counter() - t0
        ok = not bad and elapsed < 5
        record_criterion(4, ok, f"euclidean and cosine id orders identical on 50 unit-norm instances, bad={bad}, {elapsed:.1f}s")
        assert ok

    def test_05_determinism(self, record_criterion, tmp_path):
        t0 = time.perf_counter()
        rng = np.random.default_rng(5)
        G = store_from_arrays(rng.normal(size=(2000, 32)))
        Q = rng.normal(size=(300, 32)).astype(np.float32)
        knn_digests = set()
        curate_digests = set()
        make_synthetic_fixture(tmp_path / "fx", FixtureSpec())
        cfg = tmp_path / "fx" / "config.json"
        for threads in (1, 2, 8):
            for block in (1, 7, 64):
                lists = top_k_batch(Q, G, 25, "euclidean", block, threads=threads, query_block=32)
                knn_digests.add(ranking_digest(lists))
                out = tmp_path / "fx" / f"out-{threads}-{block}" / "manifest.json"
                code = cli_main(["curate", "--config", str(cfg), "--out", str(out),
                                 "--threads", str(threads), "--block-size", str(block)])
                curate_digests.add(load_manifest(out)["digests"]["content"] if code == 0 else f"exit {code}")
        elapsed = time.perf_counter() - t0
        ok = len(knn_digests) == 1 and len(curate_digests) == 1 and elapsed < 60
        record_criterion(5, ok, f"digests identical over threads {{1,2,8}} x blocks {{1,7,64}}: "
                         f"top_k_batch {len(knn_digests)} distinct, curate {len(curate_digests)} distinct, {elapsed:.1f}s")
        assert ok

    def test_06_dedup(self, record_criterion):
        t0 = time.perf_counter()
        bad = []
        for seed in range(100):
            rng = np.random.default_rng(6000 + seed)
            n_centers, per, d = int(rng.integers(2, 8)), int(rng.integers(1, 7)), int(rng.integers(3, 12))
            spread = float(rng.uniform(0.02, 0.15))
            A = clustered_unit(rng, n_centers, per, d, spread).astype(np.float32)
            B = clustered_unit(rng, n_centers, per, d, spread).astype(np.float32)
            names = [f"img{i:03d}" for i in rng.permutation(len(A))]
            pairs = find_duplicate_pairs(dual_from(names, A, B), block_size=int(rng.integers(1, 20)))
            naive = naive_duplicate_pairs(names, A, B, 0.99)
            clusters = cluster_duplicates(pairs, names)
            if [p[:2] for p in pairs] != naive or clusters.clusters != bfs_components(names, naive):
                bad.append(seed)
                continue
            reps = {names.index(r) for r in clusters.representatives}
            for i in reps:
                for j in reps:
                    if i < j and (naive_dot(A[i], A[j]) + naive_dot(B[i], B[j])) / 2.0 > 0.99:
                        bad.append(seed)
        a, b = exact_dot_pair(0.99)
        at_threshold = find_duplicate_pairs(dual_from(["x", "y"], np.stack([a, b]), np.stack([a, b])), 0.99)
        elapsed = time.perf_counter() - t0
        ok = not bad and at_threshold == [] and elapsed < 30
        record_criterion(6, ok, f"dedup pairs/clusters == naive+BFS on 100 fixtures, bad={bad[:5]}, "
                         f"exact-0.99 pair merged={bool(at_threshold)}, {elapsed:.1f}s")
        assert ok

    def test_07_decontamination(self, record_criterion):
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        d = 24
        task = unit(rng.normal(size=(12, d)))
        ra = [task[0], rotated(task[1], 0.96, 2), rotated(task[2], 0.94, 3), unit(rng.normal(size=d))]
        rb = [task[0], rotated(task[1], 0.80, 4), rotated(task[2], 0.94, 5), unit(rng.normal(size=d))]
        # encoder b alone sees the second near-duplicate
        ra.append(rotated(task[3], 0.70, 6))
        rb.append(rotated(task[3], 0.96, 7))
        names = ["exact", "near96a", "near94", "clean", "near96b"]
        retrieved = dual_from(names, np.array(ra), np.array(rb))
        splits = ["task-train"] * 6 + ["task-val"] * 3 + ["task-test"] * 3
        task_set = dual_from([f"t{i:02d}" for i in range(12)], task, task, split_tags=splits, id_offset=500)
        rep = flag_contamination(retrieved, task_set, 0.95, 5)
        flagged = sorted(rep.flagged_ids())
        evidence_ok = all(
            len(f.evidence) == 5
            and [(-e.score, e.item_id) for e in f.evidence] == sorted((-e.score, e.item_id) for e in f.evidence)
            and all(e.score == max(e.sim_a, e.sim_b) for e in f.evidence)
            for f in rep.flagged
        )
        elapsed = time.perf_counter() - t0
        ok = flagged == ["exact", "near96a", "near96b"] and evidence_ok and elapsed < 10
        record_criterion(7, ok, f"flagged={flagged} (0.94 plant excluded), evidence 5-NN by max score ok={evidence_ok}, {elapsed:.1f}s")
        assert ok

    def test_08_loss_kernels(self, record_criterion):
        t0 = time.perf_counter()
        results = run_gradient_suite(trials=20, seed=0)
        grads_ok = all(r.passed for r in results) and len(results) == 7
        rng = np.random.default_rng(8)
        props_ok = True
        for _ in range(50):
            s, t = rng.normal(size=(2, 4, 6)) * 4
            y = rng.integers(0, 6, size=4)
            c = float(rng.normal() * 10)
            kl = losses.kd_kl_loss(s, t, 2.0).loss
            ce = losses.cross_entropy(s, y).loss
            props_ok &= kl >= -1e-10 and ce >= -1e-10
            props_ok &= abs(kl - losses.kd_kl_loss(s + c, t - c, 2.0).loss) <= 1e-10
            props_ok &= abs(ce - losses.cross_entropy(s + c, y).loss) <= 1e-10
        s, t = rng.normal(size=(2, 2, 5, 3, 4))
        loop = np.mean([
            losses.kd_kl_loss(s[b, :, i, j][None], t[b, :, i, j][None]).loss
            for b in range(2) for i in range(3) for j in range(4)
        ])
        pix_ok = abs(losses.pixelwise_kl(s, t).loss - loop) <= 1e-12
        worst = max(r.max_rel_error for r in results)
        elapsed = time.perf_counter() - t0
        ok = grads_ok and props_ok and pix_ok and elapsed < 30
        record_criterion(8, ok, f"7 kernels x 20 shapes, worst FD rel err {worst:.2e} (<1e-4); "
                         f"KL/CE props ok={bool(props_ok)}; pixelwise == loop ok={pix_ok}, {elapsed:.1f}s")
        assert ok

    def test_09_default_constants(self, record_criterion):
        cfg = PipelineConfig()
        got = {
            "dedup_threshold": cfg.dedup_threshold,
            "decontam_threshold": cfg.decontam_threshold,
            "crop_scale": cfg.crop_scale,
            "crops_per_image": cfg.crops_per_image,
            "crop_out_size": cfg.crop_out_size,
            "evidence_k": cfg.evidence_k,
        }
        want = {
            "dedup_threshold": 0.99,
            "decontam_threshold": 0.95,
            "crop_scale": (0.08, 1.0),
            "crops_per_image": 10,
            "crop_out_size": 224,
            "evidence_k": 5,
        }
        ok = got == want
        record_criterion(9, ok, f"config defaults {got}")
        assert ok

    def test_10_crop_statistics(self, record_criterion):
        t0 = time.perf_counter()
        W = H = 448
        strict = 0
        bad = []
        for i in range(10_000):
            x, y, w, h = sample_crop_rect(W, H, seed=10, crop_index=i % 10, source_image_id=f"img{i // 10}").rect
            area, aspect = w * h / (W * H), w / h
            if 0.08 <= area <= 1.0 and 0.75 <= aspect <= 1.3334:
                strict += 1
                continue
            # allow half-pixel rounding of each side
            lo_area = (w - 0.5) * (h - 0.5) / (W * H)
            hi_area = (w + 0.5) * (h + 0.5) / (W * H)
            lo_asp, hi_asp = (w - 0.5) / (h + 0.5), (w + 0.5) / (h - 0.5)
            if not (hi_area >= 0.08 and lo_area <= 1.0 and hi_asp >= 0.75 and lo_asp <= 1.3334):
                bad.append(i)
            if not (0 <= x and 0 <= y and x + w <= W and y + h <= H):
                bad.append(i)
        again = sample_crop_rect(W, H, seed=10, crop_index=3, source_image_id="img7")
        det_ok = again == sample_crop_rect(W, H, seed=10, crop_index=3, source_image_id="img7")
        elapsed = time.perf_counter() - t0
        ok = not bad and det_ok and elapsed < 10
        record_criterion(10, ok, f"10000 crops in bounds up to rounding (strictly inside: {strict}), "
                         f"violations={len(bad)}, deterministic={det_ok}, {elapsed:.1f}s")
        assert ok

    @pytest.mark.slow
    def test_11_performance(self, record_criterion):
        if os.environ.get("TRANSFERSET_SKIP_PERF"):
            record_criterion(11, False, "not measured (TRANSFERSET_SKIP_PERF set)", status="SKIP")
            pytest.skip("performance run disabled")
        rng = np.random.default_rng(11)
        G = rng.standard_normal((1_000_000, 256), dtype=np.float32)
        Q = rng.standard_normal((1000, 256), dtype=np.float32)
        t0 = time.perf_counter()
        single = ranking_digest(top_k_batch(Q, G, 100, "euclidean", threads=1))
        t_single = time.perf_counter() - t0
        t0 = time.perf_counter()
        multi = ranking_digest(top_k_batch(Q, G, 100, "euclidean", threads=8))
        t_multi = time.perf_counter() - t0
        cores = os.cpu_count()
        ok = single == multi
        soft = "under" if min(t_single, t_multi) < 120 else "OVER"
        record_criterion(11, ok, f"1M x 256 top-100 for 1000 queries: {t_single:.1f}s (1 thread), "
                         f"{t_multi:.1f}s (8 threads) on {cores} core(s), {soft} 120s; digests equal={ok}")
        assert ok

    def test_12_golden_run(self, record_criterion, tmp_path):
        t0 = time.perf_counter()
        golden = json.loads(GOLDEN.read_text())
        make_synthetic_fixture(tmp_path, FixtureSpec())
        out = tmp_path / "out" / "manifest.json"
        code = cli_main(["curate", "--config", str(tmp_path / "config.json"), "--out", str(out)])
        manifest = load_manifest(out)
        src = {r.item_id: r.source_image_id for r in open_store(tmp_path / "gallery_a.tsf").records}
        frac = sum(cluster_of(src[i]) in (0, 1, 2) for i in manifest["selected"]) / len(manifest["selected"])
        digest = manifest["digests"]["content"]
        elapsed = time.perf_counter() - t0
        ok = code == 0 and digest == golden["content_digest"] and frac >= 0.95 and elapsed < 60
        record_criterion(12, ok, f"golden digest match={digest == golden['content_digest']}, "
                         f"query-cluster fraction {frac:.3f} (>=0.95), {elapsed:.1f}s")
        assert ok
