import numpy as np
import pytest

from helpers import clustered_unit, dual_from, exact_dot_pair, rotated
from oracles import bfs_components, naive_duplicate_pairs
from transferset.hygiene import (
    CLEARED,
    CONFIRMED,
    ContaminationReport,
    PendingReviewError,
    apply_confirmations,
    cluster_duplicates,
    dedup_retain,
    find_duplicate_pairs,
    flag_contamination,
)
from transferset.store import ItemRecord


def ids(n, prefix="img"):
    return [f"{prefix}{i:03d}" for i in range(n)]


class TestDuplicatePairs:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive_loops(self, seed):
        rng = np.random.default_rng(seed)
        A = clustered_unit(rng, 6, 6, 8, 0.08)
        B = clustered_unit(rng, 6, 6, 8, 0.08)
        names = ids(36)
        got = [(a, b) for a, b, _ in find_duplicate_pairs(dual_from(names, A, B), block_size=7)]
        assert got == naive_duplicate_pairs(names, A.astype(np.float32), B.astype(np.float32), 0.99)

    def test_exactly_threshold_not_merged(self):
        a, b = exact_dot_pair(0.99)
        dual = dual_from(["x", "y"], np.stack([a, b]), np.stack([a, b]))
        assert find_duplicate_pairs(dual, 0.99) == []

    def test_just_above_threshold_merged(self):
        a, b = exact_dot_pair(float(np.nextafter(np.float32(0.99), np.float32(1.0))))
        dual = dual_from(["x", "y"], np.stack([a, b]), np.stack([a, b]))
        assert [p[:2] for p in find_duplicate_pairs(dual, 0.99)] == [("x", "y")]

    def test_average_not_max(self):
        t = np.eye(4)[0]
        # encoder a says identical, encoder b says 0.97: average 0.985 is not a duplicate
        A = np.stack([t, t])
        B = np.stack([t, rotated(t, 0.97, 1)])
        assert find_duplicate_pairs(dual_from(["p", "q"], A, B)) == []
        # encoder b at 0.985 gives average 0.9925, merged though b alone is below 0.99
        B2 = np.stack([t, rotated(t, 0.985, 1)])
        assert len(find_duplicate_pairs(dual_from(["p", "q"], A, B2))) == 1

    def test_prefilter_same_result(self):
        rng = np.random.default_rng(9)
        A = clustered_unit(rng, 20, 3, 6, 0.05)
        B = clustered_unit(rng, 20, 3, 6, 0.05)
        dual = dual_from(ids(60), A, B)
        assert find_duplicate_pairs(dual, block_size=4, prefilter=True) == find_duplicate_pairs(dual)

    def test_duplicate_sources_rejected(self):
        t = np.eye(3)
        with pytest.raises(ValueError, match="one row per source"):
            find_duplicate_pairs(dual_from(["a", "a", "b"], t, t))


class TestClusters:
    def test_chain_merges(self):
        cl = cluster_duplicates([("a", "b"), ("b", "c")], ["c", "b", "a", "d"])
        assert cl.clusters == [["a", "b", "c"], ["d"]]
        assert cl.representatives == ["a", "d"]
        assert cl.size_histogram() == {1: 1, 3: 1}

    @pytest.mark.parametrize("seed", range(20))
    def test_random_graph_vs_bfs(self, seed):
        rng = np.random.default_rng(seed)
        nodes = ids(40, "n")
        edges = [tuple(sorted((nodes[i], nodes[j]))) for i, j in rng.integers(0, 40, size=(25, 2)) if i != j]
        assert cluster_duplicates(edges, nodes).clusters == bfs_components(nodes, edges)

    def test_retain_keeps_representative_crops(self):
        crops = [ItemRecord(i, src, crop_index=i % 2) for i, src in enumerate(["b", "b", "a", "c"])]
        cl = cluster_duplicates([("a", "b")], ["a", "b", "c"])
        assert [c.item_id for c in dedup_retain(crops, cl)] == [2, 3]

    def test_unknown_endpoint(self):
        with pytest.raises(ValueError):
            cluster_duplicates([("a", "z")], ["a"])


def contamination_fixture():
    rng = np.random.default_rng(0)
    d = 16
    task = rng.normal(size=(8, d))
    task /= np.linalg.norm(task, axis=1, keepdims=True)
    t0 = task[0]
    retrieved_a = np.stack(
        [
            t0,  # exact copy
            rotated(task[1], 0.96, 3),  # near duplicate under encoder a only
            rotated(task[2], 0.94, 5),  # below threshold
            rng.normal(size=d),
        ]
    )
    retrieved_a[3] /= np.linalg.norm(retrieved_a[3])
    retrieved_b = retrieved_a.copy()
    retrieved_b[1] = rotated(task[1], 0.90, 7)
    retrieved = dual_from(["exact", "near96", "near94", "clean"], retrieved_a, retrieved_b)
    splits = ["task-train"] * 4 + ["task-val"] * 2 + ["task-test"] * 2
    task_set = dual_from(ids(8, "t"), task, task, split_tags=splits, id_offset=1000)
    return retrieved, task_set


class TestContamination:
    def test_flags_and_evidence(self):
        retrieved, task_set = contamination_fixture()
        rep = flag_contamination(retrieved, task_set)
        assert rep.flagged_ids() == ["exact", "near96"]
        for f in rep.flagged:
            assert len(f.evidence) == 5
            keys = [(-e.score, e.item_id) for e in f.evidence]
            assert keys == sorted(keys)
            assert all(e.score == max(e.sim_a, e.sim_b) for e in f.evidence)
        assert rep.flagged[1].max_similarity == pytest.approx(0.96, abs=1e-6)

    def test_report_roundtrip(self, tmp_path):
        retrieved, task_set = contamination_fixture()
        rep = flag_contamination(retrieved, task_set)
        rep.save(tmp_path / "r.json")
        assert ContaminationReport.load(tmp_path / "r.json").to_json() == rep.to_json()

    def test_confirmation_flow(self):
        retrieved, task_set = contamination_fixture()
        rep = flag_contamination(retrieved, task_set)
        entries = [{"source_image_id": s} for s in ["exact", "exact", "near96", "clean"]]
        with pytest.raises(PendingReviewError):
            apply_confirmations(rep, entries)
        rep.flagged[0].status = CONFIRMED
        rep.flagged[1].status = CLEARED
        kept, removed = apply_confirmations(rep, entries, original=rep)
        assert removed == 2 and [e["source_image_id"] for e in kept] == ["near96", "clean"]

    def test_unflagged_id_rejected(self):
        retrieved, task_set = contamination_fixture()
        rep = flag_contamination(retrieved, task_set)
        original = flag_contamination(retrieved, task_set)
        original.flagged = original.flagged[:1]
        for f in rep.flagged:
            f.status = CLEARED
        with pytest.raises(ValueError, match="unflagged"):
            apply_confirmations(rep, [], original=original)
