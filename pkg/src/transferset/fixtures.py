"""Synthetic, fully seeded store fixtures for tests and demos.

Images are drawn around ``n_clusters`` random unit directions; two "encoders"
see each image, the second through a fixed random rotation plus noise.  The
gallery can be crop-level (several noisy crops per image, with sampled crop
rectangles as provenance) or image-level.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .crops import crop_records
from .rng import make_rng
from .store import ItemRecord, write_store

IMAGE_SIZE = (448, 448)


@dataclass
class FixtureSpec:
    seed: int = 42
    n_clusters: int = 10
    dim: int = 64
    images_per_cluster: int = 30
    crops_per_image: int = 10
    crop_level: bool = True
    query_clusters: tuple[int, ...] = (0, 1, 2)
    queries_per_cluster: int = 10
    task_val_per_cluster: int = 5
    task_test_per_cluster: int = 5
    image_noise: float = 0.05
    crop_noise: float = 0.03
    encoder_b_noise: float = 0.02
    plant_duplicates: int = 0
    plant_leaks: int = 0
    n: int = 300
    curate_seed: int = 42
    extra_config: dict = field(default_factory=dict)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def cluster_of(source_image_id: str) -> int:
    """Cluster index encoded in fixture source ids (``c03-img00012``)."""
    return int(source_image_id.split("-")[0][1:])


def make_synthetic_fixture(out_dir: str | Path, spec: FixtureSpec | None = None) -> Path:
    """Write query/gallery/originals/task stores and a ``config.json``; returns the config path."""
    spec = spec or FixtureSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = make_rng(spec.seed, "fixture")
    d = spec.dim
    centers = _unit(rng.normal(size=(spec.n_clusters, d)))
    rotation, _ = np.linalg.qr(rng.normal(size=(d, d)))

    def draw(cluster: int, count: int) -> np.ndarray:
        return _unit(centers[cluster] + spec.image_noise * rng.normal(size=(count, d)))

    def encode_b(feats: np.ndarray) -> np.ndarray:
        return _unit(feats @ rotation.T + spec.encoder_b_noise * rng.normal(size=feats.shape))

    # gallery images
    img_ids, img_a = [], []
    for c in range(spec.n_clusters):
        img_a.append(draw(c, spec.images_per_cluster))
        img_ids += [f"c{c:02d}-img{i:05d}" for i in range(spec.images_per_cluster)]
    img_a = np.concatenate(img_a)
    img_b = encode_b(img_a)

    # task set: query images are the task-train split
    q_ids, q_a, t_ids, t_a, t_split = [], [], [], [], []
    for c in spec.query_clusters:
        feats = draw(c, spec.queries_per_cluster + spec.task_val_per_cluster + spec.task_test_per_cluster)
        nq, nv = spec.queries_per_cluster, spec.task_val_per_cluster
        for i, f in enumerate(feats):
            split = "task-train" if i < nq else "task-val" if i < nq + nv else "task-test"
            t_ids.append(f"c{c:02d}-task{i:05d}")
            t_a.append(f)
            t_split.append(split)
            if i < nq:
                q_ids.append(t_ids[-1])
                q_a.append(f)
    t_a = np.array(t_a)
    t_b = encode_b(t_a)
    q_a = np.array(q_a)
    q_b = t_b[[t_ids.index(q) for q in q_ids]]

    # plants target images inside the query clusters so they get retrieved
    in_query = [i for i, s in enumerate(img_ids) if int(s[1:3]) in spec.query_clusters]
    plant_rng = make_rng(spec.seed, "fixture-plants")
    picks = plant_rng.permutation(in_query)
    pos = 0
    for _ in range(spec.plant_duplicates):
        src, dst = int(picks[pos]), int(picks[pos + 1])
        pos += 2
        img_a[dst], img_b[dst] = img_a[src], img_b[src]
    val_rows = [i for i, s in enumerate(t_split) if s != "task-train"]
    for j in range(spec.plant_leaks):
        dst = int(picks[pos])
        pos += 1
        src = val_rows[j % len(val_rows)]
        img_a[dst], img_b[dst] = t_a[src], t_b[src]

    orig_records = [ItemRecord(i, s, split_tag="gallery-original") for i, s in enumerate(img_ids)]
    paths = {}
    if spec.crop_level:
        g_records, g_a, g_b = [], [], []
        for i, s in enumerate(img_ids):
            g_records += crop_records(
                s, *IMAGE_SIZE, first_item_id=i * spec.crops_per_image, seed=spec.seed,
                crops_per_image=spec.crops_per_image,
            )
            noise = spec.crop_noise * rng.normal(size=(spec.crops_per_image, d))
            g_a.append(_unit(img_a[i] + noise))
            g_b.append(_unit(img_b[i] + noise @ rotation.T))
        g_a, g_b = np.concatenate(g_a), np.concatenate(g_b)
        write_store(out / "originals_a.tsf", orig_records, img_a, True, "enc-a")
        write_store(out / "originals_b.tsf", orig_records, img_b, True, "enc-b")
        paths["originals_store"] = "originals_a.tsf"
        paths["originals_store_b"] = "originals_b.tsf"
    else:
        g_records = [ItemRecord(i, s, split_tag="gallery") for i, s in enumerate(img_ids)]
        g_a, g_b = img_a, img_b
    write_store(out / "gallery_a.tsf", g_records, g_a, True, "enc-a")
    write_store(out / "gallery_b.tsf", g_records, g_b, True, "enc-b")

    q_records = [ItemRecord(i, s, split_tag="query") for i, s in enumerate(q_ids)]
    write_store(out / "query_a.tsf", q_records, q_a, True, "enc-a")
    write_store(out / "query_b.tsf", q_records, q_b, True, "enc-b")
    t_records = [ItemRecord(i, s, split_tag=sp) for i, (s, sp) in enumerate(zip(t_ids, t_split))]
    write_store(out / "task_a.tsf", t_records, t_a, True, "enc-a")
    write_store(out / "task_b.tsf", t_records, t_b, True, "enc-b")

    config = {
        "query_store": "query_a.tsf",
        "query_store_b": "query_b.tsf",
        "gallery_store": "gallery_a.tsf",
        "gallery_store_b": "gallery_b.tsf",
        "task_store": "task_a.tsf",
        "task_store_b": "task_b.tsf",
        **paths,
        "strategy": "query_balanced",
        "metric": "euclidean",
        "n": spec.n,
        "seed": spec.curate_seed,
        **spec.extra_config,
    }
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return cfg_path
