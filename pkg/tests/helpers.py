"""Shared builders for hygiene fixtures."""
from __future__ import annotations

import numpy as np

from transferset.store import DualStore, ItemRecord, store_from_arrays


def dual_from(ids, A, B, split_tags=None, id_offset=0) -> DualStore:
    split_tags = split_tags or ["gallery"] * len(ids)
    recs = [ItemRecord(id_offset + i, s, split_tag=t) for i, (s, t) in enumerate(zip(ids, split_tags))]
    return DualStore(
        store_from_arrays(A, recs, normalized=True, encoder_id="enc-a"),
        store_from_arrays(B, recs, normalized=True, encoder_id="enc-b"),
    )


def exact_dot_pair(target: float) -> tuple[np.ndarray, np.ndarray]:
    """Two float32 unit-ish vectors whose ascending-order float64 dot is exactly ``float(target)``.

    a = (1, 2^-13, 2^-26, 0) and b = (r, s1, s2, u) with r the float32
    nearest to the target and the residual split over two float32 slots.
    """
    T = float(target)
    r = float(np.float32(T))
    rem = T - r
    s1 = float(np.float32(rem * 2.0**13))
    rem2 = rem - s1 * 2.0**-13
    s2 = float(np.float32(rem2 * 2.0**26))
    assert rem2 == s2 * 2.0**-26, "residual not representable"
    u = float(np.float32(np.sqrt(1.0 - r * r - s1 * s1 - s2 * s2)))
    a = np.array([1.0, 2.0**-13, 2.0**-26, 0.0], dtype=np.float32)
    b = np.array([r, s1, s2, u], dtype=np.float32)
    acc = 0.0
    for x, y in zip(a.astype(np.float64), b.astype(np.float64)):
        acc += x * y
    assert acc == T, (acc, T)
    return a, b


def rotated(t: np.ndarray, cos: float, axis: int) -> np.ndarray:
    """Unit vector at angle arccos(cos) from unit ``t`` towards basis vector ``axis``."""
    e = np.zeros_like(t)
    e[axis] = 1.0
    e = e - (e @ t) * t
    e /= np.linalg.norm(e)
    return cos * t + np.sqrt(1.0 - cos * cos) * e


def clustered_unit(rng, n_centers, per, d, spread) -> np.ndarray:
    centers = rng.normal(size=(n_centers, d))
    pts = np.repeat(centers, per, axis=0) + spread * rng.normal(size=(n_centers * per, d))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)
