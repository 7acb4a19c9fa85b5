"""Persistent embedding stores with per-row provenance metadata.

A store is two files: a packed binary matrix (``<name>.tsf``) and a sidecar
line-delimited JSON file (``<name>.tsf.meta.jsonl``) where line ``i`` describes
row ``i``.  Stores are immutable once written; opening one memory-maps the
matrix so that row access does not pull the whole file into memory.

Binary layout (little-endian)::

    magic  "TSF1"          4 bytes
    version u32 = 1
    dim     u32
    count   u64
    flags   u32            bit0 = rows are L2-normalized
    enc_len u16 + encoder_id UTF-8 bytes
    zero padding up to a 64-byte boundary
    count x dim float32, row-major
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"TSF1"
VERSION = 1
HEADER_ALIGN = 64
FLAG_NORMALIZED = 1
NORM_TOL = 1e-5
WHOLE_IMAGE = -1
WHOLE_IMAGE_TAG = "whole-image"
META_SUFFIX = ".meta.jsonl"

_FIXED = struct.Struct("<4sIIQI")
_CHUNK = 65536


class StoreError(ValueError):
    """Raised for malformed, inconsistent or invalid embedding stores."""


@dataclass(frozen=True)
class ItemRecord:
    """Provenance for one matrix row.

    ``crop_index`` is ``-1`` for whole-image features.  ``source_size`` is an
    optional ``(width, height)`` of the source image; when given, ``crop_rect``
    is checked against it.
    """

    item_id: int
    source_image_id: str
    crop_index: int = WHOLE_IMAGE
    crop_rect: tuple[int, int, int, int] | None = None
    aug_tag: str = ""
    split_tag: str = "gallery"
    source_size: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if not 0 <= int(self.item_id) < 2**64:
            raise StoreError(f"item_id {self.item_id} is not an unsigned 64-bit integer")
        if self.crop_index < WHOLE_IMAGE:
            raise StoreError(f"item {self.item_id}: invalid crop_index {self.crop_index}")
        if self.crop_rect is not None:
            x, y, w, h = self.crop_rect
            if x < 0 or y < 0 or w <= 0 or h <= 0:
                raise StoreError(f"item {self.item_id}: invalid crop_rect {self.crop_rect}")
            if self.source_size is not None:
                sw, sh = self.source_size
                if x + w > sw or y + h > sh:
                    raise StoreError(
                        f"item {self.item_id}: crop_rect {self.crop_rect} outside "
                        f"source bounds {self.source_size}"
                    )

    @property
    def is_whole_image(self) -> bool:
        return self.crop_index == WHOLE_IMAGE

    def to_json(self) -> dict:
        out = {
            "item_id": int(self.item_id),
            "source_image_id": self.source_image_id,
            "crop_index": WHOLE_IMAGE_TAG if self.is_whole_image else int(self.crop_index),
            "crop_rect": None if self.crop_rect is None else [int(v) for v in self.crop_rect],
            "aug_tag": self.aug_tag,
            "split_tag": self.split_tag,
        }
        if self.source_size is not None:
            out["source_size"] = [int(v) for v in self.source_size]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ItemRecord":
        crop_index = obj.get("crop_index", WHOLE_IMAGE_TAG)
        if crop_index == WHOLE_IMAGE_TAG:
            crop_index = WHOLE_IMAGE
        rect = obj.get("crop_rect")
        size = obj.get("source_size")
        return cls(
            item_id=int(obj["item_id"]),
            source_image_id=str(obj["source_image_id"]),
            crop_index=int(crop_index),
            crop_rect=None if rect is None else tuple(int(v) for v in rect),
            aug_tag=str(obj.get("aug_tag", "")),
            split_tag=str(obj.get("split_tag", "")),
            source_size=None if size is None else tuple(int(v) for v in size),
        )


@dataclass
class EmbeddingStore:
    """A ``count x dim`` float32 matrix plus one :class:`ItemRecord` per row.

    ``data`` is either an in-memory array or a read-only memory map.
    """

    data: np.ndarray
    records: list[ItemRecord]
    normalized: bool = False
    encoder_id: str = ""
    path: Path | None = None
    _index: dict[int, int] | None = field(default=None, repr=False, compare=False)
    _ids: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    @property
    def count(self) -> int:
        return int(self.data.shape[0])

    def __len__(self) -> int:
        return self.count

    @property
    def item_ids(self) -> np.ndarray:
        if self._ids is None:
            self._ids = np.fromiter(
                (r.item_id for r in self.records), dtype=np.uint64, count=len(self.records)
            )
        return self._ids

    def row(self, i: int) -> np.ndarray:
        return self.data[i]

    def position(self, item_id: int) -> int:
        """Row index of ``item_id``."""
        if self._index is None:
            self._index = {r.item_id: i for i, r in enumerate(self.records)}
        try:
            return self._index[int(item_id)]
        except KeyError:
            raise KeyError(f"item_id {item_id} not in store") from None

    def record(self, item_id: int) -> ItemRecord:
        return self.records[self.position(item_id)]

    def subset(self, rows: Sequence[int]) -> "EmbeddingStore":
        """In-memory store holding the given rows, in the given order."""
        rows = np.asarray(rows, dtype=np.int64)
        return EmbeddingStore(
            data=np.ascontiguousarray(self.data[rows]),
            records=[self.records[int(i)] for i in rows],
            normalized=self.normalized,
            encoder_id=self.encoder_id,
        )

    def validate(self) -> None:
        validate_matrix(self.data, self.records, self.normalized)


@dataclass
class DualStore:
    """Two row-aligned stores of the same items from two different encoders."""

    store_a: EmbeddingStore
    store_b: EmbeddingStore

    def __post_init__(self) -> None:
        if self.store_a.count != self.store_b.count:
            raise StoreError(
                f"dual store count mismatch: {self.store_a.count} != {self.store_b.count}"
            )
        if not np.array_equal(self.store_a.item_ids, self.store_b.item_ids):
            raise StoreError("dual store item_id sequences differ")
        if self.store_a.encoder_id == self.store_b.encoder_id:
            raise StoreError(
                f"dual store encoders must differ (both {self.store_a.encoder_id!r})"
            )

    @property
    def count(self) -> int:
        return self.store_a.count

    def __len__(self) -> int:
        return self.count

    @property
    def records(self) -> list[ItemRecord]:
        return self.store_a.records

    @property
    def item_ids(self) -> np.ndarray:
        return self.store_a.item_ids

    @property
    def normalized(self) -> bool:
        return self.store_a.normalized and self.store_b.normalized

    def subset(self, rows: Sequence[int]) -> "DualStore":
        return DualStore(self.store_a.subset(rows), self.store_b.subset(rows))


def validate_matrix(matrix: np.ndarray, records: Sequence[ItemRecord], normalized: bool) -> None:
    if matrix.ndim != 2:
        raise StoreError(f"matrix must be 2-D, got shape {matrix.shape}")
    if matrix.shape[1] < 1:
        raise StoreError("dim must be positive")
    if matrix.shape[0] != len(records):
        raise StoreError(
            f"count mismatch: matrix has {matrix.shape[0]} rows, metadata has {len(records)} records"
        )
    prev = -1
    for rec in records:
        if rec.item_id <= prev:
            raise StoreError(f"item_id {rec.item_id} not strictly increasing (after {prev})")
        prev = rec.item_id
    for start in range(0, matrix.shape[0], _CHUNK):
        block = np.asarray(matrix[start:start + _CHUNK])
        finite = np.isfinite(block).all(axis=1)
        if not finite.all():
            bad = start + int(np.flatnonzero(~finite)[0])
            raise StoreError(f"non-finite value in row {bad} (item_id {records[bad].item_id})")
        if normalized:
            norms = np.sqrt(np.einsum("ij,ij->i", block, block, dtype=np.float64))
            off = np.abs(norms - 1.0) > NORM_TOL
            if off.any():
                j = int(np.flatnonzero(off)[0])
                bad = start + j
                raise StoreError(
                    f"norm violation: row {bad} (item_id {records[bad].item_id}) has norm {norms[j]!r}"
                )


def meta_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + META_SUFFIX)


def _header_bytes(dim: int, count: int, normalized: bool, encoder_id: str) -> bytes:
    enc = encoder_id.encode("utf-8")
    if len(enc) > 0xFFFF:
        raise StoreError("encoder_id too long")
    head = _FIXED.pack(MAGIC, VERSION, dim, count, FLAG_NORMALIZED if normalized else 0)
    head += struct.pack("<H", len(enc)) + enc
    pad = (-len(head)) % HEADER_ALIGN
    return head + b"\x00" * pad


def write_store(
    path: str | os.PathLike,
    records: Sequence[ItemRecord],
    matrix: np.ndarray,
    normalized: bool = False,
    encoder_id: str = "",
) -> Path:
    """Validate and persist a store; returns the matrix file path."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise StoreError(f"dimension mismatch: matrix must be 2-D, got shape {matrix.shape}")
    records = list(records)
    mat32 = np.ascontiguousarray(matrix, dtype="<f4")
    validate_matrix(mat32, records, normalized)
    path = Path(path)
    header = _header_bytes(mat32.shape[1], mat32.shape[0], normalized, encoder_id)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(mat32.tobytes(order="C"))
    with open(meta_path(path), "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")
    return path


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        fixed = fh.read(_FIXED.size)
        if len(fixed) < 4 or fixed[:4] != MAGIC:
            raise StoreError(f"{path}: bad magic")
        if len(fixed) < _FIXED.size:
            raise StoreError(f"{path}: truncated header")
        magic, version, dim, count, flags = _FIXED.unpack(fixed)
        if version != VERSION:
            raise StoreError(f"{path}: unsupported version {version}")
        raw = fh.read(2)
        if len(raw) < 2:
            raise StoreError(f"{path}: truncated header")
        (enc_len,) = struct.unpack("<H", raw)
        enc = fh.read(enc_len)
        if len(enc) < enc_len:
            raise StoreError(f"{path}: truncated header")
    head_len = _FIXED.size + 2 + enc_len
    offset = head_len + (-head_len) % HEADER_ALIGN
    if dim < 1:
        raise StoreError(f"{path}: dim must be positive")
    return {
        "version": version,
        "dim": dim,
        "count": count,
        "normalized": bool(flags & FLAG_NORMALIZED),
        "encoder_id": enc.decode("utf-8"),
        "data_offset": offset,
    }


def read_records(path: str | os.PathLike) -> list[ItemRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(ItemRecord.from_json(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise StoreError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return records


def open_store(path: str | os.PathLike) -> EmbeddingStore:
    """Open a store read-only, memory-mapping its matrix."""
    path = Path(path)
    head = read_header(path)
    dim, count, offset = head["dim"], head["count"], head["data_offset"]
    expected = offset + count * dim * 4
    actual = path.stat().st_size
    if actual < expected:
        raise StoreError(f"{path}: truncated file ({actual} bytes, expected {expected})")
    if actual > expected:
        raise StoreError(f"{path}: trailing bytes ({actual} bytes, expected {expected})")
    mpath = meta_path(path)
    if not mpath.exists():
        raise StoreError(f"{path}: missing metadata file {mpath.name}")
    records = read_records(mpath)
    if len(records) != count:
        raise StoreError(
            f"{path}: count mismatch: header says {count}, metadata has {len(records)} records"
        )
    if count:
        data = np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=(count, dim))
    else:
        data = np.zeros((0, dim), dtype="<f4")
    store = EmbeddingStore(
        data=data,
        records=records,
        normalized=head["normalized"],
        encoder_id=head["encoder_id"],
        path=path,
    )
    store.validate()
    return store


def open_dual(path_a: str | os.PathLike, path_b: str | os.PathLike) -> DualStore:
    return DualStore(open_store(path_a), open_store(path_b))


def normalize_rows(store: EmbeddingStore) -> EmbeddingStore:
    """Return an in-memory copy with every row scaled to unit L2 norm."""
    mat = np.asarray(store.data, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", mat, mat))
    zero = norms <= 1e-12
    if zero.any():
        bad = int(np.flatnonzero(zero)[0])
        raise StoreError(f"zero-norm row {bad} (item_id {store.records[bad].item_id})")
    out = (mat / norms[:, None]).astype(np.float32)
    return EmbeddingStore(
        data=out,
        records=list(store.records),
        normalized=True,
        encoder_id=store.encoder_id,
    )


def store_from_arrays(
    matrix: np.ndarray,
    records: Iterable[ItemRecord] | None = None,
    *,
    normalized: bool = False,
    encoder_id: str = "",
    split_tag: str = "gallery",
    id_offset: int = 0,
) -> EmbeddingStore:
    """Build a validated in-memory store; records default to whole-image items."""
    mat = np.ascontiguousarray(matrix, dtype=np.float32)
    if mat.ndim != 2:
        raise StoreError(f"matrix must be 2-D, got shape {mat.shape}")
    if records is None:
        records = [
            ItemRecord(item_id=id_offset + i, source_image_id=f"img{id_offset + i}", split_tag=split_tag)
            for i in range(mat.shape[0])
        ]
    store = EmbeddingStore(data=mat, records=list(records), normalized=normalized, encoder_id=encoder_id)
    store.validate()
    return store


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def store_digest(path: str | os.PathLike) -> str:
    """sha256 over the matrix file followed by its metadata file."""
    h = hashlib.sha256()
    h.update(file_digest(path).encode())
    h.update(file_digest(meta_path(path)).encode())
    return h.hexdigest()
