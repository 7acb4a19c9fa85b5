"""Retrieval-augmented transfer-set curation and distillation loss kernels."""
from .curation import (
    CurationResult,
    Strategy,
    UnreachableError,
    assemble_transfer_set,
    best_matches_select,
    query_balanced_select,
    random_select,
    smallest_k,
)
from .crops import CropSpec, sample_crop_rect
from .hygiene import (
    ContaminationReport,
    DuplicateClusters,
    apply_confirmations,
    cluster_duplicates,
    dedup_retain,
    find_duplicate_pairs,
    flag_contamination,
)
from .knn import Metric, Neighbor, RankList, min_distance_to_set, pairwise_scores, top_k, top_k_batch
from .store import DualStore, EmbeddingStore, ItemRecord, StoreError, normalize_rows, open_store, write_store

__version__ = "0.1.0"

__all__ = [
    "ContaminationReport",
    "CropSpec",
    "CurationResult",
    "DualStore",
    "DuplicateClusters",
    "EmbeddingStore",
    "ItemRecord",
    "Metric",
    "Neighbor",
    "RankList",
    "StoreError",
    "Strategy",
    "UnreachableError",
    "apply_confirmations",
    "assemble_transfer_set",
    "best_matches_select",
    "cluster_duplicates",
    "dedup_retain",
    "find_duplicate_pairs",
    "flag_contamination",
    "min_distance_to_set",
    "normalize_rows",
    "open_store",
    "pairwise_scores",
    "query_balanced_select",
    "random_select",
    "sample_crop_rect",
    "smallest_k",
    "top_k",
    "top_k_batch",
    "write_store",
]
