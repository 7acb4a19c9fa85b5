"""Pipeline configuration."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .crops import CROP_OUT_SIZE, CROP_RATIO, CROP_SCALE, CROPS_PER_IMAGE
from .curation import TASK_SPLITS, Strategy
from .hygiene import DECONTAM_THRESHOLD, DEDUP_THRESHOLD, EVIDENCE_K
from .knn import Metric
from .rng import GENERATOR_ID

PATH_KEYS = (
    "query_store",
    "query_store_b",
    "gallery_store",
    "gallery_store_b",
    "originals_store",
    "originals_store_b",
    "task_store",
    "task_store_b",
)
# execution knobs: never part of content digests
RUNTIME_KEYS = ("threads", "block_size")


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    query_store: str | None = None
    query_store_b: str | None = None
    gallery_store: str | None = None
    gallery_store_b: str | None = None
    originals_store: str | None = None
    originals_store_b: str | None = None
    task_store: str | None = None
    task_store_b: str | None = None
    strategy: str = Strategy.QUERY_BALANCED.value
    metric: str = Metric.EUCLIDEAN.value
    n: int = 1
    seed: int = 0
    include_queries: bool = True
    dedup_threshold: float = DEDUP_THRESHOLD
    decontam_threshold: float = DECONTAM_THRESHOLD
    evidence_k: int = EVIDENCE_K
    crops_per_image: int = CROPS_PER_IMAGE
    crop_scale: tuple[float, float] = CROP_SCALE
    crop_ratio: tuple[float, float] = CROP_RATIO
    crop_out_size: int = CROP_OUT_SIZE
    exclude_task_items: bool = True
    task_splits: list[str] = field(default_factory=lambda: list(TASK_SPLITS))
    exclude_self: bool = False
    generator: str = GENERATOR_ID
    threads: int = 1
    block_size: int = 16384

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | os.PathLike | None = None) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**data)
        for key in ("crop_scale", "crop_ratio"):
            setattr(cfg, key, tuple(float(v) for v in getattr(cfg, key)))
        cfg.task_splits = list(cfg.task_splits)
        if base_dir is not None:
            for key in PATH_KEYS:
                val = getattr(cfg, key)
                if val is not None and not os.path.isabs(val):
                    setattr(cfg, key, str(Path(base_dir) / val))
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def override(self, **values) -> "PipelineConfig":
        data = asdict(self)
        data.update({k: v for k, v in values.items() if v is not None})
        return PipelineConfig.from_dict(data)

    @property
    def strategy_enum(self) -> Strategy:
        return Strategy.parse(self.strategy)

    @property
    def metric_enum(self) -> Metric:
        return Metric.parse(self.metric)

    @property
    def dual(self) -> bool:
        return self.metric_enum is Metric.DUAL_AVG_COSINE

    def validate(self, stage: str = "curate", check_files: bool = True) -> None:
        try:
            self.strategy_enum
            self.metric_enum
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for name in ("dedup_threshold", "decontam_threshold"):
            val = getattr(self, name)
            if not 0 < val <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {val}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.evidence_k < 1:
            raise ConfigError("evidence_k must be >= 1")
        if self.threads < 1 or self.block_size < 1:
            raise ConfigError("threads and block_size must be >= 1")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")
        needed = ["gallery_store"]
        if self.strategy_enum is not Strategy.RANDOM:
            needed.append("query_store")
        if self.dual:
            needed += ["gallery_store_b"] + (["query_store_b"] if "query_store" in needed else [])
        if stage in ("hygiene", "finalize"):
            needed += ["task_store", "task_store_b"]
            if self.originals_store or self.originals_store_b:
                needed += ["originals_store", "originals_store_b"]
            else:
                needed += ["gallery_store_b"]
        if stage == "finalize" and self.include_queries:
            needed.append("query_store")
        for key in dict.fromkeys(needed):
            val = getattr(self, key)
            if not val:
                raise ConfigError(f"config key {key!r} is required for {stage}")
            if check_files and not Path(val).exists():
                raise ConfigError(f"{key}: file not found: {val}")

    def echo(self, relative_to: str | os.PathLike | None = None) -> dict:
        """Config as recorded in manifests: paths relative to ``relative_to``, runtime knobs dropped."""
        data = asdict(self)
        for key in RUNTIME_KEYS:
            data.pop(key)
        data["crop_scale"] = list(self.crop_scale)
        data["crop_ratio"] = list(self.crop_ratio)
        if relative_to is not None:
            for key in PATH_KEYS:
                if data[key] is not None:
                    data[key] = os.path.relpath(os.path.abspath(data[key]), os.path.abspath(relative_to))
        return data
