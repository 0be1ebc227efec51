"""Experiment configuration: one JSON tree drives every pipeline stage.

The structural hash covers exactly the fields that determine parameter
shapes, the category inventory and the word-embedding derivation. Stages
refuse to compose artifacts (datasets, checkpoints) whose structural hashes
disagree; schedule-level fields (step counts, learning rates, alpha) hash
into the full config hash only.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def derive_seed(seed: int, name: str) -> int:
    """Stable named sub-seed so ablations differ only where intended."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derived_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name))


@dataclass
class DataConfig:
    image_size: int = 64
    shapes: tuple[str, ...] = ("square", "circle", "triangle", "bar", "cross")
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    n_base: int = 14
    n_target: int = 6
    n_train: int = 2000
    n_test: int = 300
    min_objects: int = 1
    max_objects: int = 4
    object_count_weights: tuple[float, ...] = (0.15, 0.25, 0.3, 0.3)
    min_object_size: int = 16
    max_object_size: int = 38
    box_margin: int = 2  # annotation looseness around the drawn silhouette
    max_pair_iou: float = 0.3
    caption_noise: float = 0.0


@dataclass
class ModelConfig:
    d_v: int = 64
    d_l: int = 48
    stride: int = 8
    channels: tuple[int, ...] = (16, 32, 64, 64)
    stage_depth: tuple[int, ...] = (1, 2, 2, 1)
    frozen_stages: int = 2
    mmt_layers: int = 2
    mmt_heads: int = 4
    mmt_ff: int = 64
    mmt_dropout: float = 0.0
    max_caption_len: int = 28
    embed_seed: int = 7


@dataclass
class PretrainConfig:
    batch_size: int = 16
    steps: int = 1500
    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 5.0
    lr_drops: tuple[float, ...] = (0.75, 0.92)
    warmup_steps: int = 150
    mask_prob: float = 0.135
    spatial_dropout: float = 0.2
    itm_negative_rate: float = 0.5
    log_every: int = 25


@dataclass
class DetectorConfig:
    alpha: float = 0.2
    batch_size: int = 4
    steps: int = 600
    lr: float = 0.005
    momentum: float = 0.9
    clip_norm: float = 5.0
    lr_drops: tuple[float, ...] = (0.7, 0.9)
    anchor_scales: tuple[float, ...] = (12.0, 22.0, 36.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 128
    rpn_fg_fraction: float = 0.5
    rpn_pre_nms: int = 200
    rpn_post_nms_train: int = 150
    rpn_post_nms_test: int = 50
    rpn_nms_thresh: float = 0.7
    roi_size: int = 4
    fg_iou: float = 0.5
    roi_batch: int = 128
    fg_fraction: float = 0.25
    smooth_l1_beta: float = 1.0
    score_thresh: float = 0.05
    nms_thresh: float = 0.5
    max_dets_per_image: int = 100
    log_every: int = 25


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    # -- (de)serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        cfg = cls()
        known = {"seed", "data", "model", "pretrain", "detector"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "seed" in raw:
            cfg.seed = int(raw["seed"])
        for section, inst in (("data", cfg.data), ("model", cfg.model),
                              ("pretrain", cfg.pretrain), ("detector", cfg.detector)):
            sub = raw.get(section, {})
            fields = {f.name: f for f in dataclasses.fields(inst)}
            bad = set(sub) - set(fields)
            if bad:
                raise ValueError(f"unknown keys in config section {section!r}: {sorted(bad)}")
            for key, value in sub.items():
                current = getattr(inst, key)
                if isinstance(current, tuple):
                    value = tuple(value)
                setattr(inst, key, type(current)(value) if not isinstance(current, tuple) else value)
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(canonical_json(self.to_dict()) + "\n", encoding="utf-8")

    # -- hashing ---------------------------------------------------------------

    def structural_fields(self) -> dict:
        return {
            "data": {
                "image_size": self.data.image_size,
                "shapes": list(self.data.shapes),
                "colors": list(self.data.colors),
                "n_base": self.data.n_base,
                "n_target": self.data.n_target,
            },
            "model": dataclasses.asdict(self.model),
        }

    def structural_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.structural_fields()).encode("utf-8")).hexdigest()

    def full_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def check_structural_match(expected: str, found: str, what: str) -> None:
    if expected != found:
        raise ValueError(
            f"structural hash mismatch for {what}: expected {expected[:12]}..., found {found[:12]}...; "
            "artifacts were produced with an incompatible configuration"
        )
