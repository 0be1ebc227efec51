"""Convolutional visual backbone and the shared vision-to-language projection.

Four conv stages (strides 2, 2, 2, 1) with channel layer norm and ReLU. The
first three stages produce the stride-8 feature map shared by pretraining,
the proposal network and RoI pooling; the final stage refines either the
whole grid (pretraining) or pooled proposal features (detection). The V2L
layer is a single affine map applied identically in both phases.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .nn import Conv2d, LayerNorm, Linear, ParamSet
from .tensor import Tensor, permute, relu, reshape, tmean


class Backbone:
    def __init__(self, pset: ParamSet, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.stride != 8:
            raise ValueError("backbone is laid out for stride 8 (three stride-2 stages)")
        if len(cfg.stage_depth) != 4:
            raise ValueError("stage_depth must list a conv count for each of the 4 stages")
        chans = (3,) + tuple(cfg.channels)
        strides = (2, 2, 2, 1)
        self.cfg = cfg
        self.stages = []
        for i in range(4):
            blocks = []
            for j in range(cfg.stage_depth[i]):
                c_in = chans[i] if j == 0 else chans[i + 1]
                stride = strides[i] if j == 0 else 1  # only the first conv downsamples
                conv = Conv2d(pset, f"backbone.stage{i}.conv{j}", c_in, chans[i + 1], 3, stride, 1,
                              rng, pad_mode="edge")
                norm = LayerNorm(pset, f"backbone.stage{i}.norm{j}", chans[i + 1], axis=1, rank=4)
                blocks.append((conv, norm))
            self.stages.append(blocks)
        if cfg.channels[-1] != cfg.d_v:
            raise ValueError(f"last stage must emit d_v={cfg.d_v} channels, got {cfg.channels[-1]}")

    def _run(self, x: Tensor, stage_range) -> Tensor:
        for i in stage_range:
            for conv, norm in self.stages[i]:
                x = relu(norm(conv(x)))
        return x

    def feature_map(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) -> shared stride-8 map (B, C, H/8, W/8)."""
        h, w = images.shape[2], images.shape[3]
        if h % self.cfg.stride or w % self.cfg.stride:
            raise ValueError(f"image size {h}x{w} not divisible by stride {self.cfg.stride}")
        return self._run(images, range(3))

    def refine(self, fm: Tensor) -> Tensor:
        """Final stage applied to a grid map or pooled RoI patches."""
        return self._run(fm, range(3, 4))

    def grid_features(self, images: Tensor) -> Tensor:
        """Per-cell region vectors r_i: (B, n_cells, d_v), row-major over the grid."""
        x = self.refine(self.feature_map(images))
        b, c, gh, gw = x.shape
        return permute(reshape(x, (b, c, gh * gw)), (0, 2, 1))

    def grid_cells(self, image_size: int) -> int:
        g = image_size // self.cfg.stride
        return g * g


class V2LLayer:
    """Affine projection from visual features to the word-embedding space."""

    def __init__(self, pset: ParamSet, cfg: ModelConfig, rng: np.random.Generator):
        self.linear = Linear(pset, "v2l", cfg.d_v, cfg.d_l, rng)

    def __call__(self, r: Tensor) -> Tensor:
        return self.linear(r)


def pooled_roi_vectors(backbone: Backbone, patches: Tensor) -> Tensor:
    """Refine pooled RoI patches (R, C, S, S) and average to (R, d_v)."""
    refined = backbone.refine(patches)
    return tmean(refined, axis=(2, 3))
