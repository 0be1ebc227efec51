"""Cross-modal transformer for the auxiliary pretraining objectives (MLM, ITM).

The sequence is [CLS] + visual region embeddings + caption token embeddings,
each augmented with a learned modality vector and learned position
embeddings (grid index for regions, token index for text). Attention is
fully bidirectional across modalities. The whole module exists only during
pretraining; its parameters live under the "mmt." namespace and are never
transferred downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .nn import DTYPE, LayerNorm, Linear, ParamSet
from .tensor import (
    Tensor,
    add,
    as_tensor,
    bce_with_logits,
    concat,
    cross_entropy,
    dropout_mask,
    matmul,
    mul,
    permute,
    relu,
    reshape,
    softmax,
    take_rows,
)

NEG_INF = -1e9


def spatial_dropout_indices(n_regions: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Independently keep each region with probability 1-rate; never empty."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"spatial dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.arange(n_regions)
    while True:
        keep = rng.random(n_regions) >= rate
        if keep.any():
            return np.flatnonzero(keep)


@dataclass
class SequenceBatch:
    """Assembled multimodal batch plus the layout needed to route losses.

    Physical layout is fixed ([CLS] | n_grid region slots | text slots);
    dropped regions and text padding exist only as masked-out attention keys,
    so the logical sequence is [CLS] + kept regions + caption tokens.
    """

    embeddings: Tensor  # (B, L, D)
    key_mask: np.ndarray  # (B, L) bool, True where a live token sits
    n_grid: int
    n_text: list[int]  # caption tokens per example
    length: int

    def text_position(self, b: int, token_index: int) -> int:
        return 1 + self.n_grid + token_index

    def visual_slice(self, b: int) -> slice:
        return slice(1, 1 + self.n_grid)

    def kept_regions(self, b: int) -> np.ndarray:
        return np.flatnonzero(self.key_mask[b, 1 : 1 + self.n_grid])


class TransformerLayer:
    def __init__(self, pset: ParamSet, name: str, d: int, heads: int, d_ff: int, rng):
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d // heads
        self.q = Linear(pset, f"{name}.q", d, d, rng)
        self.k = Linear(pset, f"{name}.k", d, d, rng)
        self.v = Linear(pset, f"{name}.v", d, d, rng)
        self.o = Linear(pset, f"{name}.o", d, d, rng)
        self.norm1 = LayerNorm(pset, f"{name}.norm1", d, axis=-1, rank=3)
        self.ff1 = Linear(pset, f"{name}.ff1", d, d_ff, rng)
        self.ff2 = Linear(pset, f"{name}.ff2", d_ff, d, rng)
        self.norm2 = LayerNorm(pset, f"{name}.norm2", d, axis=-1, rank=3)

    def _split_heads(self, x: Tensor, b: int, l: int) -> Tensor:
        x = reshape(x, (b, l, self.heads, self.d_head))
        return reshape(permute(x, (0, 2, 1, 3)), (b * self.heads, l, self.d_head))

    def __call__(self, x: Tensor, attn_bias: np.ndarray, drop: float, rng, attn_out: list | None) -> Tensor:
        # pre-norm residual blocks: trainable from scratch with plain SGD
        b, l, d = x.shape
        h = self.norm1(x)
        q = self._split_heads(self.q(h), b, l)
        k = self._split_heads(self.k(h), b, l)
        v = self._split_heads(self.v(h), b, l)
        logits = matmul(q, permute(k, (0, 2, 1))) * (1.0 / np.sqrt(self.d_head))
        logits = add(logits, as_tensor(attn_bias))
        probs = softmax(logits, axis=-1)
        if attn_out is not None:
            attn_out.append(probs.data.reshape(b, self.heads, l, l).copy())
        if drop > 0.0:
            probs = mul(probs, as_tensor(dropout_mask(probs.shape, drop, rng)))
        ctx = matmul(probs, v)
        ctx = reshape(permute(reshape(ctx, (b, self.heads, l, self.d_head)), (0, 2, 1, 3)), (b, l, d))
        x = add(x, self.o(ctx))
        ff = self.ff2(relu(self.ff1(self.norm2(x))))
        if drop > 0.0:
            ff = mul(ff, as_tensor(dropout_mask(ff.shape, drop, rng)))
        return add(x, ff)


class MultimodalTransformer:
    VISUAL, TEXT = 0, 1

    def __init__(self, pset: ParamSet, cfg: ModelConfig, n_cells: int, vocab_size: int, rng):
        d = cfg.d_l
        self.cfg = cfg
        self.n_cells = n_cells
        self.max_len = 1 + n_cells + cfg.max_caption_len
        self.layers = [
            TransformerLayer(pset, f"mmt.layer{i}", d, cfg.mmt_heads, cfg.mmt_ff, rng)
            for i in range(cfg.mmt_layers)
        ]
        scale = 0.02
        self.pos_visual = pset.parameter("mmt.pos_visual", rng.standard_normal((n_cells, d)).astype(DTYPE) * scale)
        self.pos_text = pset.parameter("mmt.pos_text", rng.standard_normal((cfg.max_caption_len + 1, d)).astype(DTYPE) * scale)
        self.modality = pset.parameter("mmt.modality", rng.standard_normal((2, d)).astype(DTYPE) * scale)
        self.final_norm = LayerNorm(pset, "mmt.final_norm", d, axis=-1, rank=3)
        self.mlm_fc = Linear(pset, "mmt.mlm_fc", d, d, rng)
        self.itm_head = Linear(pset, "mmt.itm_head", d, 1, rng)
        self.vocab_size = vocab_size

    # -- batch assembly --------------------------------------------------------

    def assemble(self, e_regions: Tensor, token_embs: list[np.ndarray],
                 cls_row: np.ndarray, region_mask: np.ndarray | None = None,
                 region_order: np.ndarray | None = None) -> SequenceBatch:
        """Build [CLS] | regions | tokens sequences with their key mask.

        region_mask (B, n_grid): False marks spatially dropped regions, which
        stay in the layout but vanish as attention keys. region_order (B,
        n_grid) physically reorders regions together with their position
        embeddings (layout probes only).
        """
        b, n_grid, d = e_regions.shape
        n_text = [t.shape[0] for t in token_embs]
        max_text = max(n_text)
        length = 1 + n_grid + max_text
        if 1 + n_grid + max(n_text) > self.max_len:
            raise ValueError(f"sequence length {length} exceeds configured maximum {self.max_len}")
        mod_vis = reshape(take_rows(self.modality.tensor, [self.VISUAL]), (1, 1, d))
        mod_txt = reshape(take_rows(self.modality.tensor, [self.TEXT]), (1, 1, d))

        if region_order is not None:
            flat = (np.arange(b)[:, None] * n_grid + region_order).reshape(-1)
            vis = reshape(take_rows(reshape(e_regions, (b * n_grid, d)), flat), (b, n_grid, d))
            pos = reshape(take_rows(self.pos_visual.tensor, region_order.reshape(-1)), (b, n_grid, d))
        else:
            vis = e_regions
            pos = reshape(self.pos_visual.tensor, (1, n_grid, d))
        vis = add(add(vis, pos), mod_vis)

        cls_vec = add(as_tensor(cls_row[None, None, :].astype(e_regions.dtype)),
                      reshape(take_rows(self.pos_text.tensor, [0]), (1, 1, d)))
        cls_part = add(add(cls_vec, mod_txt),
                       as_tensor(np.zeros((b, 1, d), dtype=e_regions.dtype)))

        key_mask = np.zeros((b, length), dtype=bool)
        key_mask[:, 0] = True
        key_mask[:, 1 : 1 + n_grid] = True if region_mask is None else region_mask
        parts = [cls_part, vis]
        if max_text:
            padded = np.zeros((b, max_text, d), dtype=e_regions.dtype)
            for i, emb in enumerate(token_embs):
                padded[i, : n_text[i]] = emb
                key_mask[i, 1 + n_grid : 1 + n_grid + n_text[i]] = True
            txt = add(as_tensor(padded),
                      reshape(take_rows(self.pos_text.tensor, 1 + np.arange(max_text)), (1, max_text, d)))
            parts.append(add(txt, mod_txt))
        return SequenceBatch(concat(parts, axis=1), key_mask, n_grid, n_text, length)

    # -- forward ----------------------------------------------------------------

    def forward(self, batch: SequenceBatch, train: bool = False,
                rng: np.random.Generator | None = None,
                collect_attention: bool = False):
        """Contextual embeddings (B, L, D); deterministic when train is False."""
        b, l, _ = batch.embeddings.shape
        bias = np.where(batch.key_mask[:, None, :], 0.0, NEG_INF).astype(DTYPE)
        bias = np.broadcast_to(bias[:, None, :, :], (b, self.cfg.mmt_heads, 1, l))
        bias = np.ascontiguousarray(bias).reshape(b * self.cfg.mmt_heads, 1, l)
        drop = self.cfg.mmt_dropout if train else 0.0
        attn: list | None = [] if collect_attention else None
        x = batch.embeddings
        for layer in self.layers:
            x = layer(x, bias, drop, rng, attn)
        x = self.final_norm(x)
        return (x, attn) if collect_attention else x

    # -- objectives ----------------------------------------------------------------

    def mlm_logits(self, outputs: Tensor, flat_positions: np.ndarray,
                   table_matrix: np.ndarray) -> Tensor:
        """Vocabulary logits at masked positions: FC output dotted with every row."""
        b, l, d = outputs.shape
        hidden = take_rows(reshape(outputs, (b * l, d)), flat_positions)
        return matmul(self.mlm_fc(hidden), as_tensor(table_matrix.T))

    def mlm_loss(self, outputs: Tensor, flat_positions: np.ndarray, targets: np.ndarray,
                 table_matrix: np.ndarray) -> Tensor:
        """Cross-entropy of masked-token predictions against the full vocabulary."""
        if flat_positions.size == 0:
            return as_tensor(np.zeros((), dtype=DTYPE))
        logits = self.mlm_logits(outputs, flat_positions, table_matrix)
        return cross_entropy(logits, targets, reduction="mean")

    def itm_loss(self, outputs: Tensor, labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Binary cross-entropy of the matching head on [CLS]; also returns logits."""
        b, l, d = outputs.shape
        cls = take_rows(reshape(outputs, (b * l, d)), np.arange(b) * l)
        logits = reshape(self.itm_head(cls), (b,))
        return bce_with_logits(logits, labels.astype(DTYPE), reduction="mean"), logits.data.copy()
