"""Weakly supervised visual grounding and the caption pretraining loop.

The global image-caption score is an attention-weighted average of local
region-word dot products: per-token weights are a softmax over regions of
the local scores, and the weighted local scores are averaged over the
caption's content tokens. Matching pairs are pulled together with a
symmetric in-batch contrastive loss (other captions are negatives for each
image and vice versa). Grounding operates directly on the projected region
embeddings and the fixed word embeddings; the multimodal transformer only
serves the auxiliary objectives.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, V2LLayer
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, derived_rng
from .data import AnnotatedExample, DatasetSplit
from .mmt import MultimodalTransformer, spatial_dropout_indices
from .nn import DTYPE, ParamSet
from .optim import SGD
from .tensor import (
    Tensor,
    as_tensor,
    log_softmax,
    matmul,
    mul,
    permute,
    reshape,
    softmax,
    tsum,
)
from .text import CLS, EmbeddingTable, TokenSequence, Vocabulary, apply_mlm_mask, encode_caption


class DivergenceError(RuntimeError):
    """Raised when the pretraining loss stops being finite."""


# -- the grounding formulas ---------------------------------------------------


def alignment_weights(e_regions: Tensor, e_tokens: Tensor) -> Tensor:
    """Per-token softmax over regions of the local dot-product scores.

    e_regions: (n_regions, d); e_tokens: (n_tokens, d). Returns (n_regions,
    n_tokens) with every column summing to 1.
    """
    local = matmul(e_regions, permute(e_tokens, (1, 0)))
    return softmax(local, axis=0)


def global_grounding_score(e_regions: Tensor, e_tokens: Tensor) -> Tensor:
    """Weighted average of local scores over all region-token pairs (scalar)."""
    local = matmul(e_regions, permute(e_tokens, (1, 0)))
    weights = softmax(local, axis=0)
    n_tokens = e_tokens.shape[0]
    return tsum(mul(weights, local)) * (1.0 / n_tokens)


def pairwise_grounding_scores(e_regions: Tensor, e_tokens: Tensor, token_mask: np.ndarray) -> Tensor:
    """Global scores for the full image x caption cross product.

    e_regions: (B, nI, d); e_tokens: (B, nC, d) padded; token_mask: (B, nC)
    bool marking tokens that participate (content tokens, unmasked).
    Matching pairs sit on the diagonal of the returned (B, B) tensor.
    """
    b, n_i, d = e_regions.shape
    n_c = e_tokens.shape[1]
    r2 = reshape(e_regions, (b * n_i, d))
    t2 = reshape(e_tokens, (b * n_c, d))
    local = matmul(r2, permute(t2, (1, 0)))  # (B*nI, B*nC)
    local = permute(reshape(local, (b, n_i, b, n_c)), (0, 2, 1, 3))  # (B_img, B_cap, nI, nC)
    weights = softmax(local, axis=2)
    per_token = tsum(mul(weights, local), axis=2)  # (B_img, B_cap, nC)
    mask = token_mask.astype(DTYPE)[None, :, :]
    counts = np.maximum(token_mask.sum(axis=1), 1).astype(DTYPE)
    per_pair = tsum(mul(per_token, as_tensor(mask)), axis=2)  # (B_img, B_cap)
    return mul(per_pair, as_tensor((1.0 / counts)[None, :]))


def grounding_losses(scores: Tensor) -> tuple[Tensor, Tensor]:
    """Symmetric contrastive losses from the pairwise score matrix.

    Image loss: softmax over captions (rows index images); caption loss:
    softmax over images. Both are batch means of the diagonal NLL.
    """
    b = scores.shape[0]
    eye = as_tensor(np.eye(b, dtype=DTYPE))
    loss_image = tsum(mul(log_softmax(scores, axis=1), eye)) * (-1.0 / b)
    loss_caption = tsum(mul(log_softmax(scores, axis=0), eye)) * (-1.0 / b)
    return loss_image, loss_caption


# -- pretraining model ----------------------------------------------------------


@dataclass
class PretrainBatch:
    images: np.ndarray
    sequences: list[TokenSequence]


class PretrainModel:
    """Backbone + V2L + multimodal transformer with the full pretraining loss."""

    def __init__(self, config: ExperimentConfig, vocab: Vocabulary, init_rng: np.random.Generator):
        self.config = config
        self.vocab = vocab
        self.table = EmbeddingTable(vocab, config.model.d_l, config.model.embed_seed)
        self.pset = ParamSet()
        self.backbone = Backbone(self.pset, config.model, init_rng)
        self.v2l = V2LLayer(self.pset, config.model, init_rng)
        n_cells = self.backbone.grid_cells(config.data.image_size)
        self.mmt = MultimodalTransformer(self.pset, config.model, n_cells, len(vocab), init_rng)
        self.n_cells = n_cells

    def region_embeddings(self, images: np.ndarray) -> Tensor:
        grid = self.backbone.grid_features(as_tensor(images))
        return self.v2l(grid)

    def encode_captions(self, captions: list[str], mask_prob: float,
                        rng: np.random.Generator | None) -> list[TokenSequence]:
        seqs = [encode_caption(c, self.vocab, self.config.model.max_caption_len) for c in captions]
        if mask_prob > 0.0 and rng is not None:
            seqs = [apply_mlm_mask(s, mask_prob, rng) for s in seqs]
        return seqs

    def padded_tokens(self, seqs: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
        """Embedding rows (B, L, d) plus the grounding participation mask."""
        b = len(seqs)
        length = max(s.length for s in seqs)
        embs = np.zeros((b, length, self.config.model.d_l), dtype=DTYPE)
        mask = np.zeros((b, length), dtype=bool)
        for i, s in enumerate(seqs):
            embs[i, : s.length] = self.table.matrix[s.ids]
            mask[i, : s.length] = ~np.isin(s.ids, (0, 1, 2))  # pads, [MASK]ed and specials stay out
        return embs, mask

    # -- loss assembly -----------------------------------------------------------

    def compute_losses(
        self,
        batch: PretrainBatch,
        *,
        train: bool,
        no_grounding: bool = False,
        no_auxiliary: bool = False,
        itm_rng: np.random.Generator | None = None,
        dropout_rng: np.random.Generator | None = None,
        itm_rate: float = 0.5,
        spatial_rate: float = 0.0,
    ) -> dict[str, Tensor]:
        e_regions = self.region_embeddings(batch.images)
        losses: dict[str, Tensor] = {}
        zero = as_tensor(np.zeros((), dtype=DTYPE))
        if not no_grounding:
            embs, mask = self.padded_tokens(batch.sequences)
            scores = pairwise_grounding_scores(e_regions, as_tensor(embs), mask)
            losses["grounding_image"], losses["grounding_caption"] = grounding_losses(scores)
        else:
            losses["grounding_image"], losses["grounding_caption"] = zero, zero
        if not no_auxiliary:
            mlm, itm = self._auxiliary_losses(e_regions, batch.sequences, train,
                                              itm_rng, dropout_rng, itm_rate, spatial_rate)
            losses["mlm"], losses["itm"] = mlm, itm
        else:
            losses["mlm"], losses["itm"] = zero, zero
        losses["total"] = (losses["grounding_image"] + losses["grounding_caption"]
                           + losses["mlm"] + losses["itm"])
        return losses

    def _auxiliary_losses(self, e_regions, sequences, train, itm_rng, dropout_rng,
                          itm_rate, spatial_rate):
        b = e_regions.shape[0]
        assignment = np.arange(b)
        labels = np.ones(b, dtype=np.int64)
        if train and itm_rate > 0.0:
            if b < 2:
                raise ValueError("ITM negatives need a batch of at least 2 caption slots")
            n_neg = max(2, int(round(b * itm_rate)))
            chosen = itm_rng.choice(b, size=min(n_neg, b), replace=False)
            assignment[chosen] = _derange(chosen, itm_rng)
            labels[chosen] = 0
        region_mask = np.ones((b, self.n_cells), dtype=bool)
        if train and spatial_rate > 0.0:
            for i in range(b):
                region_mask[i] = False
                region_mask[i, spatial_dropout_indices(self.n_cells, spatial_rate, dropout_rng)] = True
        token_embs = [self.table.matrix[sequences[assignment[i]].ids] for i in range(b)]
        cls_row = self.table.matrix[self.vocab.index[CLS]]
        seq_batch = self.mmt.assemble(e_regions, token_embs, cls_row, region_mask=region_mask)
        outputs = self.mmt.forward(seq_batch, train=train, rng=dropout_rng)
        flat_positions, targets = [], []
        for i in range(b):
            if labels[i] != 1:
                continue  # masked-word prediction only makes sense on matched pairs
            seq = sequences[assignment[i]]
            for pos, tgt in zip(seq.mask_positions, seq.mask_targets):
                flat_positions.append(i * seq_batch.length + seq_batch.text_position(i, int(pos)))
                targets.append(int(tgt))
        mlm = self.mmt.mlm_loss(outputs, np.asarray(flat_positions, dtype=np.int64),
                                np.asarray(targets, dtype=np.int64), self.table.matrix)
        itm, _ = self.mmt.itm_loss(outputs, labels)
        return mlm, itm

    def checkpoint_arrays(self, include_mmt: bool = True) -> dict[str, np.ndarray]:
        state = self.pset.state()
        if not include_mmt:
            state = {k: v for k, v in state.items() if not k.startswith("mmt.")}
        return state


def _derange(indices: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permutation of the given slots with no fixed point."""
    n = len(indices)
    if n < 2:
        raise ValueError("cannot derange fewer than two elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return indices[perm]


# -- training loop ----------------------------------------------------------------


def schedule_lr(base: float, drops: tuple[float, ...], step: int, total: int,
                warmup: int = 0) -> float:
    lr = base
    if warmup > 0 and step < warmup:
        lr *= (step + 1) / warmup
    for frac in drops:
        if step >= frac * total:
            lr *= 0.1
    return lr


@dataclass
class PretrainResult:
    model: PretrainModel
    log_rows: list[dict] = field(default_factory=list)


def pretrain(
    dataset: DatasetSplit,
    config: ExperimentConfig,
    *,
    no_grounding: bool = False,
    no_auxiliary: bool = False,
    seed: int | None = None,
    vocab: Vocabulary | None = None,
    out_path=None,
    log_path=None,
    quiet: bool = True,
    probe=None,
    probe_every: int = 0,
) -> PretrainResult:
    """Train backbone, V2L and the transformer jointly on image-caption pairs."""
    from .text import build_vocab

    pcfg = config.pretrain
    seed = config.seed if seed is None else seed
    vocab = vocab or build_vocab([ex.caption for ex in dataset.train])
    model = PretrainModel(config, vocab, derived_rng(seed, "init"))
    opt = SGD(model.pset.params(), lr=pcfg.lr, momentum=pcfg.momentum, clip_norm=pcfg.clip_norm)
    batch_rng = derived_rng(seed, "batch")
    mask_rng = derived_rng(seed, "mask")
    itm_rng = derived_rng(seed, "itm")
    dropout_rng = derived_rng(seed, "dropout")
    n = len(dataset.train)
    order = batch_rng.permutation(n)
    cursor = 0
    log_rows: list[dict] = []
    for step in range(pcfg.steps):
        if cursor + pcfg.batch_size > n:
            order = batch_rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + pcfg.batch_size]
        cursor += pcfg.batch_size
        examples = [dataset.train[i] for i in idx]
        images = np.stack([ex.image for ex in examples])
        seqs = model.encode_captions([ex.caption for ex in examples], pcfg.mask_prob, mask_rng)
        losses = model.compute_losses(
            PretrainBatch(images, seqs),
            train=True,
            no_grounding=no_grounding,
            no_auxiliary=no_auxiliary,
            itm_rng=itm_rng,
            dropout_rng=dropout_rng,
            itm_rate=pcfg.itm_negative_rate,
            spatial_rate=pcfg.spatial_dropout,
        )
        total = losses["total"]
        if not np.isfinite(total.data):
            raise DivergenceError(
                f"non-finite pretraining loss at step {step}: "
                + ", ".join(f"{k}={float(v.data):.4g}" for k, v in losses.items())
            )
        opt.lr = schedule_lr(pcfg.lr, pcfg.lr_drops, step, pcfg.steps, pcfg.warmup_steps)
        total.backward()
        opt.step()
        if step % pcfg.log_every == 0 or step == pcfg.steps - 1:
            row = {
                "step": step,
                "grounding_image": float(losses["grounding_image"].data),
                "grounding_caption": float(losses["grounding_caption"].data),
                "mlm": float(losses["mlm"].data),
                "itm": float(losses["itm"].data),
                "total": float(total.data),
            }
            log_rows.append(row)
            if not quiet:
                print("  pretrain " + " ".join(f"{k}={v:.4f}" if k != "step" else f"{k}={v}"
                                               for k, v in row.items()), flush=True)
        if probe is not None and probe_every and (step + 1) % probe_every == 0:
            probe(step + 1, model)
    if out_path is not None:
        arrays = model.checkpoint_arrays(include_mmt=not no_auxiliary)
        save_checkpoint(
            out_path,
            arrays,
            structural_hash=config.structural_hash(),
            metadata={
                "kind": "pretrain",
                "seed": seed,
                "vocab_size": len(vocab),
                "no_grounding": no_grounding,
                "no_auxiliary": no_auxiliary,
                "steps": pcfg.steps,
                "config": config.to_dict(),
            },
        )
    if log_path is not None:
        write_training_log(log_path, log_rows)
    return PretrainResult(model, log_rows)


def write_training_log(path, rows: list[dict]) -> None:
    fields = ["step", "grounding_image", "grounding_caption", "mlm", "itm", "total"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


# -- held-out probes -----------------------------------------------------------


def score_matrix(model: PretrainModel, examples: list[AnnotatedExample]) -> np.ndarray:
    images = np.stack([ex.image for ex in examples])
    seqs = model.encode_captions([ex.caption for ex in examples], 0.0, None)
    e_regions = model.region_embeddings(images)
    embs, mask = model.padded_tokens(seqs)
    return pairwise_grounding_scores(e_regions, as_tensor(embs), mask).data


def retrieval_recall_at_1(model: PretrainModel, examples: list[AnnotatedExample],
                          batch_size: int = 16) -> float:
    """Caption-to-image retrieval accuracy within held-out batches."""
    hits, total = 0, 0
    for lo in range(0, len(examples) - batch_size + 1, batch_size):
        scores = score_matrix(model, examples[lo : lo + batch_size])
        hits += int((scores.argmax(axis=0) == np.arange(batch_size)).sum())
        total += batch_size
    return hits / max(total, 1)


def mlm_probe_accuracy(model: PretrainModel, examples: list[AnnotatedExample],
                       rng: np.random.Generator, words: set[str] | None = None,
                       mask_prob: float = 0.4, batch_size: int = 16) -> float:
    """Held-out masked-word top-1 accuracy, optionally restricted to a word set."""
    hits, total = 0, 0
    for lo in range(0, len(examples) - batch_size + 1, batch_size):
        chunk = examples[lo : lo + batch_size]
        images = np.stack([ex.image for ex in chunk])
        seqs = model.encode_captions([ex.caption for ex in chunk], mask_prob, rng)
        e_regions = model.region_embeddings(images)
        token_embs = [model.table.matrix[s.ids] for s in seqs]
        cls_row = model.table.matrix[model.vocab.index[CLS]]
        seq_batch = model.mmt.assemble(e_regions, token_embs, cls_row)
        outputs = model.mmt.forward(seq_batch)
        flat, targets = [], []
        for i, s in enumerate(seqs):
            for pos, tgt in zip(s.mask_positions, s.mask_targets):
                if words is None or model.vocab.tokens[int(tgt)] in words:
                    flat.append(i * seq_batch.length + seq_batch.text_position(i, int(pos)))
                    targets.append(int(tgt))
        if not flat:
            continue
        logits = model.mmt.mlm_logits(outputs, np.asarray(flat), model.table.matrix)
        hits += int((logits.data.argmax(axis=1) == np.asarray(targets)).sum())
        total += len(targets)
    return hits / max(total, 1)


def itm_probe_accuracy(model: PretrainModel, examples: list[AnnotatedExample],
                       rng: np.random.Generator, batch_size: int = 16) -> float:
    """Held-out matched/mismatched classification accuracy of the ITM head."""
    hits, total = 0, 0
    for lo in range(0, len(examples) - batch_size + 1, batch_size):
        chunk = examples[lo : lo + batch_size]
        images = np.stack([ex.image for ex in chunk])
        seqs = model.encode_captions([ex.caption for ex in chunk], 0.0, None)
        assignment = np.arange(batch_size)
        labels = np.ones(batch_size, dtype=np.int64)
        chosen = rng.choice(batch_size, size=batch_size // 2, replace=False)
        assignment[chosen] = _derange(chosen, rng)
        labels[chosen] = 0
        e_regions = model.region_embeddings(images)
        token_embs = [model.table.matrix[seqs[assignment[i]].ids] for i in range(batch_size)]
        cls_row = model.table.matrix[model.vocab.index[CLS]]
        seq_batch = model.mmt.assemble(e_regions, token_embs, cls_row)
        outputs = model.mmt.forward(seq_batch)
        _, logits = model.mmt.itm_loss(outputs, labels)
        hits += int(((logits > 0).astype(np.int64) == labels).sum())
        total += batch_size
    return hits / max(total, 1)


def weak_localization_rate(model: PretrainModel, examples: list[AnnotatedExample],
                           categories: list[str]) -> float:
    """Fraction of single-object images whose shape word's argmax alignment
    region center falls inside the object's ground-truth box."""
    g = model.config.data.image_size // model.config.model.stride
    stride = model.config.model.stride
    hits, total = 0, 0
    for ex in examples:
        if len(ex.gt) != 1:
            continue
        shape_word = categories[ex.gt[0].category_id].split()[1]
        seq = model.encode_captions([ex.caption], 0.0, None)[0]
        tokens = [model.vocab.tokens[i] for i in seq.ids]
        if shape_word not in tokens:
            continue
        j = tokens.index(shape_word)
        e_regions = model.region_embeddings(ex.image[None])
        e_tokens = as_tensor(model.table.matrix[seq.ids])
        weights = alignment_weights(reshape(e_regions, (model.n_cells, model.config.model.d_l)),
                                    e_tokens).data
        cell = int(weights[:, j].argmax())
        cy, cx = (cell // g + 0.5) * stride, (cell % g + 0.5) * stride
        x1, y1, x2, y2 = ex.gt[0].box
        hits += int(x1 <= cx <= x2 and y1 <= cy <= y2)
        total += 1
    return hits / max(total, 1)
