"""Open-vocabulary detector: RPN, RoI heads and the fixed-embedding classifier.

The second-stage classifier compares each proposal's projected embedding
against frozen class prototypes by dot product; background is an implicit
all-zero embedding contributing exp(0)=1 to the denominator, so it never
occupies a learnable direction. Swapping the prototype rows retargets the
detector to any class list, including names never seen with boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, V2LLayer, pooled_roi_vectors
from .boxes import (
    clip_boxes,
    decode_boxes,
    encode_boxes,
    generate_anchors,
    iou_matrix,
    nms,
)
from .checkpoint import Checkpoint, save_checkpoint
from .config import DetectorConfig, ExperimentConfig, check_structural_match, derived_rng
from .data import DatasetSplit
from .grounding import schedule_lr
from .nn import DTYPE, Conv2d, Linear, ParamSet
from .optim import SGD
from .tensor import (
    Tensor,
    as_tensor,
    bce_with_logits,
    concat,
    cross_entropy,
    mul,
    permute,
    relu,
    reshape,
    roi_align,
    smooth_l1,
    softmax,
    take_rows,
    tsum,
)


@dataclass
class Detection:
    box: np.ndarray  # (4,) x1, y1, x2, y2
    class_id: int  # index into the active class list
    score: float
    embedding: np.ndarray | None = None
    proposal: np.ndarray | None = None


@dataclass
class ClassEmbeddingMatrix:
    """Frozen prototypes for the active class set; background stays implicit."""

    names: list[str]
    rows: np.ndarray  # (K, d_l), never optimized

    @classmethod
    def from_names(cls, names: list[str], dim: int, embed_seed: int) -> "ClassEmbeddingMatrix":
        from .text import derive_phrase_embedding

        rows = np.stack([derive_phrase_embedding(n, dim, embed_seed) for n in names]).astype(DTYPE)
        return cls(list(names), rows)

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(np.ascontiguousarray(self.rows).tobytes()).hexdigest()


def classify_proposals(embeddings: Tensor, class_rows: np.ndarray) -> Tensor:
    """Class probabilities per proposal, background first.

    Column 0 is the implicit zero-embedding background; columns 1..K follow
    the class row order. Rows sum to 1.
    """
    logits = embeddings @ as_tensor(class_rows.T.astype(embeddings.dtype))
    zeros = as_tensor(np.zeros((logits.shape[0], 1), dtype=logits.dtype))
    return softmax(concat([zeros, logits], axis=1), axis=1)


def augmented_class_logits(embeddings: Tensor, class_rows: np.ndarray) -> Tensor:
    logits = embeddings @ as_tensor(class_rows.T.astype(embeddings.dtype))
    zeros = as_tensor(np.zeros((logits.shape[0], 1), dtype=logits.dtype))
    return concat([zeros, logits], axis=1)


# -- anchor machinery ------------------------------------------------------------


def assign_anchors(anchors: np.ndarray, gt_boxes: np.ndarray,
                   pos_iou: float, neg_iou: float) -> tuple[np.ndarray, np.ndarray]:
    """RPN labels (1 pos, 0 neg, -1 ignore) and (tx, ty, tw, th) targets.

    Positive: IoU >= pos_iou with some gt, or argmax anchor for a gt.
    Negative: best IoU <= neg_iou. Everything else is ignored.
    """
    n = anchors.shape[0]
    labels = -np.ones(n, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float32)
    if gt_boxes.size == 0:
        labels[:] = 0
        return labels, targets
    ious = iou_matrix(anchors, gt_boxes)
    best = ious.max(axis=1)
    best_gt = ious.argmax(axis=1)
    labels[best <= neg_iou] = 0
    labels[best >= pos_iou] = 1
    # argmax rule: each gt claims its best-overlapping anchors even below pos_iou
    per_gt_best = ious.max(axis=0)
    for g in range(gt_boxes.shape[0]):
        if per_gt_best[g] > 0:
            claim = np.flatnonzero(ious[:, g] >= per_gt_best[g] - 1e-9)
            labels[claim] = 1
            best_gt[claim] = g
    pos = labels == 1
    targets[pos] = encode_boxes(anchors[pos], gt_boxes[best_gt[pos]]).astype(np.float32)
    return labels, targets


def sample_labels(labels: np.ndarray, batch: int, fg_fraction: float,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Subsample positive/negative indices to a fixed budget and ratio."""
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), int(batch * fg_fraction))
    if len(pos) > n_pos:
        pos = rng.choice(pos, size=n_pos, replace=False)
    n_neg = min(len(neg), batch - len(pos))
    if len(neg) > n_neg:
        neg = rng.choice(neg, size=n_neg, replace=False)
    return np.sort(pos), np.sort(neg)


def select_proposals(scores: np.ndarray, deltas: np.ndarray, anchors: np.ndarray,
                     image_size: int, cfg: DetectorConfig, post_nms: int,
                     min_size: float = 2.0) -> np.ndarray:
    """Decode, clip and NMS-filter anchor predictions into scored proposals."""
    boxes = clip_boxes(decode_boxes(anchors, deltas), image_size, image_size)
    wh_ok = (boxes[:, 2] - boxes[:, 0] >= min_size) & (boxes[:, 3] - boxes[:, 1] >= min_size)
    boxes, scores = boxes[wh_ok], scores[wh_ok]
    if boxes.shape[0] == 0:
        return np.zeros((0, 5))
    top = np.argsort(-scores, kind="stable")[: cfg.rpn_pre_nms]
    boxes, scores = boxes[top], scores[top]
    keep = nms(boxes, scores, cfg.rpn_nms_thresh)[:post_nms]
    return np.concatenate([boxes[keep], scores[keep, None]], axis=1)


# -- detector model ----------------------------------------------------------------


class Detector:
    def __init__(self, config: ExperimentConfig, class_names: list[str],
                 init_rng: np.random.Generator):
        mcfg, dcfg = config.model, config.detector
        self.config = config
        self.pset = ParamSet()
        self.backbone = Backbone(self.pset, mcfg, init_rng)
        self.v2l = V2LLayer(self.pset, mcfg, init_rng)
        c_map = mcfg.channels[2]
        self.n_anchors = len(dcfg.anchor_scales) * len(dcfg.anchor_ratios)
        self.rpn_conv = Conv2d(self.pset, "rpn.conv", c_map, c_map, 3, 1, 1, init_rng)
        self.rpn_cls = Conv2d(self.pset, "rpn.cls", c_map, self.n_anchors, 1, 1, 0, init_rng)
        self.rpn_reg = Conv2d(self.pset, "rpn.reg", c_map, 4 * self.n_anchors, 1, 1, 0, init_rng)
        self.boxhead = Linear(self.pset, "boxhead.reg", mcfg.d_v, 4, init_rng)
        self.classes = ClassEmbeddingMatrix.from_names(class_names, mcfg.d_l, mcfg.embed_seed)
        self.anchors = generate_anchors(config.data.image_size, mcfg.stride,
                                        dcfg.anchor_scales, dcfg.anchor_ratios)

    # -- forward pieces ---------------------------------------------------------

    def rpn_forward(self, fm: Tensor) -> tuple[Tensor, Tensor]:
        """Objectness logits (B, H*W*A) and deltas (B, H*W*A, 4)."""
        h = relu(self.rpn_conv(fm))
        b, _, gh, gw = fm.shape
        cls = reshape(permute(self.rpn_cls(h), (0, 2, 3, 1)), (b, gh * gw * self.n_anchors))
        reg = reshape(permute(self.rpn_reg(h), (0, 2, 3, 1)), (b, gh * gw * self.n_anchors, 4))
        return cls, reg

    def roi_embeddings(self, fm: Tensor, rois: np.ndarray) -> tuple[Tensor, Tensor]:
        """Pooled proposal vectors r (R, d_v) and their projections e (R, d_l)."""
        patches = roi_align(fm, rois, self.config.detector.roi_size,
                            1.0 / self.config.model.stride)
        r = pooled_roi_vectors(self.backbone, patches)
        return r, self.v2l(r)

    def set_classes(self, names: list[str]) -> "Detector":
        """Swap the classification head to a new class list; nothing else moves."""
        self.classes = ClassEmbeddingMatrix.from_names(
            names, self.config.model.d_l, self.config.model.embed_seed
        )
        return self

    # -- inference -----------------------------------------------------------------

    def detect(self, images: np.ndarray, keep_embeddings: bool = False) -> list[list[Detection]]:
        """Detections for a batch of images under the active class set."""
        dcfg = self.config.detector
        size = self.config.data.image_size
        fm = self.backbone.feature_map(as_tensor(images))
        cls_logits, reg = self.rpn_forward(fm)
        scores = 1.0 / (1.0 + np.exp(-cls_logits.data))
        proposals_per_image = []
        roi_rows = []
        for b in range(images.shape[0]):
            props = select_proposals(scores[b], reg.data[b], self.anchors, size,
                                     dcfg, dcfg.rpn_post_nms_test)
            proposals_per_image.append(props)
            for p in props:
                roi_rows.append([b, p[0], p[1], p[2], p[3]])
        if not roi_rows:
            return [[] for _ in range(images.shape[0])]
        rois = np.asarray(roi_rows, dtype=np.float64)
        r, e = self.roi_embeddings(fm, rois)
        probs = classify_proposals(e, self.classes.rows).data
        deltas = self.boxhead(r).data
        refined = clip_boxes(decode_boxes(rois[:, 1:], deltas), size, size)
        out: list[list[Detection]] = [[] for _ in range(images.shape[0])]
        offsets = np.cumsum([0] + [p.shape[0] for p in proposals_per_image])
        for b in range(images.shape[0]):
            lo, hi = offsets[b], offsets[b + 1]
            dets: list[Detection] = []
            for k in range(len(self.classes.names)):
                sc = probs[lo:hi, k + 1]
                keep = sc >= dcfg.score_thresh
                if not keep.any():
                    continue
                boxes_k = refined[lo:hi][keep]
                scores_k = sc[keep]
                emb_k = e.data[lo:hi][keep]
                prop_k = rois[lo:hi, 1:][keep]
                for i in nms(boxes_k, scores_k, dcfg.nms_thresh):
                    dets.append(Detection(boxes_k[i], k, float(scores_k[i]),
                                          embedding=emb_k[i].copy() if keep_embeddings else None,
                                          proposal=prop_k[i].copy()))
            dets.sort(key=lambda d: (-d.score, d.box[0], d.box[1], d.box[2], d.box[3]))
            out[b] = dets[: dcfg.max_dets_per_image]
        return out

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        return self.pset.state()


# -- training ----------------------------------------------------------------------


@dataclass
class DetectorResult:
    model: Detector
    log_rows: list[dict] = field(default_factory=list)


def build_detector(config: ExperimentConfig, base_classes: list[str], *,
                   pretrained: Checkpoint | None, no_transfer_v2l: bool = False,
                   unfreeze_v2l: bool = False, seed: int | None = None) -> Detector:
    """Assemble a detector with the transfer/freeze contract applied.

    Without a pretraining checkpoint the backbone and V2L start random; with
    no_transfer_v2l only the backbone transfers. V2L stays frozen unless
    unfreeze_v2l; the stem-side backbone stages are always frozen and the
    class prototypes are never trainable.
    """
    seed = config.seed if seed is None else seed
    det = Detector(config, base_classes, derived_rng(seed, "detector-init"))
    if pretrained is not None:
        check_structural_match(config.structural_hash(), pretrained.structural_hash,
                               "pretraining checkpoint")
        loaded = det.pset.load(pretrained.arrays, prefix="backbone.")
        if loaded == 0:
            raise ValueError("pretraining checkpoint carries no backbone parameters")
        if not no_transfer_v2l:
            if det.pset.load(pretrained.arrays, prefix="v2l.") == 0:
                raise ValueError("pretraining checkpoint carries no v2l parameters")
    for i in range(config.model.frozen_stages):
        det.pset.freeze(f"backbone.stage{i}.")
    if not unfreeze_v2l:
        det.pset.freeze("v2l.")
    return det


def detection_losses(det: Detector, images: np.ndarray, gts: list[tuple[np.ndarray, np.ndarray]],
                     cfg: DetectorConfig, rng: np.random.Generator,
                     alpha: float | None = None) -> dict[str, Tensor]:
    """Faster R-CNN style losses with the background classification term
    scaled by alpha in the second stage."""
    alpha = cfg.alpha if alpha is None else alpha
    size = det.config.data.image_size
    b = images.shape[0]
    fm = det.backbone.feature_map(as_tensor(images))
    rpn_logits, rpn_reg = det.rpn_forward(fm)
    n_per = rpn_logits.shape[1]

    flat_idx, flat_lab, reg_idx, reg_tgt = [], [], [], []
    roi_rows, roi_labels, roi_targets = [], [], []
    rpn_scores = 1.0 / (1.0 + np.exp(-rpn_logits.data))
    for i in range(b):
        gt_boxes, gt_classes = gts[i]
        labels, targets = assign_anchors(det.anchors, gt_boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
        pos, neg = sample_labels(labels, cfg.rpn_batch, cfg.rpn_fg_fraction, rng)
        for p in pos:
            flat_idx.append(i * n_per + p)
            flat_lab.append(1.0)
            reg_idx.append(i * n_per + p)
            reg_tgt.append(targets[p])
        for ng in neg:
            flat_idx.append(i * n_per + ng)
            flat_lab.append(0.0)
        props = select_proposals(rpn_scores[i], rpn_reg.data[i], det.anchors, size,
                                 cfg, cfg.rpn_post_nms_train)
        boxes = props[:, :4] if props.size else np.zeros((0, 4))
        if gt_boxes.size:
            boxes = np.concatenate([boxes, gt_boxes], axis=0)  # gt boxes join the pool at train time
        if boxes.shape[0] == 0:
            continue
        if gt_boxes.size:
            ious = iou_matrix(boxes, gt_boxes)
            best, best_gt = ious.max(axis=1), ious.argmax(axis=1)
        else:
            best = np.zeros(boxes.shape[0])
            best_gt = np.zeros(boxes.shape[0], dtype=np.int64)
        fg = best >= cfg.fg_iou
        fg_idx, bg_idx = sample_labels(fg.astype(np.int64), cfg.roi_batch, cfg.fg_fraction, rng)
        for j in fg_idx:
            roi_rows.append([i, *boxes[j]])
            roi_labels.append(int(gt_classes[best_gt[j]]) + 1)  # background occupies column 0
            roi_targets.append(encode_boxes(boxes[j : j + 1], gt_boxes[best_gt[j]][None])[0])
        for j in bg_idx:
            roi_rows.append([i, *boxes[j]])
            roi_labels.append(0)
            roi_targets.append(np.zeros(4))

    losses: dict[str, Tensor] = {}
    zero = as_tensor(np.zeros((), dtype=DTYPE))
    if flat_idx:
        flat_idx = np.asarray(flat_idx, dtype=np.int64)
        lab = np.asarray(flat_lab, dtype=DTYPE)
        picked = reshape(take_rows(reshape(rpn_logits, (b * n_per, 1)), flat_idx), (len(flat_idx),))
        losses["rpn_cls"] = bce_with_logits(picked, lab, reduction="mean")
    else:
        losses["rpn_cls"] = zero
    if reg_idx:
        reg_rows = take_rows(reshape(rpn_reg, (b * n_per, 4)), np.asarray(reg_idx, dtype=np.int64))
        sl = smooth_l1(reg_rows, np.asarray(reg_tgt, dtype=DTYPE), beta=cfg.smooth_l1_beta,
                       reduction="sum")
        losses["rpn_reg"] = sl * (1.0 / max(len(flat_idx), 1))
    else:
        losses["rpn_reg"] = zero
    if roi_rows:
        rois = np.asarray(roi_rows, dtype=np.float64)
        roi_labels = np.asarray(roi_labels, dtype=np.int64)
        r, e = det.roi_embeddings(fm, rois)
        logits = augmented_class_logits(e, det.classes.rows)
        nll = cross_entropy(logits, roi_labels, reduction="none")
        weights = np.where(roi_labels == 0, alpha, 1.0).astype(DTYPE)
        losses["roi_cls"] = tsum(mul(nll, as_tensor(weights))) * (1.0 / len(roi_labels))
        fg_rows = np.flatnonzero(roi_labels > 0)
        if fg_rows.size:
            deltas = take_rows(det.boxhead(r), fg_rows)
            tgt = np.asarray(roi_targets, dtype=DTYPE)[fg_rows]
            losses["roi_reg"] = smooth_l1(deltas, tgt, beta=cfg.smooth_l1_beta,
                                          reduction="sum") * (1.0 / len(roi_labels))
        else:
            losses["roi_reg"] = zero
    else:
        losses["roi_cls"], losses["roi_reg"] = zero, zero
    losses["total"] = losses["rpn_cls"] + losses["rpn_reg"] + losses["roi_cls"] + losses["roi_reg"]
    return losses


def train_detector(
    dataset: DatasetSplit,
    config: ExperimentConfig,
    *,
    pretrained: Checkpoint | None = None,
    no_transfer_v2l: bool = False,
    unfreeze_v2l: bool = False,
    alpha: float | None = None,
    seed: int | None = None,
    out_path=None,
    log_path=None,
    quiet: bool = True,
) -> DetectorResult:
    """Train RPN and heads on base-class boxes with the transfer contract.

    Only examples with at least one (base-class) box participate, mirroring
    the removal of images left without annotations.
    """
    dcfg = config.detector
    seed = config.seed if seed is None else seed
    alpha = dcfg.alpha if alpha is None else alpha
    det = build_detector(config, dataset.base_categories, pretrained=pretrained,
                         no_transfer_v2l=no_transfer_v2l, unfreeze_v2l=unfreeze_v2l, seed=seed)
    # category ids remap onto the detector's class rows by name; the loss
    # therefore only ever sees base-class labels
    remap = {dataset.categories.index(name): k for k, name in enumerate(det.classes.names)}

    train_examples = [ex for ex in dataset.train if ex.gt]
    if not train_examples:
        raise ValueError("no training examples with base-class boxes")
    opt = SGD(det.pset.params(), lr=dcfg.lr, momentum=dcfg.momentum, clip_norm=dcfg.clip_norm)
    batch_rng = derived_rng(seed, "det-batch")
    sample_rng = derived_rng(seed, "det-sample")
    order = batch_rng.permutation(len(train_examples))
    cursor = 0
    log_rows: list[dict] = []
    for step in range(dcfg.steps):
        if cursor + dcfg.batch_size > len(train_examples):
            order = batch_rng.permutation(len(train_examples))
            cursor = 0
        idx = order[cursor : cursor + dcfg.batch_size]
        cursor += dcfg.batch_size
        batch = [train_examples[i] for i in idx]
        images = np.stack([ex.image for ex in batch])
        gts = [
            (
                np.asarray([g.box for g in ex.gt], dtype=np.float64),
                np.asarray([remap[g.category_id] for g in ex.gt], dtype=np.int64),
            )
            for ex in batch
        ]
        losses = detection_losses(det, images, gts, dcfg, sample_rng, alpha=alpha)
        total = losses["total"]
        if not np.isfinite(total.data):
            raise RuntimeError(f"non-finite detection loss at step {step}")
        opt.lr = schedule_lr(dcfg.lr, dcfg.lr_drops, step, dcfg.steps)
        total.backward()
        opt.step()
        if step % dcfg.log_every == 0 or step == dcfg.steps - 1:
            row = {"step": step, **{k: float(v.data) for k, v in losses.items()}}
            log_rows.append(row)
            if not quiet:
                print("  train " + " ".join(f"{k}={v:.4f}" if k != "step" else f"{k}={v}"
                                            for k, v in row.items()), flush=True)
    if out_path is not None:
        save_checkpoint(
            out_path,
            det.checkpoint_arrays(),
            structural_hash=config.structural_hash(),
            metadata={
                "kind": "detector",
                "seed": seed,
                "alpha": alpha,
                "classes": det.classes.names,
                "no_transfer_v2l": no_transfer_v2l,
                "unfreeze_v2l": unfreeze_v2l,
                "pretrained": pretrained is not None,
                "steps": dcfg.steps,
                "config": config.to_dict(),
            },
        )
    if log_path is not None:
        import csv

        fields = ["step", "rpn_cls", "rpn_reg", "roi_cls", "roi_reg", "total"]
        with open(log_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(log_rows)
    return DetectorResult(det, log_rows)


def load_detector(ckpt: Checkpoint, config: ExperimentConfig) -> Detector:
    check_structural_match(config.structural_hash(), ckpt.structural_hash, "detector checkpoint")
    names = ckpt.metadata.get("classes")
    if not names:
        raise ValueError("detector checkpoint is missing its class list")
    det = Detector(config, names, derived_rng(int(ckpt.metadata.get("seed", 0)), "detector-init"))
    if det.pset.load(ckpt.arrays) != len(det.pset.params()):
        raise ValueError("detector checkpoint does not cover all detector parameters")
    return det
