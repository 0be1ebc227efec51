"""mAP at IoU 0.5 with base, target and generalized evaluation protocols.

AP uses all-point interpolation: the precision envelope is made monotone
non-increasing before integrating over recall. Classes without ground truth
are reported as undefined and excluded from means. The generalized protocol
scores a union head so base and target classes compete for probability mass.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import iou_matrix
from .config import canonical_json
from .data import DatasetSplit
from .detection import Detection, Detector
from .text import tokenize

PROTOCOLS = ("base", "target", "generalized")


def match_detections(dets_by_image: list[list[tuple[np.ndarray, float]]],
                     gts_by_image: list[list[np.ndarray]],
                     iou_thr: float) -> tuple[np.ndarray, int]:
    """Greedy TP/FP assignment for one class across a whole test set.

    Detections are ranked globally by descending score (ties break on box
    coordinates); each matches the highest-IoU still-unmatched ground truth
    of its image when that IoU reaches the threshold. Returns flags in rank
    order plus the ground-truth count.
    """
    records = []
    for img, dets in enumerate(dets_by_image):
        for box, score in dets:
            records.append((img, np.asarray(box, dtype=np.float64), float(score)))
    records.sort(key=lambda r: (-r[2], r[1][0], r[1][1], r[1][2], r[1][3]))
    taken = [np.zeros(len(g), dtype=bool) for g in gts_by_image]
    flags = np.zeros(len(records), dtype=bool)
    for i, (img, box, _score) in enumerate(records):
        gts = gts_by_image[img]
        if not len(gts):
            continue
        ious = iou_matrix(box[None], np.asarray(gts))[0]
        ious = np.where(taken[img], -1.0, ious)
        j = int(ious.argmax())
        if ious[j] >= iou_thr:
            flags[i] = True
            taken[img][j] = True
    n_gt = sum(len(g) for g in gts_by_image)
    return flags, n_gt


def average_precision(flags: np.ndarray, n_gt: int) -> float | None:
    """Area under the interpolated precision-recall curve; None if no gt."""
    if n_gt == 0:
        return None
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap, prev = 0.0, 0.0
    for i in np.flatnonzero(flags):
        ap += (recall[i] - prev) * envelope[i]
        prev = recall[i]
    return float(ap)


def _mean_ap(values: list[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def caption_word_frequencies(dataset: DatasetSplit) -> dict[str, int]:
    counts: Counter[str] = Counter()
    for ex in dataset.train:
        counts.update(tokenize(ex.caption))
    return dict(counts)


def class_word_frequency(name: str, counts: dict[str, int]) -> int:
    """Scarcest word of a class name bounds how often captions teach it."""
    return min(counts.get(w, 0) for w in tokenize(name))


@dataclass
class EvalReport:
    protocol: str
    classes: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_json(self, path=None) -> str:
        payload = canonical_json({"protocol": self.protocol, "classes": self.classes,
                                  "summary": self.summary}) + "\n"
        if path is not None:
            Path(path).write_text(payload, encoding="utf-8")
        return payload

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["class", "split", "ap", "n_gt", "word_freq"])
            writer.writeheader()
            for row in self.classes:
                writer.writerow({"class": row["name"], "split": row["split"],
                                 "ap": "" if row["ap"] is None else f"{row['ap']:.6f}",
                                 "n_gt": row["n_gt"], "word_freq": row["word_freq"]})


def detect_test_set(det: Detector, dataset: DatasetSplit, batch_size: int = 16,
                    keep_embeddings: bool = False) -> list[list[Detection]]:
    out: list[list[Detection]] = []
    for lo in range(0, len(dataset.test), batch_size):
        chunk = dataset.test[lo : lo + batch_size]
        images = np.stack([ex.image for ex in chunk])
        out.extend(det.detect(images, keep_embeddings=keep_embeddings))
    return out


def evaluate(det: Detector, dataset: DatasetSplit, protocol: str,
             batch_size: int = 16, iou_thr: float = 0.5) -> EvalReport:
    """Swap the class head per protocol and score against the matching gts."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    base = set(dataset.base_categories)
    target = set(dataset.target_categories)
    if protocol == "base":
        active = sorted(base)
    elif protocol == "target":
        active = sorted(target)
    else:
        active = sorted(base | target)
    det.set_classes(active)
    detections = detect_test_set(det, dataset, batch_size=batch_size)
    allowed = set(active)
    freq = caption_word_frequencies(dataset)

    per_class_rows = []
    aps: dict[str, float | None] = {}
    for k, name in enumerate(active):
        dets_by_image = [[(d.box, d.score) for d in dets if d.class_id == k]
                         for dets in detections]
        gts_by_image = [
            [np.asarray(g.box) for g in ex.gt
             if dataset.categories[g.category_id] == name and name in allowed]
            for ex in dataset.test
        ]
        flags, n_gt = match_detections(dets_by_image, gts_by_image, iou_thr)
        ap = average_precision(flags, n_gt)
        aps[name] = ap
        per_class_rows.append({
            "name": name,
            "split": "base" if name in base else "target",
            "ap": ap,
            "n_gt": n_gt,
            "word_freq": class_word_frequency(name, freq),
        })

    summary: dict = {"protocol": protocol}
    if protocol == "base":
        summary["base_map"] = _mean_ap([aps[n] for n in active])
    elif protocol == "target":
        summary["target_map"] = _mean_ap([aps[n] for n in active])
    else:
        summary["generalized_base_map"] = _mean_ap([aps[n] for n in active if n in base])
        summary["generalized_target_map"] = _mean_ap([aps[n] for n in active if n in target])
        summary["all_map"] = _mean_ap([aps[n] for n in active])
    return EvalReport(protocol=protocol, classes=per_class_rows, summary=summary)


def dump_embeddings(det: Detector, dataset: DatasetSplit, out_path,
                    iou_thr: float = 0.5, batch_size: int = 16) -> int:
    """Write per-detection projected embeddings plus matched gt labels (JSONL).

    Runs the generalized head so both splits appear; intended for external
    dimensionality-reduction plots of the learned semantic space.
    """
    active = sorted(set(dataset.base_categories) | set(dataset.target_categories))
    det.set_classes(active)
    detections = detect_test_set(det, dataset, batch_size=batch_size, keep_embeddings=True)
    n = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for ex, dets in zip(dataset.test, detections):
            gt_boxes = np.asarray([g.box for g in ex.gt], dtype=np.float64).reshape(-1, 4)
            gt_names = [dataset.categories[g.category_id] for g in ex.gt]
            for d in dets:
                gt_label = None
                if len(gt_names):
                    ious = iou_matrix(d.box[None], gt_boxes)[0]
                    j = int(ious.argmax())
                    if ious[j] >= iou_thr:
                        gt_label = gt_names[j]
                fh.write(canonical_json({
                    "image_id": ex.example_id,
                    "box": [float(v) for v in d.box],
                    "pred_class": active[d.class_id],
                    "score": d.score,
                    "gt_class": gt_label,
                    "embedding": [float(v) for v in d.embedding],
                }) + "\n")
                n += 1
    return n


def detections_to_json(detections: list[list[Detection]], dataset: DatasetSplit,
                       class_names: list[str], out_path) -> None:
    records = []
    for ex, dets in zip(dataset.test, detections):
        for d in dets:
            records.append({
                "image_id": ex.example_id,
                "box": [float(v) for v in d.box],
                "class_name": class_names[d.class_id],
                "score": d.score,
            })
    Path(out_path).write_text(json.dumps(records, indent=1, sort_keys=True) + "\n", encoding="utf-8")
