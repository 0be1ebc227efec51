"""Synthetic shapes-and-captions data: rendered scenes, template captions,
and box annotations restricted to base categories.

Categories are (color, shape) composites such as "red square", so captions
bind two words to one region. Scenes never exceed a pairwise box IoU of 0.3,
and every object's color and shape words appear in the caption. Training
examples keep only base-category boxes; test examples carry every box.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import iou_matrix
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DataConfig, ExperimentConfig, canonical_json, derive_seed, derived_rng
from .text import build_vocab

PALETTE = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.12, 0.75, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.12),
    "purple": (0.60, 0.15, 0.75),
    "orange": (0.95, 0.55, 0.10),
}

SURFACES = ["table", "desk", "floor", "mat", "shelf", "counter", "board", "tray", "bench", "cloth"]
SCENE_WORDS = ["photo", "picture", "image", "scene", "view", "snapshot", "drawing", "frame"]
ADJECTIVES = ["small", "big", "bright", "dim", "tidy", "plain", "simple", "busy", "clear", "neat"]
TEXTURES = ["dotted", "rough", "smooth", "gray", "dark", "light", "pale", "soft"]
JOINERS = ["and", "beside", "alongside", "together with"]
ARTICLES = ["a", "one", "some"]

CAPTION_TEMPLATES = [
    "a {scene} of {objs} on a {surface}",
    "there is {objs} in this {scene}",
    "the {scene} shows {objs}",
    "{objs} on a {adjective} {surface}",
    "you can see {objs} here",
    "this {scene} has {objs}",
    "a {adjective} {scene} with {objs}",
    "{objs} on the {texture} {surface}",
]


@dataclass
class ObjectSpec:
    category_id: int
    box: tuple[float, float, float, float]
    jitter: float = 0.0


@dataclass
class SceneSpec:
    image_size: int
    background_style: int
    background_seed: int
    base_gray: float
    # per-image background identity: without channel tints and noise-level
    # variation, backgrounds are interchangeable across images and grounding
    # can park caption words on them at no contrastive cost
    bg_tint: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.03
    objects: list[ObjectSpec] = field(default_factory=list)


@dataclass
class GroundTruth:
    category_id: int
    box: tuple[float, float, float, float]


@dataclass
class AnnotatedExample:
    example_id: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    caption: str
    gt: list[GroundTruth]
    n_hidden_objects: int = 0  # objects present in the image but not annotated


@dataclass
class DatasetSplit:
    categories: list[str]
    base_categories: list[str]
    target_categories: list[str]
    train: list[AnnotatedExample]
    test: list[AnnotatedExample]
    structural_hash: str = ""
    seed: int = 0

    def category_id(self, name: str) -> int:
        return self.categories.index(name)

    def base_ids(self) -> set[int]:
        return {self.categories.index(n) for n in self.base_categories}

    def target_ids(self) -> set[int]:
        return {self.categories.index(n) for n in self.target_categories}


def category_names(cfg: DataConfig) -> list[str]:
    return [f"{color} {shape}" for shape in cfg.shapes for color in cfg.colors]


def split_categories(cfg: DataConfig, rng: np.random.Generator) -> tuple[list[str], list[str]]:
    """Random base/target split, resampled until every shape and color word
    keeps at least one base category (so composition stays learnable)."""
    names = category_names(cfg)
    if cfg.n_base + cfg.n_target > len(names):
        raise ValueError(
            f"requested {cfg.n_base}+{cfg.n_target} categories but only "
            f"{len(names)} shape-color combinations exist"
        )
    for _ in range(1000):
        order = rng.permutation(len(names))
        base = [names[i] for i in order[: cfg.n_base]]
        target = [names[i] for i in order[cfg.n_base : cfg.n_base + cfg.n_target]]
        words = set(w for n in base for w in n.split())
        if all(s in words for s in cfg.shapes) and all(c in words for c in cfg.colors):
            return sorted(base), sorted(target)
    raise RuntimeError("could not find a base/target split covering all words")


# -- scene sampling ------------------------------------------------------------


def _sample_box(shape: str, cfg: DataConfig, rng: np.random.Generator) -> tuple[float, float, float, float]:
    s = rng.uniform(cfg.min_object_size, cfg.max_object_size)
    if shape == "bar":
        aspect = rng.uniform(2.2, 3.2)  # bars are wide by construction
    elif shape == "square":
        aspect = rng.uniform(0.9, 1.1)
    else:
        aspect = rng.uniform(0.75, 1.33)
    w = min(s * np.sqrt(aspect), cfg.image_size - 2)
    h = min(s / np.sqrt(aspect), cfg.image_size - 2)
    x1 = rng.uniform(1, cfg.image_size - 1 - w)
    y1 = rng.uniform(1, cfg.image_size - 1 - h)
    return (round(x1), round(y1), round(x1 + w), round(y1 + h))


def sample_scene(cfg: DataConfig, categories: list[str], rng: np.random.Generator) -> SceneSpec:
    spec = SceneSpec(
        image_size=cfg.image_size,
        background_style=int(rng.integers(0, 3)),
        background_seed=int(rng.integers(0, 2**31 - 1)),
        base_gray=float(rng.uniform(0.25, 0.45)),
        bg_tint=(0.0, 0.0, 0.0),
        noise_sigma=0.03,
    )
    counts = np.arange(cfg.min_objects, cfg.max_objects + 1)
    weights = np.asarray(cfg.object_count_weights, dtype=np.float64)
    if len(weights) != len(counts):
        raise ValueError("object_count_weights must cover min_objects..max_objects")
    n_objects = int(rng.choice(counts, p=weights / weights.sum()))
    # distinct categories per scene keep captions natural and supersets rarer
    cats = rng.choice(len(categories), size=min(n_objects, len(categories)), replace=False)
    boxes: list[tuple] = []
    for cat in cats:
        shape = categories[int(cat)].split()[1]
        for _ in range(40):
            box = _sample_box(shape, cfg, rng)
            if not boxes or iou_matrix(np.array([box]), np.array(boxes)).max() <= cfg.max_pair_iou:
                boxes.append(box)
                spec.objects.append(ObjectSpec(int(cat), box, float(rng.uniform(-0.08, 0.08))))
                break
    if not spec.objects:  # first placement can always succeed, but stay safe
        box = _sample_box("square", cfg, rng)
        spec.objects.append(ObjectSpec(0, box, 0.0))
    return spec


# -- rendering -----------------------------------------------------------------


def _erode(mask: np.ndarray, px: int) -> np.ndarray:
    """Binary erosion by px via axis shifts (4-neighborhood)."""
    out = mask.copy()
    for _ in range(px):
        shrunk = out.copy()
        shrunk[1:, :] &= out[:-1, :]
        shrunk[:-1, :] &= out[1:, :]
        shrunk[:, 1:] &= out[:, :-1]
        shrunk[:, :-1] &= out[:, 1:]
        out = shrunk
    return out


def _shape_mask(shape: str, x1: int, y1: int, x2: int, y2: int, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    w, h = x2 - x1, y2 - y1
    yy, xx = np.mgrid[0:h, 0:w]
    if shape in ("square", "bar"):
        m = np.ones((h, w), dtype=bool)
    elif shape == "circle":
        cx, cy = (w - 1) / 2, (h - 1) / 2
        m = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    elif shape == "triangle":
        # apex top-center, base along the bottom edge
        half = (yy + 1) / h * (w / 2)
        m = np.abs(xx - (w - 1) / 2) <= half
    elif shape == "cross":
        tx = max(1, int(round(w / 3)))
        ty = max(1, int(round(h / 3)))
        vert = np.abs(xx - (w - 1) / 2) <= tx / 2
        horiz = np.abs(yy - (h - 1) / 2) <= ty / 2
        m = vert | horiz
    else:
        raise ValueError(f"unknown shape {shape!r}")
    mask[y1:y2, x1:x2] = m
    return mask


def render_scene(spec: SceneSpec, categories: list[str]) -> np.ndarray:
    """Deterministic raster for a scene spec: shapes over a textured background."""
    size = spec.image_size
    noise_rng = np.random.default_rng(spec.background_seed)
    ramp = np.linspace(0.0, 0.15, size, dtype=np.float32)
    base = np.full((size, size), spec.base_gray, dtype=np.float32)
    if spec.background_style == 1:
        base = base + ramp[None, :]
    elif spec.background_style == 2:
        base = base + ramp[:, None]
    img = np.repeat(base[None, :, :], 3, axis=0)
    img = img + np.asarray(spec.bg_tint, dtype=np.float32)[:, None, None]
    img = img + noise_rng.normal(0.0, spec.noise_sigma, size=img.shape).astype(np.float32)
    for obj in spec.objects:
        color_name, shape_name = categories[obj.category_id].split()
        rgb = np.asarray(PALETTE[color_name], dtype=np.float32) * (1.0 + obj.jitter)
        x1, y1, x2, y2 = (int(round(v)) for v in obj.box)
        mask = _shape_mask(shape_name, x1, y1, x2, y2, size)
        rim = mask & ~_erode(mask, 2)  # darker silhouette band inside the outline
        for c in range(3):
            img[c][mask] = rgb[c]
            img[c][rim] = rgb[c] * 0.6
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# -- captions --------------------------------------------------------------------


def _object_phrase(name: str, rng: np.random.Generator, wrong_color: str | None = None) -> str:
    color, shape = name.split()
    if wrong_color is not None:
        color = wrong_color
    return f"{ARTICLES[int(rng.integers(0, len(ARTICLES)))]} {color} {shape}"


def generate_caption(spec: SceneSpec, categories: list[str], rng: np.random.Generator,
                     noise_rate: float = 0.0, colors: tuple[str, ...] = ()) -> str:
    """Template caption naming every object's color and shape words.

    With probability noise_rate one mention gets a wrong color word,
    emulating noisily collected web captions.
    """
    order = rng.permutation(len(spec.objects))
    corrupt_slot = -1
    if noise_rate > 0.0 and rng.random() < noise_rate and colors:
        corrupt_slot = int(rng.integers(0, len(order)))
    phrases = []
    for slot, idx in enumerate(order):
        name = categories[spec.objects[idx].category_id]
        wrong = None
        if slot == corrupt_slot:
            options = [c for c in colors if c != name.split()[0]]
            wrong = options[int(rng.integers(0, len(options)))]
        phrases.append(_object_phrase(name, rng, wrong))
    joiner = f" {JOINERS[int(rng.integers(0, len(JOINERS)))]} "
    objs = joiner.join(phrases)
    template = CAPTION_TEMPLATES[int(rng.integers(0, len(CAPTION_TEMPLATES)))]
    return template.format(
        objs=objs,
        surface=SURFACES[int(rng.integers(0, len(SURFACES)))],
        scene=SCENE_WORDS[int(rng.integers(0, len(SCENE_WORDS)))],
        adjective=ADJECTIVES[int(rng.integers(0, len(ADJECTIVES)))],
        texture=TEXTURES[int(rng.integers(0, len(TEXTURES)))],
    )


# -- dataset assembly -------------------------------------------------------------


def _annotation_box(box, margin: int, size: int) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = box
    return (max(0.0, x1 - margin), max(0.0, y1 - margin),
            min(float(size), x2 + margin), min(float(size), y2 + margin))


def _build_example(example_id: str, cfg: DataConfig, categories: list[str],
                   keep_ids: set[int] | None, rng: np.random.Generator,
                   noise_rate: float) -> AnnotatedExample:
    spec = sample_scene(cfg, categories, rng)
    image = render_scene(spec, categories)
    caption = generate_caption(spec, categories, rng, noise_rate, cfg.colors)
    gt = [GroundTruth(o.category_id, _annotation_box(o.box, cfg.box_margin, cfg.image_size))
          for o in spec.objects]
    hidden = 0
    if keep_ids is not None:
        visible = [g for g in gt if g.category_id in keep_ids]
        hidden = len(gt) - len(visible)
        gt = visible
    return AnnotatedExample(example_id, image, caption, gt, n_hidden_objects=hidden)


def generate_dataset(config: ExperimentConfig, seed: int | None = None) -> DatasetSplit:
    """Deterministic split: train boxes cover base categories only."""
    cfg = config.data
    seed = config.seed if seed is None else seed
    data_seed = derive_seed(seed, "data")
    categories = category_names(cfg)
    base, target = split_categories(cfg, derived_rng(data_seed, "split"))
    base_ids = {categories.index(n) for n in base}
    train = [
        _build_example(f"train/{i:05d}", cfg, categories, base_ids,
                       derived_rng(data_seed, f"train/{i}"), cfg.caption_noise)
        for i in range(cfg.n_train)
    ]
    test = [
        _build_example(f"test/{i:05d}", cfg, categories, None,
                       derived_rng(data_seed, f"test/{i}"), 0.0)
        for i in range(cfg.n_test)
    ]
    return DatasetSplit(categories, base, target, train, test,
                        structural_hash=config.structural_hash(), seed=seed)


# -- disk format -------------------------------------------------------------------


def save_dataset(split: DatasetSplit, out_dir, config: ExperimentConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "categories": split.categories,
        "base": split.base_categories,
        "target": split.target_categories,
        "structural_hash": split.structural_hash,
        "config_full_hash": config.full_hash(),
        "seed": split.seed,
        "counts": {"train": len(split.train), "test": len(split.test)},
    }
    (out / "dataset.json").write_text(canonical_json(meta) + "\n", encoding="utf-8")
    vocab = build_vocab([ex.caption for ex in split.train])
    vocab.save(out / "vocab.txt")
    for name, examples in (("train", split.train), ("test", split.test)):
        with open(out / f"manifest_{name}.jsonl", "w", encoding="utf-8") as fh:
            for ex in examples:
                rec = {
                    "id": ex.example_id,
                    "caption": ex.caption,
                    "categories": [split.categories[g.category_id] for g in ex.gt],
                    "boxes": [list(map(float, g.box)) for g in ex.gt],
                    "image_file": f"images_{name}.ovck",
                    "image_key": ex.example_id,
                }
                fh.write(canonical_json(rec) + "\n")
        save_checkpoint(
            out / f"images_{name}.ovck",
            {ex.example_id: ex.image for ex in examples},
            structural_hash=split.structural_hash,
            metadata={"kind": f"images_{name}", "seed": split.seed},
        )


def load_dataset(path) -> DatasetSplit:
    root = Path(path)
    meta = json.loads((root / "dataset.json").read_text(encoding="utf-8"))
    splits: dict[str, list[AnnotatedExample]] = {}
    for name in ("train", "test"):
        images = load_checkpoint(root / f"images_{name}.ovck").arrays
        examples = []
        with open(root / f"manifest_{name}.jsonl", "r", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                gt = [GroundTruth(meta["categories"].index(c), tuple(b))
                      for c, b in zip(rec["categories"], rec["boxes"])]
                examples.append(AnnotatedExample(rec["id"], images[rec["image_key"]], rec["caption"], gt))
        splits[name] = examples
    return DatasetSplit(
        categories=meta["categories"],
        base_categories=meta["base"],
        target_categories=meta["target"],
        train=splits["train"],
        test=splits["test"],
        structural_hash=meta["structural_hash"],
        seed=meta["seed"],
    )
