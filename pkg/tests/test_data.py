from collections import Counter

import numpy as np
import pytest

from ovdet.boxes import iou_matrix
from ovdet.config import DataConfig, ExperimentConfig, derived_rng
from ovdet.data import (
    CAPTION_TEMPLATES,
    SceneSpec,
    category_names,
    generate_caption,
    generate_dataset,
    load_dataset,
    render_scene,
    sample_scene,
    save_dataset,
    split_categories,
)
from ovdet.text import build_vocab, tokenize


def small_config(n_train=60, n_test=20, seed=5) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.seed = seed
    cfg.data.n_train = n_train
    cfg.data.n_test = n_test
    return cfg


def test_dataset_counts_match_config():
    cfg = small_config()
    ds = generate_dataset(cfg)
    assert len(ds.train) == 60 and len(ds.test) == 20
    assert len(ds.base_categories) == 14 and len(ds.target_categories) == 6
    assert not set(ds.base_categories) & set(ds.target_categories)


def test_generation_is_deterministic():
    cfg = small_config()
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    assert a.base_categories == b.base_categories
    for ea, eb in zip(a.train + a.test, b.train + b.test):
        assert ea.caption == eb.caption
        assert ea.image.tobytes() == eb.image.tobytes()
        assert [g.box for g in ea.gt] == [g.box for g in eb.gt]


def test_training_boxes_are_base_only_but_target_objects_exist():
    ds = generate_dataset(small_config(n_train=150))
    base_ids = ds.base_ids()
    for ex in ds.train:
        assert all(g.category_id in base_ids for g in ex.gt)
    hidden = sum(1 for ex in ds.train if ex.n_hidden_objects > 0)
    assert hidden > 0  # target objects appear in images yet contribute no boxes
    # test annotations carry both splits
    test_ids = {g.category_id for ex in ds.test for g in ex.gt}
    assert test_ids & ds.target_ids()


def test_red_square_pixel_statistics():
    cfg = small_config().data
    cats = category_names(cfg)
    idx = cats.index("red square")
    spec = SceneSpec(image_size=64, background_style=0, background_seed=3, base_gray=0.35)
    from ovdet.data import ObjectSpec

    spec.objects.append(ObjectSpec(idx, (20, 20, 44, 44)))
    img = render_scene(spec, cats)
    inside = img[0, 20:44, 20:44].mean()
    mask = np.ones((64, 64), dtype=bool)
    mask[20:44, 20:44] = False
    outside = img[0][mask].mean()
    assert inside - outside > 0.2


def test_render_empty_scene_is_pure_background():
    spec = SceneSpec(image_size=64, background_style=1, background_seed=9, base_gray=0.3)
    img = render_scene(spec, category_names(small_config().data))
    assert img.shape == (3, 64, 64)
    assert img.std() < 0.1  # just texture, no shapes


def test_render_deterministic():
    cfg = small_config().data
    cats = category_names(cfg)
    spec = sample_scene(cfg, cats, derived_rng(0, "scene"))
    a, b = render_scene(spec, cats), render_scene(spec, cats)
    assert a.tobytes() == b.tobytes()


def test_scene_boxes_within_bounds_and_low_overlap():
    cfg = small_config().data
    cats = category_names(cfg)
    for i in range(50):
        spec = sample_scene(cfg, cats, derived_rng(i, "scene"))
        boxes = np.array([o.box for o in spec.objects])
        assert (boxes[:, 0] >= 0).all() and (boxes[:, 2] <= 64).all()
        assert (boxes[:, 1] >= 0).all() and (boxes[:, 3] <= 64).all()
        assert 1 <= len(spec.objects) <= 4
        if len(boxes) > 1:
            m = iou_matrix(boxes, boxes)
            np.fill_diagonal(m, 0)
            assert m.max() <= cfg.max_pair_iou + 1e-9


def test_caption_names_every_object():
    cfg = small_config().data
    cats = category_names(cfg)
    rng = derived_rng(1, "cap")
    for i in range(50):
        spec = sample_scene(cfg, cats, derived_rng(i, "scene2"))
        caption = generate_caption(spec, cats, rng)
        words = set(tokenize(caption))
        for obj in spec.objects:
            color, shape = cats[obj.category_id].split()
            assert color in words and shape in words


def test_caption_template_diversity():
    cfg = small_config().data
    cats = category_names(cfg)
    rng = derived_rng(2, "cap")
    spec = sample_scene(cfg, cats, derived_rng(3, "scene3"))
    seen = set()
    for _ in range(1000):
        caption = generate_caption(spec, cats, rng)
        for t in CAPTION_TEMPLATES:
            skeleton = t.split("{objs}")[0].split("{")[0].strip()
            if skeleton and caption.startswith(skeleton):
                seen.add(t)
    assert len(seen) >= 5


def test_caption_noise_swaps_a_color_word():
    cfg = small_config().data
    cats = category_names(cfg)
    spec = sample_scene(cfg, cats, derived_rng(4, "scene4"))
    rng = derived_rng(5, "noise")
    corrupted = 0
    for _ in range(200):
        caption = generate_caption(spec, cats, rng, noise_rate=1.0, colors=cfg.colors)
        words = set(tokenize(caption))
        wanted = {cats[o.category_id].split()[0] for o in spec.objects}
        if not wanted <= words:
            corrupted += 1
    assert corrupted > 0


def test_category_word_coverage_in_corpus():
    ds = generate_dataset(small_config(n_train=600, seed=2))
    counts = Counter()
    for ex in ds.train:
        counts.update(tokenize(ex.caption))
    for name in ds.base_categories + ds.target_categories:
        for word in name.split():
            assert counts[word] >= 50, (word, counts[word])


def test_caption_vocab_strict_superset_of_category_words():
    ds = generate_dataset(small_config(n_train=200, seed=3))
    vocab = build_vocab([ex.caption for ex in ds.train])
    category_words = {w for n in ds.base_categories + ds.target_categories for w in n.split()}
    vocab_content = set(vocab.tokens[3:])
    assert category_words < vocab_content  # strict: distractor words exist


def test_split_requires_enough_combinations():
    cfg = DataConfig(shapes=("square",), colors=("red", "blue"), n_base=2, n_target=1)
    with pytest.raises(ValueError, match="combinations"):
        split_categories(cfg, derived_rng(0, "x"))


def test_save_load_round_trip(tmp_path):
    cfg = small_config(n_train=12, n_test=6)
    ds = generate_dataset(cfg)
    save_dataset(ds, tmp_path / "d", cfg)
    back = load_dataset(tmp_path / "d")
    assert back.categories == ds.categories
    assert back.base_categories == ds.base_categories
    assert len(back.train) == 12 and len(back.test) == 6
    for ea, eb in zip(ds.train, back.train):
        assert ea.caption == eb.caption
        assert ea.image.tobytes() == eb.image.tobytes()
        assert [g.category_id for g in ea.gt] == [g.category_id for g in eb.gt]
    assert (tmp_path / "d" / "vocab.txt").exists()
