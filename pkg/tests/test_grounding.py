import numpy as np
import pytest

from ovdet.grounding import (
    _derange,
    alignment_weights,
    global_grounding_score,
    grounding_losses,
    pairwise_grounding_scores,
    schedule_lr,
)
from ovdet.tensor import Tensor, as_tensor


def test_alignment_weights_uniform_when_scores_equal():
    regions = as_tensor(np.zeros((5, 8), dtype=np.float32))
    tokens = as_tensor(np.random.default_rng(0).standard_normal((3, 8)).astype(np.float32))
    a = alignment_weights(regions, tokens).data
    np.testing.assert_allclose(a, np.full((5, 3), 0.2), atol=1e-6)


def test_alignment_weights_saturate_on_dominant_region():
    regions = np.zeros((4, 2), dtype=np.float32)
    regions[2] = (50.0, 0.0)
    tokens = np.array([[1.0, 0.0]], dtype=np.float32)
    a = alignment_weights(as_tensor(regions), as_tensor(tokens)).data
    assert float(a[2, 0]) > 1 - 1e-9


def test_alignment_weights_hand_case():
    # two regions scoring (1, 0) for one token
    regions = np.array([[1.0], [0.0]], dtype=np.float32)
    tokens = np.array([[1.0]], dtype=np.float32)
    a = alignment_weights(as_tensor(regions), as_tensor(tokens)).data[:, 0]
    e = np.e
    np.testing.assert_allclose(a, [e / (e + 1), 1 / (e + 1)], atol=1e-6)


def test_alignment_weights_columns_sum_to_one():
    rng = np.random.default_rng(1)
    a = alignment_weights(as_tensor(rng.standard_normal((7, 4))),
                          as_tensor(rng.standard_normal((5, 4)))).data
    np.testing.assert_allclose(a.sum(axis=0), np.ones(5), atol=1e-6)


def test_global_score_single_pair_collapses_to_dot_product():
    rng = np.random.default_rng(2)
    r = rng.standard_normal((1, 6))
    t = rng.standard_normal((1, 6))
    score = global_grounding_score(as_tensor(r), as_tensor(t))
    np.testing.assert_allclose(float(score.data), float(r @ t.T), rtol=1e-6)


def test_global_score_zero_regions_is_zero():
    tokens = np.random.default_rng(3).standard_normal((4, 6))
    score = global_grounding_score(as_tensor(np.zeros((5, 6))), as_tensor(tokens))
    assert abs(float(score.data)) < 1e-7


def test_global_score_hand_case_two_regions():
    # regions e1=(1,0), e2=(0,1); token (1,0): weights (e/(e+1), 1/(e+1)),
    # weighted score e/(e+1)
    regions = np.array([[1.0, 0.0], [0.0, 1.0]])
    token = np.array([[1.0, 0.0]])
    score = float(global_grounding_score(as_tensor(regions), as_tensor(token)).data)
    np.testing.assert_allclose(score, np.e / (np.e + 1), rtol=1e-6)


def test_pairwise_scores_match_per_pair_evaluation():
    rng = np.random.default_rng(4)
    b, n_i, n_c, d = 3, 5, 4, 6
    regions = rng.standard_normal((b, n_i, d)).astype(np.float32)
    tokens = rng.standard_normal((b, n_c, d)).astype(np.float32)
    mask = np.ones((b, n_c), dtype=bool)
    mask[2, -2:] = False
    scores = pairwise_grounding_scores(as_tensor(regions), as_tensor(tokens), mask).data
    for i in range(b):
        for c in range(b):
            toks = tokens[c][mask[c]]
            direct = float(global_grounding_score(as_tensor(regions[i]), as_tensor(toks)).data)
            np.testing.assert_allclose(scores[i, c], direct, rtol=1e-4, atol=1e-5)


def test_grounding_losses_zero_for_singleton_batch():
    scores = as_tensor(np.array([[3.7]], dtype=np.float32))
    li, lc = grounding_losses(scores)
    assert abs(float(li.data)) < 1e-7
    assert abs(float(lc.data)) < 1e-7


def test_grounding_losses_uniform_scores_give_log_batch():
    for b in (2, 4, 8):
        scores = as_tensor(np.zeros((b, b), dtype=np.float32))
        li, lc = grounding_losses(scores)
        np.testing.assert_allclose(float(li.data), np.log(b), rtol=1e-5)
        np.testing.assert_allclose(float(lc.data), np.log(b), rtol=1e-5)


def test_grounding_losses_saturate_with_separated_scores():
    scores = np.full((4, 4), -10.0, dtype=np.float32)
    np.fill_diagonal(scores, 10.0)
    li, lc = grounding_losses(as_tensor(scores))
    assert float(li.data) < 1e-6 and float(lc.data) < 1e-6


def test_grounding_losses_nonnegative():
    rng = np.random.default_rng(5)
    for _ in range(20):
        scores = as_tensor(rng.standard_normal((5, 5)).astype(np.float32) * 3)
        li, lc = grounding_losses(scores)
        assert float(li.data) >= 0 and float(lc.data) >= 0


def test_derange_has_no_fixed_points():
    rng = np.random.default_rng(6)
    idx = np.array([3, 5, 9, 11])
    for _ in range(50):
        out = _derange(idx, rng)
        assert not np.any(out == idx)
        assert sorted(out) == sorted(idx)
    with pytest.raises(ValueError):
        _derange(np.array([1]), rng)


def test_lr_schedule_drops():
    assert schedule_lr(0.01, (0.7, 0.9), 0, 100) == 0.01
    np.testing.assert_allclose(schedule_lr(0.01, (0.7, 0.9), 75, 100), 0.001)
    np.testing.assert_allclose(schedule_lr(0.01, (0.7, 0.9), 95, 100), 0.0001)
