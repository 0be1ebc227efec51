"""Finite-difference verification suites over the op set and composite graphs.

Elementary ops check at tolerance 1e-4, composite loss graphs at 1e-3, all
in float64. Inputs near non-differentiable kinks (relu at 0, smooth-L1 at
its beta knee) are nudged away before checking.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .gradcheck import GradCheckReport, grad_check
from .grounding import grounding_losses, pairwise_grounding_scores
from .tensor import (
    Tensor,
    as_tensor,
    avg_pool2d,
    batched_dot,
    bce_with_logits,
    concat,
    conv2d,
    cross_entropy,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    permute,
    power,
    relu,
    reshape,
    roi_align,
    smooth_l1,
    softmax,
    stack,
    take_rows,
    tmean,
    tsum,
)

ELEMENTARY_TOL = 1e-4
COMPOSITE_TOL = 1e-3


def _t(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _away_from(x: np.ndarray, kink: float, margin: float = 0.15) -> np.ndarray:
    d = x - kink
    d = np.where(np.abs(d) < margin, np.sign(d + 1e-12) * margin, d)
    return kink + d


def _probe(out_builder: Callable[[], Tensor], seed_mat: np.ndarray) -> Callable[[], Tensor]:
    """Reduce an op output to a scalar via a fixed random projection."""
    return lambda: tsum(mul(out_builder(), as_tensor(seed_mat)))


def elementary_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    cases = []

    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    row = _t(rng, 4)
    w = rng.standard_normal((3, 4))
    cases.append(("add_broadcast", _probe(lambda: (a + row) - b * 0.5, w), [a, b, row]))
    cases.append(("mul", _probe(lambda: mul(a, b), w), [a, b]))
    cases.append(("power", _probe(lambda: power(mul(a, a) + 0.5, 1.5), w), [a]))

    m1, m2 = _t(rng, 3, 5), _t(rng, 5, 2)
    cases.append(("matmul", _probe(lambda: matmul(m1, m2), rng.standard_normal((3, 2))), [m1, m2]))
    bm1, bm2 = _t(rng, 2, 3, 4), _t(rng, 2, 4, 2)
    cases.append(("matmul_batched", _probe(lambda: matmul(bm1, bm2), rng.standard_normal((2, 3, 2))), [bm1, bm2]))

    r = Tensor(_away_from(rng.standard_normal((3, 4)), 0.0), requires_grad=True)
    cases.append(("relu", _probe(lambda: relu(r), w), [r]))

    s = _t(rng, 3, 4)
    cases.append(("softmax", _probe(lambda: softmax(s, axis=1), w), [s]))
    cases.append(("log_softmax", _probe(lambda: log_softmax(s, axis=0), w), [s]))

    p = _t(rng, 2, 3, 4)
    w3 = rng.standard_normal((4, 6))
    cases.append(("permute_reshape", _probe(lambda: reshape(permute(p, (2, 0, 1)), (4, 6)), w3), [p]))
    c1, c2 = _t(rng, 2, 3), _t(rng, 2, 2)
    cases.append(("concat_stack", _probe(
        lambda: concat([concat([c1, c2], axis=1), stack([c1[0:2, 0:2] if False else c2, c2], axis=0).reshape(2, 4)], axis=1),
        rng.standard_normal((2, 9))), [c1, c2]))

    table = _t(rng, 5, 3)
    idx = rng.integers(0, 5, size=4)
    cases.append(("take_rows", _probe(lambda: take_rows(table, idx), rng.standard_normal((4, 3))), [table]))

    red = _t(rng, 3, 4)
    cases.append(("sum_mean", lambda: tsum(red, axis=1).sum() + tmean(red, axis=0).sum() * 0.3, [red]))
    bd1, bd2 = _t(rng, 4, 3), _t(rng, 4, 3)
    cases.append(("batched_dot", _probe(lambda: reshape(batched_dot(bd1, bd2), (4, 1)), rng.standard_normal((4, 1))), [bd1, bd2]))

    x = _t(rng, 2, 3, 5, 5)
    k = _t(rng, 2, 3, 3, 3)
    cases.append(("conv2d_s1p1", _probe(lambda: conv2d(x, k, stride=1, padding=1), rng.standard_normal((2, 2, 5, 5))), [x, k]))
    x2 = _t(rng, 1, 2, 6, 6)
    k2 = _t(rng, 3, 2, 2, 2)
    cases.append(("conv2d_s2", _probe(lambda: conv2d(x2, k2, stride=2), rng.standard_normal((1, 3, 3, 3))), [x2, k2]))
    xe = _t(rng, 1, 2, 5, 5)
    ke = _t(rng, 2, 2, 3, 3)
    cases.append(("conv2d_edge_pad", _probe(lambda: conv2d(xe, ke, stride=2, padding=1, pad_mode="edge"),
                                            rng.standard_normal((1, 2, 3, 3))), [xe, ke]))
    cases.append(("avg_pool2d", _probe(lambda: avg_pool2d(x2, 2, 2), rng.standard_normal((1, 2, 3, 3))), [x2]))

    fm = _t(rng, 1, 2, 6, 6)
    rois = np.array([[0, 4.0, 6.0, 30.0, 28.0], [0, 0.0, 0.0, 16.0, 16.0]])
    cases.append(("roi_align", _probe(lambda: roi_align(fm, rois, 2, 1 / 8), rng.standard_normal((2, 2, 2, 2))), [fm]))

    logits = _t(rng, 4, 3)
    targets = rng.integers(0, 3, size=4)
    cases.append(("cross_entropy", lambda: cross_entropy(logits, targets, reduction="mean"), [logits]))
    wvec = rng.random(4) + 0.2
    cases.append(("cross_entropy_weighted",
                  lambda: tsum(mul(cross_entropy(logits, targets, reduction="none"), as_tensor(wvec))),
                  [logits]))

    bl = _t(rng, 5)
    blt = (rng.random(5) > 0.5).astype(np.float64)
    cases.append(("bce_with_logits", lambda: bce_with_logits(bl, blt, reduction="mean"), [bl]))

    sp = Tensor(_away_from(rng.standard_normal((3, 4)) * 2.0, 1.0), requires_grad=True)
    spt = np.zeros((3, 4))
    cases.append(("smooth_l1", lambda: smooth_l1(sp, spt, beta=1.0, reduction="sum") * 0.1, [sp]))

    ln_x = _t(rng, 2, 3, 4)
    ln_g = Tensor(1.0 + 0.1 * rng.standard_normal((1, 1, 4)), requires_grad=True)
    ln_b = Tensor(0.1 * rng.standard_normal((1, 1, 4)), requires_grad=True)
    cases.append(("layer_norm", _probe(lambda: layer_norm(ln_x, ln_g, ln_b, axis=-1),
                                       rng.standard_normal((2, 3, 4))), [ln_x, ln_g, ln_b]))
    return cases


def grounding_composite(rng: np.random.Generator) -> tuple[Callable[[], Tensor], list[Tensor]]:
    """Contrastive grounding losses as a function of the V2L projection."""
    b, n_i, n_c, d_v, d_l = 2, 4, 3, 6, 5
    regions = as_tensor(rng.standard_normal((b, n_i, d_v)))
    tokens = as_tensor(rng.standard_normal((b, n_c, d_l)) * 0.7)
    mask = np.ones((b, n_c), dtype=bool)
    mask[1, -1] = False  # one excluded token exercises the count normalization
    w = Tensor(rng.standard_normal((d_l, d_v)) * 0.3, requires_grad=True)
    bias = Tensor(rng.standard_normal(d_l) * 0.1, requires_grad=True)

    def f() -> Tensor:
        flat = reshape(regions, (b * n_i, d_v))
        e = reshape(matmul(flat, permute(w, (1, 0))) + bias, (b, n_i, d_l))
        scores = pairwise_grounding_scores(e, tokens, mask)
        li, lc = grounding_losses(scores)
        return li + lc

    return f, [w, bias]


def detection_head_composite(rng: np.random.Generator) -> tuple[Callable[[], Tensor], list[Tensor]]:
    """Alpha-weighted second-stage classification loss through RoI pooling
    and the refinement conv, differentiated at the refinement stage."""
    from .detection import augmented_class_logits

    c, k = 4, 3
    fm = as_tensor(rng.standard_normal((1, c, 6, 6)))
    rois = np.array([[0, 6.0, 6.0, 34.0, 30.0]])
    conv_w = Tensor(rng.standard_normal((c, c, 3, 3)) * 0.3, requires_grad=True)
    v2l_w = as_tensor(rng.standard_normal((3, c)) * 0.5)
    class_rows = rng.standard_normal((k, 3)) * 0.6
    targets = np.array([0])  # background row exercises the alpha path
    alpha = 0.2

    def f() -> Tensor:
        patches = roi_align(fm, rois, 2, 1 / 8)
        refined = relu(conv2d(patches, conv_w, stride=1, padding=1))
        pooled = tmean(refined, axis=(2, 3))
        e = matmul(pooled, permute(v2l_w, (1, 0)))
        logits = augmented_class_logits(e, class_rows)
        nll = cross_entropy(logits, targets, reduction="none")
        weights = np.where(targets == 0, alpha, 1.0)
        return tsum(mul(nll, as_tensor(weights)))

    return f, [conv_w]


def run_suite(n_seeds: int = 20, base_seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    """Every op plus the composite loss graphs, across independent seeds."""
    results: list[tuple[str, GradCheckReport]] = []
    for s in range(n_seeds):
        rng = np.random.default_rng(base_seed + 1000 * s)
        for name, f, wrt in elementary_cases(rng):
            results.append((f"{name}[seed={s}]", grad_check(f, wrt, tol=ELEMENTARY_TOL)))
        f, wrt = grounding_composite(np.random.default_rng(base_seed + 1000 * s + 7))
        results.append((f"grounding_eqs_1_4[seed={s}]", grad_check(f, wrt, tol=COMPOSITE_TOL)))
        f, wrt = detection_head_composite(np.random.default_rng(base_seed + 1000 * s + 13))
        results.append((f"detection_eq_6[seed={s}]", grad_check(f, wrt, tol=COMPOSITE_TOL)))
    return results


def suite_passed(results: list[tuple[str, GradCheckReport]]) -> bool:
    return all(rep.passed for _, rep in results)
