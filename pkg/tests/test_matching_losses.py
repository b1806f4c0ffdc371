import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

import reference as ref
from plu_forge.losses import (FocalParams, LossComponents, LossWeights, binary_cross_entropy,
                              count_bce, decomposition_iou_loss, focal_loss, seg_cross_entropy,
                              smooth_l1, total_sassl_loss, total_sl_loss)
from plu_forge.matching import hungarian_match

LN2 = math.log(2)


def test_focal_half():
    assert focal_loss(0.5) == pytest.approx(0.25 * 0.25 * LN2, abs=1e-12)
    assert focal_loss(0.5) == pytest.approx(0.0433217, abs=1e-7)


@given(st.floats(1e-6, 1.0))
def test_focal_gamma_zero_is_weighted_ce(p):
    assert focal_loss(p, FocalParams(0.25, 0.0)) == pytest.approx(-0.25 * math.log(p), rel=1e-12)


@given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_focal_monotone(p, q):
    lo, hi = sorted((p, q))
    assert focal_loss(hi) <= focal_loss(lo)


def test_focal_params_validated():
    with pytest.raises(ValueError):
        FocalParams(alpha=1.5)


def test_smooth_l1_examples():
    assert smooth_l1([0.5, 0, 0, 0], [0, 0, 0, 0]) == 0.125
    assert smooth_l1([2, 0, 0, 0], [0, 0, 0, 0]) == 1.5
    with pytest.raises(ValueError):
        smooth_l1([1, 2], [1, 2])


def test_cross_entropies_at_half():
    assert seg_cross_entropy(np.eye(4, dtype=bool), np.full((4, 4), 0.5)) == pytest.approx(LN2, rel=1e-12)
    assert binary_cross_entropy([1, 0], [0.5, 0.5]) == pytest.approx(LN2, rel=1e-12)
    assert count_bce(2, [0.5] * 5) == pytest.approx(LN2, rel=1e-12)


def test_count_bce_printed_form_differs():
    e = [0.9, 0.8, 0.2, 0.1, 0.1]
    assert count_bce(2, e) != pytest.approx(count_bce(2, e, printed_form=True))
    with pytest.raises(ValueError):
        count_bce(6, e)


@given(st.integers(0, 2**31))
def test_cross_entropies_match_oracle(seed):
    rng = np.random.default_rng(seed)
    t = rng.random((4, 4)) < 0.5
    p = rng.random((4, 4))
    assert seg_cross_entropy(t, p) == pytest.approx(ref.seg_ce(t, p), rel=1e-12)
    y = rng.integers(0, 2, 16).astype(float)
    q = rng.random(16)
    assert binary_cross_entropy(y, q) == pytest.approx(ref.bce(y, q), rel=1e-12)
    k = int(rng.integers(0, 6))
    e = rng.random(5)
    assert count_bce(k, e) == pytest.approx(ref.count_bce(k, e), rel=1e-12)


def test_losses_finite_at_extremes():
    assert math.isfinite(focal_loss(0.0))
    assert math.isfinite(binary_cross_entropy([1, 0], [0.0, 1.0]))
    assert seg_cross_entropy(np.ones((2, 2), bool), np.ones((2, 2))) >= 0


def test_hungarian_small():
    a = hungarian_match([[1, 2], [3, 1]])
    assert a.pairs == ((0, 0), (1, 1)) and a.total_cost == 2


@given(st.integers(1, 7).flatmap(lambda n: arrays(float, (n, n), elements=st.floats(0, 100))))
def test_hungarian_equals_exhaustive(cost):
    a = hungarian_match(cost)
    assert a.total_cost == pytest.approx(ref.best_assignment(cost), rel=1e-12, abs=1e-12)
    rows = [i for i, _ in a.pairs]
    cols = [j for _, j in a.pairs]
    assert sorted(rows) == sorted(set(rows)) and sorted(cols) == sorted(set(cols))
    assert len(a.pairs) == cost.shape[0]


@given(st.tuples(st.integers(1, 5), st.integers(1, 5)).flatmap(
    lambda s: arrays(float, s, elements=st.floats(0, 10))))
def test_hungarian_rectangular(cost):
    a = hungarian_match(cost)
    assert len(a.pairs) == min(cost.shape)
    assert a.total_cost == pytest.approx(ref.best_assignment(cost), abs=1e-9)


def test_hungarian_tie_break_is_lexicographic():
    assert hungarian_match(np.zeros((3, 3))).pairs == ((0, 0), (1, 1), (2, 2))


def test_hungarian_rejects_bad_input():
    with pytest.raises(ValueError):
        hungarian_match([[np.nan, 1], [1, 1]])


def test_decomposition_loss_half_overlap():
    g = np.zeros((4, 8), bool)
    g[:, :4] = True
    p = np.zeros((4, 8), bool)
    p[:, 2:6] = True
    assert decomposition_iou_loss([p], [g]) == pytest.approx(1 - 1 / 3, abs=1e-12)


def test_decomposition_loss_missing_prediction_is_penalised():
    g1 = np.zeros((4, 4), bool)
    g1[:2] = True
    g2 = ~g1
    assert decomposition_iou_loss([g1], [g1, g2]) == pytest.approx(0.5)


@given(st.integers(0, 2**31))
def test_decomposition_loss_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    preds = [rng.random((6, 6)) < 0.4 for _ in range(rng.integers(1, 5))]
    gts = [rng.random((6, 6)) < 0.4 for _ in range(rng.integers(1, 5))]
    base = decomposition_iou_loss(preds, gts)
    assert base == pytest.approx(ref.decomposition_loss(preds, gts), rel=1e-12, abs=1e-15)
    shuffled = decomposition_iou_loss([preds[i] for i in rng.permutation(len(preds))],
                                      [gts[i] for i in rng.permutation(len(gts))])
    assert shuffled == pytest.approx(base, rel=1e-12, abs=1e-15)


def test_totals_examples():
    c = LossComponents(0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
    assert total_sl_loss(c, LossWeights(2, 0.5, 1)) == pytest.approx(2.25, abs=1e-12)
    assert total_sassl_loss(0.5, 0.2, 0.3, LossWeights(lambda_ssl=2)) == pytest.approx(1.5, abs=1e-12)
    assert total_sassl_loss(0.5, 9.0, 9.0, LossWeights(lambda_ssl=0)) == 0.5


@given(st.lists(st.floats(0, 10), min_size=6, max_size=6), st.floats(0, 5))
def test_totals_linear(vals, s):
    c = LossComponents(*vals)
    scaled = LossComponents(*[v * s for v in vals])
    assert total_sl_loss(scaled) == pytest.approx(s * total_sl_loss(c), rel=1e-9, abs=1e-12)


def test_weights_non_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda_ssl=-1)
