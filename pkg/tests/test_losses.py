import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instances import SPLIT, instance, loss_closure
from joem.data import SplitSpec
from joem.embedding import SemanticEncoderParams, SemanticTable, encode_semantic, relation_matrix
from joem.errors import InvalidInput, InvalidLabel, InvalidParameter, UndefinedLoss
from joem.losses import (DIST_EPS, bar_loss, ce_loss, center_loss, grad_check, sc_loss, smooth_distance,
                         total_loss)
from joem.resample import interpolated_semantic_map


def enc_of(inst):
    return SemanticEncoderParams(inst["W"], inst["b"])


class TestCrossEntropy:
    def test_uniform_logits(self):
        v = np.zeros((3, 3, 2))
        y = np.random.default_rng(0).integers(0, 4, (3, 3))
        assert ce_loss(v, np.ones((4, 2)), y, SPLIT).value == pytest.approx(math.log(4), abs=1e-15)

    def test_margin_monotone(self):
        y = np.array([[2]])
        vals = []
        for margin in (0.5, 1.0, 2.0, 4.0):
            w = np.zeros((4, 1))
            w[2, 0] = margin
            vals.append(ce_loss(np.ones((1, 1, 1)), w, y, SPLIT).value)
        assert vals[0] < math.log(4) and all(a > b for a, b in zip(vals, vals[1:]))

    def test_scalar_oracle(self):
        inst = instance(4, 3, 3, boundary=False)
        v, w, y = inst["v"], inst["w"], inst["y"]
        tot = 0.0
        for i in range(3):
            for j in range(3):
                logits = [float(np.dot(w[k], v[i, j])) for k in range(4)]
                m = max(logits)
                lse = m + math.log(sum(math.exp(l - m) for l in logits))
                tot += lse - logits[y[i, j]]
        assert abs(ce_loss(v, w, y, SPLIT).value - tot / 9) < 1e-12

    def test_gradient(self):
        f, x0 = loss_closure(instance(1, 3, 3, boundary=False), "ce")
        assert grad_check(f, x0) < 1e-6

    def test_logit_gradients_sum_to_zero(self):
        # with w = I the feature gradient is the logit gradient itself
        inst = instance(2, boundary=False)
        v = inst["v"][..., :1] * np.ones(4)
        lv = ce_loss(v, np.eye(4), inst["y"], SPLIT)
        assert lv.value >= 0
        np.testing.assert_allclose(lv.grads["v"].sum(axis=-1), 0.0, atol=1e-15)

    def test_errors(self):
        v = np.zeros((2, 2, 3))
        with pytest.raises(InvalidLabel):
            ce_loss(v, np.zeros((4, 3)), np.array([[0, 4], [1, 1]]), SPLIT)
        with pytest.raises(InvalidLabel):
            ce_loss(v, np.zeros((4, 3)), np.array([[0, 9], [1, 1]]), SPLIT)
        with pytest.raises(UndefinedLoss):
            ce_loss(v, np.zeros((4, 3)), np.full((2, 2), 4), SPLIT, ignore_unseen=True)
        with pytest.raises(InvalidInput):
            ce_loss(np.zeros((3, 2, 3)), np.zeros((4, 3)), np.zeros((2, 2), dtype=int), SPLIT)


class TestRegression:
    def test_zero_at_prototypes(self):
        inst = instance(3)
        enc = enc_of(inst)
        mu = encode_semantic(enc, interpolated_semantic_map(inst["y"], inst["table"], 4))
        assert bar_loss(mu, inst["y"], inst["table"], enc, SPLIT, 4).value == 0.0

    def test_three_four_five(self):
        t = SemanticTable({0: [0.0, 0.0], 1: [1.0, 1.0]})
        enc = SemanticEncoderParams(np.zeros((2, 2)), np.zeros(2))
        lv = center_loss(np.array([[[3.0, 4.0]]]), np.array([[1]]), t, enc, SplitSpec([0, 1], [2]))
        # smoothing shifts distances by at most eps = 1e-8
        assert lv.value == pytest.approx(5.0, abs=1.01e-8)

    @pytest.mark.parametrize("r", [2, 4])
    def test_constant_mask_equals_center(self, r):
        inst = instance(5)
        y = np.full((8, 8), 2)
        a = bar_loss(inst["v"], y, inst["table"], enc_of(inst), SPLIT, r)
        b = center_loss(inst["v"], y, inst["table"], enc_of(inst), SPLIT)
        assert a.value == b.value

    def test_composition_oracle(self):
        inst = instance(6)
        table, y, v, enc = inst["table"], inst["y"], inst["v"], enc_of(inst)
        s = interpolated_semantic_map(y, table, 4)
        tot = 0.0
        for i in range(8):
            for j in range(8):
                mu = [sum(s[i, j, k] * enc.weight[k, c] for k in range(5)) + enc.bias[c]
                      for c in range(3)]
                sq = sum((v[i, j, c] - mu[c]) ** 2 for c in range(3))
                tot += math.sqrt(sq + DIST_EPS**2) - DIST_EPS
        assert abs(bar_loss(v, y, table, enc, SPLIT, 4).value - tot / 64) < 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient(self, seed):
        f, x0 = loss_closure(instance(seed), "bar", r=4)
        assert grad_check(f, x0) < 1e-6

    def test_invariant_to_non_seen_pixels(self):
        inst = instance(7, boundary=False)
        y = inst["y"].copy()
        y[:, :2] = 0
        y2 = y.copy()
        y2[:, :2] = 5  # unseen label, ignored in permissive mode
        table, enc = inst["table"], enc_of(inst)
        v2 = inst["v"].copy()
        v2[:, :2] += 100.0
        a = center_loss(inst["v"], y2, table, enc, SPLIT, ignore_unseen=True)
        b = center_loss(v2, y2, table, enc, SPLIT, ignore_unseen=True)
        assert a.value == b.value
        assert np.all(a.grads["v"][:, :2] == 0)

    def test_unseen_strict(self):
        inst = instance(8)
        y = inst["y"].copy()
        y[0, 0] = 4
        with pytest.raises(InvalidLabel):
            bar_loss(inst["v"], y, inst["table"], enc_of(inst), SPLIT, 2)

    def test_smooth_distance(self):
        d, root = smooth_distance(np.array([[3.0, 4.0], [0.0, 0.0]]))
        assert abs(d[0] - 5.0) <= DIST_EPS and d[1] == 0.0
        assert root[1] > 0


class TestSemanticConsistency:
    def test_matched_relations_zero(self):
        rng = np.random.default_rng(0)
        t = SemanticTable({c: rng.standard_normal(4) for c in range(6)})
        enc = SemanticEncoderParams(2.5 * np.eye(4), np.zeros(4))
        assert sc_loss(t, enc, SPLIT, 5.0, 2.0).value < 1e-12

    def test_scalar_double_sum(self):
        inst = instance(9)
        table, enc = inst["table"], enc_of(inst)
        seen = SPLIT.seen_sorted
        r = relation_matrix({c: table.vector(c) for c in seen}, 5.0)
        rh = relation_matrix({c: encode_semantic(enc, table.vector(c)) for c in seen}, 1.0)
        kl = sum(r.row(i)[j] * math.log(r.row(i)[j] / rh.row(i)[j])
                 for i in seen for j in seen if j != i)
        assert abs(sc_loss(table, enc, SPLIT, 5.0, 1.0).value - kl) < 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient(self, seed):
        f, x0 = loss_closure(instance(seed), "sc")
        assert grad_check(f, x0) < 1e-5

    def test_no_gradient_to_visual(self):
        inst = instance(1)
        lv = sc_loss(inst["table"], enc_of(inst), SPLIT, 5.0, 1.0)
        assert set(lv.grads) == {"enc_weight", "enc_bias"}

    def test_bad_temperature(self):
        inst = instance(1)
        with pytest.raises(InvalidParameter):
            sc_loss(inst["table"], enc_of(inst), SPLIT, 0.0, 1.0)

    @settings(max_examples=40)
    @given(st.integers(0, 100_000))
    def test_non_negative(self, seed):
        inst = instance(seed)
        assert sc_loss(inst["table"], enc_of(inst), SPLIT, 5.0, 1.0).value >= 0.0


class TestTotal:
    def test_arithmetic(self):
        inst = instance(2)
        table, y, v, enc = inst["table"], inst["y"], inst["v"], enc_of(inst)
        ce = ce_loss(v, inst["w"], y, SPLIT)
        bar = bar_loss(v, y, table, enc, SPLIT, 4)
        sc = sc_loss(table, enc, SPLIT, 5.0, 1.0)
        assert total_loss(ce, bar, sc, 0.7).value == ce.value + bar.value + 0.7 * sc.value
        assert total_loss(ce, bar, sc, 0.0).value == ce.value + bar.value
        with pytest.raises(InvalidParameter):
            total_loss(ce, bar, sc, -1.0)

    def test_composite_gradient(self):
        f, x0 = loss_closure(instance(11), "total")
        assert grad_check(f, x0) < 1e-5


class TestGradCheck:
    def test_quadratic(self):
        assert grad_check(lambda x: (0.5 * x @ x, x.copy()), np.arange(5.0) - 2) < 1e-8

    def test_detects_wrong_gradient(self):
        assert grad_check(lambda x: (0.5 * x @ x, 2 * x), np.ones(3)) > 0.1

    def test_bad_eps(self):
        with pytest.raises(InvalidParameter):
            grad_check(lambda x: (0.0, x), np.ones(2), eps=0)
