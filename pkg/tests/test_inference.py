import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from joem.data import SplitSpec
from joem.embedding import PrototypeSet
from joem.errors import DegenerateInput, InvalidInput, InvalidParameter
from joem.inference import (ac_classify, apollonius_circle, classify, cs_classify, nearest_two,
                            nn_classify, upsample_features)

SPLIT = SplitSpec([0, 1, 2, 3, 4], [5, 6, 7])


def random_case(seed, h=6, w=7, c=4, k=8):
    rng = np.random.default_rng(seed)
    protos = PrototypeSet(np.arange(k), rng.standard_normal((k, c)))
    return rng.standard_normal((h, w, c)), protos


class TestNearestTwo:
    def test_at_prototype(self):
        v, protos = random_case(0)
        v[0, 0] = protos[3]
        nt = nearest_two(v, protos)
        assert nt.first[0, 0] == 3 and nt.d1[0, 0] == 0

    def test_midpoint_tie(self):
        protos = PrototypeSet([4, 2], [[1.0, 0.0], [-1.0, 0.0]])
        nt = nearest_two(np.zeros((1, 1, 2)), protos)
        assert nt.first[0, 0] == 2 and nt.second[0, 0] == 4 and nt.d1[0, 0] == nt.d2[0, 0]

    @pytest.mark.parametrize("seed", range(3))
    def test_brute_force(self, seed):
        v, protos = random_case(seed)
        nt = nearest_two(v, protos)
        for i in range(v.shape[0]):
            for j in range(v.shape[1]):
                d = [(float(np.sqrt(np.sum((v[i, j] - protos[c]) ** 2))), c) for c in range(8)]
                d.sort()
                assert (nt.first[i, j], nt.second[i, j]) == (d[0][1], d[1][1])
                assert nt.d1[i, j] == d[0][0] and nt.d2[i, j] == d[1][0]
                assert nt.d1[i, j] <= nt.d2[i, j]

    def test_needs_two(self):
        with pytest.raises(InvalidInput):
            nearest_two(np.zeros((1, 1, 2)), PrototypeSet([0], [[0.0, 0.0]]))

    def test_duplicates_rejected(self):
        with pytest.raises(DegenerateInput):
            nn_classify(np.zeros((1, 1, 2)), PrototypeSet([0, 5], [[1.0, 0.0], [1.0, 0.0]]))


class TestRules:
    def test_nn_at_prototype(self):
        v, protos = random_case(1)
        v[2, 3] = protos[6]
        assert nn_classify(v, protos)[2, 3] == 6

    @settings(max_examples=30)
    @given(st.integers(0, 100_000))
    def test_consistency_chain(self, seed):
        v, protos = random_case(seed)
        nn = nn_classify(v, protos)
        assert cs_classify(v, protos, SPLIT, 0.0).tobytes() == nn.tobytes()
        assert ac_classify(v, protos, SPLIT, 1.0).tobytes() == nn.tobytes()

    def test_cs_oracle(self):
        v, protos = random_case(2)
        out = cs_classify(v, protos, SPLIT, 0.5)
        for i in range(v.shape[0]):
            for j in range(v.shape[1]):
                scores = [np.linalg.norm(v[i, j] - protos[c]) - (0.5 if c >= 5 else 0) for c in range(8)]
                assert out[i, j] == int(np.argmin(scores))

    def test_cs_large_gamma_all_unseen(self):
        v, protos = random_case(3)
        d = np.linalg.norm(v[..., None, :] - protos.vectors, axis=-1)
        gamma = float((d.max(axis=-1) - d.min(axis=-1)).max()) + 1.0
        out = cs_classify(v, protos, SPLIT, gamma)
        nearest_unseen = 5 + np.argmin(d[..., 5:], axis=-1)
        np.testing.assert_array_equal(out, nearest_unseen)

    def test_cs_rejects_inf(self):
        v, protos = random_case(3)
        with pytest.raises(InvalidParameter):
            cs_classify(v, protos, SPLIT, float("inf"))

    @pytest.mark.parametrize("sigma", [0.0, 1.5, -0.2])
    def test_ac_domain(self, sigma):
        v, protos = random_case(4)
        with pytest.raises(InvalidParameter):
            ac_classify(v, protos, SPLIT, sigma)

    @settings(max_examples=20)
    @given(st.integers(0, 100_000), st.floats(0.05, 0.95))
    def test_unseen_nearest_never_changes(self, seed, sigma):
        v, protos = random_case(seed)
        nn = nn_classify(v, protos)
        unseen = SPLIT.is_unseen(nn)
        assert np.all(ac_classify(v, protos, SPLIT, sigma)[unseen] == nn[unseen])
        assert np.all(cs_classify(v, protos, SPLIT, 3 * sigma)[unseen] == nn[unseen])

    @settings(max_examples=20)
    @given(st.integers(0, 100_000))
    def test_ac_monotone_in_sigma(self, seed):
        v, protos = random_case(seed)
        prev = None
        for sigma in np.linspace(0.05, 1.0, 20)[::-1]:
            unseen = SPLIT.is_unseen(ac_classify(v, protos, SPLIT, float(sigma)))
            if prev is not None:
                assert np.all(unseen >= prev)
            prev = unseen

    def test_ac_scale_translation_invariant(self):
        v, protos = random_case(5)
        shift = np.array([0.5, -1.0, 2.0, 0.25])
        moved = PrototypeSet(protos.ids, 2.0 * (protos.vectors + shift))
        base = ac_classify(v, protos, SPLIT, 0.7)
        np.testing.assert_array_equal(ac_classify(2.0 * (v + shift), moved, SPLIT, 0.7), base)
        # CS with a fixed gamma is not scale invariant
        cs_a = cs_classify(v, protos, SPLIT, 0.8)
        cs_b = cs_classify(2.0 * (v + shift), moved, SPLIT, 0.8)
        assert not np.array_equal(cs_a, cs_b)

    def test_classify_dispatch(self):
        v, protos = random_case(6)
        assert classify("nn", v, protos, SPLIT).tobytes() == nn_classify(v, protos).tobytes()
        with pytest.raises(InvalidParameter):
            classify("knn", v, protos, SPLIT)


class TestApollonius:
    def test_classical_case(self):
        circ = apollonius_circle([0.0, 0.0], [3.0, 0.0], 0.5)
        np.testing.assert_allclose(circ.center, [-1.0, 0.0], atol=1e-15)
        assert circ.radius == pytest.approx(2.0, abs=1e-15)
        for t in np.linspace(0, 2 * np.pi, 17):
            x = circ.center + circ.radius * np.array([np.cos(t), np.sin(t)])
            ratio = np.linalg.norm(x) / np.linalg.norm(x - [3.0, 0.0])
            assert ratio == pytest.approx(0.5, abs=1e-12)

    def test_radius_doubles(self):
        a = apollonius_circle([1.0, 2.0, 3.0], [2.0, 0.0, 1.0], 0.3)
        b = apollonius_circle([1.0, 2.0, 3.0], [3.0, -2.0, -1.0], 0.3)
        assert abs(b.radius - 2 * a.radius) < 1e-9

    def test_inside_outside(self):
        rng = np.random.default_rng(0)
        mu_a, mu_b = rng.standard_normal(3), rng.standard_normal(3)
        circ = apollonius_circle(mu_a, mu_b, 0.6)
        pts = circ.center + 3 * circ.radius * rng.uniform(-1, 1, (2000, 3))
        ratio = np.linalg.norm(pts - mu_a, axis=1) / np.linalg.norm(pts - mu_b, axis=1)
        inside = circ.contains(pts)
        far = np.abs(ratio - 0.6) > 1e-9
        assert np.all((ratio < 0.6)[far] == inside[far])

    def test_errors(self):
        with pytest.raises(InvalidParameter):
            apollonius_circle([0.0], [1.0], 1.0)
        with pytest.raises(DegenerateInput):
            apollonius_circle([1.0, 1.0], [1.0, 1.0], 0.5)


class TestUpsampleFeatures:
    def test_identity_and_constant(self):
        v = np.random.default_rng(0).standard_normal((4, 4, 2))
        np.testing.assert_array_equal(upsample_features(v, 4, 4), v)
        assert np.all(upsample_features(np.full((2, 3, 2), 1.5), 8, 9) == 1.5)

    def test_smaller_target(self):
        with pytest.raises(InvalidParameter):
            upsample_features(np.zeros((4, 4, 1)), 2, 4)
