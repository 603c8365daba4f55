import numpy as np
import pytest

from attnshap.cav import (
    Cav,
    LinearProbe,
    cav_from_probe,
    collect_activations,
    directional_derivative,
    relative_cav,
    sensitivity_matrix,
    significance_test,
    tcav_scores,
    token_directional_derivatives,
    train_probe,
)
from attnshap.exceptions import DimensionError, InvalidInputError, NumericError
from attnshap.synthetic import concept_examples
from attnshap.transformer import hidden_gradient, logits_from_hidden


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


class TestActivations:
    def test_counts(self, tiny_model):
        acts, groups = collect_activations(tiny_model, [[2, 3], [4, 5, 6]], 1)
        assert acts.shape == (3 + 4, 16)
        np.testing.assert_array_equal(groups, [0, 0, 0, 1, 1, 1, 1])

    def test_labels(self, tiny_model):
        _, _, y = collect_activations(tiny_model, [[2, 3]], 2, label=1)
        np.testing.assert_array_equal(y, 1)

    def test_cls_row_is_head_input(self, tiny_model):
        acts, _ = collect_activations(tiny_model, [[2, 3, 4]], tiny_model.n_layers)
        tr = tiny_model.forward([2, 3, 4])
        p = tiny_model.params_
        np.testing.assert_allclose(acts[0] @ p["head_w"] + p["head_b"], tr.logits, atol=1e-14)

    def test_deterministic(self, tiny_model):
        a, _ = collect_activations(tiny_model, [[2, 3]] * 2, 1)
        np.testing.assert_array_equal(a[:3], a[3:])

    def test_layer_range(self, tiny_model):
        with pytest.raises(InvalidInputError):
            collect_activations(tiny_model, [[2]], 0)


class TestProbe:
    def test_separable(self, rng):
        pos = rng.normal(size=(60, 3)) * 0.1 + [1, 0, 0]
        neg = rng.normal(size=(60, 3)) * 0.1 - [1, 0, 0]
        probe = train_probe(pos, neg, seed=0)
        assert probe.accuracy_ == 1.0
        cav = cav_from_probe(probe)
        assert cav.direction[0] > 0.99

    def test_same_distribution_is_chance(self):
        accs = []
        for seed in range(20):
            r = np.random.default_rng(seed)
            probe = train_probe(r.normal(size=(100, 4)), r.normal(size=(100, 4)), seed=seed)
            accs.append(probe.accuracy_)
        assert abs(np.mean(accs) - 0.5) <= 0.1

    def test_zero_lr_keeps_weights(self, rng):
        probe = train_probe(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), lr=0.0)
        np.testing.assert_array_equal(probe.coef_, 0.0)
        with pytest.raises(NumericError):
            cav_from_probe(probe)

    def test_single_class(self, rng):
        with pytest.raises(InvalidInputError):
            LinearProbe().fit(rng.normal(size=(4, 2)), np.ones(4, dtype=int))
        with pytest.raises(InvalidInputError):
            train_probe(rng.normal(size=(4, 2)), np.zeros((0, 2)))

    def test_deterministic(self, rng):
        pos, neg = rng.normal(size=(30, 3)) + 0.5, rng.normal(size=(30, 3))
        a = train_probe(pos, neg, seed=4)
        b = train_probe(pos, neg, seed=4)
        np.testing.assert_array_equal(a.coef_, b.coef_)

    def test_groups_stay_together(self, rng):
        X = rng.normal(size=(40, 2))
        y = np.repeat([0, 1], 20)
        groups = np.repeat(np.arange(10), 4)
        probe = LinearProbe(seed=1).fit(X, y, groups=groups)
        train = probe.train_mask_
        for g in range(10):
            assert len(set(train[groups == g])) == 1


class TestCavFromProbe:
    def test_hand_normalisation(self):
        class P:
            coef_ = np.array([3.0, 4.0])

        np.testing.assert_allclose(cav_from_probe(P()).direction, [0.6, 0.8])

    def test_unit_norm(self, rng):
        probe = train_probe(rng.normal(size=(20, 5)) + 1, rng.normal(size=(20, 5)))
        assert abs(np.linalg.norm(cav_from_probe(probe).direction) - 1) < 1e-9

    def test_flipping_labels_flips_direction(self, rng):
        pos, neg = rng.normal(size=(30, 3)) + 1, rng.normal(size=(30, 3))
        a = cav_from_probe(train_probe(pos, neg, seed=2)).direction
        b = cav_from_probe(train_probe(neg, pos, seed=2)).direction
        np.testing.assert_allclose(a, -b, atol=1e-9)

    def test_cav_requires_unit_norm(self):
        with pytest.raises(InvalidInputError):
            Cav("c", 1, [1.0, 1.0])


class TestRelativeCav:
    def _concepts(self):
        return {c: concept_examples(c, 40, length=6, vocab_size=12, seed=i)
                for i, c in enumerate("CDE")}

    def test_same_seed_same_cav(self, tiny_model):
        cs = self._concepts()
        a = relative_cav(tiny_model, "C", cs, 1, n_pos=20, n_neg=20, seed=5)
        b = relative_cav(tiny_model, "C", cs, 1, n_pos=20, n_neg=20, seed=5)
        np.testing.assert_array_equal(a.direction, b.direction)
        assert (a.concept, a.layer) == ("C", 1)

    def test_disjoint_concepts_separate(self, tiny_model):
        cs = {"C": concept_examples("C", 60, length=6, vocab_size=12, seed=0, density=1.0),
              "D": concept_examples("D", 60, length=6, vocab_size=12, seed=1, density=1.0)}
        cav = relative_cav(tiny_model, "C", cs, 1, n_pos=40, n_neg=40, seed=0)
        assert cav.accuracy >= 0.95

    def test_insufficient(self, tiny_model):
        with pytest.raises(InvalidInputError):
            relative_cav(tiny_model, "C", self._concepts(), 1, n_pos=100)

    def test_needs_two_concepts(self, tiny_model):
        with pytest.raises(InvalidInputError):
            relative_cav(tiny_model, "C", {"C": [[2, 3]] * 5}, 1, n_pos=2)


class TestDirectionalDerivative:
    def test_cauchy_schwarz(self, tiny_model):
        x = [2, 3, 4]
        g = hidden_gradient(tiny_model.forward(x), 1, 0)[0]
        val = directional_derivative(tiny_model, x, 1, 0, Cav("c", 1, _unit(g)))
        assert val == pytest.approx(np.linalg.norm(g), rel=1e-12)

    def test_orthogonal_is_zero(self, tiny_model):
        x = [2, 3, 4]
        g = hidden_gradient(tiny_model.forward(x), 1, 0)[0]
        v = np.zeros_like(g)
        v[0], v[1] = g[1], -g[0]
        assert directional_derivative(tiny_model, x, 1, 0, _unit(v)) == pytest.approx(0, abs=1e-15)

    def test_finite_difference(self, tiny_model):
        x = [2, 3, 4, 5]
        rng = np.random.default_rng(0)
        v = _unit(rng.normal(size=16))
        tr = tiny_model.forward(x)
        for layer in (1, 2):
            z = tr.hidden[layer]
            eps = 1e-6
            zp, zm = z.copy(), z.copy()
            zp[0] += eps * v
            zm[0] -= eps * v
            fd = (logits_from_hidden(tiny_model, layer, zp)[1]
                  - logits_from_hidden(tiny_model, layer, zm)[1]) / (2 * eps)
            val = directional_derivative(tiny_model, x, layer, 1, v)
            assert val == pytest.approx(fd, rel=1e-4, abs=1e-10)

    def test_dimension_mismatch(self, tiny_model):
        with pytest.raises(DimensionError):
            directional_derivative(tiny_model, [2], 1, 0, np.ones(3) / np.sqrt(3))


class TestTokenDerivatives:
    def test_definition(self, tiny_model):
        x = [2, 3, 4]
        v = _unit(np.arange(16.0))
        tr = tiny_model.forward(x)
        rec = token_directional_derivatives(tiny_model, x, 1, 0, v)
        att = tr.attention.weights[0, :, 0, :].mean(axis=0)
        grad = hidden_gradient(tr, 1, 0)
        np.testing.assert_allclose(rec.values, att * (grad @ v), atol=1e-15)
        np.testing.assert_allclose(rec.attention, att)
        assert abs(rec.aggregate - rec.values.mean()) <= 1e-12
        assert rec.values.shape == (4,)

    def test_sign_flip(self, tiny_model):
        v = _unit(np.arange(16.0))
        a = token_directional_derivatives(tiny_model, [2, 3], 1, 0, v).values
        b = token_directional_derivatives(tiny_model, [2, 3], 1, 0, -v).values
        np.testing.assert_allclose(a, -b)

    def test_attention_annihilation(self, tiny_model):
        # values are attention times projection, so zero attention kills a token
        x = [2, 3, 4]
        rec = token_directional_derivatives(tiny_model, x, 2, 1, _unit(np.ones(16)))
        grad = hidden_gradient(tiny_model.forward(x), 2, 1)
        # at the last layer only the CLS row carries gradient
        np.testing.assert_array_equal(rec.values[1:], 0.0)
        assert rec.values[0] == pytest.approx(rec.attention[0] * grad[0] @ _unit(np.ones(16)))


class TestScores:
    def test_all_positive_and_zero(self, tiny_model):
        X = [[2, 3], [4, 5, 6], [7]]
        L = tiny_model.n_layers
        w = tiny_model.params_["head_w"][:, 1]
        up = tcav_scores(tiny_model, X, L, 1, Cav("c", L, _unit(w)))
        assert up.score == 1.0 and up.n_inputs == 3
        # orthogonal to the only non-zero token gradient: all exact zeros
        v = np.zeros(16)
        v[0], v[1] = w[1], -w[0]
        zero = tcav_scores(tiny_model, X, L, 1, Cav("c", L, _unit(v)))
        assert zero.score == 0.0

    def test_negated_cav_is_strict_complement(self, tiny_model, rng):
        X = [rng.integers(2, 12, size=5) for _ in range(30)]
        cav = Cav("c", 1, _unit(rng.normal(size=16)))
        S = sensitivity_matrix(tiny_model, X, 1, 0, [cav])[:, 0]
        neg = tcav_scores(tiny_model, X, 1, 0, -cav)
        assert neg.score == np.mean(S < 0)

    def test_gradient_rescaling_invariance(self, tiny_model, rng):
        X = [rng.integers(2, 12, size=5) for _ in range(20)]
        cav = Cav("c", 1, _unit(rng.normal(size=16)))
        a = tcav_scores(tiny_model, X, 1, 0, cav).score
        tiny_model.params_["head_w"] *= 3.0
        try:
            b = tcav_scores(tiny_model, X, 1, 0, cav).score
        finally:
            tiny_model.params_["head_w"] /= 3.0
        assert a == b

    def test_tcav_variant(self, tiny_model, rng):
        X = [rng.integers(2, 12, size=4) for _ in range(10)]
        cav = Cav("c", 1, _unit(rng.normal(size=16)))
        rep = tcav_scores(tiny_model, X, 1, 0, cav, variant="TCAV")
        ref = np.mean([directional_derivative(tiny_model, x, 1, 0, cav) > 0 for x in X])
        assert rep.score == ref and rep.variant == "TCAV"

    def test_multiple_cavs(self, tiny_model, rng):
        X = [rng.integers(2, 12, size=4) for _ in range(10)]
        cavs = [Cav("c", 1, _unit(rng.normal(size=16))) for _ in range(5)]
        rep = tcav_scores(tiny_model, X, 1, 0, cavs)
        singles = [tcav_scores(tiny_model, X, 1, 0, c).score for c in cavs]
        assert rep.per_cav_scores == tuple(singles)
        assert rep.score == rep.n_positive / rep.n_inputs
        assert rep.p_value is not None

    def test_filter_correct(self, tiny_model, rng):
        X = [rng.integers(2, 12, size=4) for _ in range(20)]
        pred = tiny_model.predict(X)
        cav = Cav("c", 1, _unit(rng.normal(size=16)))
        k = int(np.bincount(pred, minlength=2).argmax())
        rep = tcav_scores(tiny_model, X, 1, k, cav, filter_correct=True)
        assert rep.n_inputs == int(np.sum(pred == k))

    def test_empty(self, tiny_model):
        with pytest.raises(InvalidInputError):
            tcav_scores(tiny_model, [], 1, 0, Cav("c", 1, _unit(np.ones(16))))


class TestSignificance:
    def test_constant_at_half(self):
        assert significance_test([0.5] * 10) == (1.0, False)

    def test_constant_elsewhere(self):
        assert significance_test([0.9] * 10) == (0.0, True)

    def test_symmetric_mean_half(self):
        p, reject = significance_test([0.3, 0.7, 0.4, 0.6])
        assert p == pytest.approx(1.0) and not reject

    def test_rejects_clear_shift(self):
        s = np.random.default_rng(0).normal(0.9, 0.01, size=50)
        p, reject = significance_test(s)
        assert reject and p < 1e-10

    def test_matches_t_statistic(self):
        from scipy import stats

        s = np.array([0.4, 0.55, 0.62, 0.58, 0.47])
        t = (s.mean() - 0.5) / (s.std(ddof=1) / np.sqrt(s.size))
        expected = 2 * stats.t.sf(abs(t), df=s.size - 1)
        assert significance_test(s)[0] == pytest.approx(expected, rel=1e-12)

    def test_needs_two(self):
        with pytest.raises(InvalidInputError):
            significance_test([0.5])
