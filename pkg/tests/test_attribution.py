import time

import numpy as np
import pytest
from sklearn.base import clone

from attnshap.attribution import METHODS, SAMPLED_METHODS, TokenAttributor, attribute
from attnshap.exceptions import InvalidInputError
from attnshap.shapley import SamplingScheme
from attnshap.transformer import ToyTransformer


def test_fourteen_methods():
    assert len(METHODS) == len(set(METHODS)) == 14


@pytest.mark.parametrize("method", METHODS)
def test_every_method_runs(method, tiny_model):
    res = attribute(method, tiny_model, [2, 3, 4, 5, 6], k=1,
                    scheme=SamplingScheme(n_samples=20, seed=1))
    assert res.method == method
    assert res.scores.shape == (5,)
    np.testing.assert_array_equal(res.player_indices, [1, 2, 3, 4, 5])
    assert res.class_id == 1
    if method in SAMPLED_METHODS:
        assert (res.seed, res.n_samples) == (1, 20)
    else:
        assert res.seed is None


def test_unknown_method(tiny_model):
    with pytest.raises(InvalidInputError):
        attribute("LIME", tiny_model, [2, 3])


def test_default_class_is_prediction(tiny_model):
    x = [2, 3, 4]
    k = int(np.argmax(tiny_model.forward(x).probs))
    assert attribute("Att", tiny_model, x).class_id == k


def test_att_is_uniform(tiny_model):
    res = attribute("Att", tiny_model, [2, 3, 4, 5])
    np.testing.assert_array_equal(res.scores, res.scores[0])
    assert res.scores[0] == pytest.approx(0.2, abs=1e-12)


def test_att_cls_uniform_attention_symmetric():
    m = ToyTransformer(positional="none", seed=0).initialize()
    # identical tokens without positions give identical attention columns
    res = attribute("Shapley-Att-CLS", m, [5, 5, 5, 5])
    np.testing.assert_allclose(res.scores, res.scores[0], atol=1e-14)


def test_shapley_input_efficiency(tiny_model):
    x = [2, 3, 4, 5, 6, 7, 8, 9, 10, 11]
    res = attribute("Shapley-Input", tiny_model, x, k=0)
    assert res.scores.sum() == pytest.approx(tiny_model.forward(x).probs[0], abs=1e-9)


def test_shap_reports_base_value(tiny_model):
    x = [2, 3, 4]
    res = attribute("SHAP", tiny_model, x, k=0)
    assert res.base_value == pytest.approx(tiny_model.forward([1, 1, 1]).probs[0])


def test_exact_and_closed_form_methods_agree(tiny_model):
    # the Mutual closed form must equal enumeration of the same game
    from attnshap.shapley import CharacteristicSpec, exact_shapley
    from attnshap.tensor import contribution_matrix
    from attnshap.transformer import attention_gradients

    x = [2, 3, 4, 5, 6]
    tr = tiny_model.forward(x)
    M = contribution_matrix(tr.attention, attention_gradients(tr, 1), 1)
    ex = exact_shapley(CharacteristicSpec("GradAttMutual", M)).scores
    cf = attribute("Shapley-Grad-Att-Mutual", tiny_model, x, k=1).scores
    np.testing.assert_allclose(cf, ex, atol=1e-12)


def test_scale_n40_is_fast():
    m = ToyTransformer(max_len=64, seed=0).initialize()
    x = np.random.default_rng(0).integers(2, 16, size=40)
    t0 = time.perf_counter()
    res = attribute("Kernel Shapley-Grad-Att-Max-Mutual", m, x, k=0)
    assert time.perf_counter() - t0 < 10.0
    assert res.scores.shape == (40,)


class TestTokenAttributor:
    def test_transform_shape(self, tiny_model):
        t = TokenAttributor(tiny_model, method="Grad-SAM", target=0).fit()
        out = t.transform([[2, 3, 4], [5, 6, 7]])
        assert out.shape == (2, 3)

    def test_unequal_lengths(self, tiny_model):
        t = TokenAttributor(tiny_model, method="Att").fit()
        assert len(t.explain([[2], [2, 3]])) == 2
        with pytest.raises(InvalidInputError):
            t.transform([[2], [2, 3]])

    def test_clone(self, tiny_model):
        t = TokenAttributor(tiny_model, method="SHAP", n_samples=7)
        assert clone(t).get_params()["n_samples"] == 7

    def test_fit_validates(self, tiny_model):
        with pytest.raises(InvalidInputError):
            TokenAttributor(None).fit()
        with pytest.raises(InvalidInputError):
            TokenAttributor(tiny_model, method="nope").fit()
