"""Dispatch of the fourteen token-attribution methods."""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import InvalidInputError
from .shapley import (
    DEFAULT_EXACT_LIMIT,
    AttributionResult,
    CharacteristicSpec,
    MaskingPayload,
    SamplingScheme,
    closed_form_cls,
    closed_form_mutual,
    exact_shapley,
    grad_sam_scores,
    sampled_shapley,
)
from .tensor import average_attention, contribution_matrix, raw_attention_importance
from .transformer import attention_gradients

METHODS = (
    "Att",
    "Shapley-Att-CLS",
    "Shapley-Att-Mutual",
    "Shapley-Att-Max-Mutual",
    "Approx. Shapley-Att-Max-Mutual",
    "Kernel Shapley-Att-Max-Mutual",
    "Grad-SAM",
    "Shapley-Grad-Att-CLS",
    "Shapley-Grad-Att-Mutual",
    "Shapley-Grad-Att-Max-Mutual",
    "Approx. Shapley-Grad-Att-Max-Mutual",
    "Kernel Shapley-Grad-Att-Max-Mutual",
    "Shapley-Input",
    "SHAP",
)
DEFAULT_SAMPLES = 100

# methods whose scores depend on a sampling seed
SAMPLED_METHODS = tuple(m for m in METHODS if m.startswith(("Approx.", "Kernel")) or m == "SHAP")


def _needs_gradients(method):
    return "Grad" in method


def attribute(method, model, x, k=None, scheme=None, exact_limit=DEFAULT_EXACT_LIMIT,
              ordered_pairs=False):
    """Token attributions of ``x`` under one method.

    Parameters
    ----------
    method : str
        One of :data:`METHODS`.
    model : ToyTransformer
    x : SequenceInput or content-token sequence
    k : int, optional
        Explained class; defaults to the model's prediction on ``x``.
    scheme : SamplingScheme, optional
        Sample count and seed for the sampled methods (the mode is fixed by
        the method name). Defaults to 100 coalitions with seed 0.
    """
    if method not in METHODS:
        raise InvalidInputError(f"unknown method {method!r}; expected one of {METHODS}")
    t0 = time.perf_counter()
    x = model.make_input(x)
    trace = model.forward(x)
    if k is None:
        k = int(np.argmax(trace.probs))
    k = model._check_class(k)
    players = x.player_indices
    scheme = scheme or SamplingScheme(n_samples=DEFAULT_SAMPLES)

    def sampled(spec, mode):
        sch = SamplingScheme(mode=mode, n_samples=scheme.n_samples, seed=scheme.seed,
                             dedup=scheme.dedup, anchors=scheme.anchors)
        return sampled_shapley(spec, sch, method=method)

    if method == "Att":
        # tau is 1/N up to float noise; rounding lets exact ties break by index
        tau = np.round(raw_attention_importance(trace.attention), 12)
        result = AttributionResult(method, tau[players], players, class_id=k)
    elif method in ("Shapley-Input", "SHAP"):
        empty = "zero" if method == "Shapley-Input" else "model"
        spec = CharacteristicSpec("InputMasking", MaskingPayload(model, x, k),
                                  players=tuple(players), empty_value=empty)
        if method == "Shapley-Input":
            result = exact_shapley(spec, max_players=exact_limit, method=method)
        else:
            result = sampled(spec, "Kernel")
            result.base_value = spec.base_value()
    else:
        if _needs_gradients(method):
            payload = contribution_matrix(trace.attention, attention_gradients(trace, k), k)
            prefix = "GradAtt"
        else:
            payload = average_attention(trace.attention)
            prefix = "Att"
        if method == "Grad-SAM":
            result = grad_sam_scores(payload, players)
        elif method.endswith("-CLS"):
            result = closed_form_cls(payload, players, method=method)
        elif method.endswith("Max-Mutual"):
            spec = CharacteristicSpec(prefix + "MaxMutual", payload, players=tuple(players),
                                      ordered_pairs=ordered_pairs)
            if method.startswith("Approx."):
                result = sampled(spec, "MonteCarlo")
            elif method.startswith("Kernel"):
                result = sampled(spec, "Kernel")
            else:
                result = exact_shapley(spec, max_players=exact_limit, method=method)
        else:
            result = closed_form_mutual(payload, players, ordered_pairs=ordered_pairs,
                                        method=method)
    result.method = method
    result.class_id = k
    if method not in SAMPLED_METHODS:
        result.seed = None
        result.n_samples = None
    result.wall_time = time.perf_counter() - t0
    return result


class TokenAttributor(TransformerMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`attribute`.

    ``transform`` returns an ``(n_inputs, n_players)`` score array and
    needs equal-length inputs; ``explain`` returns the full
    :class:`AttributionResult` objects for any inputs.
    """

    def __init__(self, model=None, method="Shapley-Grad-Att-CLS", n_samples=DEFAULT_SAMPLES,
                 seed=0, target=None, exact_limit=DEFAULT_EXACT_LIMIT):
        self.model = model
        self.method = method
        self.n_samples = n_samples
        self.seed = seed
        self.target = target
        self.exact_limit = exact_limit

    def fit(self, X=None, y=None):
        if self.model is None:
            raise InvalidInputError("TokenAttributor needs a trained model")
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}")
        self.model._check_ready()
        return self

    def explain(self, X):
        scheme = SamplingScheme(n_samples=self.n_samples, seed=self.seed)
        return [attribute(self.method, self.model, x, k=self.target, scheme=scheme,
                          exact_limit=self.exact_limit) for x in X]

    def transform(self, X):
        results = self.explain(X)
        if len({r.scores.size for r in results}) > 1:
            raise InvalidInputError("transform needs inputs with equal player counts")
        return np.stack([r.scores for r in results]) if results else np.zeros((0, 0))
