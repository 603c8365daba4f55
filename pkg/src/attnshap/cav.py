"""Concept activation vectors, directional derivatives and (T-)TCAV scores."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DimensionError, InvalidInputError, NumericError
from .parallel import pmap
from .transformer import hidden_gradient

UNIT_TOL = 1e-9
DEFAULT_CONCEPT_SIZE = 120
DEFAULT_EVAL_SIZE = 200
DEFAULT_N_CAVS = 50
VARIANTS = ("TCAV", "T-TCAV")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def _check_layer(model, layer):
    if not 1 <= int(layer) <= model.n_layers:
        raise InvalidInputError(f"layer {layer} outside [1, {model.n_layers}]")
    return int(layer)


def collect_activations(model, inputs, layer, label=None):
    """Latent vectors of every token of every input at ``hidden[layer]``.

    Parameters
    ----------
    model : ToyTransformer
    inputs : list
        Sequences accepted by ``model.make_input``.
    layer : int
        Block output to read, ``1 <= layer <= L``.
    label : int, optional
        Label given to every token. When omitted only the activations are
        returned.

    Returns
    -------
    acts : ndarray of shape (total_tokens, d)
    groups : ndarray of shape (total_tokens,)
        Index of the input each row came from.
    labels : ndarray, only when ``label`` is given
    """
    model._check_ready()
    layer = _check_layer(model, layer)
    xs = model._as_inputs(inputs)
    if not xs:
        raise InvalidInputError("no inputs to collect activations from")
    per_input = [None] * len(xs)
    for _, idx in model._grouped(xs).items():
        batch = np.stack([model._raw(xs[i]) for i in idx])
        hid = model._run(batch).hidden[layer]
        for j, i in enumerate(idx):
            per_input[i] = hid[j]
    acts = np.concatenate(per_input)
    groups = np.repeat(np.arange(len(xs)), [h.shape[0] for h in per_input])
    if label is None:
        return acts, groups
    return acts, groups, np.full(acts.shape[0], int(label), dtype=np.int64)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


def _holdout_split(group_labels, test_size, seed):
    """Stratified split of group indices.

    Each class side is shuffled by a stream keyed on ``(seed, side size)``,
    so swapping the positive and negative sets reproduces the same split.
    """
    train, test = [], []
    for c in (1, 0):
        members = np.flatnonzero(group_labels == c)
        order = members[np.random.default_rng([int(seed), members.size]).permutation(members.size)]
        n_test = int(round(test_size * members.size))
        n_test = min(n_test, members.size - 1)
        test.append(order[:n_test])
        train.append(order[n_test:])
    return np.concatenate(train), np.concatenate(test)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Binary logistic regression fit by full-batch gradient descent.

    Weights start at zero. A seeded, class-stratified held-out split (by
    ``groups`` when given, so all tokens of one input fall on the same
    side) is set aside and ``accuracy_`` reports accuracy on it. A group
    takes the label of its first row.

    Parameters
    ----------
    epochs : int
        Gradient-descent steps on the training split.
    lr : float
        Step size.
    l2 : float
        Ridge penalty on the weights (not the bias).
    test_size : float
        Held-out fraction.
    seed : int
        Seed of the split.
    """

    def __init__(self, epochs=300, lr=0.5, l2=0.0, test_size=0.2, seed=0):
        self.epochs = epochs
        self.lr = lr
        self.l2 = l2
        self.test_size = test_size
        self.seed = seed

    def fit(self, X, y, groups=None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise DimensionError("X must be (n, d) with one label per row")
        if not set(np.unique(y).tolist()) <= {0, 1}:
            raise InvalidInputError("probe labels must be 0 or 1")
        if np.unique(y).size < 2:
            raise InvalidInputError("probe needs both positive and negative examples")
        groups = np.arange(X.shape[0]) if groups is None else np.asarray(groups)
        uniq, first, inv = np.unique(groups, return_index=True, return_inverse=True)
        train_g, test_g = _holdout_split(y[first], self.test_size, self.seed)
        train = np.isin(inv, train_g)
        test = np.isin(inv, test_g)
        Xt, yt = X[train], y[train].astype(np.float64)
        w = np.zeros(X.shape[1])
        b = 0.0
        n = Xt.shape[0]
        for _ in range(int(self.epochs)):
            z = np.clip(Xt @ w + b, -500.0, 500.0)
            r = 1.0 / (1.0 + np.exp(-z)) - yt
            w = w - self.lr * (Xt.T @ r / n + self.l2 * w)
            b = b - self.lr * r.mean()
        if not np.all(np.isfinite(w)):
            raise NumericError("probe weights diverged")
        self.coef_ = w
        self.intercept_ = float(b)
        self.classes_ = np.array([0, 1])
        self.train_mask_ = train
        if test.any():
            self.accuracy_ = float(np.mean(self.predict(X[test]) == y[test]))
        else:
            self.accuracy_ = float(np.mean(self.predict(X) == y))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return np.asarray(X, dtype=np.float64) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = 1.0 / (1.0 + np.exp(-np.clip(self.decision_function(X), -500, 500)))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int64)


def train_probe(pos, neg, epochs=300, lr=0.5, seed=0, l2=0.0, pos_groups=None,
                neg_groups=None):
    """Fit a :class:`LinearProbe` separating ``pos`` (label 1) from ``neg``."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.ndim != 2 or neg.ndim != 2 or pos.shape[1] != neg.shape[1]:
        raise DimensionError("activation sets must be (n, d) with a common d")
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise InvalidInputError("probe needs both positive and negative examples")
    X = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(len(pos), np.int64), np.zeros(len(neg), np.int64)])
    groups = None
    if pos_groups is not None and neg_groups is not None:
        pg = np.asarray(pos_groups)
        ng = np.asarray(neg_groups)
        groups = np.concatenate([pg - pg.min(), ng - ng.min() + pg.max() - pg.min() + 1])
    probe = LinearProbe(epochs=epochs, lr=lr, l2=l2, seed=seed)
    return probe.fit(X, y, groups=groups)


@dataclass(frozen=True, eq=False)
class Cav:
    """Unit normal of a concept probe at one layer."""

    concept: str
    layer: int
    direction: np.ndarray
    accuracy: float = float("nan")

    def __post_init__(self):
        v = np.asarray(self.direction, dtype=np.float64).copy()
        if v.ndim != 1:
            raise DimensionError("CAV direction must be a vector")
        if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
            raise InvalidInputError("CAV direction must have unit norm")
        v.setflags(write=False)
        object.__setattr__(self, "direction", v)

    def __neg__(self):
        return Cav(self.concept, self.layer, -self.direction, self.accuracy)


def cav_from_probe(probe, concept="concept", layer=0):
    """Normalise the probe's weight vector; it points toward the positives."""
    w = np.asarray(probe.coef_, dtype=np.float64)
    norm = np.linalg.norm(w)
    if not norm > 0.0:
        raise NumericError("probe weight vector is zero; no concept direction")
    return Cav(str(concept), int(layer), w / norm, float(getattr(probe, "accuracy_", np.nan)))


@dataclass(frozen=True, eq=False)
class ConceptDataset:
    """Positive inputs of a concept and the pool its negatives are drawn from."""

    concept: str
    positives: list
    negatives: list

    def __post_init__(self):
        if len(self.positives) == 0 or len(self.negatives) == 0:
            raise InvalidInputError(f"concept {self.concept!r} needs positives and negatives")


def _draw(rng, pool, n):
    replace = len(pool) < n
    idx = rng.choice(len(pool), size=n, replace=replace)
    return [pool[i] for i in idx]


def concept_dataset(concept, concepts, negative_pool=None):
    """One concept against the union of all other concepts (or ``negative_pool``)."""
    if concept not in concepts:
        raise InvalidInputError(f"unknown concept {concept!r}")
    if negative_pool is None:
        if len(concepts) < 2:
            raise InvalidInputError("a relative CAV needs at least two concepts")
        negative_pool = [x for c, xs in concepts.items() if c != concept for x in xs]
    return ConceptDataset(concept, list(concepts[concept]), list(negative_pool))


def relative_cav(model, concept, concepts, layer, n_pos=DEFAULT_CONCEPT_SIZE,
                 n_neg=DEFAULT_CONCEPT_SIZE, seed=0, negative_pool=None, epochs=300,
                 lr=0.5, l2=0.0):
    """CAV separating ``concept`` from the union of the other concepts.

    Parameters
    ----------
    model : ToyTransformer
    concept : str
    concepts : dict
        Concept name to a list of example inputs.
    layer : int
    n_pos, n_neg : int
        Positive examples drawn without replacement from the concept's set
        and negatives drawn from the pool (with replacement only if the pool
        is smaller than ``n_neg``).
    seed : int
        Seeds both draws and the probe's held-out split.
    negative_pool : list, optional
        Explicit negatives instead of the other concepts (random-concept
        baselines).
    """
    data = concept_dataset(concept, concepts, negative_pool)
    if len(data.positives) < n_pos:
        raise InvalidInputError(
            f"concept {concept!r} has {len(data.positives)} examples, {n_pos} requested"
        )
    rng = np.random.default_rng([int(seed), 0xCA5])
    pos_x = _draw(rng, data.positives, n_pos)
    neg_x = _draw(rng, data.negatives, n_neg)
    pos, pg = collect_activations(model, pos_x, layer)
    neg, ng = collect_activations(model, neg_x, layer)
    probe = train_probe(pos, neg, epochs=epochs, lr=lr, seed=seed, l2=l2,
                        pos_groups=pg, neg_groups=ng)
    return cav_from_probe(probe, concept=concept, layer=layer)


# ---------------------------------------------------------------------------
# directional derivatives
# ---------------------------------------------------------------------------


def _direction(cav, d):
    v = cav.direction if isinstance(cav, Cav) else np.asarray(cav, dtype=np.float64)
    if v.shape != (d,):
        raise DimensionError(f"CAV has dimension {v.shape}, model width is {d}")
    return v


def directional_derivative(model, x, layer, k, cav):
    """Rate of change of logit ``k`` along ``cav`` at the CLS row of ``hidden[layer]``."""
    layer = _check_layer(model, layer)
    trace = model.forward(x)
    grad = hidden_gradient(trace, layer, k)
    return float(grad[0] @ _direction(cav, model.d_model))


@dataclass(frozen=True, eq=False)
class SensitivityRecord:
    """Attention-weighted per-token directional derivatives of one input."""

    input_id: object
    class_id: int
    layer: int
    values: np.ndarray
    aggregate: float
    attention: np.ndarray


def _sensitivity_parts(model, xs, layer, k):
    """Head-averaged CLS attention of block ``layer`` and the ``hidden[layer]``
    gradient of logit ``k`` for every input, batched by length."""
    att = [None] * len(xs)
    grads = [None] * len(xs)
    for _, idx in model._grouped(xs).items():
        batch = np.stack([model._raw(xs[i]) for i in idx])
        a, _, _, dh, _ = model.logit_gradients(batch, k)
        for j, i in enumerate(idx):
            att[i] = a[j, layer - 1, :, 0, :].mean(axis=0)
            grads[i] = dh[j, layer]
    return att, grads


def token_directional_derivatives(model, x, layer, k, cav, input_id=None):
    """Per-token values ``mean_h A[CLS, i] * (grad_i . v)`` and their mean."""
    layer = _check_layer(model, layer)
    k = model._check_class(k)
    v = _direction(cav, model.d_model)
    x = model.make_input(x)
    (att,), (grad,) = _sensitivity_parts(model, [x], layer, k)
    values = att * (grad @ v)
    return SensitivityRecord(input_id, k, layer, values, float(values.mean()), att)


# ---------------------------------------------------------------------------
# scores and significance
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TcavReport:
    """Fraction of inputs with a strictly positive (aggregated) derivative.

    With several CAVs, ``n_positive`` and ``n_inputs`` are totals over all
    of them, so ``score`` is also the mean of ``per_cav_scores``.
    """

    concept: str
    class_id: int
    layer: int
    variant: str
    n_positive: int
    n_inputs: int
    per_cav_scores: tuple = field(default_factory=tuple)
    p_value: float | None = None
    reject: bool | None = None

    @property
    def score(self):
        return self.n_positive / self.n_inputs

    def to_record(self):
        return {
            "concept": self.concept, "class": self.class_id, "layer": self.layer,
            "variant": self.variant, "score": self.score, "n_positive": self.n_positive,
            "n_inputs": self.n_inputs, "per_cav_scores": list(self.per_cav_scores),
            "p_value": self.p_value, "reject": self.reject,
        }


def sensitivity_matrix(model, X, layer, k, cavs, variant="T-TCAV"):
    """Aggregated derivative of every input (rows) under every CAV (columns)."""
    if variant not in VARIANTS:
        raise InvalidInputError(f"variant must be one of {VARIANTS}")
    layer = _check_layer(model, layer)
    k = model._check_class(k)
    V = np.stack([_direction(c, model.d_model) for c in cavs], axis=1)
    xs = model._as_inputs(X)
    att, grads = _sensitivity_parts(model, xs, layer, k)
    if variant == "TCAV":
        return np.stack([g[0] @ V for g in grads])
    return np.stack([(a[:, None] * (g @ V)).mean(axis=0) for a, g in zip(att, grads)])


def tcav_scores(model, X, layer, k, cav, variant="T-TCAV", filter_correct=False):
    """TCAV (CLS-row derivative) or T-TCAV (attention-weighted token mean)
    score of one CAV or a list of CAVs over the inputs ``X``.

    ``filter_correct`` keeps only inputs the model assigns to class ``k``.
    Exact zeros do not count as positive. Several CAVs also get a
    :func:`significance_test` of their scores.
    """
    cavs = list(cav) if isinstance(cav, (list, tuple)) else [cav]
    if not cavs:
        raise InvalidInputError("no CAVs given")
    X = list(X)
    if filter_correct and X:
        X = [x for x, p in zip(X, model.predict(X)) if p == k]
    if not X:
        raise InvalidInputError("no inputs to score")
    chunks = [X[i:i + 64] for i in range(0, len(X), 64)]
    S = np.concatenate(pmap(lambda c: sensitivity_matrix(model, c, layer, k, cavs, variant),
                            chunks))
    positive = (S > 0).sum(axis=0)
    per_cav = tuple(float(p) / len(X) for p in positive)
    first = cavs[0]
    report = TcavReport(
        concept=first.concept if isinstance(first, Cav) else "",
        class_id=int(k), layer=int(layer), variant=variant,
        n_positive=int(positive.sum()), n_inputs=len(X) * len(cavs),
        per_cav_scores=per_cav,
    )
    if len(cavs) >= 2:
        report.p_value, report.reject = significance_test(per_cav)
    return report


def significance_test(scores, popmean=0.5, alpha=0.05):
    """Two-sided one-sample t-test of ``scores`` against ``popmean``.

    Zero-variance samples have no t statistic; they get p = 1 when their
    mean equals ``popmean`` and p = 0 otherwise.

    Returns
    -------
    p_value : float
    reject : bool
        ``p_value < alpha``.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise InvalidInputError("significance test needs at least two scores")
    if np.ptp(s) == 0.0:
        p = 1.0 if s[0] == popmean else 0.0
    else:
        p = float(stats.ttest_1samp(s, popmean).pvalue)
    return p, bool(p < alpha)
