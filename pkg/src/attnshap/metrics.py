"""Faithfulness metrics for token attributions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from sklearn.metrics import f1_score

from .attribution import METHODS, attribute
from .exceptions import AttnShapError, InvalidInputError
from .parallel import pmap
from .shapley import AttributionResult, SamplingScheme
from .transformer import mask_batch

DEFAULT_B = 20
DEFAULT_BINS = (0, 10, 20, 50)
Z_95 = 1.96


@dataclass(frozen=True)
class MetricConfig:
    """Percent ``b`` for the reduced-input F1 and percents ``B`` for
    comprehensiveness and sufficiency.

    ``reference`` picks what reduced predictions are compared to in F1:
    the model's predictions on the full inputs or the gold labels.
    """

    b: float = DEFAULT_B
    B: tuple = DEFAULT_BINS
    reference: str = "prediction"

    def __post_init__(self):
        object.__setattr__(self, "B", tuple(self.B))
        for p in (self.b,) + self.B:
            if not 0 <= p <= 100:
                raise InvalidInputError(f"percent {p} outside [0, 100]")
        if not self.B:
            raise InvalidInputError("B must not be empty")
        if self.reference not in ("prediction", "label"):
            raise InvalidInputError("reference must be 'prediction' or 'label'")


def _scores(scores):
    if isinstance(scores, AttributionResult):
        scores = scores.scores
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise InvalidInputError("scores must be a vector")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("scores must be finite")
    return s


def n_top(b, n):
    """``round(b / 100 * n)`` with halves rounded up, in exact arithmetic."""
    if not 0 <= b <= 100:
        raise InvalidInputError(f"percent {b} outside [0, 100]")
    return math.floor(Fraction(b) * n / 100 + Fraction(1, 2))


def top_b_tokens(scores, b):
    """Indices (into ``scores``) of the top-``b``% entries.

    Higher scores come first and ties go to the lower index. The result is
    sorted ascending.
    """
    s = _scores(scores)
    k = n_top(b, s.size)
    order = np.lexsort((np.arange(s.size), -s))
    return np.sort(order[:k])


def _keep_masks(s, B, remove):
    masks = []
    for b in B:
        m = np.zeros(s.size, dtype=bool)
        m[top_b_tokens(s, b)] = True
        masks.append(~m if remove else m)
    return np.array(masks).reshape(len(B), s.size)


def _metric(model, x, scores, B, k, remove):
    B = tuple(B)
    if not B:
        raise InvalidInputError("B must not be empty")
    x = model.make_input(x)
    s = _scores(scores)
    if s.size != x.player_indices.size:
        raise InvalidInputError("one score per original token is required")
    full = model.forward_batch(model._raw(x)[None])[0]
    if k is None:
        k = int(np.argmax(full))
    k = model._check_class(k)
    masks = _keep_masks(s, B, remove)
    terms = np.zeros(len(B))
    # a term that keeps every token is exactly zero; skip the forward pass
    todo = ~masks.all(axis=1)
    if todo.any():
        probs = model.forward_batch(mask_batch(x, masks[todo]))
        terms[todo] = full[k] - probs[:, k]
    return float(terms.sum() / (len(B) + 1))


def comprehensiveness(model, x, scores, B=DEFAULT_BINS, k=None):
    """Mean drop of ``f_k`` when the top-b% tokens are masked, for b in ``B``.

    The sum over ``B`` is divided by ``|B| + 1``. ``f_k`` is the softmax
    probability and ``k`` defaults to the prediction on the full input.
    """
    return _metric(model, x, scores, B, k, remove=True)


def sufficiency(model, x, scores, B=DEFAULT_BINS, k=None):
    """Mean drop of ``f_k`` when only the top-b% tokens are kept."""
    return _metric(model, x, scores, B, k, remove=False)


def f1_weighted(model, dataset, scores, b=DEFAULT_B, labels=None):
    """Support-weighted F1 of predictions on top-``b``% reduced inputs.

    Parameters
    ----------
    model : ToyTransformer
    dataset : list of inputs
    scores : list of score vectors or AttributionResults, one per input
    b : float
    labels : array-like, optional
        Gold labels to compare against; by default the predictions on the
        full inputs are the reference.
    """
    xs = [model.make_input(x) for x in dataset]
    if not xs:
        raise InvalidInputError("empty dataset")
    if len(scores) != len(xs):
        raise InvalidInputError("one attribution per input is required")
    ref = model.predict(xs) if labels is None else np.asarray(labels, dtype=np.int64)
    reduced = np.empty(len(xs), dtype=np.int64)
    for i, (x, s) in enumerate(zip(xs, scores)):
        s = _scores(s)
        keep = np.zeros((1, s.size), dtype=bool)
        keep[0, top_b_tokens(s, b)] = True
        reduced[i] = int(np.argmax(model.forward_batch(mask_batch(x, keep))[0]))
    return float(f1_score(ref, reduced, average="weighted", zero_division=0))


def mean_ci(values):
    """Mean and the 95% normal-approximation half-width ``1.96 * SE``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    se = v.std(ddof=1) / math.sqrt(v.size) if v.size > 1 else 0.0
    return float(v.mean()), float(Z_95 * se)


@dataclass
class MetricReport:
    """One row of the cross-method evaluation table."""

    method: str
    dataset: str
    f1: float
    comp: float
    comp_ci: float
    suff: float
    suff_ci: float
    n: int
    error: str | None = field(default=None)

    def to_record(self):
        return asdict(self)


def evaluate_method(model, dataset, method, config=None, scheme=None, labels=None,
                    dataset_id=""):
    """Metrics of one method over ``dataset`` (see :func:`evaluate_suite`)."""
    config = config or MetricConfig()
    scheme = scheme or SamplingScheme(n_samples=100)
    xs = [model.make_input(x) for x in dataset]
    if not xs:
        raise InvalidInputError("empty dataset")
    try:
        results = pmap(lambda x: attribute(method, model, x, scheme=scheme), xs)
        comp = [comprehensiveness(model, x, r, config.B, r.class_id) for x, r in zip(xs, results)]
        suff = [sufficiency(model, x, r, config.B, r.class_id) for x, r in zip(xs, results)]
        ref = labels if config.reference == "label" else None
        if config.reference == "label" and labels is None:
            raise InvalidInputError("gold-label F1 needs labels")
        f1 = f1_weighted(model, xs, results, config.b, labels=ref)
    except (AttnShapError, ArithmeticError) as exc:
        nan = float("nan")
        return MetricReport(method, dataset_id, nan, nan, nan, nan, nan, len(xs),
                            error=f"{type(exc).__name__}: {exc}")
    c, c_ci = mean_ci(comp)
    s, s_ci = mean_ci(suff)
    return MetricReport(method, dataset_id, f1, c, c_ci, s, s_ci, len(xs))


def evaluate_suite(model, dataset, methods=METHODS, config=None, seed=0, n_samples=100,
                   labels=None, dataset_id=""):
    """One :class:`MetricReport` per method, in the order given.

    A method that fails on any sample gets a row of NaNs carrying the
    error message; the other methods are unaffected.
    """
    for m in methods:
        if m not in METHODS:
            raise InvalidInputError(f"unknown method {m!r}")
    scheme = SamplingScheme(n_samples=n_samples, seed=seed)
    return [evaluate_method(model, dataset, m, config, scheme, labels, dataset_id)
            for m in methods]
