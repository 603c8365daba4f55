"""Attention stacks and the aggregate quantities derived from them.

Matrices are plain ``float64`` numpy arrays. The stack classes only add
validation and a few named views; they are never mutated after
construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, InvalidInputError

ROW_SUM_TOL = 1e-9
RENORMALIZE_TOL = 1e-6


def as_matrix(m, name="matrix"):
    """Return ``m`` as a finite 2-D float64 array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def softmax_rows(m):
    """Row-wise softmax, stabilised by subtracting each row's maximum.

    Works on any array with at least one axis; the last axis is normalised.
    """
    arr = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("softmax input contains non-finite entries")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_stack(values, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[2] != arr.shape[3]:
        raise DimensionError(f"{name} must have shape (L, H, N, N), got {arr.shape}")
    if 0 in arr.shape:
        raise DimensionError(f"{name} has an empty axis: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class AttentionStack:
    """Per-layer, per-head row-stochastic attention matrices.

    ``weights`` has shape ``(L, H, N, N)``. Rows deviating from 1 by more
    than ``1e-9`` but at most ``1e-6`` are renormalised; larger deviations
    or negative entries are rejected.
    """

    weights: np.ndarray

    def __post_init__(self):
        arr = _as_stack(self.weights, "attention stack")
        if arr.min() < -ROW_SUM_TOL or arr.max() > 1.0 + ROW_SUM_TOL:
            raise InvalidInputError("attention weights must lie in [0, 1]")
        dev = np.abs(arr.sum(axis=-1) - 1.0).max()
        if dev > RENORMALIZE_TOL:
            raise InvalidInputError(
                f"attention rows are not stochastic (max deviation {dev:.3g})"
            )
        if dev > ROW_SUM_TOL:
            arr = np.clip(arr, 0.0, None)
            arr = arr / arr.sum(axis=-1, keepdims=True)
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "weights", arr)

    @property
    def n_layers(self):
        return self.weights.shape[0]

    @property
    def n_heads(self):
        return self.weights.shape[1]

    @property
    def seq_len(self):
        return self.weights.shape[2]

    @property
    def shape(self):
        return self.weights.shape


@dataclass(frozen=True, eq=False)
class GradientStack:
    """Gradients of one class logit with respect to every attention matrix."""

    grads: np.ndarray
    class_id: int = 0

    def __post_init__(self):
        arr = _as_stack(self.grads, "gradient stack").copy()
        arr.setflags(write=False)
        object.__setattr__(self, "grads", arr)

    @property
    def shape(self):
        return self.grads.shape


@dataclass(frozen=True, eq=False)
class ContributionMatrix:
    """Attention weights gated by positive logit gradients, averaged."""

    class_id: int
    matrix: np.ndarray

    def __post_init__(self):
        arr = as_matrix(self.matrix, "contribution matrix")
        if arr.shape[0] != arr.shape[1]:
            raise DimensionError(f"contribution matrix must be square, got {arr.shape}")
        if arr.min() < 0.0:
            raise InvalidInputError("contribution matrix entries must be non-negative")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "matrix", arr)

    @property
    def seq_len(self):
        return self.matrix.shape[0]


def contribution_matrix(attn, grads, k=None):
    """Mean over layers and heads of ``A * relu(G)`` (element-wise).

    Parameters
    ----------
    attn : AttentionStack
    grads : GradientStack
        Must have the same ``(L, H, N, N)`` shape as ``attn``.
    k : int, optional
        Class label recorded on the result; defaults to ``grads.class_id``.
    """
    if attn.shape != grads.shape:
        raise DimensionError(
            f"attention {attn.shape} and gradient {grads.shape} stacks differ in shape"
        )
    prod = attn.weights * np.maximum(grads.grads, 0.0)
    mat = prod.mean(axis=(0, 1))
    return ContributionMatrix(class_id=grads.class_id if k is None else int(k), matrix=mat)


def average_attention(attn):
    """Element-wise mean of all ``L * H`` attention matrices."""
    return attn.weights.mean(axis=(0, 1))


def raw_attention_importance(attn, i=None):
    """Aggregated raw attention of token ``i``: the sum of row ``i`` over all
    layers and heads divided by ``L * H * N``.

    Every row of a row-stochastic matrix sums to one, so the value is
    ``1 / N`` for any valid stack. Passing ``i=None`` returns the vector for
    all tokens.
    """
    L, H, N, _ = attn.shape
    tau = attn.weights.sum(axis=(0, 1, 3)) / (L * H * N)
    if i is None:
        return tau
    if not 0 <= int(i) < N:
        raise InvalidInputError(f"token index {i} out of range for N={N}")
    return float(tau[int(i)])
