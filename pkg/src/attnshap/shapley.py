"""Cooperative games over tokens and their Shapley decompositions.

Players are the original (non-special) token positions of one input.
Coalitions are handled as boolean masks over the player list, so every
characteristic function exposes a vectorised ``values(masks)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError
from .tensor import ContributionMatrix, as_matrix
from .transformer import mask_batch

KINDS = (
    "GradAttCLS",
    "GradAttMutual",
    "GradAttMaxMutual",
    "AttCLS",
    "AttMutual",
    "AttMaxMutual",
    "InputMasking",
)
MATRIX_KINDS = KINDS[:6]
DEFAULT_EXACT_LIMIT = 20
_CHUNK = 1 << 15


@dataclass(frozen=True)
class Coalition:
    """A canonical (sorted) set of player positions."""

    members: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(sorted(set(int(m) for m in self.members))))

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


@dataclass(frozen=True, eq=False)
class MaskingPayload:
    """Model, input and class defining an input-masking game."""

    model: object
    x: object
    class_id: int


@dataclass(frozen=True, eq=False)
class CharacteristicSpec:
    """A cooperative game over ``players`` (sequence positions).

    Parameters
    ----------
    kind : str
        One of :data:`KINDS`.
    payload : ContributionMatrix, ndarray or MaskingPayload
        ``GradAtt*`` kinds take a contribution matrix, ``Att*`` kinds the
        layer/head-averaged attention matrix and ``InputMasking`` a
        :class:`MaskingPayload`.
    players : sequence of int
        Original-token positions; defaults to every non-CLS position.
    cls_index : int
        Row of the classification token in the payload matrix.
    ordered_pairs : bool
        Sum pairwise terms over ordered pairs (each unordered pair twice)
        instead of once per unordered pair.
    empty_value : {"zero", "model"}
        For ``InputMasking``: ``"zero"`` pins v(empty) to 0, ``"model"``
        uses the prediction on the fully masked input and subtracts it from
        every coalition (baseline-offset game).
    """

    kind: str
    payload: object
    players: tuple = None
    cls_index: int = 0
    ordered_pairs: bool = False
    empty_value: str = "zero"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown characteristic kind {self.kind!r}")
        if self.kind.startswith("GradAtt"):
            if not isinstance(self.payload, ContributionMatrix):
                raise InvalidInputError(f"{self.kind} needs a ContributionMatrix payload")
            mat = self.payload.matrix
        elif self.kind.startswith("Att"):
            if isinstance(self.payload, (ContributionMatrix, MaskingPayload)):
                raise InvalidInputError(f"{self.kind} needs an averaged attention matrix")
            mat = as_matrix(self.payload, "averaged attention")
        else:
            if not isinstance(self.payload, MaskingPayload):
                raise InvalidInputError("InputMasking needs a MaskingPayload")
            mat = None
        if self.empty_value not in ("zero", "model"):
            raise InvalidInputError("empty_value must be 'zero' or 'model'")

        if mat is not None:
            n = mat.shape[0]
            if mat.shape != (n, n):
                raise InvalidInputError("payload matrix must be square")
            default = [i for i in range(n) if i != self.cls_index]
        else:
            default = self.payload.x.player_indices.tolist()
        players = tuple(int(p) for p in (default if self.players is None else self.players))
        if len(set(players)) != len(players):
            raise InvalidInputError("duplicate players")
        object.__setattr__(self, "players", players)

        if mat is not None:
            idx = np.asarray(players, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= mat.shape[0]):
                raise InvalidInputError("player index outside the payload matrix")
            sub = mat[np.ix_(idx, idx)]
            if self.kind.endswith("MaxMutual"):
                pair = np.maximum(sub, sub.T)
            else:
                pair = sub + sub.T
            np.fill_diagonal(pair, 0.0)
            self._cache.update(
                cls_row=mat[self.cls_index, idx].copy(),
                diag=np.diag(sub).copy(),
                pair=pair * (2.0 if self.ordered_pairs else 1.0),
            )

    @property
    def n_players(self):
        return len(self.players)

    def masks_for(self, coalition):
        """Boolean mask row for a coalition of player positions."""
        pos = {p: i for i, p in enumerate(self.players)}
        members = coalition.members if isinstance(coalition, Coalition) else Coalition(coalition).members
        row = np.zeros(self.n_players, dtype=bool)
        for m in members:
            if m not in pos:
                raise InvalidInputError(f"position {m} is not a player of this game")
            row[pos[m]] = True
        return row

    def values(self, masks):
        """Characteristic values of a boolean ``(n, n_players)`` mask array."""
        masks = np.asarray(masks, dtype=bool)
        if masks.ndim != 2 or masks.shape[1] != self.n_players:
            raise InvalidInputError("masks must have shape (n, n_players)")
        out = np.empty(masks.shape[0])
        for start in range(0, masks.shape[0], _CHUNK):
            chunk = masks[start:start + _CHUNK]
            out[start:start + _CHUNK] = self._values(chunk)
        return out

    def _values(self, masks):
        sizes = masks.sum(axis=1)
        if self.kind == "InputMasking":
            return self._masking_values(masks, sizes)
        c = self._cache
        xf = masks.astype(np.float64)
        if self.kind.endswith("CLS"):
            return xf @ c["cls_row"]
        vals = 0.5 * np.einsum("ni,ni->n", xf @ c["pair"], xf)
        vals[sizes == 0] = 0.0
        single = sizes == 1
        if single.any():
            vals[single] = c["diag"][np.argmax(masks[single], axis=1)]
        return vals

    def _masking_values(self, masks, sizes):
        pl = self.payload
        probs = pl.model.forward_batch(mask_batch(pl.x, masks))[:, pl.class_id]
        if self.empty_value == "zero":
            return np.where(sizes == 0, 0.0, probs)
        return probs - self.base_value()

    def base_value(self):
        """Model output on the fully masked input (``InputMasking`` only)."""
        if self.kind != "InputMasking":
            raise InvalidInputError("base value is defined for InputMasking games only")
        if "base" not in self._cache:
            pl = self.payload
            empty = np.zeros((1, self.n_players), dtype=bool)
            self._cache["base"] = float(
                pl.model.forward_batch(mask_batch(pl.x, empty))[0, pl.class_id]
            )
        return self._cache["base"]


def char_value(spec, coalition):
    """Value of a single coalition (iterable of player positions)."""
    return float(spec.values(spec.masks_for(coalition)[None])[0])


@dataclass(eq=False)
class AttributionResult:
    """Per-player scores with method and sampling metadata."""

    method: str
    scores: np.ndarray
    player_indices: np.ndarray
    class_id: int = 0
    seed: int | None = None
    n_samples: int | None = None
    wall_time: float = 0.0
    base_value: float | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.player_indices = np.asarray(self.player_indices, dtype=np.int64)
        if self.scores.shape != self.player_indices.shape:
            raise InvalidInputError("one score per player is required")
        if not np.all(np.isfinite(self.scores)):
            raise InvalidInputError("attribution scores must be finite")

    def to_record(self):
        """JSON-ready record; wall time is left out so reruns are byte-identical."""
        rec = {
            "method": self.method,
            "class": int(self.class_id),
            "seed": self.seed,
            "n_samples": self.n_samples,
            "scores": [float(s) for s in self.scores],
            "player_indices": [int(p) for p in self.player_indices],
        }
        if self.base_value is not None:
            rec["base_value"] = float(self.base_value)
        return rec

    @classmethod
    def from_record(cls, rec):
        return cls(
            method=rec["method"], scores=rec["scores"],
            player_indices=rec["player_indices"], class_id=rec["class"],
            seed=rec.get("seed"), n_samples=rec.get("n_samples"),
            base_value=rec.get("base_value"),
        )


def _class_of(spec):
    if isinstance(spec.payload, ContributionMatrix):
        return spec.payload.class_id
    if isinstance(spec.payload, MaskingPayload):
        return spec.payload.class_id
    return 0


def shapley_weights(n):
    """Positional weights ``s! (n - s - 1)! / n!`` for ``s = 0 .. n - 1``."""
    return np.array([1.0 / (n * math.comb(n - 1, s)) for s in range(n)])


def _popcount(codes):
    c = codes.copy()
    out = np.zeros_like(c)
    while c.any():
        out += c & 1
        c >>= 1
    return out


def exact_values(game):
    """Values of all ``2**n`` coalitions; bit ``i`` of the index is player ``i``."""
    n = game.n_players
    codes = np.arange(1 << n, dtype=np.int64)
    out = np.empty(codes.size)
    shifts = np.arange(n, dtype=np.int64)
    for start in range(0, codes.size, _CHUNK):
        c = codes[start:start + _CHUNK]
        masks = ((c[:, None] >> shifts) & 1).astype(bool)
        out[start:start + _CHUNK] = game.values(masks)
    return out


def shapley_from_values(values, n):
    """Shapley values from a full table of coalition values."""
    if n == 0:
        return np.zeros(0)
    pc = _popcount(np.arange(1 << n, dtype=np.int64))
    w = shapley_weights(n)
    phi = np.empty(n)
    for i in range(n):
        v3 = values.reshape(-1, 2, 1 << i)
        sizes = pc.reshape(-1, 2, 1 << i)[:, 0, :]
        phi[i] = np.sum(w[sizes] * (v3[:, 1, :] - v3[:, 0, :]))
    return phi


def exact_shapley(spec, max_players=DEFAULT_EXACT_LIMIT, method="exact"):
    """Shapley values by full enumeration of coalitions.

    Refuses games with more than ``max_players`` players; use
    :func:`sampled_shapley` for those.
    """
    n = spec.n_players
    if n > max_players:
        raise InvalidInputError(
            f"{n} players exceed the exact-enumeration limit of {max_players}; "
            "use sampled_shapley with a MonteCarlo or Kernel scheme instead"
        )
    t0 = time.perf_counter()
    phi = shapley_from_values(exact_values(spec), n)
    return AttributionResult(
        method=method, scores=phi, player_indices=np.asarray(spec.players),
        class_id=_class_of(spec), n_samples=1 << n,
        wall_time=time.perf_counter() - t0,
    )


def _matrix_of(m):
    return m.matrix if isinstance(m, ContributionMatrix) else as_matrix(m)


def _default_players(mat, players, cls_index):
    if players is None:
        return np.array([i for i in range(mat.shape[0]) if i != cls_index], dtype=np.int64)
    return np.asarray(players, dtype=np.int64)


def closed_form_cls(M, players=None, cls_index=0, method="closed-form-cls"):
    """Shapley values of the additive CLS game: the CLS row itself."""
    mat = _matrix_of(M)
    players = _default_players(mat, players, cls_index)
    return AttributionResult(
        method=method, scores=mat[cls_index, players].copy(), player_indices=players,
        class_id=getattr(M, "class_id", 0),
    )


def _case3_coefficient(n):
    # sum_{z=2}^{n-1} C(n-2, z-1) z! (n-z-1)! / n!
    return sum(math.comb(n - 2, z - 1) / (n * math.comb(n - 1, z)) for z in range(2, n))


def closed_form_mutual(M, players=None, cls_index=0, ordered_pairs=False,
                       method="closed-form-mutual"):
    """O(n^2) Shapley values of the mutual-interaction game.

    Splits the enumeration into the empty coalition, singletons and larger
    coalitions, each of which has a closed-form contribution.
    """
    mat = _matrix_of(M)
    players = _default_players(mat, players, cls_index)
    n = players.size
    if n < 1:
        raise InvalidInputError("closed-form mutual Shapley needs at least one player")
    sub = mat[np.ix_(players, players)]
    diag = np.diag(sub)
    if n == 1:
        phi = diag.copy()
    else:
        factor = 2.0 if ordered_pairs else 1.0
        sym = factor * (sub + sub.T)
        np.fill_diagonal(sym, 0.0)
        c3 = _case3_coefficient(n)
        pair_sum = sym.sum(axis=1)
        others_diag = diag.sum() - diag
        phi = diag / n + (pair_sum - others_diag) / (n * (n - 1)) + c3 * pair_sum
    return AttributionResult(
        method=method, scores=phi, player_indices=players,
        class_id=getattr(M, "class_id", 0),
    )


def kernel_weight(n, s):
    """Kernel weight of a size-``s`` coalition among ``n`` players.

    Returns ``math.inf`` for the empty and grand coalitions, which samplers
    treat as always included.
    """
    n, s = int(n), int(s)
    if n < 1 or not 0 <= s <= n:
        raise InvalidInputError(f"coalition size {s} out of range for {n} players")
    if s in (0, n):
        return math.inf
    return (n - 1) / (math.comb(n, s) * s * (n - s))


def kernel_size_distribution(n):
    """Probability of each size ``1 .. n - 1`` when coalitions are drawn with
    probability proportional to their kernel weight."""
    sizes = np.arange(1, n)
    mass = np.array([math.comb(n, s) * kernel_weight(n, s) for s in sizes])
    return sizes, mass / mass.sum()


@dataclass(frozen=True)
class SamplingScheme:
    """How coalitions are chosen.

    ``mode`` is ``"Exact"``, ``"MonteCarlo"`` (uniform over all subsets) or
    ``"Kernel"`` (kernel-weighted sizes, members uniform within a size).
    The empty and grand coalitions are added on top of the ``n_samples``
    draws; Kernel mode always does this, MonteCarlo unless ``anchors`` is
    off. With ``dedup`` the sampler returns distinct coalitions only.
    """

    mode: str = "MonteCarlo"
    n_samples: int = 100
    seed: int = 0
    dedup: bool = False
    anchors: bool = True

    def __post_init__(self):
        if self.mode not in ("Exact", "MonteCarlo", "Kernel"):
            raise InvalidInputError(f"unknown sampling mode {self.mode!r}")
        if self.mode != "Exact" and self.n_samples < 1:
            raise InvalidInputError("sampled modes need n_samples >= 1")


def _stream(seed, j):
    return np.random.default_rng([int(seed), int(j)])


def _draw(n, scheme, j, sizes, probs):
    rng = _stream(scheme.seed, j)
    row = np.zeros(n, dtype=bool)
    if scheme.mode == "MonteCarlo":
        row[:] = rng.random(n) < 0.5
    elif sizes.size:
        s = sizes[np.searchsorted(np.cumsum(probs), rng.random(), side="right").clip(max=sizes.size - 1)]
        row[rng.choice(n, size=int(s), replace=False)] = True
    return row


def _all_masks(n):
    codes = np.arange(1 << n, dtype=np.int64)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(bool)


def sample_coalitions(n, scheme):
    """Boolean ``(m, n)`` array of sampled coalitions.

    Sample ``j`` is drawn from its own stream seeded by ``(seed, j)``, so the
    result does not depend on how work is split. The empty and grand
    coalitions are prepended to the ``n_samples`` draws (see
    :class:`SamplingScheme`).
    """
    if scheme.mode == "Exact":
        return _all_masks(n)
    sizes, probs = kernel_size_distribution(n) if scheme.mode == "Kernel" else (None, None)
    forced = []
    if scheme.mode == "Kernel" or scheme.anchors:
        forced = [np.zeros(n, dtype=bool), np.ones(n, dtype=bool)]
    if not scheme.dedup:
        rows = forced + [_draw(n, scheme, j, sizes, probs) for j in range(scheme.n_samples)]
        return np.array(rows, dtype=bool).reshape(-1, n)

    target = scheme.n_samples + len(forced)
    if n <= 20 and target >= (1 << n):
        return _all_masks(n)
    seen = {r.tobytes() for r in forced}
    rows = list(forced)
    j = 0
    # bounded retries: stop when no new coalition appears for many draws
    stale = 0
    while len(rows) < target and stale < 100 * target:
        row = _draw(n, scheme, j, sizes, probs)
        j += 1
        key = row.tobytes()
        if key in seen:
            stale += 1
            continue
        stale = 0
        seen.add(key)
        rows.append(row)
    return np.array(rows, dtype=bool).reshape(-1, n)


def _row_keys(rows):
    n = rows.shape[1]
    if n <= 62:
        return rows.astype(np.int64) @ (np.int64(1) << np.arange(n, dtype=np.int64))
    return np.packbits(rows, axis=1)


def _unique_rows(rows):
    keys = _row_keys(rows)
    if keys.ndim == 1:
        _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    else:
        _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    return rows[first], inverse.reshape(-1)


def _first_occurrences(rows):
    keys = _row_keys(rows)
    if keys.ndim == 1:
        return np.unique(keys, return_index=True)[1]
    return np.unique(keys, axis=0, return_index=True)[1]


def sampled_shapley(spec, scheme, method="sampled"):
    """Shapley values estimated from sampled coalitions.

    Every sampled coalition ``S`` yields, for each player ``i``, the
    marginal contribution of ``i`` to ``S`` without ``i``. The positional
    Shapley weights are renormalised over each player's usable samples one
    coalition size at a time: marginals are averaged within a size, and the
    size averages are then averaged over the sizes that were observed. Both
    samplers draw members uniformly within a size, so this is consistent,
    and it reproduces the exact value once every coalition has been seen.
    """
    if scheme.mode == "Exact":
        return exact_shapley(spec, method=method)
    t0 = time.perf_counter()
    n = spec.n_players
    masks = sample_coalitions(n, scheme)
    m = masks.shape[0]

    without = np.repeat(masks[None], n, axis=0)  # (player, sample, player)
    idx = np.arange(n)
    without[idx, :, idx] = False
    with_i = without.copy()
    with_i[idx, :, idx] = True

    rows = np.concatenate([without.reshape(-1, n), with_i.reshape(-1, n)])
    uniq, inverse = _unique_rows(rows)
    vals = spec.values(uniq)[inverse]
    delta = (vals[n * m:] - vals[: n * m]).reshape(n, m)

    keep = np.ones((n, m))
    if scheme.dedup:
        keep[:] = 0.0
        for i in range(n):
            keep[i, _first_occurrences(without[i])] = 1.0
    bins = (without.sum(axis=2) + idx[:, None] * n).reshape(-1)
    counts = np.bincount(bins, weights=keep.reshape(-1), minlength=n * n).reshape(n, n)
    sums = np.bincount(bins, weights=(keep * delta).reshape(-1), minlength=n * n).reshape(n, n)
    present = counts > 0
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=present)
    phi = means.sum(axis=1) / present.sum(axis=1)
    return AttributionResult(
        method=method, scores=phi, player_indices=np.asarray(spec.players),
        class_id=_class_of(spec), seed=scheme.seed, n_samples=scheme.n_samples,
        wall_time=time.perf_counter() - t0,
    )


def grad_sam_scores(M, players=None, cls_index=0, method="Grad-SAM"):
    """Mean attention-weighted positive gradient received by each token
    (column means of the contribution matrix over all query rows)."""
    mat = _matrix_of(M)
    players = _default_players(mat, players, cls_index)
    return AttributionResult(
        method=method, scores=mat.mean(axis=0)[players], player_indices=players,
        class_id=getattr(M, "class_id", 0),
    )
