"""A small encoder-only transformer with hand-written reverse mode.

Everything is float64 numpy. The forward pass records every attention
matrix and every hidden state; the backward pass returns the gradient of a
chosen class logit with respect to each attention matrix (taken as a cut
point after the softmax) and each hidden state, plus parameter gradients
when training.

Layer indexing: ``hidden[0]`` is the embedded input and ``hidden[l]`` the
output of block ``l`` (``1 <= l <= L``). ``attention[l - 1]`` holds the
heads of block ``l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidInputError
from .tensor import AttentionStack, GradientStack, softmax_rows

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and initialisation settings of a :class:`ToyTransformer`."""

    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 16
    d_k: int = 8
    d_v: int = 8
    d_ff: int = 32
    vocab_size: int = 16
    max_len: int = 32
    n_classes: int = 2
    norm: str = "post"
    positional: str = "sinusoidal"
    patch_dim: int | None = None
    cls_id: int = 0
    mask_id: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_k", "d_v", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.n_classes < 2:
            raise InvalidInputError("n_classes must be >= 2")
        if self.norm not in ("post", "pre"):
            raise InvalidInputError(f"norm must be 'post' or 'pre', got {self.norm!r}")
        if self.positional not in ("sinusoidal", "learned", "none"):
            raise InvalidInputError(f"unknown positional encoding {self.positional!r}")
        if self.patch_dim is None:
            for name in ("cls_id", "mask_id"):
                if not 0 <= getattr(self, name) < self.vocab_size:
                    raise InvalidInputError(f"{name} outside the vocabulary")


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SequenceInput:
    """One model input: token ids (or image patches) plus special positions.

    ``token_ids`` always includes the classification token at position 0.
    For image inputs ``patches`` holds the ``N - 1`` flattened patches and
    ``token_ids`` is ``None``; position 0 is the learned CLS vector.
    """

    token_ids: np.ndarray | None = None
    patches: np.ndarray | None = None
    special_positions: tuple = (0,)
    mask_id: int = 1

    def __post_init__(self):
        if (self.token_ids is None) == (self.patches is None):
            raise InvalidInputError("exactly one of token_ids / patches is required")
        if self.token_ids is not None:
            ids = np.asarray(self.token_ids, dtype=np.int64).copy()
            if ids.ndim != 1 or ids.size == 0:
                raise InvalidInputError("token_ids must be a non-empty 1-D sequence")
            ids.setflags(write=False)
            object.__setattr__(self, "token_ids", ids)
        else:
            p = np.asarray(self.patches, dtype=np.float64).copy()
            if p.ndim != 2:
                raise InvalidInputError("patches must be 2-D (n_patches, patch_dim)")
            p.setflags(write=False)
            object.__setattr__(self, "patches", p)
        specials = tuple(sorted(set(int(s) for s in self.special_positions)))
        if 0 not in specials:
            raise InvalidInputError("the classification token must sit at position 0")
        if specials[-1] >= len(self):
            raise InvalidInputError("special position beyond sequence end")
        object.__setattr__(self, "special_positions", specials)

    def __len__(self):
        if self.token_ids is not None:
            return int(self.token_ids.size)
        return int(self.patches.shape[0]) + 1

    @property
    def player_indices(self):
        """Positions of the original (non-special) tokens."""
        special = set(self.special_positions)
        return np.array([i for i in range(len(self)) if i not in special], dtype=np.int64)

    @classmethod
    def from_tokens(cls, content_ids, cls_id=0, mask_id=1):
        """Prepend the classification token to ``content_ids``."""
        ids = np.concatenate([[cls_id], np.asarray(content_ids, dtype=np.int64)])
        return cls(token_ids=ids, mask_id=mask_id)

    @classmethod
    def from_patches(cls, patches):
        return cls(patches=patches)


def mask_tokens(x, keep):
    """Replace every original token not in ``keep`` by the mask token.

    Image patches are replaced by zero vectors. Special positions are never
    touched and the length is unchanged.
    """
    keep = set(int(k) for k in keep)
    if keep & set(x.special_positions):
        raise InvalidInputError("keep set contains special positions")
    players = set(x.player_indices.tolist())
    if not keep <= players:
        raise InvalidInputError("keep set contains positions outside the sequence")
    drop = sorted(players - keep)
    if x.token_ids is not None:
        ids = x.token_ids.copy()
        ids[drop] = x.mask_id
        return replace(x, token_ids=ids)
    p = x.patches.copy()
    p[[d - 1 for d in drop]] = 0.0
    return replace(x, patches=p)


def mask_batch(x, keep_masks):
    """Vectorised :func:`mask_tokens` over a boolean ``(n, n_players)`` array.

    Returns the raw batch (token id matrix or patch tensor) ready for
    :meth:`ToyTransformer.forward_batch`.
    """
    keep_masks = np.asarray(keep_masks, dtype=bool)
    players = x.player_indices
    if keep_masks.ndim != 2 or keep_masks.shape[1] != players.size:
        raise InvalidInputError("keep masks must have shape (n, n_players)")
    n = keep_masks.shape[0]
    if x.token_ids is not None:
        ids = np.broadcast_to(x.token_ids, (n, len(x))).copy()
        sub = ids[:, players]
        sub[~keep_masks] = x.mask_id
        ids[:, players] = sub
        return ids
    p = np.broadcast_to(x.patches, (n,) + x.patches.shape).copy()
    cols = p[:, players - 1]
    cols[~keep_masks] = 0.0
    p[:, players - 1] = cols
    return p


# ---------------------------------------------------------------------------
# image patching
# ---------------------------------------------------------------------------


def patchify(img, patch_size):
    """Split an ``(I, W, C)`` image into raster-ordered ``P x P`` patches.

    Returns an array of shape ``(I * W / P**2, P * P * C)``.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise InvalidInputError(f"image must be (I, W, C), got shape {img.shape}")
    h, w, c = img.shape
    p = int(patch_size)
    if p < 1 or h % p or w % p:
        raise InvalidInputError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    grid = img.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return grid.reshape((h // p) * (w // p), p * p * c)


def unpatchify(patches, image_shape, patch_size):
    """Inverse of :func:`patchify`."""
    h, w = image_shape[:2]
    c = image_shape[2] if len(image_shape) == 3 else 1
    p = int(patch_size)
    grid = np.asarray(patches, dtype=np.float64).reshape(h // p, w // p, p, p, c)
    img = grid.transpose(0, 2, 1, 3, 4).reshape(h, w, c)
    return img if len(image_shape) == 3 else img[:, :, 0]


# ---------------------------------------------------------------------------
# numeric building blocks
# ---------------------------------------------------------------------------


def sinusoidal_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / (10000.0 ** (2 * (i // 2) / d))
    pe = np.empty((n, d))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + LN_EPS)
    xhat = (x - mu) / sigma
    return xhat * g + b, (xhat, sigma)


def _ln_backward(dy, g, cache):
    xhat, sigma = cache
    ghat = dy * g
    dx = (ghat - ghat.mean(axis=-1, keepdims=True)
          - xhat * (ghat * xhat).mean(axis=-1, keepdims=True)) / sigma
    return dx, (dy * xhat).sum(axis=(0, 1)), dy.sum(axis=(0, 1))


def _gelu(x):
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


def init_params(cfg):
    """Deterministic parameter initialisation from ``cfg.seed``.

    The returned dict's insertion order is the checkpoint blob order.
    """
    rng = np.random.default_rng(cfg.seed)
    d, H = cfg.d_model, cfg.n_heads

    def dense(fan_in, *shape):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

    params = {}
    if cfg.patch_dim is None:
        params["tok_emb"] = rng.normal(0.0, 1.0, size=(cfg.vocab_size, d))
    else:
        params["patch_w"] = dense(cfg.patch_dim, cfg.patch_dim, d)
        params["patch_b"] = np.zeros(d)
        params["cls_emb"] = rng.normal(0.0, 1.0, size=d)
    if cfg.positional == "learned":
        params["pos_emb"] = rng.normal(0.0, 0.1, size=(cfg.max_len, d))
    for l in range(cfg.n_layers):
        params[f"l{l}.wq"] = dense(d, H, d, cfg.d_k)
        params[f"l{l}.wk"] = dense(d, H, d, cfg.d_k)
        params[f"l{l}.wv"] = dense(d, H, d, cfg.d_v)
        params[f"l{l}.wo"] = dense(H * cfg.d_v, H * cfg.d_v, d)
        params[f"l{l}.bo"] = np.zeros(d)
        params[f"l{l}.ln1_g"] = np.ones(d)
        params[f"l{l}.ln1_b"] = np.zeros(d)
        params[f"l{l}.w1"] = dense(d, d, cfg.d_ff)
        params[f"l{l}.b1"] = np.zeros(cfg.d_ff)
        params[f"l{l}.w2"] = dense(cfg.d_ff, cfg.d_ff, d)
        params[f"l{l}.b2"] = np.zeros(d)
        params[f"l{l}.ln2_g"] = np.ones(d)
        params[f"l{l}.ln2_b"] = np.zeros(d)
    params["head_w"] = rng.normal(0.0, 0.02, size=(d, cfg.n_classes))
    params["head_b"] = np.zeros(cfg.n_classes)
    return params


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ForwardTrace:
    """Record of a single-input forward pass.

    ``hidden`` has shape ``(L + 1, N, d)``; ``attention`` wraps the
    ``(L, H, N, N)`` weights.
    """

    hidden: np.ndarray
    attention: AttentionStack
    logits: np.ndarray
    probs: np.ndarray
    x: SequenceInput | None = None
    _model: "ToyTransformer | None" = field(default=None, repr=False)
    _cache: dict | None = field(default=None, repr=False)

    @property
    def seq_len(self):
        return self.hidden.shape[1]


@dataclass(eq=False)
class _BatchRun:
    hidden: list
    attention: list
    logits: np.ndarray
    layers: list
    embed_input: np.ndarray
    start: int


class ToyTransformer(ClassifierMixin, BaseEstimator):
    """Encoder-only transformer classifier on a CLS token.

    Hyperparameters mirror :class:`ModelConfig` plus the training settings.
    ``fit`` trains from a fresh seeded initialisation; ``initialize`` only
    sets up the random parameters (useful for gradient checks).

    ``X`` passed to ``fit``/``predict`` may be a list of
    :class:`SequenceInput` objects or of content-token sequences (the
    classification token is prepended automatically).
    """

    def __init__(self, n_layers=2, n_heads=2, d_model=16, d_k=8, d_v=8, d_ff=32,
                 vocab_size=16, max_len=32, n_classes=2, norm="post",
                 positional="sinusoidal", patch_dim=None, cls_id=0, mask_id=1,
                 epochs=30, lr=0.01, batch_size=32, seed=0):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_k = d_k
        self.d_v = d_v
        self.d_ff = d_ff
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.n_classes = n_classes
        self.norm = norm
        self.positional = positional
        self.patch_dim = patch_dim
        self.cls_id = cls_id
        self.mask_id = mask_id
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    # -- configuration ------------------------------------------------------

    @property
    def config(self):
        return ModelConfig(
            n_layers=self.n_layers, n_heads=self.n_heads, d_model=self.d_model,
            d_k=self.d_k, d_v=self.d_v, d_ff=self.d_ff, vocab_size=self.vocab_size,
            max_len=self.max_len, n_classes=self.n_classes, norm=self.norm,
            positional=self.positional, patch_dim=self.patch_dim, cls_id=self.cls_id,
            mask_id=self.mask_id, seed=self.seed,
        )

    @classmethod
    def from_config(cls, cfg, **train_kwargs):
        return cls(
            n_layers=cfg.n_layers, n_heads=cfg.n_heads, d_model=cfg.d_model,
            d_k=cfg.d_k, d_v=cfg.d_v, d_ff=cfg.d_ff, vocab_size=cfg.vocab_size,
            max_len=cfg.max_len, n_classes=cfg.n_classes, norm=cfg.norm,
            positional=cfg.positional, patch_dim=cfg.patch_dim, cls_id=cfg.cls_id,
            mask_id=cfg.mask_id, seed=cfg.seed, **train_kwargs,
        )

    def initialize(self):
        """Set fresh seeded parameters without training."""
        cfg = self.config
        self.params_ = init_params(cfg)
        self.classes_ = np.arange(cfg.n_classes)
        self.loss_history_ = []
        return self

    def _check_ready(self):
        check_is_fitted(self, "params_")

    # -- input handling -----------------------------------------------------

    def make_input(self, x):
        """Coerce ``x`` into a :class:`SequenceInput` for this model."""
        if isinstance(x, SequenceInput):
            return x
        if self.patch_dim is not None:
            return SequenceInput.from_patches(x)
        return SequenceInput.from_tokens(x, cls_id=self.cls_id, mask_id=self.mask_id)

    def _raw(self, x):
        return x.token_ids if x.token_ids is not None else x.patches

    def _check_batch(self, batch):
        batch = np.asarray(batch)
        if self.patch_dim is None:
            if batch.ndim != 2:
                raise InvalidInputError("token batch must be 2-D (B, N)")
            if batch.min() < 0 or batch.max() >= self.vocab_size:
                raise InvalidInputError(
                    f"token id outside vocabulary [0, {self.vocab_size})"
                )
            n = batch.shape[1]
        else:
            if batch.ndim != 3 or batch.shape[2] != self.patch_dim:
                raise InvalidInputError("patch batch must be (B, n_patches, patch_dim)")
            n = batch.shape[1] + 1
        if n > self.max_len:
            raise InvalidInputError(f"sequence length {n} exceeds max_len={self.max_len}")
        return batch

    # -- forward ------------------------------------------------------------

    def _embed(self, batch):
        p = self.params_
        if self.patch_dim is None:
            z = p["tok_emb"][batch]
        else:
            b = batch.shape[0]
            body = batch @ p["patch_w"] + p["patch_b"]
            cls = np.broadcast_to(p["cls_emb"], (b, 1, self.d_model))
            z = np.concatenate([cls, body], axis=1)
        n = z.shape[1]
        if self.positional == "sinusoidal":
            z = z + sinusoidal_positions(n, self.d_model)
        elif self.positional == "learned":
            z = z + p["pos_emb"][:n]
        return z

    def _attention(self, l, x, override):
        p = self.params_
        q = x[:, None] @ p[f"l{l}.wq"]
        k = x[:, None] @ p[f"l{l}.wk"]
        v = x[:, None] @ p[f"l{l}.wv"]
        a = softmax_rows(q @ k.transpose(0, 1, 3, 2) / math.sqrt(self.d_k))
        if override:
            a = a.copy()
            for h, mat in override.items():
                a[:, h] = mat
        o = a @ v
        b, H, n, dv = o.shape
        oc = o.transpose(0, 2, 1, 3).reshape(b, n, H * dv)
        out = oc @ p[f"l{l}.wo"] + p[f"l{l}.bo"]
        return out, dict(x=x, q=q, k=k, v=v, a=a, oc=oc)

    def _ffn(self, l, y):
        p = self.params_
        h1 = y @ p[f"l{l}.w1"] + p[f"l{l}.b1"]
        g, t = _gelu(h1)
        return g @ p[f"l{l}.w2"] + p[f"l{l}.b2"], dict(y=y, h1=h1, g=g, t=t)

    def _block(self, l, z, override):
        p = self.params_
        if self.norm == "post":
            att, ac = self._attention(l, z, override)
            y, ln1 = _ln_forward(z + att, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
            f, fc = self._ffn(l, y)
            out, ln2 = _ln_forward(y + f, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
        else:
            xn, ln1 = _ln_forward(z, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
            att, ac = self._attention(l, xn, override)
            y = z + att
            yn, ln2 = _ln_forward(y, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
            f, fc = self._ffn(l, yn)
            out = y + f
        return out, dict(att=ac, ffn=fc, ln1=ln1, ln2=ln2)

    def _run(self, batch=None, attn_override=None, start_layer=0, start_hidden=None):
        """Forward pass over a batch.

        ``attn_override`` maps ``(block, head)`` to a replacement attention
        matrix; ``start_hidden`` resumes the pass from ``hidden[start_layer]``.
        """
        attn_override = attn_override or {}
        if start_hidden is None:
            batch = self._check_batch(batch)
            z = self._embed(batch)
            start_layer = 0
        else:
            z = np.asarray(start_hidden, dtype=np.float64)
            if z.ndim == 2:
                z = z[None]
        hidden, attention, layers = [z], [], []
        for l in range(start_layer, self.n_layers):
            override = {h: m for (ll, h), m in attn_override.items() if ll == l}
            z, cache = self._block(l, z, override)
            hidden.append(z)
            attention.append(cache["att"]["a"])
            layers.append(cache)
        logits = z[:, 0] @ self.params_["head_w"] + self.params_["head_b"]
        return _BatchRun(hidden=hidden, attention=attention, logits=logits,
                         layers=layers, embed_input=batch, start=start_layer)

    def forward_batch(self, batch):
        """Class probabilities for a raw batch (token ids ``(B, N)`` or
        patches ``(B, n_patches, patch_dim)``)."""
        self._check_ready()
        return softmax_rows(self._run(batch).logits)

    def forward(self, x):
        """Full forward trace of a single input."""
        self._check_ready()
        x = self.make_input(x)
        run = self._run(self._raw(x)[None])
        logits = run.logits[0]
        return ForwardTrace(
            hidden=np.stack([h[0] for h in run.hidden]),
            attention=AttentionStack(np.stack([a[0] for a in run.attention])),
            logits=logits,
            probs=softmax_rows(logits),
            x=x,
            _model=self,
            _cache=run,
        )

    # -- backward -----------------------------------------------------------

    def _backward(self, run, dlogits, param_grads=False):
        """Reverse pass from ``dlogits`` (B, C).

        Returns ``(d_attention, d_hidden, grads)`` where ``d_attention[i]``
        has shape (B, H, N, N) for block ``run.start + i`` and
        ``d_hidden[j]`` is the gradient w.r.t. ``run.hidden[j]``.
        """
        p = self.params_
        grads = {} if param_grads else None
        z_last = run.hidden[-1]
        dz = np.zeros_like(z_last)
        dz[:, 0] = dlogits @ p["head_w"].T
        if param_grads:
            grads["head_w"] = z_last[:, 0].T @ dlogits
            grads["head_b"] = dlogits.sum(axis=0)
        d_hidden = [None] * len(run.hidden)
        d_hidden[-1] = dz
        d_attention = [None] * len(run.layers)
        for i in range(len(run.layers) - 1, -1, -1):
            l = run.start + i
            dz, d_a = self._block_backward(l, run.layers[i], dz, grads)
            d_attention[i] = d_a
            d_hidden[i] = dz
        if param_grads and run.start == 0:
            self._embed_backward(run.embed_input, dz, grads)
        return d_attention, d_hidden, grads

    def _ffn_backward(self, l, fc, df, grads):
        p = self.params_
        dg = df @ p[f"l{l}.w2"].T
        dh1 = dg * _gelu_grad(fc["h1"], fc["t"])
        if grads is not None:
            grads[f"l{l}.w2"] = np.einsum("bnf,bnd->fd", fc["g"], df, optimize=True)
            grads[f"l{l}.b2"] = df.sum(axis=(0, 1))
            grads[f"l{l}.w1"] = np.einsum("bnd,bnf->df", fc["y"], dh1, optimize=True)
            grads[f"l{l}.b1"] = dh1.sum(axis=(0, 1))
        return dh1 @ p[f"l{l}.w1"].T

    def _attention_backward(self, l, ac, dout, grads):
        p = self.params_
        b, n, _ = dout.shape
        H, dv = self.n_heads, self.d_v
        doc = dout @ p[f"l{l}.wo"].T
        do = doc.reshape(b, n, H, dv).transpose(0, 2, 1, 3)
        a, q, k, v = ac["a"], ac["q"], ac["k"], ac["v"]
        da = do @ v.transpose(0, 1, 3, 2)
        dv_ = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / math.sqrt(self.d_k)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        x = ac["x"]
        if grads is not None:
            grads[f"l{l}.wo"] = np.einsum("bnj,bnd->jd", ac["oc"], dout, optimize=True)
            grads[f"l{l}.bo"] = dout.sum(axis=(0, 1))
            grads[f"l{l}.wq"] = np.einsum("bnd,bhnk->hdk", x, dq, optimize=True)
            grads[f"l{l}.wk"] = np.einsum("bnd,bhnk->hdk", x, dk, optimize=True)
            grads[f"l{l}.wv"] = np.einsum("bnd,bhnk->hdk", x, dv_, optimize=True)
        dx = (np.einsum("bhnk,hdk->bnd", dq, p[f"l{l}.wq"], optimize=True)
              + np.einsum("bhnk,hdk->bnd", dk, p[f"l{l}.wk"], optimize=True)
              + np.einsum("bhnk,hdk->bnd", dv_, p[f"l{l}.wv"], optimize=True))
        return dx, da

    def _block_backward(self, l, cache, dout, grads):
        p = self.params_
        if self.norm == "post":
            dr2, dg2, db2 = _ln_backward(dout, p[f"l{l}.ln2_g"], cache["ln2"])
            dy = dr2 + self._ffn_backward(l, cache["ffn"], dr2, grads)
            dr1, dg1, db1 = _ln_backward(dy, p[f"l{l}.ln1_g"], cache["ln1"])
            dx, da = self._attention_backward(l, cache["att"], dr1, grads)
            dz = dr1 + dx
        else:
            dyn = self._ffn_backward(l, cache["ffn"], dout, grads)
            dy_ln, dg2, db2 = _ln_backward(dyn, p[f"l{l}.ln2_g"], cache["ln2"])
            dy = dout + dy_ln
            dxn, da = self._attention_backward(l, cache["att"], dy, grads)
            dz_ln, dg1, db1 = _ln_backward(dxn, p[f"l{l}.ln1_g"], cache["ln1"])
            dz = dy + dz_ln
        if grads is not None:
            grads[f"l{l}.ln1_g"], grads[f"l{l}.ln1_b"] = dg1, db1
            grads[f"l{l}.ln2_g"], grads[f"l{l}.ln2_b"] = dg2, db2
        return dz, da

    def _embed_backward(self, batch, dz0, grads):
        p = self.params_
        if self.patch_dim is None:
            g = np.zeros_like(p["tok_emb"])
            np.add.at(g, batch, dz0)
            grads["tok_emb"] = g
        else:
            grads["patch_w"] = np.einsum("bnp,bnd->pd", batch, dz0[:, 1:], optimize=True)
            grads["patch_b"] = dz0[:, 1:].sum(axis=(0, 1))
            grads["cls_emb"] = dz0[:, 0].sum(axis=0)
        if self.positional == "learned":
            g = np.zeros_like(p["pos_emb"])
            g[: dz0.shape[1]] = dz0.sum(axis=0)
            grads["pos_emb"] = g

    def _check_class(self, k):
        if not 0 <= int(k) < self.n_classes:
            raise InvalidInputError(f"class {k} outside [0, {self.n_classes})")
        return int(k)

    def logit_gradients(self, batch, k):
        """Batched gradients of logit ``k``.

        Returns ``(attention, d_attention, hidden, d_hidden, probs)`` with
        shapes ``(B, L, H, N, N)`` twice, ``(B, L + 1, N, d)`` twice and
        ``(B, C)``.
        """
        self._check_ready()
        k = self._check_class(k)
        run = self._run(batch)
        dlogits = np.zeros_like(run.logits)
        dlogits[:, k] = 1.0
        d_att, d_hid, _ = self._backward(run, dlogits)
        return (np.stack(run.attention, axis=1), np.stack(d_att, axis=1),
                np.stack(run.hidden, axis=1), np.stack(d_hid, axis=1),
                softmax_rows(run.logits))

    # -- training -----------------------------------------------------------

    def loss_and_grads(self, batch, y):
        """Mean cross-entropy over a batch and its parameter gradients."""
        run = self._run(batch)
        probs = softmax_rows(run.logits)
        y = np.asarray(y, dtype=np.int64)
        b = probs.shape[0]
        loss = -np.mean(np.log(np.clip(probs[np.arange(b), y], 1e-300, None)))
        dlogits = probs.copy()
        dlogits[np.arange(b), y] -= 1.0
        dlogits /= b
        _, _, grads = self._backward(run, dlogits, param_grads=True)
        return float(loss), grads

    def _as_inputs(self, X):
        return [self.make_input(x) for x in X]

    def _grouped(self, inputs):
        groups = {}
        for i, x in enumerate(inputs):
            groups.setdefault(len(x), []).append(i)
        return groups

    def fit(self, X, y):
        """Train with Adam on mean cross-entropy from a seeded initialisation."""
        inputs = self._as_inputs(X)
        y = np.asarray(y, dtype=np.int64)
        if len(inputs) == 0:
            raise InvalidInputError("cannot train on an empty dataset")
        if y.shape != (len(inputs),):
            raise InvalidInputError("labels must be a 1-D array matching X")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise InvalidInputError("label outside [0, n_classes)")
        self.initialize()
        train(self, inputs, y, epochs=self.epochs, lr=self.lr,
              batch_size=self.batch_size, seed=self.seed)
        return self

    # -- prediction ---------------------------------------------------------

    def predict_proba(self, X):
        self._check_ready()
        inputs = self._as_inputs(X)
        out = np.empty((len(inputs), self.n_classes))
        for n, idx in self._grouped(inputs).items():
            batch = np.stack([self._raw(inputs[i]) for i in idx])
            out[idx] = self.forward_batch(batch)
        return out

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def __sklearn_is_fitted__(self):
        return hasattr(self, "params_")


def predict(model, x):
    """Class probabilities and argmax label of one input."""
    probs = model.forward(x).probs
    return probs, int(np.argmax(probs))


def attention_gradients(trace, k):
    """Exact gradients of logit ``k`` w.r.t. every attention matrix of ``trace``.

    The attention matrix is a cut point: its entries are perturbed with the
    softmax inputs held fixed, while everything downstream is recomputed.
    """
    model = trace._model
    k = model._check_class(k)
    run = trace._cache
    dlogits = np.zeros_like(run.logits)
    dlogits[:, k] = 1.0
    d_att, _, _ = model._backward(run, dlogits)
    return GradientStack(np.stack([g[0] for g in d_att]), class_id=k)


def hidden_gradient(trace, layer, k):
    """Gradient of logit ``k`` w.r.t. ``hidden[layer]``, shape ``(N, d)``."""
    model = trace._model
    k = model._check_class(k)
    if not 1 <= int(layer) <= model.n_layers:
        raise InvalidInputError(f"layer {layer} outside [1, {model.n_layers}]")
    run = trace._cache
    dlogits = np.zeros_like(run.logits)
    dlogits[:, k] = 1.0
    _, d_hid, _ = model._backward(run, dlogits)
    return d_hid[int(layer)][0]


def logits_with_attention(model, x, overrides):
    """Logits of ``x`` with selected attention matrices replaced.

    ``overrides`` maps ``(block, head)`` (0-based) to an ``(N, N)`` matrix.
    Used as the finite-difference oracle for :func:`attention_gradients`.
    """
    x = model.make_input(x)
    return model._run(model._raw(x)[None], attn_override=overrides).logits[0]


def logits_from_hidden(model, layer, z):
    """Logits obtained by resuming the forward pass from ``hidden[layer] = z``."""
    return model._run(start_layer=int(layer), start_hidden=z).logits[0]


def train(model, X, y, epochs=30, lr=0.01, batch_size=32, seed=0,
          betas=(0.9, 0.999), eps=1e-8):
    """Adam on mean cross-entropy; mutates and returns ``model``.

    Batches are drawn from groups of equal-length inputs in a seeded order,
    so identical seeds give bit-identical parameters. ``model.loss_history_``
    receives the mean training loss of each epoch.
    """
    model._check_ready()
    inputs = model._as_inputs(X)
    y = np.asarray(y, dtype=np.int64)
    if len(inputs) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    m = {k: np.zeros_like(v) for k, v in model.params_.items()}
    s = {k: np.zeros_like(v) for k, v in model.params_.items()}
    step = 0
    groups = model._grouped(inputs)
    raw = {n: np.stack([model._raw(inputs[i]) for i in idx]) for n, idx in groups.items()}
    labels = {n: y[idx] for n, idx in groups.items()}
    history = list(getattr(model, "loss_history_", []))
    for _ in range(epochs):
        batches = []
        for n in sorted(groups):
            order = rng.permutation(len(groups[n]))
            for start in range(0, len(order), batch_size):
                batches.append((n, order[start:start + batch_size]))
        total, count = 0.0, 0
        for j in rng.permutation(len(batches)):
            n, sel = batches[j]
            loss, grads = model.loss_and_grads(raw[n][sel], labels[n][sel])
            total += loss * len(sel)
            count += len(sel)
            step += 1
            for name, g in grads.items():
                m[name] = betas[0] * m[name] + (1 - betas[0]) * g
                s[name] = betas[1] * s[name] + (1 - betas[1]) * g * g
                mhat = m[name] / (1 - betas[0] ** step)
                shat = s[name] / (1 - betas[1] ** step)
                model.params_[name] = model.params_[name] - lr * mhat / (np.sqrt(shat) + eps)
        history.append(total / count)
    model.loss_history_ = history
    return model
