"""Toy differentiable text encoder with a pseudo-word slot, and visual anchors.

The text side maps a template such as ``a photo of a [z]`` to a unit vector in
the joint embedding space: token embeddings are gathered, the slot is filled
with the continuous vector ``z``, the sequence is mean-pooled and the pooled
vector goes through one of three heads before L2 normalization:

``mean_pool_identity``
    no projection; requires ``d_e == d_tok``. The encoder is analytically
    invertible up to scale, so optima are known in closed form.
``mean_pool_projected``
    a fixed linear map ``W_t`` of shape ``(d_e, d_tok)``.
``one_hidden_mlp``
    ``W_t h + W_2 tanh(W_1 h)``; a residual tanh layer that makes the
    alignment landscape non-convex.

The visual side builds a unit-norm anchor from patch features, either as the
normalized mean (raw) or purified by one step of scaled dot-product attention
with the mean patch as query.
"""

from dataclasses import dataclass, field

import numpy as np

from .numeric import (
    EPS_NORM,
    DimMismatchError,
    ZeroVectorError,
    check_matrix,
    check_vector,
    cosine_sim,
    l2_normalize,
    make_rng,
    random_orthogonal,
    scaled_dot_attention,
)

MODES = ("mean_pool_identity", "mean_pool_projected", "one_hidden_mlp")

SLOT = "[z]"


@dataclass(frozen=True, eq=False)
class VocabularyTable:
    """Known word embeddings ``E(V)``, one row per token."""

    embeddings: np.ndarray
    token_names: tuple

    def __post_init__(self):
        emb = check_matrix(self.embeddings, "embeddings")
        names = tuple(str(n) for n in self.token_names)
        if emb.shape[0] < 2:
            raise ValueError("vocabulary needs at least two tokens")
        if len(names) != emb.shape[0]:
            raise DimMismatchError(f"{len(names)} names for {emb.shape[0]} embeddings")
        if len(set(names)) != len(names):
            raise ValueError("token names must be unique")
        emb = emb.copy()
        emb.flags.writeable = False
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "token_names", names)

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def index(self, name):
        try:
            return self.token_names.index(name)
        except ValueError:
            raise KeyError(f"unknown token {name!r}") from None

    def to_dict(self):
        return {"token_names": list(self.token_names), "embeddings": self.embeddings.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["embeddings"], dtype=np.float64), tuple(d["token_names"]))


@dataclass(frozen=True)
class Template:
    """Token-id sequence with exactly one pseudo-word slot.

    ``token_ids[slot_position]`` is ignored; every other entry indexes the
    vocabulary.
    """

    token_ids: tuple
    slot_position: int

    def __post_init__(self):
        ids = tuple(int(i) for i in self.token_ids)
        if len(ids) < 1:
            raise ValueError("template must contain at least the slot")
        if not 0 <= self.slot_position < len(ids):
            raise ValueError(f"slot position {self.slot_position} outside template of length {len(ids)}")
        object.__setattr__(self, "token_ids", ids)

    @classmethod
    def slot_only(cls):
        return cls((-1,), 0)

    @classmethod
    def from_words(cls, words, vocab):
        """Build from a word list, e.g. ``["a", "photo", "of", "a", "[z]"]``."""
        words = list(words)
        if words.count(SLOT) != 1:
            raise ValueError(f"template must contain exactly one {SLOT} slot")
        slot = words.index(SLOT)
        ids = [-1 if w == SLOT else vocab.index(w) for w in words]
        return cls(tuple(ids), slot)

    def __len__(self):
        return len(self.token_ids)

    @property
    def context_ids(self):
        return tuple(t for i, t in enumerate(self.token_ids) if i != self.slot_position)

    def validate(self, vocab):
        for t in self.context_ids:
            if not 0 <= t < len(vocab):
                raise ValueError(f"template token id {t} outside vocabulary of size {len(vocab)}")

    def context_sum(self, vocab):
        self.validate(vocab)
        ctx = np.zeros(vocab.dim)
        for t in self.context_ids:
            ctx += vocab.embeddings[t]
        return ctx

    def words(self, vocab):
        return [SLOT if i == self.slot_position else vocab.token_names[t]
                for i, t in enumerate(self.token_ids)]

    def to_dict(self):
        return {"token_ids": list(self.token_ids), "slot_position": self.slot_position}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["token_ids"]), int(d["slot_position"]))


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TextEncoderParams:
    """Frozen parameters of the toy text encoder.

    ``projection`` has shape ``(d_e, d_tok)``. In ``one_hidden_mlp`` mode
    ``hidden`` holds ``(W_1, W_2)`` with shapes ``(d_h, d_tok)`` and
    ``(d_e, d_h)``.
    """

    projection: np.ndarray
    mode: str = "mean_pool_identity"
    hidden: tuple = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown encoder mode {self.mode!r}; expected one of {MODES}")
        proj = check_matrix(self.projection, "projection")
        if self.mode == "mean_pool_identity":
            if proj.shape[0] != proj.shape[1] or not np.array_equal(proj, np.eye(proj.shape[0])):
                raise ValueError("mean_pool_identity requires an identity projection")
        if self.mode == "one_hidden_mlp":
            if self.hidden is None or len(self.hidden) != 2:
                raise ValueError("one_hidden_mlp requires a (W_1, W_2) hidden pair")
            w1 = check_matrix(self.hidden[0], "W_1")
            w2 = check_matrix(self.hidden[1], "W_2")
            if w1.shape[1] != proj.shape[1] or w2.shape != (proj.shape[0], w1.shape[0]):
                raise DimMismatchError(
                    f"hidden shapes {w1.shape}, {w2.shape} inconsistent with projection {proj.shape}")
            object.__setattr__(self, "hidden", (_frozen(w1), _frozen(w2)))
        elif self.hidden is not None:
            raise ValueError(f"mode {self.mode} takes no hidden layer")
        object.__setattr__(self, "projection", _frozen(proj))

    @property
    def d_e(self):
        return self.projection.shape[0]

    @property
    def d_tok(self):
        return self.projection.shape[1]

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim), "mean_pool_identity")

    @classmethod
    def projected(cls, d_e, d_tok, rng):
        return cls(random_orthogonal(d_e, d_tok, make_rng(rng)), "mean_pool_projected")

    @classmethod
    def mlp(cls, d_e, d_tok, rng, d_hidden=None, input_scale=1.0, gain=0.5):
        """Residual tanh head scaled so the map is a contraction around ``W_t``.

        ``W_1`` has spectral norm ``1 / input_scale`` (so pre-activations are
        O(1) for inputs of norm ``input_scale``) and ``W_2`` has spectral norm
        ``gain * input_scale``; with ``gain < 1`` the head stays invertible.
        """
        rng = make_rng(rng)
        d_hidden = d_tok if d_hidden is None else d_hidden
        proj = random_orthogonal(d_e, d_tok, rng)
        w1 = random_orthogonal(d_hidden, d_tok, rng) / input_scale
        w2 = random_orthogonal(d_e, d_hidden, rng) * (gain * input_scale)
        return cls(proj, "one_hidden_mlp", (w1, w2))

    def head(self, h):
        """Map a pooled token vector to the (unnormalized) joint space."""
        if self.mode == "mean_pool_identity":
            return h.copy()
        u = self.projection @ h
        if self.mode == "one_hidden_mlp":
            w1, w2 = self.hidden
            u = u + w2 @ np.tanh(w1 @ h)
        return u

    def head_jacobian(self, h):
        if self.mode == "mean_pool_identity":
            return np.eye(h.shape[0])
        if self.mode == "mean_pool_projected":
            return self.projection
        w1, w2 = self.hidden
        dtanh = 1.0 - np.tanh(w1 @ h) ** 2
        return self.projection + (w2 * dtanh) @ w1

    def preimage(self, target, tol=1e-13, max_iter=500):
        """Return ``h`` with ``head(h) == target``.

        Requires orthonormal rows in the projection (``d_tok >= d_e``). The
        MLP head is inverted by fixed-point iteration, which converges because
        the residual branch is a contraction.
        """
        target = check_vector(target, "target")
        if target.shape[0] != self.d_e:
            raise DimMismatchError(f"target dim {target.shape[0]} != d_e {self.d_e}")
        if self.mode == "mean_pool_identity":
            return target.copy()
        if self.d_tok < self.d_e:
            raise ValueError("closed-form preimage needs d_tok >= d_e")
        pinv = self.projection.T
        h = pinv @ target
        if self.mode == "mean_pool_projected":
            return h
        w1, w2 = self.hidden
        for _ in range(max_iter):
            h_next = pinv @ (target - w2 @ np.tanh(w1 @ h))
            if np.linalg.norm(h_next - h) <= tol * max(1.0, np.linalg.norm(h)):
                return h_next
            h = h_next
        raise ArithmeticError("MLP preimage iteration did not converge")

    def to_dict(self):
        d = {"mode": self.mode, "projection": self.projection.tolist()}
        if self.hidden is not None:
            d["hidden"] = [self.hidden[0].tolist(), self.hidden[1].tolist()]
        return d

    @classmethod
    def from_dict(cls, d):
        hidden = d.get("hidden")
        if hidden is not None:
            hidden = tuple(np.asarray(w, dtype=np.float64) for w in hidden)
        return cls(np.asarray(d["projection"], dtype=np.float64), d["mode"], hidden)


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """Query/key maps of the anchor-purification attention, both ``(d_k, d_e)``."""

    w_q: np.ndarray
    w_k: np.ndarray

    def __post_init__(self):
        wq = check_matrix(self.w_q, "W_q")
        wk = check_matrix(self.w_k, "W_k")
        if wq.shape != wk.shape:
            raise DimMismatchError(f"W_q shape {wq.shape} != W_k shape {wk.shape}")
        object.__setattr__(self, "w_q", _frozen(wq))
        object.__setattr__(self, "w_k", _frozen(wk))

    @property
    def d_k(self):
        return self.w_q.shape[0]

    @property
    def d_e(self):
        return self.w_q.shape[1]

    @classmethod
    def identity(cls, d_e):
        return cls(np.eye(d_e), np.eye(d_e))

    @classmethod
    def random(cls, d_k, d_e, rng, shared=True):
        """Seeded random orthogonal maps.

        With ``shared=True`` the key map reuses the query map, so scores are
        rotation-invariant similarities between the mean patch and each patch.
        """
        rng = make_rng(rng)
        wq = random_orthogonal(d_k, d_e, rng)
        wk = wq if shared else random_orthogonal(d_k, d_e, rng)
        return cls(wq, wk)

    def to_dict(self):
        return {"w_q": self.w_q.tolist(), "w_k": self.w_k.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["w_q"], dtype=np.float64), np.asarray(d["w_k"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class VisualAnchor:
    c_v: np.ndarray
    purified: bool = field(default=False)

    def __post_init__(self):
        c = check_vector(self.c_v, "c_v")
        if abs(np.linalg.norm(c) - 1.0) > 1e-10:
            raise ValueError("visual anchor must have unit norm")
        object.__setattr__(self, "c_v", _frozen(c))

    @classmethod
    def from_vector(cls, v, purified=False):
        return cls(l2_normalize(v), purified)


def _check_text_inputs(params, vocab, template, z):
    z = check_vector(z, "z")
    if z.shape[0] != params.d_tok:
        raise DimMismatchError(f"z dim {z.shape[0]} != d_tok {params.d_tok}")
    if vocab.dim != params.d_tok:
        raise DimMismatchError(f"vocabulary dim {vocab.dim} != d_tok {params.d_tok}")
    return z


def pooled_tokens(vocab, template, z):
    """Mean of the template's token embeddings with the slot filled by ``z``."""
    return (template.context_sum(vocab) + z) / len(template)


def encode_text(params, vocab, template, z):
    z = _check_text_inputs(params, vocab, template, z)
    u = params.head(pooled_tokens(vocab, template, z))
    n = np.linalg.norm(u)
    if n <= EPS_NORM:
        raise ZeroVectorError("encoded text vector vanished")
    return u / n


def _anchor_vector(anchor):
    return anchor.c_v if isinstance(anchor, VisualAnchor) else check_vector(anchor, "anchor")


def alignment_score(anchor, params, vocab, template, z):
    return cosine_sim(_anchor_vector(anchor), encode_text(params, vocab, template, z))


def alignment_score_and_gradient(anchor, params, vocab, template, z):
    """Alignment score ``S`` and its closed-form gradient with respect to ``z``.

    With ``h`` the pooled tokens, ``u = head(h)`` and ``c`` the anchor,
    ``S = <c/|c|, u/|u|>`` and::

        dS/du = (c/|c| - S u/|u|) / |u|
        dS/dz = J(h)^T dS/du / L

    where ``J`` is the head Jacobian and ``L`` the template length.
    """
    z = _check_text_inputs(params, vocab, template, z)
    c = _anchor_vector(anchor)
    if c.shape[0] != params.d_e:
        raise DimMismatchError(f"anchor dim {c.shape[0]} != d_e {params.d_e}")
    c_hat = l2_normalize(c)
    h = pooled_tokens(vocab, template, z)
    u = params.head(h)
    nu = np.linalg.norm(u)
    if nu <= EPS_NORM:
        raise ZeroVectorError("encoded text vector vanished")
    u_hat = u / nu
    score = float(np.clip(c_hat @ u_hat, -1.0, 1.0))
    d_u = (c_hat - score * u_hat) / nu
    grad = params.head_jacobian(h).T @ d_u / len(template)
    return score, grad


def alignment_gradient(anchor, params, vocab, template, z):
    return alignment_score_and_gradient(anchor, params, vocab, template, z)[1]


def slot_embedding_for(target, params, vocab, template):
    """Pseudo-word whose encoded template is exactly ``target`` before normalization.

    Inverts the mean pool: ``z = L * head^{-1}(target) - sum(context)``.
    """
    h = params.preimage(target)
    return len(template) * h - template.context_sum(vocab)


def _check_patches(patches):
    return check_matrix(patches, "patches")


def global_context(patches):
    """Unweighted mean of the patch rows."""
    return _check_patches(patches).mean(axis=0)


def refine_anchor(patches, attn):
    """Attention-purified anchor: the mean patch queries every patch."""
    f = _check_patches(patches)
    if f.shape[1] != attn.d_e:
        raise DimMismatchError(f"patch dim {f.shape[1]} != attention d_e {attn.d_e}")
    query = attn.w_q @ global_context(f)
    pooled = scaled_dot_attention(query, f @ attn.w_k.T, f)
    return VisualAnchor(l2_normalize(pooled), purified=True)


def attention_weights(patches, attn):
    f = _check_patches(patches)
    query = attn.w_q @ f.mean(axis=0)
    scores = (f @ attn.w_k.T) @ query / np.sqrt(attn.d_k)
    e = np.exp(scores - scores.max())
    return e / e.sum()


def raw_anchor(patches):
    return VisualAnchor(l2_normalize(global_context(patches)), purified=False)
