"""Pseudo-word optimization by regularized gradient ascent with an adaptive step.

Each iteration scores the current pseudo-word ``z`` against the visual anchor,
takes the analytic gradient of that score, pulls ``z`` back toward the nearest
known word embedding and scales the step by a sigmoid of the cosine between
the current and previous gradients::

    z <- z + eta_t * (g_t - lam * (z - proj(z)))
    eta_t = eta0 * sigmoid(beta * (rho_t - gamma))

The first iteration has no previous gradient; its similarity is taken as 0.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import (
    VisualAnchor,
    alignment_score,
    alignment_score_and_gradient,
    encode_text,
)
from .numeric import (
    EPS_NORM,
    DimMismatchError,
    NonFiniteError,
    check_vector,
    make_rng,
    random_orthogonal,
    sigmoid,
)

PROJECTIONS = ("hard_nearest", "soft_knn")
INITS = ("nearest_vocab", "mlp", "linear_map")

# |z| beyond this is treated as divergence
DIVERGENCE_NORM = 1e6


@dataclass(frozen=True)
class GrpoConfig:
    """Optimizer hyperparameters.

    Defaults follow the published setting (10 iterations, initial rate 0.01,
    regularization weight 0.1); ``beta`` and ``gamma`` are not published and
    default to 10 and 0.5.

    ``adaptive_lr=False`` replaces the sigmoid schedule with the constant
    step ``eta0``; it exists for ablations.
    """

    eta0: float = 0.01
    lam: float = 0.1
    beta: float = 10.0
    gamma: float = 0.5
    iterations: int = 10
    projection: str = "hard_nearest"
    knn_k: int = 4
    knn_temperature: float = 1.0
    init: str = "nearest_vocab"
    init_seed: int = 0
    adaptive_lr: bool = True

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ValueError("eta0 must be positive")
        if not self.lam >= 0:
            raise ValueError("lam must be non-negative")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not -1.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [-1, 1]")
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ValueError("iterations must be a non-negative integer")
        if self.projection not in PROJECTIONS:
            raise ValueError(f"projection must be one of {PROJECTIONS}")
        if self.projection == "soft_knn" and (self.knn_k < 1 or not self.knn_temperature > 0):
            raise ValueError("soft_knn needs knn_k >= 1 and knn_temperature > 0")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return GrpoConfig(**d)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class StepRecord:
    t: int
    score: float
    grad_norm: float
    rho: float
    eta: float
    reg_norm: float


STEP_FIELDS = ("t", "score", "grad_norm", "rho", "eta", "reg_norm")


@dataclass(frozen=True, eq=False)
class Trajectory:
    z_init: np.ndarray
    z_star: np.ndarray
    steps: tuple = field(default=())
    final_score: float = float("nan")

    def scores(self):
        """Scores S_0 .. S_T, including the score of the returned embedding."""
        return np.array([s.score for s in self.steps] + [self.final_score])

    def to_dict(self, config=None):
        d = {
            "z_init": self.z_init.tolist(),
            "z_star": self.z_star.tolist(),
            "final_score": self.final_score,
            "steps": [asdict(s) for s in self.steps],
        }
        if config is not None:
            d = {"config": config.to_dict(), **d}
        return d


def project_to_vocab(z, vocab, mode="hard_nearest", k=4, temperature=1.0):
    """Project ``z`` onto the finite set of vocabulary embeddings.

    ``hard_nearest`` returns the Euclidean-nearest row (lowest index on
    ties). ``soft_knn`` returns the ``softmax(-d^2 / temperature)`` weighted
    average of the ``k`` nearest rows.
    """
    z = check_vector(z, "z")
    emb = vocab.embeddings
    if z.shape[0] != emb.shape[1]:
        raise DimMismatchError(f"z dim {z.shape[0]} != vocabulary dim {emb.shape[1]}")
    d2 = np.sum((emb - z) ** 2, axis=1)
    if mode == "hard_nearest":
        return emb[int(np.argmin(d2))].copy()
    if mode == "soft_knn":
        if not 1 <= k <= len(vocab):
            raise ValueError(f"k={k} outside [1, {len(vocab)}]")
        idx = np.argsort(d2, kind="stable")[:k]
        logits = -d2[idx] / temperature
        w = np.exp(logits - logits.max())
        w /= w.sum()
        return w @ emb[idx]
    raise ValueError(f"unknown projection mode {mode!r}")


def _project(z, vocab, config):
    return project_to_vocab(z, vocab, config.projection, config.knn_k, config.knn_temperature)


def regularization_gradient(z, vocab, mode="hard_nearest", k=4, temperature=1.0):
    """``z - proj(z)``, with the projection held fixed."""
    z = check_vector(z, "z")
    return z - project_to_vocab(z, vocab, mode, k, temperature)


def regularizer(z, vocab, mode="hard_nearest", k=4, temperature=1.0):
    r = regularization_gradient(z, vocab, mode, k, temperature)
    return 0.5 * float(r @ r)


def grad_similarity(g, g_prev, eps=EPS_NORM):
    """Cosine of consecutive gradients; 0 when either is (near) zero."""
    g = check_vector(g, "g")
    g_prev = check_vector(g_prev, "g_prev")
    if g.shape != g_prev.shape:
        raise DimMismatchError(f"gradient dims differ: {g.shape[0]} vs {g_prev.shape[0]}")
    n, n_prev = np.linalg.norm(g), np.linalg.norm(g_prev)
    if n <= eps or n_prev <= eps:
        return 0.0
    return float(np.clip(g @ g_prev / (n * n_prev), -1.0, 1.0))


def adaptive_step(rho, config):
    """``eta0 * sigmoid(beta * (rho - gamma))``.

    The result is clamped to the open interval ``(0, eta0)`` so that sigmoid
    saturation in floating point never yields exactly 0 or ``eta0``.
    """
    eta = config.eta0 * sigmoid(config.beta * (rho - config.gamma))
    return float(np.clip(eta, np.nextafter(0.0, 1.0), np.nextafter(config.eta0, 0.0)))


def init_pseudo_word(anchor, vocab, params, mode="nearest_vocab", seed=0, linear_map=None):
    """Initial pseudo-word ``z_0`` for ``anchor``.

    Parameters
    ----------
    mode : {"nearest_vocab", "mlp", "linear_map"}
        ``nearest_vocab`` picks the vocabulary row whose slot-only encoding is
        most similar to the anchor. ``mlp`` applies a frozen seeded tanh
        layer and rescales the output to the mean vocabulary row norm.
        ``linear_map`` applies ``linear_map`` if given, else a seeded random
        orthogonal ``(d_tok, d_e)`` matrix.
    seed : int
        Seed for the random ``mlp`` / ``linear_map`` weights.
    """
    c = anchor.c_v if isinstance(anchor, VisualAnchor) else check_vector(anchor, "anchor")
    if c.shape[0] != params.d_e:
        raise DimMismatchError(f"anchor dim {c.shape[0]} != d_e {params.d_e}")
    if mode == "nearest_vocab":
        # slot-only template: the encoding of a row is head(row), normalized
        heads = np.array([params.head(row) for row in vocab.embeddings])
        sims = heads @ c / np.linalg.norm(heads, axis=1)
        return vocab.embeddings[int(np.argmax(sims))].copy()
    if mode == "linear_map":
        if linear_map is None:
            linear_map = random_orthogonal(params.d_tok, params.d_e, make_rng(seed))
        return np.asarray(linear_map, dtype=np.float64) @ c
    if mode == "mlp":
        rng = make_rng(seed)
        w = rng.standard_normal((params.d_tok, params.d_e))
        out = np.tanh(w @ c)
        target_norm = np.linalg.norm(vocab.embeddings, axis=1).mean()
        return out * (target_norm / np.linalg.norm(out))
    raise ValueError(f"unknown init mode {mode!r}")


def _check_finite_state(z, t):
    if not np.all(np.isfinite(z)) or np.linalg.norm(z) > DIVERGENCE_NORM:
        err = NonFiniteError(f"pseudo-word diverged at step {t}")
        err.step = t
        raise err


def grpo_run(anchor, params, vocab, template, config=None, z_init=None):
    """Optimize a pseudo-word for ``anchor`` and return the full trajectory.

    ``z_init`` overrides the configured initialization.

    Raises
    ------
    NonFiniteError
        If an iterate becomes non-finite or its norm exceeds ``1e6``; the
        failing step index is stored on the exception as ``step``.
    """
    config = GrpoConfig() if config is None else config
    if z_init is None:
        z = init_pseudo_word(anchor, vocab, params, config.init, config.init_seed)
    else:
        z = check_vector(z_init, "z_init").copy()
    z0 = z.copy()
    g_prev = np.zeros_like(z)
    steps = []
    for t in range(int(config.iterations)):
        score, g = alignment_score_and_gradient(anchor, params, vocab, template, z)
        reg = z - _project(z, vocab, config)
        rho = grad_similarity(g, g_prev)
        eta = adaptive_step(rho, config) if config.adaptive_lr else config.eta0
        z = z + eta * (g - config.lam * reg)
        _check_finite_state(z, t)
        steps.append(StepRecord(t, score, float(np.linalg.norm(g)), rho, eta,
                                float(np.linalg.norm(reg))))
        g_prev = g
    final = alignment_score(anchor, params, vocab, template, z)
    return Trajectory(z0, z, tuple(steps), final)


def objective_value(z, anchor, params, vocab, template, config=None):
    """Return ``(S, R, S - lam * R)`` at ``z``."""
    config = GrpoConfig() if config is None else config
    s = alignment_score(anchor, params, vocab, template, z)
    r = regularizer(z, vocab, config.projection, config.knn_k, config.knn_temperature)
    return s, r, s - config.lam * r


AGGREGATIONS = ("mean_z", "mean_anchor")


def synthesize_class_pseudo_word(anchors, params, vocab, template, config=None,
                                 aggregation="mean_z"):
    """Pseudo-word and text embedding for one class from its support anchors.

    ``mean_z`` optimizes every anchor separately and averages the resulting
    pseudo-words; ``mean_anchor`` optimizes once against the normalized mean
    anchor.

    Returns
    -------
    z_class : ndarray of shape (d_tok,)
    text_embedding : ndarray of shape (d_e,)
    trajectories : list of Trajectory
    """
    config = GrpoConfig() if config is None else config
    anchors = [a.c_v if isinstance(a, VisualAnchor) else check_vector(a, "anchor") for a in anchors]
    if not anchors:
        raise ValueError("a class needs at least one support anchor")
    if aggregation == "mean_z":
        trajectories = [grpo_run(a, params, vocab, template, config) for a in anchors]
        z_class = np.mean([tr.z_star for tr in trajectories], axis=0)
    elif aggregation == "mean_anchor":
        mean = VisualAnchor.from_vector(np.mean(anchors, axis=0))
        trajectories = [grpo_run(mean, params, vocab, template, config)]
        z_class = trajectories[0].z_star
    else:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    return z_class, encode_text(params, vocab, template, z_class), trajectories
