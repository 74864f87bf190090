"""scikit-learn compatible wrappers.

``AnchorRefiner``
    transformer from per-image patch arrays ``(n, M, d_e)`` to unit anchors.
``PseudoWordOptimizer``
    transformer from anchors ``(n, d_e)`` to optimized pseudo-words
    ``(n, d_tok)``.
``GTMAClassifier``
    nearest-text-embedding classifier whose ``fit`` synthesizes one
    pseudo-word per out-of-vocabulary class from labelled support images.

All three follow the usual conventions: constructor arguments are stored
verbatim (so ``get_params``/``set_params``/``clone`` work), learned state ends
in an underscore, and ``fit`` returns ``self``.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .encoder import encode_text, raw_anchor, refine_anchor
from .grpo import GrpoConfig, grpo_run, synthesize_class_pseudo_word
from .numeric import DimMismatchError, NonFiniteError


def check_patches(X):
    """Validate a stack of patch matrices, shape ``(n_images, M, d_e)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[np.newaxis]
    if X.ndim != 3 or 0 in X.shape:
        raise DimMismatchError(f"expected patches of shape (n_images, M, d_e), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteError("patches contain non-finite values")
    return X


def check_anchors(A, d_e=None):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[np.newaxis]
    if A.ndim != 2 or 0 in A.shape:
        raise DimMismatchError(f"expected anchors of shape (n, d_e), got {A.shape}")
    if d_e is not None and A.shape[1] != d_e:
        raise DimMismatchError(f"anchor dim {A.shape[1]} != d_e {d_e}")
    if not np.all(np.isfinite(A)):
        raise NonFiniteError("anchors contain non-finite values")
    return A


class AnchorRefiner(TransformerMixin, BaseEstimator):
    """Turn patch features into unit visual anchors.

    Parameters
    ----------
    attention : AttentionParams or None
        Query/key maps for purification. Required when ``refine`` is True.
    refine : bool, default=True
        If False, the anchor is the normalized mean patch.
    """

    def __init__(self, attention=None, refine=True):
        self.attention = attention
        self.refine = refine

    def fit(self, X, y=None):
        X = check_patches(X)
        if self.refine and self.attention is None:
            raise ValueError("refine=True needs attention parameters")
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_patches(X)
        if X.shape[2] != self.n_features_in_:
            raise DimMismatchError(f"patch dim {X.shape[2]} != fitted {self.n_features_in_}")
        if self.refine:
            return np.array([refine_anchor(p, self.attention).c_v for p in X])
        return np.array([raw_anchor(p).c_v for p in X])


def _grpo_config(est):
    return GrpoConfig(eta0=est.eta0, lam=est.lam, beta=est.beta, gamma=est.gamma,
                      iterations=est.n_iter, projection=est.projection, knn_k=est.knn_k,
                      knn_temperature=est.knn_temperature, init=est.init,
                      init_seed=est.random_state, adaptive_lr=est.adaptive_lr)


class PseudoWordOptimizer(TransformerMixin, BaseEstimator):
    """Optimize one pseudo-word per anchor.

    The transform is stateless apart from validating shapes; ``fit`` keeps the
    trajectories of the anchors it was given in ``trajectories_``.
    """

    def __init__(self, encoder, vocabulary, template, eta0=0.01, lam=0.1, beta=10.0, gamma=0.5,
                 n_iter=10, projection="hard_nearest", knn_k=4, knn_temperature=1.0,
                 init="nearest_vocab", adaptive_lr=True, random_state=0):
        self.encoder = encoder
        self.vocabulary = vocabulary
        self.template = template
        self.eta0 = eta0
        self.lam = lam
        self.beta = beta
        self.gamma = gamma
        self.n_iter = n_iter
        self.projection = projection
        self.knn_k = knn_k
        self.knn_temperature = knn_temperature
        self.init = init
        self.adaptive_lr = adaptive_lr
        self.random_state = random_state

    def _run(self, A):
        cfg = _grpo_config(self)
        return [grpo_run(a, self.encoder, self.vocabulary, self.template, cfg) for a in A]

    def fit(self, X, y=None):
        A = check_anchors(X, self.encoder.d_e)
        self.template.validate(self.vocabulary)
        self.trajectories_ = self._run(A)
        self.n_features_in_ = A.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return np.array([tr.z_star for tr in self._run(check_anchors(X, self.n_features_in_))])

    def fit_transform(self, X, y=None):
        self.fit(X)
        return np.array([tr.z_star for tr in self.trajectories_])

    def score(self, X, y=None):
        """Mean final alignment score of the optimized pseudo-words."""
        check_is_fitted(self, "n_features_in_")
        return float(np.mean([tr.final_score for tr in self._run(check_anchors(X, self.n_features_in_))]))


class GTMAClassifier(ClassifierMixin, BaseEstimator):
    """Cosine classifier over seen-token and synthesized pseudo-word text embeddings.

    Parameters
    ----------
    encoder, vocabulary, template
        Frozen text side.
    attention : AttentionParams or None
        Anchor purification; ``None`` uses raw (mean-patch) anchors.
    seen_tokens : dict
        ``label -> vocabulary index`` for classes the vocabulary can name.
        These keep their token embedding.
    optimize : bool, default=True
        If False, OOD classes use the initial pseudo-words only.
    aggregation : {"mean_z", "mean_anchor"}
        How instance-level support is pooled into one class pseudo-word.
    eta0, lam, beta, gamma, n_iter, projection, knn_k, knn_temperature, init, adaptive_lr, random_state
        Optimizer settings, as in :class:`PseudoWordOptimizer`.

    Attributes
    ----------
    classes_ : ndarray
        Seen labels followed by the OOD labels seen in ``fit``.
    class_embeddings_ : ndarray of shape (n_classes, d_e)
    pseudo_words_ : dict
        ``label -> pseudo-word`` for the OOD classes.
    """

    def __init__(self, encoder, vocabulary, template, attention=None, seen_tokens=None,
                 optimize=True, aggregation="mean_z", eta0=0.01, lam=0.1, beta=10.0, gamma=0.5,
                 n_iter=10, projection="hard_nearest", knn_k=4, knn_temperature=1.0,
                 init="nearest_vocab", adaptive_lr=True, random_state=0):
        self.encoder = encoder
        self.vocabulary = vocabulary
        self.template = template
        self.attention = attention
        self.seen_tokens = seen_tokens
        self.optimize = optimize
        self.aggregation = aggregation
        self.eta0 = eta0
        self.lam = lam
        self.beta = beta
        self.gamma = gamma
        self.n_iter = n_iter
        self.projection = projection
        self.knn_k = knn_k
        self.knn_temperature = knn_temperature
        self.init = init
        self.adaptive_lr = adaptive_lr
        self.random_state = random_state

    def _anchors(self, X):
        refiner = AnchorRefiner(self.attention, refine=self.attention is not None)
        return refiner.fit(X).transform(X)

    def fit(self, X, y):
        """Synthesize one pseudo-word per OOD label in ``y``.

        ``X`` holds support images ``(n, M, d_e)``; labels in ``y`` that are
        also keys of ``seen_tokens`` are ignored.
        """
        X = check_patches(X)
        y = np.asarray(y)
        if y.shape[0] != X.shape[0]:
            raise DimMismatchError(f"{X.shape[0]} images but {y.shape[0]} labels")
        seen = dict(self.seen_tokens or {})
        cfg = _grpo_config(self)
        if not self.optimize:
            cfg = cfg.replace(iterations=0)
        anchors = self._anchors(X)
        labels = list(seen)
        embeddings = [encode_text(self.encoder, self.vocabulary, self.template,
                                  self.vocabulary.embeddings[seen[c]]) for c in labels]
        self.pseudo_words_ = {}
        for c in sorted(set(y.tolist()) - set(seen)):
            z, emb, _ = synthesize_class_pseudo_word(anchors[y == c], self.encoder, self.vocabulary,
                                                     self.template, cfg, self.aggregation)
            self.pseudo_words_[c] = z
            labels.append(c)
            embeddings.append(emb)
        if not labels:
            raise ValueError("no classes: give seen_tokens or OOD support images")
        self.classes_ = np.array(labels)
        self.class_embeddings_ = np.array(embeddings)
        self.n_features_in_ = X.shape[2]
        return self

    def decision_function(self, X):
        """Cosine between each image anchor and each class text embedding."""
        check_is_fitted(self, "class_embeddings_")
        X = check_patches(X)
        if X.shape[2] != self.n_features_in_:
            raise DimMismatchError(f"patch dim {X.shape[2]} != fitted {self.n_features_in_}")
        return self._anchors(X) @ self.class_embeddings_.T

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
