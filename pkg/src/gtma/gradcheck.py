"""Check the analytic alignment gradient against central finite differences."""

from dataclasses import dataclass, field

import numpy as np

from .encoder import (
    MODES,
    Template,
    TextEncoderParams,
    VocabularyTable,
    alignment_gradient,
    alignment_score,
)
from .numeric import finite_diff_gradient, l2_normalize, make_rng


@dataclass
class TrialResult:
    trial: int
    seed: int
    mode: str
    dim: int
    rel_error: float


@dataclass
class GradcheckReport:
    tolerance: float
    trials: list = field(default_factory=list)

    @property
    def max_rel_error(self):
        return max(t.rel_error for t in self.trials)

    @property
    def failures(self):
        return [t for t in self.trials if not t.rel_error < self.tolerance]

    @property
    def passed(self):
        return not self.failures


def random_configuration(mode, dim, seed):
    """A random encoder, vocabulary, template, anchor and pseudo-word.

    Non-identity heads use ``d_tok = dim + dim // 2`` so that the joint and
    token spaces differ.
    """
    rng = make_rng(seed)
    if mode == "mean_pool_identity":
        d_e = d_tok = dim
        params = TextEncoderParams.identity(dim)
    elif mode == "mean_pool_projected":
        d_e, d_tok = dim, dim + dim // 2
        params = TextEncoderParams.projected(d_e, d_tok, rng)
    else:
        d_e, d_tok = dim, dim + dim // 2
        params = TextEncoderParams.mlp(d_e, d_tok, rng)
    n_vocab = int(rng.integers(4, 12))
    vocab = VocabularyTable(rng.standard_normal((n_vocab, d_tok)), [f"w{i}" for i in range(n_vocab)])
    length = int(rng.integers(1, 7))
    ids = rng.integers(0, n_vocab, size=length)
    template = Template(tuple(int(i) for i in ids), int(rng.integers(0, length)))
    anchor = l2_normalize(rng.standard_normal(d_e))
    z = rng.standard_normal(d_tok)
    return params, vocab, template, anchor, z


def relative_error(analytic, numeric):
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-8))


def gradcheck(dims=(4, 16, 64), modes=MODES, trials=200, tolerance=1e-5, seed=0, h=1e-5,
              corrupt_trial=None):
    """Compare analytic and finite-difference gradients on seeded random configurations.

    Trials cycle through every ``(mode, dim)`` pair; trial ``i`` uses seed
    ``seed + i``. ``corrupt_trial`` perturbs the analytic gradient of that
    trial, as a negative control.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    combos = [(m, d) for m in modes for d in dims]
    report = GradcheckReport(tolerance)
    for i in range(trials):
        mode, dim = combos[i % len(combos)]
        trial_seed = seed + i
        params, vocab, template, anchor, z = random_configuration(mode, dim, trial_seed)
        g = alignment_gradient(anchor, params, vocab, template, z)
        if i == corrupt_trial:
            g = g.copy()
            g[0] += 1e-3 * (1.0 + np.linalg.norm(g))
        fd = finite_diff_gradient(lambda v: alignment_score(anchor, params, vocab, template, v), z, h)
        report.trials.append(TrialResult(i, trial_seed, mode, dim, relative_error(g, fd)))
    return report
