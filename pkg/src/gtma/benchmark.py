"""Synthetic seen / out-of-vocabulary benchmark, evaluation and ablations.

Every concept has a unit prototype in the joint space. Seen concepts own a
vocabulary token whose embedding is solved so that the prompt template
encodes exactly onto the prototype; out-of-vocabulary (OOD) concepts own no
token. An image is ``patches_per_image`` patch vectors, each the prototype
plus isotropic Gaussian noise.

The baseline classifier gives every OOD concept the same placeholder token,
which is what a fixed vocabulary can offer for a name it has never seen.
GTMA instead synthesizes one pseudo-word per OOD class from that class's
support images, whose labels are withheld from the text side.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import (
    SLOT,
    AttentionParams,
    Template,
    TextEncoderParams,
    VocabularyTable,
    encode_text,
    raw_anchor,
    refine_anchor,
    slot_embedding_for,
)
from .grpo import AGGREGATIONS, synthesize_class_pseudo_word
from .numeric import GTMAError, make_rng

VARIANTS = ("full", "no_pseudo_word_opt", "no_anchor_refinement", "no_adaptive_lr", "no_semantic_reg")
ALLOWED_SHOTS = (1, 2, 4, 8, 16)
DEFAULT_TEMPLATE = ("a", "photo", "of", "a", SLOT)


class GenerationFailure(GTMAError, RuntimeError):
    """Separable prototypes could not be drawn within the retry budget."""


@dataclass(frozen=True)
class BenchmarkSpec:
    """Layout of one synthetic benchmark.

    ``token_scale`` is the norm of every function-word embedding and of the
    pooled template vector of every content word; it fixes how far one
    optimizer step moves the encoded text.
    """

    num_seen: int = 10
    num_ood: int = 10
    images_per_class: int = 20
    support_per_class: int = 16
    patches_per_image: int = 16
    noise_sigma: float = 0.1
    d_e: int = 64
    d_tok: int = 64
    d_k: int = 64
    encoder_mode: str = "mean_pool_identity"
    shots: tuple = ALLOWED_SHOTS
    seed: int = 1
    num_distractors: int = 40
    token_scale: float = 0.02
    max_prototype_cos: float = 0.8
    attention: str = "shared_orthogonal"
    template: tuple = DEFAULT_TEMPLATE

    def __post_init__(self):
        object.__setattr__(self, "shots", tuple(int(s) for s in self.shots))
        object.__setattr__(self, "template", tuple(self.template))
        for name in ("num_seen", "images_per_class", "patches_per_image",
                     "d_e", "d_tok", "d_k", "num_distractors"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.num_ood < 0:
            raise ValueError("num_ood must be non-negative")
        if not 1 <= self.support_per_class <= self.images_per_class:
            raise ValueError("support_per_class must lie in [1, images_per_class]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not self.token_scale > 0:
            raise ValueError("token_scale must be positive")
        if not set(self.shots) <= set(ALLOWED_SHOTS):
            raise ValueError(f"shots must be a subset of {ALLOWED_SHOTS}")
        if self.shots and max(self.shots) > self.support_per_class:
            raise ValueError("largest shot count exceeds support_per_class")
        if self.attention not in ("shared_orthogonal", "independent_orthogonal", "identity"):
            raise ValueError(f"unknown attention init {self.attention!r}")
        if self.template.count(SLOT) != 1:
            raise ValueError(f"template needs exactly one {SLOT}")
        if self.encoder_mode == "mean_pool_identity" and self.d_e != self.d_tok:
            raise ValueError("mean_pool_identity requires d_e == d_tok")
        if self.attention == "identity" and self.d_k != self.d_e:
            raise ValueError("identity attention requires d_k == d_e")

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return BenchmarkSpec(**d)

    def to_dict(self):
        d = asdict(self)
        d["shots"] = list(self.shots)
        d["template"] = list(self.template)
        return d

    @property
    def num_concepts(self):
        return self.num_seen + self.num_ood


@dataclass(frozen=True, eq=False)
class ConceptSpec:
    concept_id: int
    prototype: np.ndarray
    kind: str
    token_index: int = None
    display_name: str = ""

    @property
    def is_seen(self):
        return self.kind == "seen"


@dataclass(frozen=True, eq=False)
class Instance:
    instance_id: str
    patches: np.ndarray
    true_concept: int
    split: str


@dataclass(eq=False)
class Benchmark:
    spec: BenchmarkSpec
    vocab: VocabularyTable
    encoder: TextEncoderParams
    attention: AttentionParams
    template: Template
    concepts: list
    instances: list
    placeholder_index: int
    _anchor_cache: dict = field(default_factory=dict, repr=False)

    def __iter__(self):
        return iter((self.vocab, self.encoder, self.attention, self.concepts, self.instances))

    @property
    def seen_concepts(self):
        return [c for c in self.concepts if c.is_seen]

    @property
    def ood_concepts(self):
        return [c for c in self.concepts if not c.is_seen]

    def split(self, name):
        return [inst for inst in self.instances if inst.split == name]

    def support(self, concept_id, shots=None):
        items = [i for i in self.instances if i.split == "support" and i.true_concept == concept_id]
        return items if shots is None else items[:shots]

    def anchors(self, refined=True):
        """Unit anchors for every instance, keyed by instance id (cached)."""
        key = "refined" if refined else "raw"
        if key not in self._anchor_cache:
            if refined:
                self._anchor_cache[key] = {i.instance_id: refine_anchor(i.patches, self.attention).c_v
                                           for i in self.instances}
            else:
                self._anchor_cache[key] = {i.instance_id: raw_anchor(i.patches).c_v
                                           for i in self.instances}
        return self._anchor_cache[key]


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _draw_prototypes(rng, n, d, max_cos, retries=1000):
    protos = []
    for _ in range(n):
        for _ in range(retries):
            cand = _unit(rng, d)
            if all(cand @ p < max_cos for p in protos):
                protos.append(cand)
                break
        else:
            raise GenerationFailure(
                f"could not place {n} prototypes with pairwise cosine < {max_cos} in {d} dims")
    return protos


def _make_encoder(spec, rng):
    if spec.encoder_mode == "mean_pool_identity":
        return TextEncoderParams.identity(spec.d_tok)
    if spec.encoder_mode == "mean_pool_projected":
        return TextEncoderParams.projected(spec.d_e, spec.d_tok, rng)
    return TextEncoderParams.mlp(spec.d_e, spec.d_tok, rng, input_scale=spec.token_scale)


def _make_attention(spec, rng):
    if spec.attention == "identity":
        return AttentionParams.identity(spec.d_e)
    return AttentionParams.random(spec.d_k, spec.d_e, rng, shared=spec.attention == "shared_orthogonal")


def generate_benchmark(spec):
    """Build vocabulary, encoder, attention, concepts and instances for ``spec``.

    Vocabulary layout: function words of the template first, then one token
    per seen concept, then ``num_distractors`` content words whose prototypes
    belong to no benchmark class. Every content token ``t`` for direction
    ``p`` is solved so that the pooled template vector equals
    ``token_scale * p``. The first distractor is the placeholder used by the
    baseline for all OOD concepts.
    """
    rng = make_rng(spec.seed)
    n = spec.num_concepts
    protos = _draw_prototypes(rng, n, spec.d_e, spec.max_prototype_cos)
    encoder = _make_encoder(spec, rng)
    attention = _make_attention(spec, rng)

    words = list(dict.fromkeys(w for w in spec.template if w != SLOT))
    func_emb = [_unit(rng, spec.d_tok) * spec.token_scale for _ in words]
    names = list(words)
    seen_names = [f"seen_{k:02d}" for k in range(spec.num_seen)]
    names += seen_names
    names += [f"word_{k:03d}" for k in range(spec.num_distractors)]
    # a template over function words only lets us solve content tokens before
    # the content rows exist
    stub = VocabularyTable(np.vstack(func_emb + [np.zeros((2, spec.d_tok))]), words + ["<stub0>", "<stub1>"])
    template = Template.from_words(spec.template, stub)

    def content_token(direction):
        return slot_embedding_for(spec.token_scale * direction, encoder, stub, template)

    seen_rows = [content_token(protos[k]) for k in range(spec.num_seen)]
    distractor_rows = [content_token(_unit(rng, spec.d_e)) for _ in range(spec.num_distractors)]
    vocab = VocabularyTable(np.vstack(func_emb + seen_rows + distractor_rows), names)

    concepts = []
    for k in range(n):
        if k < spec.num_seen:
            concepts.append(ConceptSpec(k, protos[k], "seen", len(words) + k, seen_names[k]))
        else:
            concepts.append(ConceptSpec(k, protos[k], "ood", None, f"ood_{k - spec.num_seen:02d}"))

    instances = []
    for c in concepts:
        for j in range(spec.images_per_class):
            noise = rng.standard_normal((spec.patches_per_image, spec.d_e)) * spec.noise_sigma
            split = "support" if j < spec.support_per_class else "test"
            instances.append(Instance(f"c{c.concept_id:03d}_i{j:03d}", c.prototype + noise,
                                      c.concept_id, split))
    placeholder = len(words) + spec.num_seen
    return Benchmark(spec, vocab, encoder, attention, template, concepts, instances, placeholder)


def baseline_text_embeddings(bench):
    """Text embedding per concept available to the unadapted model.

    Seen concepts use their own token; every OOD concept falls back to the
    shared placeholder token.
    """
    out = []
    for c in bench.concepts:
        tok = c.token_index if c.is_seen else bench.placeholder_index
        out.append(encode_text(bench.encoder, bench.vocab, bench.template, bench.vocab.embeddings[tok]))
    return np.array(out)


def variant_config(config, variant):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "no_pseudo_word_opt":
        return config.replace(iterations=0)
    if variant == "no_adaptive_lr":
        return config.replace(adaptive_lr=False)
    if variant == "no_semantic_reg":
        return config.replace(lam=0.0)
    return config


def gtma_class_anchors(bench, config, variant="full", shots=None, aggregation="mean_z"):
    """Synthesize a pseudo-word and text embedding for every OOD concept.

    Support instances are grouped per class; only their patches reach the
    optimizer. ``shots`` keeps the first ``shots`` support images per class.

    Returns
    -------
    dict
        ``concept_id -> (z_class, text_embedding)``.
    """
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    cfg = variant_config(config, variant)
    anchors = bench.anchors(refined=variant != "no_anchor_refinement")
    out = {}
    for c in bench.ood_concepts:
        support = bench.support(c.concept_id, shots)
        if not support:
            raise ValueError(f"concept {c.display_name} has no support instances")
        z, emb, _ = synthesize_class_pseudo_word([anchors[i.instance_id] for i in support],
                                                 bench.encoder, bench.vocab, bench.template,
                                                 cfg, aggregation)
        out[c.concept_id] = (z, emb)
    return out


def gtma_text_embeddings(bench, config, variant="full", shots=None, aggregation="mean_z"):
    """Seen concepts keep their token embedding; OOD concepts get pseudo-words."""
    emb = baseline_text_embeddings(bench)
    for cid, (_, e) in gtma_class_anchors(bench, config, variant, shots, aggregation).items():
        emb[cid] = e
    return emb


@dataclass
class EvalReport:
    """Accuracies over the test split; ``ood_accuracy`` is None with no OOD test images.

    ``ood_alignment`` is the mean cosine between each OOD concept's text
    embedding and its true prototype, a continuous companion to accuracy.
    """

    seen_accuracy: float
    ood_accuracy: float
    open_accuracy: float
    n_seen: int
    n_ood: int
    per_class: dict
    method: str
    variant: str
    seed: int
    shots: int = None
    ood_alignment: float = None

    def to_dict(self):
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d


def _accuracy(correct, total):
    return correct / total if total else None


def evaluate(bench, text_embeddings, variant="full", method="gtma", shots=None):
    """Classify every test image by its most similar concept text embedding."""
    anchors = bench.anchors(refined=variant != "no_anchor_refinement")
    emb = np.asarray(text_embeddings, dtype=np.float64)
    per_class = {c.concept_id: [0, 0] for c in bench.concepts}
    kinds = {c.concept_id: c.is_seen for c in bench.concepts}
    for inst in bench.split("test"):
        pred = int(np.argmax(emb @ anchors[inst.instance_id]))
        per_class[inst.true_concept][1] += 1
        per_class[inst.true_concept][0] += int(pred == inst.true_concept)
    seen = [v for k, v in per_class.items() if kinds[k]]
    ood = [v for k, v in per_class.items() if not kinds[k]]
    sc, st = sum(v[0] for v in seen), sum(v[1] for v in seen)
    oc, ot = sum(v[0] for v in ood), sum(v[1] for v in ood)
    ood_concepts = bench.ood_concepts
    alignment = (float(np.mean([emb[c.concept_id] @ c.prototype for c in ood_concepts]))
                 if ood_concepts else None)
    return EvalReport(_accuracy(sc, st), _accuracy(oc, ot), _accuracy(sc + oc, st + ot),
                      st, ot, per_class, method, variant, bench.spec.seed, shots, alignment)


def evaluate_baseline(bench):
    return evaluate(bench, baseline_text_embeddings(bench), "full", method="baseline")


def evaluate_gtma(bench, config, variant="full", shots=None, aggregation="mean_z"):
    emb = gtma_text_embeddings(bench, config, variant, shots, aggregation)
    return evaluate(bench, emb, variant, method="gtma", shots=shots)


def summarize(values):
    """Mean, sample std and 95% normal-approximation half-width."""
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return {"mean": None, "std": None, "ci95": None, "n": 0}
    std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return {"mean": float(vals.mean()), "std": std,
            "ci95": 1.96 * std / math.sqrt(vals.size), "n": int(vals.size)}


METRICS = ("seen_accuracy", "ood_accuracy", "open_accuracy", "ood_alignment")


def aggregate_reports(reports):
    return {m: summarize(getattr(r, m) for r in reports) for m in METRICS}


@dataclass
class AblationResult:
    """Per-variant, per-dataset reports with a variant-by-dataset summary table."""

    variants: tuple
    datasets: tuple
    seeds: tuple
    reports: dict  # (dataset, variant) -> list of EvalReport, one per seed

    def summary(self, metric="open_accuracy"):
        return {key: summarize(getattr(r, metric) for r in reps) for key, reps in self.reports.items()}

    def table(self, metric="open_accuracy"):
        """Rows of ``variant``, one mean accuracy per dataset and the mean drop vs full.

        Accuracies and drops are in percentage points.
        """
        s = self.summary(metric)
        rows = []
        for v in self.variants:
            row = {"variant": v}
            drops = []
            for ds in self.datasets:
                mean = s[(ds, v)]["mean"]
                row[ds] = None if mean is None else 100.0 * mean
                row[f"{ds}_ci95"] = None if mean is None else 100.0 * s[(ds, v)]["ci95"]
                ref = s.get((ds, "full"), {}).get("mean")
                if mean is not None and ref is not None:
                    drops.append(100.0 * (mean - ref))
            row["avg_drop"] = float(np.mean(drops)) if drops else None
            rows.append(row)
        return rows

    def to_dict(self):
        return {
            "variants": list(self.variants),
            "datasets": list(self.datasets),
            "seeds": list(self.seeds),
            "table": self.table(),
            "summary": {f"{ds}/{v}": {m: summarize(getattr(r, m) for r in reps) for m in METRICS}
                        for (ds, v), reps in self.reports.items()},
        }


def run_ablation(spec, config, variants=VARIANTS, seeds=(1,), aggregation="mean_z", datasets=None):
    """Run every variant on one generated benchmark per seed and dataset.

    ``datasets`` maps a column name to a spec; by default the single column
    ``"synthetic"`` uses ``spec``. Each seed replaces the spec seed, and all
    variants share the benchmark generated for that seed.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    datasets = {"synthetic": spec} if datasets is None else dict(datasets)
    variants = tuple(variants)
    reports = {(ds, v): [] for ds in datasets for v in variants}
    for ds, ds_spec in datasets.items():
        for seed in seeds:
            bench = generate_benchmark(ds_spec.replace(seed=int(seed)))
            for v in variants:
                reports[(ds, v)].append(evaluate_gtma(bench, config, v, aggregation=aggregation))
    return AblationResult(variants, tuple(datasets), tuple(int(s) for s in seeds), reports)


def few_shot_sweep(spec, config, seeds=(1,), shots=None, variant="full", aggregation="mean_z"):
    """``{shots: [EvalReport per seed]}`` using the first ``shots`` support images."""
    shots = spec.shots if shots is None else tuple(shots)
    out = {n: [] for n in shots}
    for seed in seeds:
        bench = generate_benchmark(spec.replace(seed=int(seed)))
        for n in shots:
            out[n].append(evaluate_gtma(bench, config, variant, shots=n, aggregation=aggregation))
    return out
