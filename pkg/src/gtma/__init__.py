"""Test-time pseudo-word synthesis for out-of-vocabulary visual concepts.

A visual anchor for an unseen concept is matched by optimizing a continuous
pseudo-word in the text encoder's token space, with a pull toward known word
embeddings and a step size driven by consecutive-gradient agreement.
"""

__version__ = "0.1.0"

from .benchmark import (
    VARIANTS,
    BenchmarkSpec,
    EvalReport,
    GenerationFailure,
    baseline_text_embeddings,
    evaluate,
    evaluate_baseline,
    evaluate_gtma,
    few_shot_sweep,
    generate_benchmark,
    gtma_class_anchors,
    run_ablation,
)
from .encoder import (
    AttentionParams,
    Template,
    TextEncoderParams,
    VisualAnchor,
    VocabularyTable,
    alignment_gradient,
    alignment_score,
    encode_text,
    global_context,
    raw_anchor,
    refine_anchor,
)
from .estimators import AnchorRefiner, GTMAClassifier, PseudoWordOptimizer
from .grpo import (
    GrpoConfig,
    StepRecord,
    Trajectory,
    adaptive_step,
    grad_similarity,
    grpo_run,
    init_pseudo_word,
    objective_value,
    project_to_vocab,
    regularization_gradient,
)
from .numeric import (
    DimMismatchError,
    GTMAError,
    NonFiniteError,
    ZeroVectorError,
    cosine_sim,
    finite_diff_gradient,
    l2_normalize,
    scaled_dot_attention,
    softmax,
)
