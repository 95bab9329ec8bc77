"""Multi-representational mortality risk prediction for ICU episodes.

Fuses three views of the first 48 hours of an ICU stay: hourly vital-sign
time series (LSTM), clinical-note embeddings aggregated with exponential
time decay, and an embedded expert summary distilled from the concatenated
notes.  Ships a synthetic cohort generator, a from-scratch trainable model
with verified gradients, exact ranking metrics, an sklearn-style estimator,
and a CLI covering the full generate/train/ablate/evaluate workflow.
"""

__version__ = "0.1.0"

from .cohort import (  # noqa: F401
    ChannelSpec,
    CohortSplit,
    Demographics,
    Episode,
    GeneratorConfig,
    NoteEvent,
    VitalsSpec,
    default_vitals_spec,
    generate_synthetic,
    load_cohort,
    preprocess,
    save_cohort,
    split_cohort,
)
from .errors import ConfigError, DataError, IcuFusionError, TrainingError  # noqa: F401
from .estimator import EpisodeRiskClassifier  # noqa: F401
from .featurize import (  # noqa: F401
    EmbeddingSpec,
    HashingNoteEmbedder,
    NoteEmbedding,
    SummarizerConfig,
    concat_notes,
    embed_text,
    load_precomputed_embeddings,
    summarize,
)
from .metrics import (  # noqa: F401
    EvalReport,
    ScoredSet,
    auprc,
    auroc,
    brute_force_metrics,
    improvement,
    project_embeddings,
    subgroup_report,
)
from .model import FusionModelParams, ModelDims, gradient_check  # noqa: F401
from .temporal import DecayConfig, aggregate_notes, align_summary, decay_weight  # noqa: F401
from .trainer import TrainConfig, TrainManifest, bce_loss, train  # noqa: F401
