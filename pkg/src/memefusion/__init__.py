"""Multimodal hateful-meme classification with frozen dual encoders.

The package trains small adapters and fusion heads on top of a frozen
image/text encoder pair. Images additionally enter the text tower as
pseudo-word tokens (textual inversion), so the text encoder reads the
image and the caption together.

Heavy components (encoders, the inversion network) are frozen and loaded
from weight archives; everything trainable is plain numpy with analytic
gradients, so runs are deterministic down to the byte.
"""

from .adapters import ProjectionParams, init_projection, project
from .backbone import load_backbone, load_pretrained
from .backbone.base import Backbone, FeatureVector, TokenEmbeddingSequence
from .backbone.mock import MockBackbone
from .config import (
    config_hash,
    default_config,
    load_config,
    resolve_config,
)
from .data import (
    DatasetSplit,
    MemeRecord,
    generate_synthetic_confounders,
    load_harmeme_split,
    load_hmc_split,
    split_synthetic,
)
from .errors import MemeFusionError
from .eval import MetricsReport, accuracy, auroc, evaluate, run_ablation, run_baselines
from .fusion import (
    ClassifyResult,
    CombinerParams,
    HeadParams,
    InteractionHeadParams,
    baseline_fuse,
    classify,
    combine,
    interaction_fuse,
)
from .inversion import (
    PhiNetwork,
    PromptTemplate,
    PseudoToken,
    build_prompt,
    encode_multimodal_text,
    invert,
    load_phi,
)
from .model import MemeClassifier, RecordFeatures
from .training import (
    bce_loss,
    bce_with_logits,
    build_model,
    load_checkpoint,
    save_checkpoint,
    train_all,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "ClassifyResult",
    "CombinerParams",
    "DatasetSplit",
    "FeatureVector",
    "HeadParams",
    "InteractionHeadParams",
    "MemeClassifier",
    "MemeFusionError",
    "MemeRecord",
    "MetricsReport",
    "MockBackbone",
    "PhiNetwork",
    "ProjectionParams",
    "PromptTemplate",
    "PseudoToken",
    "RecordFeatures",
    "TokenEmbeddingSequence",
    "accuracy",
    "auroc",
    "baseline_fuse",
    "bce_loss",
    "bce_with_logits",
    "build_model",
    "build_prompt",
    "classify",
    "combine",
    "config_hash",
    "default_config",
    "encode_multimodal_text",
    "evaluate",
    "generate_synthetic_confounders",
    "init_projection",
    "interaction_fuse",
    "invert",
    "load_backbone",
    "load_checkpoint",
    "load_config",
    "load_harmeme_split",
    "load_hmc_split",
    "load_phi",
    "load_pretrained",
    "project",
    "resolve_config",
    "run_ablation",
    "run_baselines",
    "save_checkpoint",
    "split_synthetic",
    "train_all",
    "train_stage1",
    "train_stage2",
    "__version__",
]
