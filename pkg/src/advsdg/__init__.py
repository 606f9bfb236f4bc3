"""Single-source domain generalization for segmentation via adversarial texture synthesis.

The toolkit trains a segmentation network on one source domain while two
trainable texture synthesizers generate adversarial "new domains" from it.
A dual-view KL consistency loss and a patch-contrastive semantic regularizer
shape the min-max game; evaluation measures Dice on held-out domains.
"""

from .data import (
    DatasetSplit,
    Modality,
    ModalityError,
    Sample,
    Volume,
    augment,
    clip_ct,
    clip_mri_percentile,
    load_domain,
    normalize_zscore,
    resize_axial,
    resize_axial_mask,
    save_domain,
    split_source,
)
from .config import (
    ConfigError,
    DataConfig,
    ExperimentConfig,
    ModelConfig,
    TrainMode,
    config_hash,
    parse_config_text,
    render_config_text,
)
from .evaluation import (
    ResultsTable,
    dice_score,
    evaluate_cross_domain,
    mean_foreground_dice,
    run_ablation,
)
from .losses import LossReport, consistency_loss, kl_divergence, supervised_loss
from .mi import (
    PatchFeatureExtractor,
    contrastive_mi_loss,
    extract_patch_features,
    sample_patch_locations,
)
from .segmenter import Segmenter, predict_mask
from .synthesizer import DomainSynthesizer, StyleNoise, adain, sample_style, synthesize
from .toy import TEXTURE_FAMILIES, make_toy_dataset
from .trainer import (
    Checkpoint,
    TrainConfig,
    TrainingDiverged,
    TrainState,
    init_state,
    load_checkpoint,
    run_training,
    select_checkpoint,
    train_step_adversary,
    train_step_segmenter,
)

__version__ = "0.1.0"

__all__ = [
    "Volume", "Sample", "DatasetSplit", "Modality", "ModalityError",
    "clip_ct", "clip_mri_percentile", "resize_axial", "resize_axial_mask",
    "normalize_zscore", "augment", "split_source", "load_domain", "save_domain",
    "make_toy_dataset", "TEXTURE_FAMILIES",
    "StyleNoise", "DomainSynthesizer", "sample_style", "adain", "synthesize",
    "PatchFeatureExtractor", "sample_patch_locations", "extract_patch_features",
    "contrastive_mi_loss",
    "Segmenter", "predict_mask",
    "LossReport", "kl_divergence", "consistency_loss", "supervised_loss",
    "TrainConfig", "TrainMode", "ModelConfig", "DataConfig", "ExperimentConfig",
    "ConfigError", "config_hash", "parse_config_text", "render_config_text",
    "TrainState", "Checkpoint", "TrainingDiverged", "init_state",
    "train_step_segmenter", "train_step_adversary", "run_training",
    "select_checkpoint", "load_checkpoint",
    "dice_score", "mean_foreground_dice", "evaluate_cross_domain",
    "run_ablation", "ResultsTable",
    "__version__",
]
