"""Repetitive sample-drop-out training for imbalanced score classification,
with feature-map-difference highlight extraction."""

__version__ = "0.1.0"

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DEFAULT_PROPORTIONS,
    DatasetView,
    ManifestError,
    Sample,
    ScoreDistribution,
    apply_mask,
    class_counts,
    export_dataset,
    full_view,
    largest_remainder_counts,
    load_manifest,
    shuffle_split,
    synth_generate,
)
from .evaluate import (
    assigned_rates,
    emit_report,
    loss_table,
    middle_score,
    per_class_accuracy,
    share_above,
)
from .highlight import (
    DifferenceMap,
    HighlightConfig,
    HighlightMask,
    difference_map,
    extract_highlight,
    extract_highlight_pair,
    mask_iou,
    min_corr_index,
    pearson,
    render_overlay,
    two_means,
)
from .nn import (
    BatchActivations,
    BuildError,
    Conv,
    Dense,
    Flatten,
    Gradients,
    MaxPool,
    Network,
    ReLU,
    backward,
    build_network,
    conv1_feature_maps,
    default_architecture,
    fc_likelihoods,
    forward,
    replace_head,
    sgd_step,
    sigmoid,
    softmax,
)
from .trainer import (
    DropoutThresholds,
    EmptyViewError,
    LikelihoodTable,
    TrainConfig,
    TrainRun,
    classify,
    compute_likelihoods,
    load_run,
    predict_scores,
    quadratic_loss,
    repetitive_train,
    select_dropouts,
    train_initial,
    tune_thresholds,
)

__all__ = [name for name in dir() if not name.startswith("_")]
