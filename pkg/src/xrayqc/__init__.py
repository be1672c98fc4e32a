"""Anomaly detection on 16-bit X-ray images of coated fuel cell electrodes."""

__version__ = "0.1.0"

from .augment import AugmentConfig, apply_augment, flip_h, flip_v, resize
from .convert import (
    ConversionMethod,
    GlobalBounds,
    LocalBounds,
    compute_global_bounds,
    compute_local_bounds,
    convert,
    convert_global,
    convert_local,
    convert_mixed,
    convert_naive,
)
from .evaluate import (
    ConfusionCounts,
    CvReport,
    FoldResult,
    accuracy,
    balanced_accuracy,
    confusion,
    crossval_lobo,
    report,
    tnr,
    tpr,
)
from .imageio import ImageStats, image_stats, load_pgm16, percentile, save_pgm16, save_ppm8
from .model import (
    BackboneSpec,
    HeadParams,
    Prediction,
    TrainConfig,
    backbone_forward,
    cross_entropy,
    head_forward,
    head_gradients,
    load_features,
    load_params,
    lr_at,
    predict,
    save_params,
    train,
)
from .synth import AnomalyKind, DatasetIndex, Label, SampleRecord, SynthConfig, generate_dataset, inject_anomaly, load_index, save_index
