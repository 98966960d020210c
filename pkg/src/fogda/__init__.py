"""Fog-robust domain-adaptive object detection on synthetic scenes.

A self-contained stack: a reverse-mode autodiff engine over float64 numpy,
an atmospheric-scattering fog model with dark-channel-prior dehazing, a
deterministic scene renderer, a small convolutional detector with
adversarial transmission alignment, depth and reconstruction auxiliaries,
mean-teacher pseudo-labeling, and a PASCAL-style mAP evaluator.
"""

from .evaluation import MetricsReport, average_precision, evaluate, iou, match_detections
from .fog import apply_fog, dcp_defog, dehaze_exact, normalize_map, transmission_from_depth
from .losses import LossBundle, LossWeights, total_loss
from .models import (
    Detection,
    ModelParams,
    decode_detections,
    load_checkpoint,
    nms,
    save_checkpoint,
)
from .scenes import (
    DatasetManifest,
    FogDataset,
    SceneSample,
    SceneSpec,
    load_manifest,
    render_scene,
    synthesize_dataset,
)
from .tensor import NumericalAbort, Tape, Tensor, backward, sgd_step
from .training import EmaState, TrainConfig, ema_update, generate_pseudo_labels, train

__version__ = "0.1.0"

__all__ = [
    "ModelParams", "Detection", "SceneSpec", "SceneSample", "DatasetManifest",
    "FogDataset", "MetricsReport", "LossBundle", "LossWeights", "TrainConfig",
    "EmaState", "Tape", "Tensor", "NumericalAbort",
    "apply_fog", "dehaze_exact", "dcp_defog", "transmission_from_depth",
    "normalize_map", "render_scene", "synthesize_dataset", "load_manifest",
    "decode_detections", "nms", "save_checkpoint", "load_checkpoint",
    "iou", "match_detections", "average_precision", "evaluate",
    "total_loss", "backward", "sgd_step", "ema_update",
    "generate_pseudo_labels", "train",
    "__version__",
]
