"""Training-free zero-/few-shot anomaly classification and segmentation on a frozen CLIP backbone."""

from .backbone import Backbone, BackboneConfig, WeightsError, load_backbone, toy_backbone
from .config import EngineConfig, load_config, save_config
from .estimator import FADE
from .fusion import DetectionResult, fuse
from .gem import GemConfig, gem_encode, self_self_attention
from .metrics import aupr, auroc, f1_max, image_metrics, pixel_metrics, pro
from .prompts import PromptEnsemble, builtin_ensemble, embed_ensemble, load_ensemble
from .scoring_language import AnomalyMap, ScoreConfig
from .scoring_vision import MemoryBank, patch_distance_map

__version__ = "0.1.0"

__all__ = [
    "AnomalyMap",
    "Backbone",
    "BackboneConfig",
    "DetectionResult",
    "EngineConfig",
    "FADE",
    "GemConfig",
    "MemoryBank",
    "PromptEnsemble",
    "ScoreConfig",
    "WeightsError",
    "aupr",
    "auroc",
    "builtin_ensemble",
    "embed_ensemble",
    "f1_max",
    "fuse",
    "gem_encode",
    "image_metrics",
    "load_backbone",
    "load_config",
    "load_ensemble",
    "patch_distance_map",
    "pixel_metrics",
    "pro",
    "save_config",
    "self_self_attention",
    "toy_backbone",
]
