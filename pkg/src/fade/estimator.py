"""scikit-learn style estimator for zero-/few-shot anomaly detection.

``fit`` takes the k normal reference images (none for zero-shot) and
embeds the prompt ensembles; ``score_samples`` returns image-level anomaly
scores and ``transform`` the fused anomaly maps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .backbone import DEFAULT_WEIGHTS_ID, Backbone, config_for, load_backbone
from .fusion import DetectionResult, fuse
from .gem import GemConfig, gem_encode
from .prompts import EmbeddingCache, embed_ensemble, resolve_ensemble
from .scoring_language import ScoreConfig, multiscale_language_map, score_image
from .scoring_vision import MemoryBank, build_bank_fewshot, vision_score_from_grids, zero_shot_vision_map
from .utils import check_image, check_images, check_scales

logger = logging.getLogger(__name__)


@dataclass
class QueryEncoding:
    """Everything the scoring stages need from one query image."""

    cls_embedding: np.ndarray | None = None
    clip_grids: dict[int, np.ndarray] = field(default_factory=dict)
    gem_grids: dict[int, np.ndarray] = field(default_factory=dict)
    shape: tuple[int, int] | None = None


class FADE(BaseEstimator):
    """Training-free anomaly classifier and segmenter on a frozen CLIP backbone.

    Parameters
    ----------
    backbone : str or Backbone
        Weights id (see ``fade.backbone.WEIGHTS_SOURCES``, or ``"toy"``) or a loaded backbone.
    object_name : str
        Substituted for ``[o]`` in templated prompts.
    scales : tuple of int
        Input sizes for multi-scale aggregation; each must be a multiple of the patch size.
    temperature : float
        Softmax temperature of the language score.
    canonical_map_size : int
        Side of the square maps that per-scale maps are upsampled to.
    gem_* :
        GEM pathway settings, see :class:`fade.gem.GemConfig`.  ``use_gem=False``
        substitutes CLIP patch embeddings for GEM ones.
    classification_prompts, segmentation_prompts : str
        Ensembles for image scores and for maps ("winclip", "generated",
        "combined" or a file prefix).
    use_language, use_vision : bool
        Guidance switches for ablations.
    cache_dir : str or None
        Directory for cached prompt embeddings; ``None`` disables caching.
    """

    def __init__(
        self,
        backbone=DEFAULT_WEIGHTS_ID,
        object_name="object",
        scales=(240, 448, 896),
        temperature=0.01,
        canonical_map_size=448,
        smoothing_sigma=0.0,
        gem_layer_span=None,
        gem_kinds=("qq", "kk", "vv"),
        gem_normalize=True,
        gem_scale_factor="auto",
        gem_include_residual=False,
        use_gem=True,
        classification_prompts="winclip",
        segmentation_prompts="combined",
        use_language=True,
        use_vision=True,
        cache_dir=None,
        download=False,
    ):
        self.backbone = backbone
        self.object_name = object_name
        self.scales = scales
        self.temperature = temperature
        self.canonical_map_size = canonical_map_size
        self.smoothing_sigma = smoothing_sigma
        self.gem_layer_span = gem_layer_span
        self.gem_kinds = gem_kinds
        self.gem_normalize = gem_normalize
        self.gem_scale_factor = gem_scale_factor
        self.gem_include_residual = gem_include_residual
        self.use_gem = use_gem
        self.classification_prompts = classification_prompts
        self.segmentation_prompts = segmentation_prompts
        self.use_language = use_language
        self.use_vision = use_vision
        self.cache_dir = cache_dir
        self.download = download

    @classmethod
    def from_config(cls, config, object_name="object", backbone=None, cache_dir=None) -> "FADE":
        g, s = config.gem, config.scoring
        return cls(
            backbone=backbone if backbone is not None else config.backbone.weights_id,
            object_name=config.prompts.object_name or object_name,
            scales=s.scales,
            temperature=s.temperature,
            canonical_map_size=s.canonical_map_size,
            smoothing_sigma=s.smoothing_sigma,
            gem_layer_span=g.layer_span,
            gem_kinds=g.kinds,
            gem_normalize=g.normalize,
            gem_scale_factor=g.scale_factor,
            gem_include_residual=g.include_residual,
            use_gem=g.enabled,
            classification_prompts=config.prompts.classification,
            segmentation_prompts=config.prompts.segmentation,
            use_language=config.fusion.use_language,
            use_vision=config.fusion.use_vision,
            cache_dir=cache_dir,
        )

    # -- configuration helpers ----------------------------------------------

    @property
    def gem_config(self) -> GemConfig:
        return GemConfig(
            layer_span=self.gem_layer_span,
            kinds=tuple(self.gem_kinds),
            normalize=self.gem_normalize,
            scale_factor=self.gem_scale_factor,
            include_residual=self.gem_include_residual,
            enabled=self.use_gem,
        )

    @property
    def score_config(self) -> ScoreConfig:
        return ScoreConfig(self.temperature, tuple(self.scales), self.canonical_map_size, self.smoothing_sigma)

    def _load_backbone(self) -> Backbone:
        if isinstance(self.backbone, Backbone):
            return self.backbone
        return load_backbone(config_for(self.backbone), download=self.download)

    # -- fitting ----------------------------------------------------------------

    def fit(self, X=None, y=None, bank: MemoryBank | None = None):
        """Embed the prompt ensembles and build the memory bank from reference images ``X``.

        ``X`` may be empty or None (zero-shot).  ``y``, if given, must be all
        zeros: references are normal images.  A prebuilt ``bank`` replaces ``X``.
        """
        if not (self.use_language or self.use_vision):
            raise ValueError("at least one of use_language / use_vision must be true")
        self.backbone_ = self._load_backbone()
        self.scales_ = check_scales(self.scales, self.backbone_.patch_size)
        self.gem_config.span_for(self.backbone_.layer_count)

        cache = EmbeddingCache(Path(self.cache_dir) / "text") if self.cache_dir else None
        self.classification_embedding_ = embed_ensemble(
            self.backbone_, resolve_ensemble(self.classification_prompts, self.object_name), cache
        )
        self.segmentation_embedding_ = embed_ensemble(
            self.backbone_, resolve_ensemble(self.segmentation_prompts, self.object_name), cache
        )

        refs = check_images(X)
        if y is not None and np.any(np.asarray(y) != 0):
            raise ValueError("reference images must all be normal (y == 0)")
        if bank is not None:
            if bank.scales != tuple(sorted(self.scales_)):
                raise ValueError(f"bank scales {bank.scales} differ from {self.scales_}")
            if bank.weights_id and bank.weights_id != self.backbone_.weights_id:
                raise ValueError(f"bank built with {bank.weights_id}, backbone is {self.backbone_.weights_id}")
            self.bank_ = bank
        elif refs:
            self.bank_ = build_bank_fewshot(self.backbone_, refs, self.scales_)
        else:
            self.bank_ = None
        self.n_shots_ = 0 if self.bank_ is None else self.bank_.shot_count
        return self

    # -- inference ----------------------------------------------------------------

    def encode(self, image) -> QueryEncoding:
        """Run the backbone (and GEM pathway) on one image at every needed scale."""
        check_is_fitted(self, "backbone_")
        bb = self.backbone_
        img = check_image(image)
        gem_cfg = self.gem_config
        need_gem = self.use_language or (self.use_vision and self.n_shots_ == 0)
        need_clip = self.use_vision and self.n_shots_ > 0
        q = QueryEncoding(shape=img.shape[:2])
        for s in self.scales_:
            enc = bb.encode_image(img, s, keep_layers=need_gem and gem_cfg.enabled)
            if need_clip:
                q.clip_grids[s] = enc.patch_grid
            if need_gem:
                q.gem_grids[s] = gem_encode(bb, config=gem_cfg, encoding=enc).patch_grid
            if s == bb.config.native_size:
                q.cls_embedding = enc.cls_embedding
        if self.use_language and q.cls_embedding is None:
            q.cls_embedding = bb.encode_image(img, bb.config.native_size).cls_embedding
        return q

    def detect_encoded(self, q: QueryEncoding) -> DetectionResult:
        """Score a precomputed :class:`QueryEncoding`."""
        check_is_fitted(self, "backbone_")
        cfg = self.score_config
        s_lang = M_lang = s_vis = M_vis = None
        if self.use_language:
            s_lang = score_image(q.cls_embedding, self.classification_embedding_, cfg.temperature)
            M_lang = multiscale_language_map(q.gem_grids, self.segmentation_embedding_, cfg)
        if self.use_vision:
            if self.n_shots_ > 0:
                vis = vision_score_from_grids(q.clip_grids, self.bank_, cfg.canonical_map_size)
                M_vis, s_vis = vis.map, vis.image_score
            else:
                M_vis = zero_shot_vision_map(q.gem_grids, cfg.canonical_map_size)
        return fuse(
            s_lang, M_lang, M_vis, s_vis,
            shots=self.n_shots_,
            use_language=self.use_language,
            use_vision=self.use_vision,
            size=cfg.canonical_map_size,
        )

    def detect(self, X) -> list[DetectionResult]:
        return [self.detect_encoded(self.encode(img)) for img in check_images(X)]

    def score_samples(self, X) -> np.ndarray:
        """Image-level anomaly scores (higher means more anomalous)."""
        return np.array([r.image_score for r in self.detect(X)])

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X)

    def transform(self, X) -> np.ndarray:
        """Fused anomaly maps, shape (n_images, canonical_map_size, canonical_map_size)."""
        return np.stack([r.anomaly_map.values for r in self.detect(X)])

