"""Language-guided anomaly scores from CLS and patch embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import expit

from .prompts import PromptEnsembleEmbedding

PROVENANCES = ("language", "vision", "fused")


@dataclass(frozen=True)
class ScoreConfig:
    temperature: float = 0.01
    scales: tuple[int, ...] = (240, 448, 896)
    canonical_map_size: int = 448
    smoothing_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.scales:
            raise ValueError("at least one scale is required")
        if self.canonical_map_size < 1 or self.smoothing_sigma < 0:
            raise ValueError("invalid canonical_map_size or smoothing_sigma")


@dataclass
class AnomalyMap:
    """Dense anomaly scores for one image.

    ``value_range`` documents the closed interval the values live in:
    language maps (0, 1), vision maps [0, 1], fused maps [0, 2).
    """

    values: np.ndarray
    provenance: str
    value_range: tuple[float, float] = field(default=(0.0, 1.0))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"anomaly map must be 2-D, got shape {self.values.shape}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("anomaly map contains non-finite values")

    @property
    def shape(self):
        return self.values.shape

    def max(self) -> float:
        return float(self.values.max())


def _cosine_to(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """<x, h> / ||h|| for unit-norm rows ``x``."""
    return np.asarray(x, dtype=np.float64) @ (np.asarray(h, dtype=np.float64) / np.linalg.norm(h))


def two_way_softmax(sim_pos, sim_neg, temperature: float = 0.01):
    """exp(s+/t) / (exp(s+/t) + exp(s-/t)), evaluated as a logistic of the gap."""
    sim_pos = np.asarray(sim_pos, dtype=np.float64)
    sim_neg = np.asarray(sim_neg, dtype=np.float64)
    if not (np.all(np.isfinite(sim_pos)) and np.all(np.isfinite(sim_neg))):
        raise ValueError("non-finite similarity")
    return expit((sim_pos - sim_neg) / temperature)


def score_image(cls_embedding, ensemble: PromptEnsembleEmbedding, temperature: float = 0.01) -> float:
    """Language-guided image anomaly score in (0, 1)."""
    x = np.asarray(cls_embedding, dtype=np.float64)
    return float(two_way_softmax(_cosine_to(x, ensemble.h_plus), _cosine_to(x, ensemble.h_minus), temperature))


def score_patches(patch_grid, ensemble: PromptEnsembleEmbedding, temperature: float = 0.01) -> AnomalyMap:
    """Per-patch language score; output has the grid's spatial shape."""
    grid = np.asarray(patch_grid, dtype=np.float64)
    values = two_way_softmax(
        _cosine_to(grid, ensemble.h_plus), _cosine_to(grid, ensemble.h_minus), temperature
    )
    return AnomalyMap(values, "language", (0.0, 1.0))


def upsample(values: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres (``align_corners=False``)."""
    size = (size, size) if isinstance(size, int) else tuple(size)
    values = np.asarray(values, dtype=np.float64)
    if values.shape == size:
        return values
    t = torch.from_numpy(values)[None, None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()


def aggregate_maps(
    maps: Sequence[AnomalyMap | np.ndarray],
    size: int,
    provenance: str = "language",
    smoothing_sigma: float = 0.0,
) -> AnomalyMap:
    """Upsample each map to ``size`` x ``size`` and average them."""
    if not maps:
        raise ValueError("no maps to aggregate")
    arrays = [m.values if isinstance(m, AnomalyMap) else np.asarray(m) for m in maps]
    fused = np.mean([upsample(a, size) for a in arrays], axis=0)
    if smoothing_sigma > 0:
        from scipy.ndimage import gaussian_filter

        fused = gaussian_filter(fused, sigma=smoothing_sigma)
    rng = (0.0, 1.0)
    return AnomalyMap(fused, provenance, rng)


def multiscale_language_map(
    patch_grids: Mapping[int, np.ndarray],
    ensemble: PromptEnsembleEmbedding,
    config: ScoreConfig = ScoreConfig(),
) -> AnomalyMap:
    """Language map averaged over scales at the canonical size.

    ``patch_grids`` maps each scale to the (g, g, d) patch embeddings at that
    scale (GEM embeddings in the standard pipeline).
    """
    maps = [score_patches(patch_grids[s], ensemble, config.temperature) for s in config.scales]
    return aggregate_maps(maps, config.canonical_map_size, "language", config.smoothing_sigma)


def language_map_for_image(backbone, image, ensemble, config: ScoreConfig = ScoreConfig(), gem_config=None) -> AnomalyMap:
    """Encode ``image`` with GEM at every configured scale and score it."""
    from .gem import GemConfig, gem_encode

    gem_config = GemConfig() if gem_config is None else gem_config
    grids = {s: gem_encode(backbone, image, s, gem_config).patch_grid for s in config.scales}
    return multiscale_language_map(grids, ensemble, config)
