"""Combination of language and vision guidance into final scores and maps.

    AC  0-shot  s_lang            AS  0-shot  M_lang + M_vis0
        k-shot  s_lang + s_vis        k-shot  M_lang + M_visk
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scoring_language import AnomalyMap, upsample


@dataclass
class DetectionResult:
    image_score: float
    anomaly_map: AnomalyMap
    shots: int
    components: dict = field(default_factory=dict, repr=False)

    @property
    def setting(self) -> str:
        return "zero_shot" if self.shots == 0 else f"{self.shots}_shot"

    def to_dict(self) -> dict:
        return {
            "image_score": float(self.image_score),
            "setting": self.setting,
            "shots": self.shots,
            "map_shape": list(self.anomaly_map.shape),
            "components": {k: float(v) for k, v in self.components.items() if np.isscalar(v)},
        }


def _as_values(m) -> np.ndarray | None:
    if m is None:
        return None
    return m.values if isinstance(m, AnomalyMap) else np.asarray(m, dtype=np.float64)


def fuse(
    s_lang: float | None,
    M_lang,
    M_vis=None,
    s_vis: float | None = None,
    *,
    shots: int = 0,
    use_language: bool = True,
    use_vision: bool = True,
    size: int | None = None,
) -> DetectionResult:
    """Fuse the guidance components for one image.

    ``shots=0`` ignores ``s_vis`` for the image score.  Component maps are
    resampled to ``size`` (default: the language map's size) before the
    elementwise sum.  Disabling one guidance returns the other one's map and
    score unchanged; a vision-only zero-shot score is the max of ``M_vis``.
    """
    if not (use_language or use_vision):
        raise ValueError("at least one of language or vision guidance must be enabled")
    if shots > 0 and use_vision and (s_vis is None or M_vis is None):
        raise ValueError("k-shot fusion needs s_vis and M_vis")
    if shots == 0 and s_vis is not None:
        raise ValueError("zero-shot fusion takes no image-level vision score")
    lang = _as_values(M_lang) if use_language else None
    vis = _as_values(M_vis) if use_vision else None
    if use_language and (lang is None or s_lang is None):
        raise ValueError("language guidance enabled but s_lang/M_lang missing")
    if use_vision and vis is None:
        raise ValueError("vision guidance enabled but M_vis missing")

    ref = lang if lang is not None else vis
    if size is not None:
        target = (size, size)
    else:
        target = ref.shape
    parts = [upsample(p, target) if p.shape != target else p for p in (lang, vis) if p is not None]
    if any(p.shape != target for p in parts):
        raise ValueError("component map geometry mismatch after canonicalisation")

    if use_language and use_vision:
        values = parts[0] + parts[1]
        score = s_lang + s_vis if shots > 0 else s_lang
        provenance, rng = "fused", (0.0, 2.0)
    elif use_language:
        values, score, provenance, rng = parts[0], s_lang, "language", (0.0, 1.0)
    else:
        values = parts[0]
        score = s_vis if shots > 0 else float(values.max())
        provenance, rng = "vision", (0.0, 1.0)

    components = {"s_lang": s_lang, "s_vis": s_vis, "M_lang": _as_values(M_lang), "M_vis": _as_values(M_vis)}
    return DetectionResult(float(score), AnomalyMap(values, provenance, rng), shots, components)
