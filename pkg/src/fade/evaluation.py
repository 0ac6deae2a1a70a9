"""Benchmark harness: score every test image of a category and compute all six metrics."""

from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .config import EngineConfig
from .data_io import DatasetIndex, heatmap_stem, load_mask, render_heatmap, sample_references
from .estimator import FADE
from .metrics import image_metrics, pixel_metrics
from .scoring_language import upsample
from .scoring_vision import MemoryBank

logger = logging.getLogger(__name__)

# WinCLIP-style readable names for dataset folder names
OBJECT_NAMES = {
    "metal_nut": "metal nut",
    "chewinggum": "chewing gum",
    "pipe_fryum": "pipe fryum",
    "pcb": "printed circuit board",
    "macaroni": "macaroni",
    "capsules": "capsules",
}


def object_name_for(category: str) -> str:
    base = re.sub(r"\d+$", "", category)
    return OBJECT_NAMES.get(base, base.replace("_", " "))


class CategoryError(RuntimeError):
    pass


def _resize_for_eval(values: np.ndarray, mask: np.ndarray, eval_size: int | None):
    if eval_size is None:
        return upsample(values, mask.shape), mask
    img = Image.fromarray(mask.astype(np.uint8) * 255).resize((eval_size, eval_size), Image.NEAREST)
    return upsample(values, eval_size), np.asarray(img) > 127


def _bank_path(bank_cache, category, k, seed, weights_id, scales) -> Path | None:
    if not bank_cache:
        return None
    weights = weights_id.replace("/", "_")
    scales = "-".join(str(s) for s in scales)
    return Path(bank_cache) / f"{category}_k{k}_seed{seed}_{weights}_{scales}.bank"


def evaluate_category(
    index: DatasetIndex,
    category: str,
    config: EngineConfig,
    backbone=None,
    heatmap_dir=None,
    bank_cache=None,
    cache_dir=None,
) -> list[dict]:
    """One record per seed with the six metrics for ``category``.

    Test images are encoded once and scored against every seed's bank.
    Zero-shot runs are seed-free: the single result is repeated per seed.
    """
    cat = index.categories[category]
    if not cat.test:
        raise CategoryError(f"{category}: no test images")
    k = config.k
    run_seeds = list(config.seeds) if k > 0 else [config.seeds[0]]

    detectors = {}
    for seed in run_seeds:
        refs = sample_references(index, category, k, seed)
        det = FADE.from_config(config, object_name_for(category), backbone=backbone, cache_dir=cache_dir)
        weights_id = backbone.weights_id if backbone is not None else config.backbone.weights_id
        path = _bank_path(bank_cache, category, k, seed, weights_id, config.scoring.scales) if k else None
        bank = None
        if path is not None and path.exists():
            bank = MemoryBank.load(path)
            logger.info("%s seed %d: bank cache hit %s", category, seed, path.name)
        try:
            det.fit(refs if bank is None else None, bank=bank)
        except Exception as exc:
            raise CategoryError(f"{category}: building references {refs}: {exc}") from exc
        if path is not None and bank is None:
            det.bank_.save(path)
        backbone = det.backbone_
        detectors[seed] = det

    scores = {seed: [] for seed in run_seeds}
    maps = {seed: [] for seed in run_seeds}
    labels, masks, names = [], [], []
    first = detectors[run_seeds[0]]
    for i, sample in enumerate(cat.test):
        try:
            q = first.encode(sample.path)
            mask = load_mask(sample.mask_path, q.shape)
            for seed, det in detectors.items():
                res = det.detect_encoded(q)
                scores[seed].append(res.image_score)
                maps[seed].append(res.anomaly_map.values.astype(np.float32))
                if heatmap_dir and seed == run_seeds[0]:
                    render_heatmap(sample.path, res.anomaly_map, heatmap_stem(heatmap_dir, category, sample),
                                   value_range=res.anomaly_map.value_range)
        except Exception as exc:
            raise CategoryError(f"{category}: failed on {sample.path}: {exc}") from exc
        labels.append(sample.label)
        masks.append(mask)
        names.append(sample.path)
        if (i + 1) % 20 == 0:
            logger.info("%s: %d/%d images", category, i + 1, len(cat.test))

    m = config.metrics
    records = []
    for seed in run_seeds:
        resized = [_resize_for_eval(v, g, m.eval_size) for v, g in zip(maps[seed], masks)]
        rec = {"category": category, "seed": seed, "k": k}
        rec.update(image_metrics(scores[seed], labels))
        rec.update(pixel_metrics(
            [r[0] for r in resized], [r[1] for r in resized], names,
            fpr_limit=m.pro_fpr_limit, exact_limit=m.exact_limit, n_approx=m.n_approx,
        ))
        records.append(rec)
        logger.info(
            "%s seed %s: AUROC %.4f pAUROC %.4f PRO %.4f", category, seed, rec["auroc"], rec["pauroc"], rec["pro"]
        )
    if k == 0:
        records = [dict(records[0], seed=seed) for seed in config.seeds]
    return records


def evaluate(
    index: DatasetIndex,
    config: EngineConfig,
    categories: Sequence[str] | None = None,
    backbone=None,
    heatmap_dir=None,
    bank_cache=None,
    cache_dir=None,
):
    """Evaluate several categories; returns (records, {category: error message})."""
    categories = list(categories or sorted(index.categories))
    unknown = [c for c in categories if c not in index.categories]
    if unknown:
        raise KeyError(f"unknown categories {unknown}")
    records, failures = [], {}
    for category in categories:
        try:
            recs = evaluate_category(index, category, config, backbone, heatmap_dir, bank_cache, cache_dir)
        except CategoryError as exc:
            logger.error("%s", exc)
            failures[category] = str(exc)
            continue
        records.extend(recs)
    return records, failures
