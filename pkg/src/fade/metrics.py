"""Image- and pixel-level anomaly detection metrics.

Threshold sweeps treat ``score >= t`` as a positive prediction.  With at
most ``exact_limit`` distinct scores every distinct score is a threshold;
beyond that ``n_approx`` quantile-spaced thresholds are used.  AUROC is
always exact (rank statistic).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

EXACT_LIMIT = 50_000
N_APPROX = 1000
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _check(scores, labels, need_negatives: bool = True):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    labels = labels.astype(bool)
    if not labels.any():
        raise ValueError("no positive samples")
    if need_negatives and labels.all():
        raise ValueError("no negative samples")
    return scores, labels


def thresholds_for(scores: np.ndarray, exact_limit: int = EXACT_LIMIT, n_approx: int = N_APPROX) -> np.ndarray:
    """Descending thresholds for a sweep."""
    uniq = np.unique(scores)
    if len(uniq) > exact_limit:
        uniq = np.unique(np.quantile(scores, np.linspace(0.0, 1.0, n_approx)))
    return uniq[::-1]


def counts_at(scores: np.ndarray, thresholds: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Sum of ``weights`` (default 1) over samples with ``score >= t`` for each threshold."""
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=np.float64)[order]
    # suffix sums: total weight at index i and above
    suffix = np.concatenate([np.cumsum(w[::-1])[::-1], [0.0]])
    return suffix[np.searchsorted(s, thresholds, side="left")]


def auroc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg), ties counted half."""
    scores, labels = _check(scores, labels)
    ranks = rankdata(scores)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels, exact_limit: int = EXACT_LIMIT, n_approx: int = N_APPROX) -> float:
    """Step-integrated area under precision-recall: sum over thresholds of (R_i - R_{i-1}) P_i."""
    scores, labels = _check(scores, labels, need_negatives=False)
    th = thresholds_for(scores, exact_limit, n_approx)
    tp = counts_at(scores[labels], th)
    pp = counts_at(scores, th)
    precision = tp / pp
    recall = tp / labels.sum()
    d_recall = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(d_recall * precision))


def f1_max(scores, labels, exact_limit: int = EXACT_LIMIT, n_approx: int = N_APPROX) -> float:
    scores, labels = _check(scores, labels, need_negatives=False)
    th = thresholds_for(scores, exact_limit, n_approx)
    tp = counts_at(scores[labels], th)
    pp = counts_at(scores, th)
    f1 = 2.0 * tp / (pp + labels.sum())
    return float(f1.max())


def image_metrics(scores, labels) -> dict[str, float]:
    return {"auroc": auroc(scores, labels), "aupr": aupr(scores, labels), "f1_max": f1_max(scores, labels)}


# ---------------------------------------------------------------------------
# Pixel level


def region_labels(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected components of a binary mask (0 = background)."""
    return ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)


def _stack(maps: Sequence, masks: Sequence, names: Sequence[str] | None):
    if len(maps) != len(masks):
        raise ValueError(f"{len(maps)} maps but {len(masks)} masks")
    names = names or [f"image {i}" for i in range(len(maps))]
    out_maps, out_masks = [], []
    for m, g, name in zip(maps, masks, names):
        m = np.asarray(getattr(m, "values", m), dtype=np.float64)
        g = np.asarray(g)
        if m.shape != g.shape:
            raise ValueError(f"{name}: map shape {m.shape} differs from mask shape {g.shape}")
        out_maps.append(m)
        out_masks.append(g > 0)
    return out_maps, out_masks


def trapezoid_upto(x: np.ndarray, y: np.ndarray, x_max: float) -> float:
    """Trapezoidal area under (x, y) for x in [x[0], x_max]; x must be non-decreasing."""
    if x_max <= x[0]:
        return 0.0
    keep = x <= x_max
    xs, ys = x[keep], y[keep]
    if xs[-1] < x_max and keep.sum() < len(x):
        i = int(np.argmax(~keep))  # first point beyond the limit
        x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
        y_lim = y0 + (y1 - y0) * (x_max - x0) / (x1 - x0) if x1 > x0 else y1
        xs = np.append(xs, x_max)
        ys = np.append(ys, y_lim)
    return float(np.trapezoid(ys, xs) if hasattr(np, "trapezoid") else np.trapz(ys, xs))


def pro_curve(maps, masks, names=None, exact_limit: int = EXACT_LIMIT, n_approx: int = N_APPROX):
    """(fpr, pro) arrays over descending thresholds, starting at (0, 0)."""
    maps, masks = _stack(maps, masks, names)
    scores, weights, normal = [], [], []
    n_regions = 0
    for m, g in zip(maps, masks):
        lab, n = region_labels(g)
        # each region contributes overlap/|region|, i.e. weight 1/|region| per pixel
        region_w = np.zeros(n + 1)
        if n:
            region_w[1:] = 1.0 / np.bincount(lab.ravel(), minlength=n + 1)[1:]
        weights.append(region_w[lab].ravel())
        scores.append(m.ravel())
        normal.append(~g.ravel())
        n_regions += n
    if n_regions == 0:
        raise ValueError("no ground-truth regions: PRO is undefined")
    scores = np.concatenate(scores)
    weights = np.concatenate(weights) / n_regions
    normal = np.concatenate(normal)
    if not normal.any():
        raise ValueError("no normal pixels: false-positive rate is undefined")
    th = thresholds_for(scores, exact_limit, n_approx)
    pro = counts_at(scores, th, weights)
    fpr = counts_at(scores[normal], th) / normal.sum()
    return np.concatenate([[0.0], fpr]), np.concatenate([[0.0], pro])


def pro(maps, masks, fpr_limit: float = 0.3, names=None, exact_limit: int = EXACT_LIMIT, n_approx: int = N_APPROX) -> float:
    """Area under the per-region-overlap curve for FPR in [0, fpr_limit], divided by fpr_limit."""
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must be in (0, 1]")
    fpr, overlap = pro_curve(maps, masks, names, exact_limit, n_approx)
    return trapezoid_upto(fpr, overlap, fpr_limit) / fpr_limit


def pixel_metrics(
    maps,
    masks,
    names: Sequence[str] | None = None,
    fpr_limit: float = 0.3,
    exact_limit: int = EXACT_LIMIT,
    n_approx: int = N_APPROX,
) -> dict[str, float]:
    """pAUROC, PRO and pixel F1-max over pixels pooled across the given images."""
    maps, masks = _stack(maps, masks, names)
    scores = np.concatenate([m.ravel() for m in maps])
    labels = np.concatenate([g.ravel() for g in masks])
    return {
        "pauroc": auroc(scores, labels),
        "pro": pro(maps, masks, fpr_limit, exact_limit=exact_limit, n_approx=n_approx),
        "pixel_f1_max": f1_max(scores, labels, exact_limit, n_approx),
    }
