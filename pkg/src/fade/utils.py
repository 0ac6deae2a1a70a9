"""Input validation helpers shared by the estimator and the functional API."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable

import numpy as np


def check_image(image, convert_gray: bool = True) -> np.ndarray:
    """Return ``image`` as an (H, W, 3) uint8 RGB array.

    Accepts a file path, a PIL image or an array.  Float arrays are taken to
    be in [0, 1].  Single-channel input is replicated to RGB when
    ``convert_gray`` is true and rejected otherwise; an alpha channel is
    dropped.
    """
    from PIL import Image

    if isinstance(image, (str, os.PathLike)):
        try:
            with Image.open(image) as im:
                im.load()
                image = im.copy()
        except (OSError, ValueError) as exc:
            raise ValueError(f"cannot read image {image}: {exc}") from exc
    if isinstance(image, Image.Image):
        if image.mode not in ("RGB", "L", "RGBA", "I;16", "I", "F"):
            image = image.convert("RGB")
        image = np.asarray(image)
    arr = np.asarray(image)
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    elif arr.dtype != np.uint8:
        if arr.max(initial=0) > 255:
            arr = (arr.astype(np.float64) / arr.max() * 255).round()
        arr = arr.astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        if not convert_gray:
            raise ValueError("expected an RGB image, got a single-channel one")
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError("image is empty")
    return np.ascontiguousarray(arr[..., :3])


def check_images(images) -> list:
    """Normalise a single image or an iterable of images to a list (not decoded)."""
    if images is None:
        return []
    if isinstance(images, (str, os.PathLike)):
        return [images]
    if isinstance(images, np.ndarray):
        if images.ndim == 4:
            return list(images)
        if images.ndim in (2, 3) and images.dtype != object:
            return [images]
    from PIL import Image

    if isinstance(images, Image.Image):
        return [images]
    return list(images)


def check_scale(scale: int, patch_size: int) -> int:
    if not isinstance(scale, (int, np.integer)) or scale <= 0:
        raise ValueError(f"scale must be a positive integer, got {scale!r}")
    if scale % patch_size:
        raise ValueError(f"scale {scale} is not divisible by patch size {patch_size}")
    return int(scale)


def check_scales(scales: Iterable[int], patch_size: int) -> tuple[int, ...]:
    scales = tuple(check_scale(s, patch_size) for s in scales)
    if not scales:
        raise ValueError("at least one scale is required")
    return scales


def check_unit_rows(x: np.ndarray, name: str = "embeddings", atol: float = 1e-4) -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contain non-finite values")
    norms = np.linalg.norm(x.reshape(-1, x.shape[-1]), axis=-1)
    if not np.allclose(norms, 1.0, atol=atol):
        raise ValueError(f"{name} must be L2-normalised (norms in [{norms.min():.4g}, {norms.max():.4g}])")
    return x


def as_path(p) -> Path:
    return p if isinstance(p, Path) else Path(p)
