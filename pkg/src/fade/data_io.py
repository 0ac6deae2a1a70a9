"""Dataset indexing, reference sampling, heatmap rendering and report files."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".JPG", ".PNG"}
MANIFEST_FIELDS = ("path", "label", "mask_path", "category")


@dataclass(frozen=True)
class TestSample:
    path: str
    label: int
    mask_path: str | None = None
    defect: str = "good"

    __test__ = False  # not a pytest class


@dataclass
class CategoryIndex:
    train_normal: list[str] = field(default_factory=list)
    test: list[TestSample] = field(default_factory=list)


@dataclass
class DatasetIndex:
    root: str
    layout: str
    categories: dict[str, CategoryIndex] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "layout": self.layout,
            "categories": {
                name: {"train_normal": c.train_normal, "test": [asdict(t) for t in c.test]}
                for name, c in self.categories.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetIndex":
        cats = {
            name: CategoryIndex(list(c["train_normal"]), [TestSample(**t) for t in c["test"]])
            for name, c in d["categories"].items()
        }
        return cls(d["root"], d["layout"], cats)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DatasetIndex":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix in IMAGE_SUFFIXES)


def _image_size(path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            return im.size
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc


def _index_mvtec(root: Path) -> dict[str, CategoryIndex]:
    cats = {}
    for cat_dir in sorted(p for p in root.iterdir() if (p / "test").is_dir()):
        cat = CategoryIndex(train_normal=[str(p) for p in _images(cat_dir / "train" / "good")])
        for defect_dir in sorted(p for p in (cat_dir / "test").iterdir() if p.is_dir()):
            defect = defect_dir.name
            for img in _images(defect_dir):
                if defect == "good":
                    cat.test.append(TestSample(str(img), 0, None, defect))
                else:
                    mask = cat_dir / "ground_truth" / defect / f"{img.stem}_mask.png"
                    cat.test.append(TestSample(str(img), 1, str(mask), defect))
        cats[cat_dir.name] = cat
    return cats


def _index_manifest(root: Path, manifest: Path) -> dict[str, CategoryIndex]:
    cats: dict[str, CategoryIndex] = {}
    base = manifest.parent
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"manifest {manifest} lacks columns {sorted(missing)}")
        for row in reader:
            cat = cats.setdefault(row["category"], CategoryIndex())
            path = str((base / row["path"]).resolve()) if row["path"] else ""
            split = (row.get("split") or "test").strip()
            label = int(row["label"])
            if split == "train":
                if label != 0:
                    raise ValueError(f"training row {row['path']} must be normal")
                cat.train_normal.append(path)
                continue
            mask = str((base / row["mask_path"]).resolve()) if row.get("mask_path") else None
            defect = (row.get("defect") or ("good" if label == 0 else "anomaly")).strip()
            cat.test.append(TestSample(path, label, mask, defect))
    for cat in cats.values():
        cat.train_normal.sort()
    return cats


def index_dataset(root, layout: str = "mvtec", manifest=None, validate: bool = True) -> DatasetIndex:
    """Index a dataset.

    ``layout="mvtec"``: ``<cat>/train/good``, ``<cat>/test/<defect>``,
    ``<cat>/ground_truth/<defect>/<stem>_mask.png``.
    ``layout="manifest"``: a CSV (default ``<root>/manifest.csv``) with
    columns path,label,mask_path,category and optional split (train|test,
    default test) and defect; paths are relative to the CSV.
    """
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if layout == "mvtec":
        cats = _index_mvtec(root)
    elif layout == "manifest":
        cats = _index_manifest(root, Path(manifest) if manifest else root / "manifest.csv")
    else:
        raise ValueError(f"unknown layout {layout!r}")
    index = DatasetIndex(str(root), layout, cats)
    if validate:
        validate_index(index)
    for name, c in cats.items():
        n_anom = sum(t.label for t in c.test)
        logger.info("%s: %d train normal, %d test (%d anomalous)", name, len(c.train_normal), len(c.test), n_anom)
    return index


def validate_index(index: DatasetIndex):
    for name, cat in index.categories.items():
        for t in cat.test:
            if t.label == 1 and not t.mask_path:
                raise ValueError(f"{name}: anomalous image {t.path} has no mask")
            size = _image_size(t.path)
            if t.mask_path:
                if not Path(t.mask_path).exists():
                    raise ValueError(f"{name}: mask {t.mask_path} for {t.path} does not exist")
                if _image_size(t.mask_path) != size:
                    raise ValueError(f"{name}: mask {t.mask_path} size differs from its image")


def load_mask(path, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Binary mask (threshold 127 on 8-bit values); all-zero when ``path`` is None."""
    if path is None:
        if shape is None:
            raise ValueError("shape is required for a normal image without mask")
        return np.zeros(shape, dtype=bool)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127


def sample_references(index: DatasetIndex, category: str, k: int, seed: int) -> list[str]:
    """``k`` training normals drawn uniformly without replacement; depends only on (seed, sorted pool)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return []
    pool = sorted(index.categories[category].train_normal)
    if k > len(pool):
        raise ValueError(f"{category}: cannot sample {k} references from {len(pool)} normal images")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in picks]


# ---------------------------------------------------------------------------
# Heatmaps


def render_heatmap(image, anomaly_map, out_path, value_range=(0.0, 2.0), alpha: float = 0.5, cmap: str = "jet"):
    """Write ``<out_path>_overlay.png`` and ``<out_path>_score.png``.

    The map is scaled by ``value_range`` for display, resized to the image,
    colour-mapped and alpha-blended where the map is non-zero.  The grayscale
    side channel is the display-normalised map at map resolution.
    """
    from matplotlib import colormaps

    from .utils import check_image

    img = check_image(image)
    values = np.asarray(getattr(anomaly_map, "values", anomaly_map), dtype=np.float64)
    lo, hi = value_range
    norm = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    gray = np.round(norm * 255).astype(np.uint8)

    h, w = img.shape[:2]
    resized = np.asarray(Image.fromarray(gray).resize((w, h), Image.BILINEAR), dtype=np.float64) / 255.0
    color = colormaps[cmap](resized)[..., :3] * 255.0
    weight = alpha * (resized > 0)[..., None]
    overlay = np.round(img * (1 - weight) + color * weight).astype(np.uint8)

    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    overlay_path = out.with_name(out.name + "_overlay.png")
    score_path = out.with_name(out.name + "_score.png")
    try:
        Image.fromarray(overlay).save(overlay_path)
        Image.fromarray(gray, mode="L").save(score_path)
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {out.parent}: {exc}") from exc
    return overlay_path, score_path


def heatmap_stem(out_dir, category: str, sample: TestSample) -> Path:
    """``<out_dir>/<category>/<defect>/<stem>`` (suffixes added by render_heatmap)."""
    return Path(out_dir) / category / sample.defect / Path(sample.path).stem


# ---------------------------------------------------------------------------
# Reports


METRIC_KEYS = ("auroc", "aupr", "f1_max", "pauroc", "pro", "pixel_f1_max")


def summarize(records: Sequence[dict], metric_keys: Iterable[str] = METRIC_KEYS) -> dict:
    """Mean and (population) std over seeds, per category and for the category mean.

    ``records`` are dicts with ``category``, ``seed`` and metric values.
    The dataset row for a seed is the unweighted mean over categories.
    """
    if not records:
        raise ValueError("no records to summarise")
    keys = [k for k in metric_keys if any(k in r for r in records)]
    cats = sorted({r["category"] for r in records})
    seeds = sorted({r["seed"] for r in records})
    per_cat = {}
    for cat in cats:
        rows = [r for r in records if r["category"] == cat]
        per_cat[cat] = {
            k: {"mean": float(np.mean([r[k] for r in rows])), "std": float(np.std([r[k] for r in rows]))}
            for k in keys
        }
    dataset_by_seed = []
    for seed in seeds:
        rows = [r for r in records if r["seed"] == seed]
        dataset_by_seed.append({k: float(np.mean([r[k] for r in rows])) for k in keys})
    overall = {
        k: {"mean": float(np.mean([d[k] for d in dataset_by_seed])), "std": float(np.std([d[k] for d in dataset_by_seed]))}
        for k in keys
    }
    return {"metrics": keys, "seeds": seeds, "categories": per_cat, "mean": overall}


def write_report(records: Sequence[dict], out_dir, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``report.csv`` (per-seed rows, then mean/std rows) and ``report.json``."""
    summary = summarize(records)
    keys = summary["metrics"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "report.csv", out / "report.json"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "seed", *keys])
        for r in sorted(records, key=lambda r: (r["category"], r["seed"])):
            writer.writerow([r["category"], r["seed"], *(f"{r[k]:.6f}" for k in keys)])
        for cat, stats in list(summary["categories"].items()) + [("mean", summary["mean"])]:
            for stat in ("mean", "std"):
                writer.writerow([cat, stat, *(f"{stats[k][stat]:.6f}" for k in keys)])
    payload = {"records": list(records), **summary, **(extra or {})}
    json_path.write_text(json.dumps(payload, indent=2))
    return csv_path, json_path


def convert_visa_split(split_csv, visa_root, out_csv) -> Path:
    """Turn VisA's ``split_csv/1cls.csv`` (object,split,label,image,mask) into a manifest."""
    visa_root, out_csv = Path(visa_root), Path(out_csv)
    rows = []
    with open(split_csv, newline="") as fh:
        for r in csv.DictReader(fh):
            label = 0 if r["label"].strip() == "normal" else 1
            rows.append({
                "path": str(visa_root / r["image"]),
                "label": label,
                "mask_path": str(visa_root / r["mask"]) if label and r.get("mask") else "",
                "category": r["object"],
                "split": r["split"],
                "defect": "good" if label == 0 else "bad",
            })
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[*MANIFEST_FIELDS, "split", "defect"])
        writer.writeheader()
        writer.writerows(rows)
    return out_csv
