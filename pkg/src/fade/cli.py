"""Command-line entry point: ``fade evaluate | predict | cache | convert-visa``.

Progress goes to stderr; results only to files under ``--out``.  Exit code
0 means every requested category (or image) completed, 1 that some
category failed, 2 that the run could not start.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .backbone import WeightsError, cache_dir, config_for, load_backbone
from .config import EngineConfig, load_config, save_config

logger = logging.getLogger("fade")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def _str_list(text: str) -> list[str]:
    return [t for t in text.replace(",", " ").split() if t]


def _apply_common(cfg: EngineConfig, args) -> EngineConfig:
    overrides = {
        "backbone.weights_id": getattr(args, "weights", None),
        "scoring.scales": getattr(args, "scales", None),
    }
    ablate = getattr(args, "ablate", None)
    if ablate == "language":  # language guidance only
        overrides["fusion.use_vision"] = False
    elif ablate == "vision":
        overrides["fusion.use_language"] = False
    return cfg.updated(**overrides)


def _backbone(cfg: EngineConfig, download: bool):
    b = cfg.backbone
    extra = {"precision": b.precision}
    if b.weights_path:
        extra["weights_path"] = b.weights_path
    if b.weights_id == "toy":
        extra["seed"] = b.seed
    return load_backbone(config_for(b.weights_id, **extra), download=download)


def cmd_evaluate(args) -> int:
    from .data_io import index_dataset, write_report
    from .evaluation import evaluate

    cfg = _apply_common(load_config(args.config), args)
    cfg = cfg.updated(**{
        "k": args.k,
        "seeds": args.seeds,
        "data.root": args.dataset,
        "data.layout": args.layout,
        "data.manifest": args.manifest,
        "data.categories": args.categories,
    })
    if not cfg.data.root:
        raise SystemExit("error: --dataset (or data.root in the config) is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")

    index = index_dataset(cfg.data.root, cfg.data.layout, cfg.data.manifest)
    backbone = _backbone(cfg, args.download)
    records, failures = evaluate(
        index, cfg, cfg.data.categories, backbone=backbone,
        heatmap_dir=out / "heatmaps" if args.heatmaps else None,
        bank_cache=args.bank_cache, cache_dir=cache_dir(),
    )
    if records:
        csv_path, _ = write_report(records, out, extra={"k": cfg.k, "failures": failures})
        logger.info("report written to %s", csv_path)
    for cat, msg in failures.items():
        logger.error("category %s failed: %s", cat, msg)
    return 0 if not failures and records else 1


def cmd_predict(args) -> int:
    from .data_io import render_heatmap
    from .estimator import FADE

    cfg = _apply_common(load_config(args.config), args)
    backbone = _backbone(cfg, args.download)
    det = FADE.from_config(cfg, args.object or "object", backbone=backbone, cache_dir=cache_dir())
    det.fit(args.ref or None)
    result = det.detect([args.image])[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    np.save(out / f"{stem}_map.npy", result.anomaly_map.values)
    render_heatmap(args.image, result.anomaly_map, out / stem, value_range=result.anomaly_map.value_range)
    payload = {"image": str(args.image), "references": list(args.ref or []), **result.to_dict()}
    (out / f"{stem}_result.json").write_text(json.dumps(payload, indent=2))
    logger.info("%s: image score %.4f (%s)", args.image, result.image_score, result.setting)
    return 0


def cmd_cache(args) -> int:
    from .data_io import index_dataset, sample_references
    from .estimator import FADE
    from .evaluation import object_name_for
    from .scoring_vision import build_bank_fewshot

    cfg = _apply_common(load_config(args.config), args)
    root = cache_dir()
    try:
        (root / "text").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SystemExit(f"error: cache directory {root} is not writable: {exc}")
    backbone = _backbone(cfg, args.download)
    objects = list(args.objects or [])
    index = None
    if args.dataset:
        index = index_dataset(args.dataset, args.layout, args.manifest)
        cats = args.categories or sorted(index.categories)
        objects += [object_name_for(c) for c in cats]
    for name in dict.fromkeys(objects or ["object"]):
        det = FADE.from_config(cfg, name, backbone=backbone, cache_dir=root)
        det.fit(None)

    if index is not None and args.k and args.bank_cache:
        from .evaluation import _bank_path

        for cat in args.categories or sorted(index.categories):
            for seed in args.seeds or cfg.seeds:
                path = _bank_path(args.bank_cache, cat, args.k, seed, backbone.weights_id, cfg.scoring.scales)
                if path.exists():
                    logger.info("bank cache hit %s", path.name)
                    continue
                refs = sample_references(index, cat, args.k, seed)
                build_bank_fewshot(backbone, refs, cfg.scoring.scales).save(path)
                logger.info("bank written %s", path.name)
    return 0


def cmd_convert_visa(args) -> int:
    from .data_io import convert_visa_split

    path = convert_visa_split(args.split_csv, args.visa_root, args.out)
    logger.info("manifest written to %s", path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fade", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML file of section.key settings")
        sp.add_argument("--weights", help="backbone weights id (e.g. ViT-B/16-plus-240, toy)")
        sp.add_argument("--scales", type=_int_list, help="input sizes, e.g. 240,448,896")
        sp.add_argument("--download", action="store_true", help="download missing weights")

    ev = sub.add_parser("evaluate", help="benchmark a dataset")
    common(ev)
    ev.add_argument("--dataset", help="dataset root")
    ev.add_argument("--layout", choices=("mvtec", "manifest"))
    ev.add_argument("--manifest", help="manifest CSV (layout=manifest)")
    ev.add_argument("--k", type=int, help="number of reference shots")
    ev.add_argument("--seeds", type=_int_list)
    ev.add_argument("--categories", type=_str_list)
    ev.add_argument("--out", required=True)
    ev.add_argument("--bank-cache", help="directory for memory-bank files")
    ev.add_argument("--heatmaps", action="store_true", help="write overlay/score PNGs")
    ev.add_argument("--ablate", choices=("language", "vision"), help="keep only this guidance")
    ev.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("predict", help="score one image")
    common(pr)
    pr.add_argument("image")
    pr.add_argument("--ref", action="append", help="normal reference image (repeatable)")
    pr.add_argument("--object", help="object name for templated prompts")
    pr.add_argument("--out", required=True)
    pr.add_argument("--ablate", choices=("language", "vision"))
    pr.set_defaults(func=cmd_predict)

    ca = sub.add_parser("cache", help="warm text-embedding and memory-bank caches")
    common(ca)
    ca.add_argument("--objects", type=_str_list)
    ca.add_argument("--dataset")
    ca.add_argument("--layout", default="mvtec", choices=("mvtec", "manifest"))
    ca.add_argument("--manifest")
    ca.add_argument("--categories", type=_str_list)
    ca.add_argument("--k", type=int, default=0)
    ca.add_argument("--seeds", type=_int_list)
    ca.add_argument("--bank-cache")
    ca.set_defaults(func=cmd_cache)

    cv = sub.add_parser("convert-visa", help="VisA split CSV -> manifest CSV")
    cv.add_argument("split_csv")
    cv.add_argument("visa_root")
    cv.add_argument("--out", required=True)
    cv.set_defaults(func=cmd_convert_visa)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, WeightsError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
