"""Vision-guided scores: nearest-neighbour distances to patch memory banks."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .scoring_language import AnomalyMap, aggregate_maps
from .utils import check_images, check_unit_rows

BANK_MAGIC = b"FADEBANK"
BANK_VERSION = 1


@dataclass
class MemoryBank:
    """Per-scale stores of unit-norm patch embeddings.

    Scales are never merged; few-shot banks hold CLIP patches, self-banks GEM.
    """

    banks: dict[int, np.ndarray]
    shot_count: int
    embedding_kind: str
    weights_id: str = ""
    exactness: str = field(default="exact", init=False)

    def __post_init__(self):
        if self.embedding_kind not in ("clip", "gem"):
            raise ValueError(f"unknown embedding kind {self.embedding_kind!r}")
        expected = "clip" if self.shot_count >= 1 else "gem"
        if self.embedding_kind != expected:
            raise ValueError(f"a {self.shot_count}-shot bank must hold {expected} embeddings")
        banks = {}
        for scale, vecs in self.banks.items():
            vecs = np.ascontiguousarray(vecs, dtype=np.float32)
            if vecs.ndim != 2 or len(vecs) == 0:
                raise ValueError(f"bank at scale {scale} must be a non-empty (n, d) array")
            check_unit_rows(vecs, f"bank vectors at scale {scale}")
            vecs.setflags(write=False)
            banks[int(scale)] = vecs
        if not banks:
            raise ValueError("memory bank has no scales")
        self.banks = banks

    @property
    def scales(self) -> tuple[int, ...]:
        return tuple(sorted(self.banks))

    def size(self, scale: int) -> int:
        return len(self.banks[scale])

    # Binary layout: magic, u32 version, u32 n_sections, then per section a
    # u32 header length, UTF-8 JSON header and n*d little-endian float32.
    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(BANK_MAGIC)
            fh.write(struct.pack("<II", BANK_VERSION, len(self.banks)))
            for scale in self.scales:
                vecs = self.banks[scale]
                header = json.dumps({
                    "weights_id": self.weights_id,
                    "scale": scale,
                    "k": self.shot_count,
                    "embedding_kind": self.embedding_kind,
                    "n": int(vecs.shape[0]),
                    "d": int(vecs.shape[1]),
                }).encode("utf-8")
                fh.write(struct.pack("<I", len(header)))
                fh.write(header)
                fh.write(vecs.astype("<f4").tobytes())
        return path

    @classmethod
    def load(cls, path) -> "MemoryBank":
        with open(path, "rb") as fh:
            if fh.read(len(BANK_MAGIC)) != BANK_MAGIC:
                raise ValueError(f"{path} is not a memory bank file")
            version, n_sections = struct.unpack("<II", fh.read(8))
            if version != BANK_VERSION:
                raise ValueError(f"unsupported bank version {version}")
            banks, meta = {}, None
            for _ in range(n_sections):
                (hlen,) = struct.unpack("<I", fh.read(4))
                header = json.loads(fh.read(hlen).decode("utf-8"))
                count = header["n"] * header["d"]
                data = np.frombuffer(fh.read(4 * count), dtype="<f4")
                if data.size != count:
                    raise ValueError(f"truncated bank file {path}")
                banks[header["scale"]] = data.reshape(header["n"], header["d"]).astype(np.float32)
                meta = header
        return cls(banks, meta["k"], meta["embedding_kind"], meta["weights_id"])


@dataclass
class VisionScore:
    map: AnomalyMap
    image_score: float


def _flatten(grid) -> tuple[np.ndarray, tuple[int, ...]]:
    grid = np.asarray(grid)
    return grid.reshape(-1, grid.shape[-1]), grid.shape[:-1]


def patch_distance_map(query_grid, bank: np.ndarray, neighbor_rank: int = 1, chunk: int = 4096) -> AnomalyMap:
    """Per-patch cosine distance 0.5 * (1 - cos) to the ``neighbor_rank``-th nearest bank vector.

    Exact exhaustive search.  ``query_grid`` is (g, g, d) or (n, d); the
    output keeps its spatial shape ((n, 1) for flat input).
    """
    if neighbor_rank not in (1, 2):
        raise ValueError("neighbor_rank must be 1 or 2")
    query, spatial = _flatten(query_grid)
    bank = np.asarray(bank)
    if bank.ndim != 2 or bank.shape[1] != query.shape[1]:
        raise ValueError(f"bank shape {bank.shape} incompatible with query dimension {query.shape[1]}")
    if len(bank) < neighbor_rank:
        raise ValueError(f"bank of {len(bank)} vectors has no rank-{neighbor_rank} neighbour")
    q = query.astype(np.float64)
    b = bank.astype(np.float64)
    best = np.empty(len(q))
    for start in range(0, len(q), chunk):
        sims = q[start : start + chunk] @ b.T
        if neighbor_rank == 1:
            best[start : start + chunk] = sims.max(axis=1)
        else:
            part = np.partition(sims, sims.shape[1] - 2, axis=1)
            best[start : start + chunk] = part[:, -2]
    dist = np.clip(0.5 * (1.0 - best), 0.0, 1.0)
    shape = spatial if len(spatial) == 2 else (len(dist), 1)
    return AnomalyMap(dist.reshape(shape), "vision", (0.0, 1.0))


def zero_shot_vision_map(gem_grids: Mapping[int, np.ndarray], canonical_map_size: int = 448) -> AnomalyMap:
    """Self-bank map: each GEM patch against the other patches of the same image.

    ``gem_grids`` maps scale to the query's (g, g, d) GEM embeddings.
    """
    maps = []
    for scale in sorted(gem_grids):
        grid = np.asarray(getattr(gem_grids[scale], "patch_grid", gem_grids[scale]))
        flat, _ = _flatten(grid)
        if len(flat) < 2:
            raise ValueError(f"grid at scale {scale} has a single patch; no second neighbour")
        maps.append(patch_distance_map(grid, flat, neighbor_rank=2))
    return aggregate_maps(maps, canonical_map_size, "vision")


def build_bank_fewshot(backbone, reference_images, scales: Sequence[int]) -> MemoryBank:
    """CLIP patch embeddings of the ``k`` reference images, one bank per scale."""
    refs = check_images(reference_images)
    if not refs:
        raise ValueError("few-shot bank needs at least one reference image")
    banks = {s: [] for s in scales}
    for ref in refs:
        for s in scales:
            try:
                enc = backbone.encode_image(ref, s)
            except ValueError as exc:
                name = ref if isinstance(ref, (str, Path)) else "reference image"
                raise ValueError(f"cannot encode {name}: {exc}") from exc
            banks[s].append(enc.patch_grid.reshape(-1, enc.patch_grid.shape[-1]))
    return MemoryBank(
        {s: np.concatenate(v) for s, v in banks.items()}, len(refs), "clip", backbone.weights_id
    )


def vision_score_from_grids(clip_grids: Mapping[int, np.ndarray], bank: MemoryBank, canonical_map_size: int = 448) -> VisionScore:
    """Few-shot vision map and score from precomputed per-scale CLIP grids."""
    if bank.shot_count < 1:
        raise ValueError("few-shot scoring needs a bank built from reference images")
    missing = set(bank.scales) - set(clip_grids)
    if missing or set(clip_grids) - set(bank.scales):
        raise ValueError(f"query scales {sorted(clip_grids)} do not match bank scales {bank.scales}")
    maps = []
    for s in bank.scales:
        grid = np.asarray(clip_grids[s])
        if grid.shape[-1] != bank.banks[s].shape[1]:
            raise ValueError(f"embedding dimension mismatch at scale {s}")
        maps.append(patch_distance_map(grid, bank.banks[s], neighbor_rank=1))
    fused = aggregate_maps(maps, canonical_map_size, "vision")
    return VisionScore(fused, fused.max())


def few_shot_vision_score(backbone, query, bank: MemoryBank, canonical_map_size: int = 448) -> VisionScore:
    grids = {s: backbone.encode_image(query, s).patch_grid for s in bank.scales}
    return vision_score_from_grids(grids, bank, canonical_map_size)
