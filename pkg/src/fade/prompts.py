"""Normal/anomalous prompt ensembles and their averaged text embeddings."""

from __future__ import annotations

import hashlib
import logging
import os
import tempfile
import threading
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

PLACEHOLDER = "[o]"
SOURCE_TAGS = ("winclip", "generated", "combined", "custom")
BUILTIN_DIR = Path(__file__).parent / "data" / "prompts"


@dataclass(frozen=True)
class PromptEnsemble:
    anomalous: tuple[str, ...]
    normal: tuple[str, ...]
    object_templated: bool
    source_tag: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "anomalous", tuple(self.anomalous))
        object.__setattr__(self, "normal", tuple(self.normal))
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"unknown source_tag {self.source_tag!r}")
        for polarity, prompts in (("anomalous", self.anomalous), ("normal", self.normal)):
            if not prompts:
                raise ValueError(f"{polarity} prompt list is empty")
            if len(set(prompts)) != len(prompts):
                raise ValueError(f"{polarity} prompt list contains duplicates")
            flags = {PLACEHOLDER in p for p in prompts}
            if flags != {self.object_templated}:
                raise ValueError(
                    f"placeholder {PLACEHOLDER} must appear in every {polarity} prompt iff "
                    f"object_templated={self.object_templated}"
                )

    def __len__(self):
        return len(self.anomalous) + len(self.normal)


@dataclass(frozen=True)
class PromptEnsembleEmbedding:
    """Mean text embeddings: ``h_plus`` (anomalous) and ``h_minus`` (normal).

    The means are not re-normalised; scoring divides by their norms.
    """

    h_plus: np.ndarray
    h_minus: np.ndarray
    n_plus: int
    n_minus: int


def _dedup(lines: Iterable[str], label: str) -> list[str]:
    seen, out = set(), []
    for line in lines:
        if line in seen:
            warnings.warn(f"duplicate prompt dropped from {label}: {line!r}", stacklevel=3)
            continue
        seen.add(line)
        out.append(line)
    return out


def _read_prompt_file(path: Path) -> list[str]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"prompt file not found: {path}") from None
    lines = (line.strip() for line in text.splitlines())
    return _dedup((line for line in lines if line and not line.startswith("#")), path.name)


def load_ensemble(path, source_tag: str = "custom") -> PromptEnsemble:
    """Load ``<path>.anomalous.txt`` and ``<path>.normal.txt``.

    ``path`` is the common prefix, e.g. ``prompts/winclip``.  A bare builtin
    name ("winclip", "generated") resolves to the packaged files.
    """
    path = Path(path)
    if not path.parent.name and not Path(f"{path}.anomalous.txt").exists():
        path = BUILTIN_DIR / path.name
    anomalous = _read_prompt_file(Path(f"{path}.anomalous.txt"))
    normal = _read_prompt_file(Path(f"{path}.normal.txt"))
    if not anomalous or not normal:
        raise ValueError(f"ensemble {path} has an empty prompt list")
    templated = any(PLACEHOLDER in p for p in anomalous + normal)
    return PromptEnsemble(anomalous, normal, templated, source_tag)


def builtin_ensemble(name: str) -> PromptEnsemble:
    if name not in ("winclip", "generated"):
        raise ValueError(f"no builtin ensemble {name!r}")
    return load_ensemble(BUILTIN_DIR / name, name)


def render(ensemble: PromptEnsemble, object_name: str) -> PromptEnsemble:
    """Substitute ``object_name`` for every ``[o]`` placeholder."""
    if not ensemble.object_templated:
        raise ValueError("ensemble has no object placeholder to render")
    if not object_name or not object_name.strip():
        raise ValueError("object_name must be non-empty")
    sub = lambda ps: tuple(p.replace(PLACEHOLDER, object_name) for p in ps)  # noqa: E731
    return PromptEnsemble(sub(ensemble.anomalous), sub(ensemble.normal), False, ensemble.source_tag)


def combine(a: PromptEnsemble, b: PromptEnsemble) -> PromptEnsemble:
    """Per-polarity union, first-seen order kept."""
    if a.object_templated != b.object_templated:
        raise ValueError("cannot combine a templated ensemble with a rendered one")

    def union(x, y):
        return tuple(dict.fromkeys((*x, *y)))

    return PromptEnsemble(
        union(a.anomalous, b.anomalous), union(a.normal, b.normal), a.object_templated, "combined"
    )


def resolve_ensemble(source: str, object_name: str) -> PromptEnsemble:
    """Build a rendered ensemble by name.

    ``source`` is "winclip", "generated", "combined" (their union) or a file
    prefix; templated ensembles are rendered with ``object_name``.
    """
    if source == "combined":
        parts = [builtin_ensemble("winclip"), builtin_ensemble("generated")]
    elif source in ("winclip", "generated"):
        parts = [builtin_ensemble(source)]
    else:
        parts = [load_ensemble(source)]
    parts = [render(p, object_name) if p.object_templated else p for p in parts]
    out = parts[0]
    for p in parts[1:]:
        out = combine(out, p)
    return out


# ---------------------------------------------------------------------------
# Embedding


def backbone_key(backbone) -> str:
    cfg = backbone.config
    if cfg.weights_id == "toy":
        return f"toy:{cfg!r}"
    return cfg.weights_id


def ensemble_hash(backbone, ensemble: PromptEnsemble) -> str:
    h = hashlib.sha256()
    h.update(backbone_key(backbone).encode())
    for polarity in (ensemble.anomalous, ensemble.normal):
        h.update(b"\x00\x01")
        h.update("\n".join(polarity).encode("utf-8"))
    return h.hexdigest()


class EmbeddingCache:
    """Directory of ``<sha256>.npz`` files holding ensemble embeddings.

    Any number of readers may share it; writes are atomic renames under a lock.
    """

    def __init__(self, root):
        self.root = Path(root)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def path(self, key: str) -> Path:
        return self.root / f"{key}.npz"

    def get(self, key: str) -> PromptEnsembleEmbedding | None:
        path = self.path(key)
        if not path.exists():
            return None
        try:
            with np.load(path) as z:
                emb = PromptEnsembleEmbedding(
                    z["h_plus"], z["h_minus"], int(z["n_plus"]), int(z["n_minus"])
                )
            if not (np.all(np.isfinite(emb.h_plus)) and np.all(np.isfinite(emb.h_minus))):
                raise ValueError("non-finite entries")
        except Exception as exc:
            warnings.warn(f"corrupted embedding cache entry {path.name} ({exc}); recomputing")
            return None
        return emb

    def put(self, key: str, emb: PromptEnsembleEmbedding):
        with self._lock:
            self.root.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
            with os.fdopen(fd, "wb") as fh:
                np.savez(fh, h_plus=emb.h_plus, h_minus=emb.h_minus,
                         n_plus=emb.n_plus, n_minus=emb.n_minus)
            os.replace(tmp, self.path(key))


def embed_ensemble(backbone, ensemble: PromptEnsemble, cache: EmbeddingCache | None = None) -> PromptEnsembleEmbedding:
    """Average the text embeddings of each polarity."""
    if ensemble.object_templated:
        raise ValueError("render the ensemble with an object name before embedding it")
    key = None
    if cache is not None:
        key = ensemble_hash(backbone, ensemble)
        hit = cache.get(key)
        if hit is not None:
            cache.hits += 1
            logger.info("text embedding cache hit %s", key[:12])
            return hit
        cache.misses += 1

    means = []
    for polarity in (ensemble.anomalous, ensemble.normal):
        try:
            emb = backbone.encode_texts(list(polarity))
        except Exception as exc:
            bad = next((p for p in polarity if not _encodes(backbone, p)), None)
            raise ValueError(f"failed to encode prompt {bad!r}: {exc}") from exc
        means.append(emb.astype(np.float64).mean(axis=0))
    out = PromptEnsembleEmbedding(means[0], means[1], len(ensemble.anomalous), len(ensemble.normal))
    if cache is not None:
        cache.put(key, out)
    return out


def _encodes(backbone, prompt) -> bool:
    try:
        backbone.encode_text(prompt)
        return True
    except Exception:
        return False
