"""CLIP ViT backbone with per-layer access and positional-embedding interpolation.

The module layout and parameter names follow the OpenCLIP checkpoint format
(``visual.conv1.weight``, ``visual.transformer.resblocks.0.attn.in_proj_weight``,
``token_embedding.weight`` ...) so a published state dict loads without
renaming.  The same code path serves tiny randomly initialised "toy"
backbones used by the test-suite.
"""

from __future__ import annotations

import hashlib
import logging
import os
import threading
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .utils import check_image, check_scale

logger = logging.getLogger(__name__)

OPENAI_MEAN = (0.48145466, 0.4578275, 0.40821073)
OPENAI_STD = (0.26862954, 0.26130258, 0.27577711)

DEFAULT_WEIGHTS_ID = "ViT-B/16-plus-240"


class WeightsError(RuntimeError):
    """Pretrained weights are missing, unreadable or fail the checksum."""


@dataclass(frozen=True)
class WeightsSource:
    filename: str
    url: str
    sha256_prefix: str


# Published OpenCLIP release; the hash prefix is embedded in the file name.
WEIGHTS_SOURCES = {
    "ViT-B/16-plus-240": WeightsSource(
        filename="vit_b_16_plus_240-laion400m_e31-8fb26589.pt",
        url=(
            "https://github.com/mlfoundations/open_clip/releases/download/"
            "v0.2-weights/vit_b_16_plus_240-laion400m_e31-8fb26589.pt"
        ),
        sha256_prefix="8fb26589",
    ),
}
_ALIASES = {
    "ViT-B-16-plus-240": "ViT-B/16-plus-240",
    "ViT-B-16-plus-240/laion400m_e31": "ViT-B/16-plus-240",
}


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture and provenance of a CLIP ViT backbone.

    ``weights_id="toy"`` builds a randomly initialised model from ``seed``;
    any other id is looked up in :data:`WEIGHTS_SOURCES` unless
    ``weights_path`` points at a local checkpoint.
    """

    weights_id: str = DEFAULT_WEIGHTS_ID
    patch_size: int = 16
    embed_dim: int = 640
    native_size: int = 240
    layer_count: int = 12
    vision_width: int = 896
    vision_heads: int = 14
    text_width: int = 640
    text_heads: int = 10
    text_layers: int = 12
    context_length: int = 77
    vocab_size: int = 49408
    quick_gelu: bool = False
    mean: tuple[float, float, float] = OPENAI_MEAN
    std: tuple[float, float, float] = OPENAI_STD
    precision: str = "float32"
    weights_path: str | None = None
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")
        if self.native_size % self.patch_size:
            raise ValueError(
                f"patch_size {self.patch_size} does not divide native_size {self.native_size}"
            )
        if self.vision_width % self.vision_heads or self.text_width % self.text_heads:
            raise ValueError("width must be divisible by the number of heads")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unsupported precision {self.precision!r}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    @classmethod
    def toy(cls, **overrides) -> "BackboneConfig":
        """A tiny architecture for tests.

        Two layers of width 8, a 2x2 patch grid at native size and byte-level
        text of up to 94 characters.
        """
        params = dict(
            weights_id="toy",
            patch_size=4,
            embed_dim=6,
            native_size=8,
            layer_count=2,
            vision_width=8,
            vision_heads=2,
            text_width=8,
            text_heads=2,
            text_layers=1,
            context_length=96,
            vocab_size=ByteTokenizer.vocab_size,
            precision="float64",
            mean=(0.5, 0.5, 0.5),
            std=(0.25, 0.25, 0.25),
        )
        params.update(overrides)
        return cls(**params)


# ---------------------------------------------------------------------------
# Tokenizers


class ByteTokenizer:
    """UTF-8 byte tokenizer for toy backbones (ids 0..255, SOT=256, EOT=257).

    EOT carries the largest id so the CLIP ``argmax`` pooling convention holds.
    """

    sot = 256
    eot = 257
    vocab_size = 258

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))


class ClipBPETokenizer:
    """Thin wrapper over the OpenCLIP byte-pair tokenizer (needs ``open_clip_torch``)."""

    def __init__(self):
        try:
            from open_clip.tokenizer import SimpleTokenizer
        except ImportError as exc:  # pragma: no cover - depends on optional extra
            raise ImportError(
                "pretrained backbones need the 'pretrained' extra: pip install open_clip_torch"
            ) from exc
        self._tok = SimpleTokenizer()
        self.sot = self._tok.encoder["<start_of_text>"]
        self.eot = self._tok.encoder["<end_of_text>"]

    def encode(self, text: str) -> list[int]:
        return self._tok.encode(text)


def tokenize(tokenizer, text: str, context_length: int) -> torch.Tensor:
    """Token ids padded to ``context_length``; over-long prompts are truncated with a warning."""
    ids = tokenizer.encode(text)
    if len(ids) + 2 > context_length:
        warnings.warn(
            f"prompt truncated to context length {context_length}: {text[:60]!r}",
            stacklevel=3,
        )
        ids = ids[: context_length - 2]
    tokens = torch.zeros(context_length, dtype=torch.long)
    seq = [tokenizer.sot, *ids, tokenizer.eot]
    tokens[: len(seq)] = torch.tensor(seq)
    return tokens


# ---------------------------------------------------------------------------
# Network


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class ResidualAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, act: Callable[[], nn.Module]):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            OrderedDict(
                c_fc=nn.Linear(width, width * 4),
                gelu=act(),
                c_proj=nn.Linear(width * 4, width),
            )
        )

    def forward(self, x, attn_mask=None):
        y = self.ln_1(x)
        x = x + self.attn(y, y, y, need_weights=False, attn_mask=attn_mask)[0]
        return x + self.mlp(self.ln_2(x))


class Transformer(nn.Module):
    def __init__(self, width, layers, heads, act):
        super().__init__()
        self.resblocks = nn.ModuleList(
            [ResidualAttentionBlock(width, heads, act) for _ in range(layers)]
        )


class VisionTower(nn.Module):
    def __init__(self, cfg: BackboneConfig, act):
        super().__init__()
        width = cfg.vision_width
        grid = cfg.native_size // cfg.patch_size
        self.conv1 = nn.Conv2d(3, width, cfg.patch_size, cfg.patch_size, bias=False)
        self.class_embedding = nn.Parameter(torch.zeros(width))
        self.positional_embedding = nn.Parameter(torch.zeros(grid * grid + 1, width))
        self.ln_pre = nn.LayerNorm(width)
        self.transformer = Transformer(width, cfg.layer_count, cfg.vision_heads, act)
        self.ln_post = nn.LayerNorm(width)
        self.proj = nn.Parameter(torch.zeros(width, cfg.embed_dim))


class ClipModel(nn.Module):
    """Parameter container mirroring the OpenCLIP ``CLIP`` state-dict layout."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        act = QuickGELU if cfg.quick_gelu else nn.GELU
        self.visual = VisionTower(cfg, act)
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.text_width)
        self.positional_embedding = nn.Parameter(torch.zeros(cfg.context_length, cfg.text_width))
        self.transformer = Transformer(cfg.text_width, cfg.text_layers, cfg.text_heads, act)
        self.ln_final = nn.LayerNorm(cfg.text_width)
        self.text_projection = nn.Parameter(torch.zeros(cfg.text_width, cfg.embed_dim))
        self.logit_scale = nn.Parameter(torch.tensor(np.log(1 / 0.07)))
        mask = torch.full((cfg.context_length, cfg.context_length), float("-inf")).triu_(1)
        self.register_buffer("attn_mask", mask, persistent=False)

    def random_init(self, seed: int, scale: float = 1.0):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("logit_scale"):
                    continue
                if "ln_" in name and name.endswith("weight"):
                    p.copy_(1.0 + 0.1 * torch.randn(p.shape, generator=gen))
                    continue
                std = 0.02 if "bias" in name else p.shape[-1] ** -0.5
                if name.endswith("positional_embedding"):
                    std = 0.02
                p.copy_(scale * std * torch.randn(p.shape, generator=gen))


def interpolate_pos_embed(pos_embed: torch.Tensor, grid: int) -> torch.Tensor:
    """Resize the patch positional embeddings to a ``grid`` x ``grid`` layout.

    Bicubic on the 2-D grid, half-pixel centres; the CLS row is untouched.
    """
    n = pos_embed.shape[0] - 1
    old = int(round(n**0.5))
    if old * old != n:
        raise ValueError(f"positional embedding of {n} patches is not square")
    if old == grid:
        return pos_embed
    cls_pos, patch_pos = pos_embed[:1], pos_embed[1:]
    patch_pos = patch_pos.reshape(1, old, old, -1).permute(0, 3, 1, 2)
    patch_pos = F.interpolate(patch_pos, size=(grid, grid), mode="bicubic", align_corners=False)
    patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(grid * grid, -1)
    return torch.cat([cls_pos, patch_pos], dim=0)


# ---------------------------------------------------------------------------
# Encodings


@dataclass
class LayerArtifacts:
    """Per-layer inputs of the frozen visual blocks plus the final projection.

    ``hidden[i]`` is the (N+1, width) token matrix entering block ``i``;
    ``hidden[-1]`` is the output of the last block.
    """

    hidden: list[torch.Tensor]
    blocks: Sequence[ResidualAttentionBlock]
    ln_post: nn.LayerNorm
    proj: torch.Tensor
    heads: int

    def projections(self, layer: int) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
        """``{'q'|'k'|'v': (W, b)}`` for ``layer`` with W shaped (width_in, width_out)."""
        attn = self.blocks[layer].attn
        w_q, w_k, w_v = attn.in_proj_weight.chunk(3, dim=0)
        b_q, b_k, b_v = attn.in_proj_bias.chunk(3, dim=0)
        return {"q": (w_q.T, b_q), "k": (w_k.T, b_k), "v": (w_v.T, b_v)}

    def to_joint(self, tokens: torch.Tensor) -> torch.Tensor:
        """Final LayerNorm and visual projection, as CLIP applies to CLS."""
        return self.ln_post(tokens) @ self.proj


@dataclass
class ImageEncoding:
    cls_embedding: np.ndarray
    patch_grid: np.ndarray  # (g, g, d), unit rows
    scale: int
    layer_artifacts: LayerArtifacts | None = field(default=None, repr=False)

    @property
    def grid_size(self) -> int:
        return self.patch_grid.shape[0]


def _l2n(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1)


class Backbone:
    """Frozen CLIP encoder exposing text, CLS and patch embeddings.

    Instances are immutable after construction and encode calls do not
    mutate shared state apart from a lock-guarded positional-embedding
    cache, so concurrent use from several threads is safe.
    """

    def __init__(self, config: BackboneConfig, model: ClipModel, tokenizer):
        self.config = config
        self.model = model.to(config.dtype).eval().requires_grad_(False)
        self.tokenizer = tokenizer
        self._pos_cache: dict[int, torch.Tensor] = {}
        self._lock = threading.Lock()

    @property
    def weights_id(self) -> str:
        return self.config.weights_id

    @property
    def patch_size(self) -> int:
        return self.config.patch_size

    @property
    def layer_count(self) -> int:
        return self.config.layer_count

    # -- text ---------------------------------------------------------------

    @torch.no_grad()
    def encode_text(self, prompt: str) -> np.ndarray:
        if not isinstance(prompt, str) or not prompt.strip():
            raise ValueError("prompt must be a non-empty string")
        return self.encode_texts([prompt])[0]

    @torch.no_grad()
    def encode_texts(self, prompts: Sequence[str], batch_size: int = 64) -> np.ndarray:
        cfg, m = self.config, self.model
        out = []
        for start in range(0, len(prompts), batch_size):
            chunk = prompts[start : start + batch_size]
            tokens = torch.stack([tokenize(self.tokenizer, p, cfg.context_length) for p in chunk])
            x = m.token_embedding(tokens) + m.positional_embedding
            for block in m.transformer.resblocks:
                x = block(x, attn_mask=m.attn_mask)
            x = m.ln_final(x)
            x = x[torch.arange(len(chunk)), tokens.argmax(dim=-1)] @ m.text_projection
            out.append(_l2n(x))
        return torch.cat(out).cpu().numpy()

    # -- image --------------------------------------------------------------

    def preprocess(self, image, scale: int) -> torch.Tensor:
        """Square resize to ``scale`` (bicubic) and channelwise standardisation."""
        from PIL import Image

        arr = check_image(image)
        if arr.shape[:2] != (scale, scale):
            arr = np.asarray(Image.fromarray(arr).resize((scale, scale), Image.BICUBIC))
        x = torch.from_numpy(arr.astype(np.float64) / 255.0).permute(2, 0, 1)
        mean = torch.tensor(self.config.mean, dtype=torch.float64)[:, None, None]
        std = torch.tensor(self.config.std, dtype=torch.float64)[:, None, None]
        return ((x - mean) / std).to(self.config.dtype)

    def positional_embedding(self, scale: int, interpolate: bool = True) -> torch.Tensor:
        grid = scale // self.patch_size
        pos = self.model.visual.positional_embedding
        if not interpolate:
            if scale != self.config.native_size:
                raise ValueError("interpolation can only be bypassed at the native size")
            return pos
        with self._lock:
            if grid not in self._pos_cache:
                self._pos_cache[grid] = interpolate_pos_embed(pos.detach(), grid)
            return self._pos_cache[grid]

    @torch.no_grad()
    def encode_image(
        self,
        image,
        scale: int | None = None,
        keep_layers: bool = False,
        interpolate: bool = True,
    ) -> ImageEncoding:
        """Encode ``image`` at input size ``scale`` (defaults to the native size)."""
        scale = self.config.native_size if scale is None else scale
        check_scale(scale, self.patch_size)
        v = self.model.visual
        x = self.preprocess(image, scale)[None]
        x = v.conv1(x).flatten(2).transpose(1, 2)  # (1, N, width)
        cls = v.class_embedding.expand(1, 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding(scale, interpolate)
        x = v.ln_pre(x)
        hidden = []
        for block in v.transformer.resblocks:
            if keep_layers:
                hidden.append(x[0])
            x = block(x)
        x = x[0]
        hidden.append(x)
        joint = _l2n(v.ln_post(x) @ v.proj)
        grid = scale // self.patch_size
        artifacts = None
        if keep_layers:
            artifacts = LayerArtifacts(
                hidden=hidden,
                blocks=list(v.transformer.resblocks),
                ln_post=v.ln_post,
                proj=v.proj,
                heads=self.config.vision_heads,
            )
        return ImageEncoding(
            cls_embedding=joint[0].cpu().numpy(),
            patch_grid=joint[1:].reshape(grid, grid, -1).cpu().numpy(),
            scale=scale,
            layer_artifacts=artifacts,
        )


# ---------------------------------------------------------------------------
# Loading


def cache_dir() -> Path:
    """Root of the on-disk cache; override with ``FADE_CACHE_DIR``."""
    root = os.environ.get("FADE_CACHE_DIR")
    return Path(root) if root else Path.home() / ".cache" / "fade"


def config_for(weights_id: str, **overrides) -> BackboneConfig:
    if weights_id == "toy":
        return BackboneConfig.toy(**overrides)
    weights_id = _ALIASES.get(weights_id, weights_id)
    if weights_id not in WEIGHTS_SOURCES and "weights_path" not in overrides:
        raise WeightsError(f"unknown weights_id {weights_id!r}; known: {sorted(WEIGHTS_SOURCES)}")
    return BackboneConfig(weights_id=weights_id, **overrides)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_weights(config: BackboneConfig, download: bool = False) -> Path:
    """Locate (and optionally download) the checkpoint for ``config``, verifying its checksum."""
    source = WEIGHTS_SOURCES.get(config.weights_id)
    expected = source.sha256_prefix if source else None
    if config.weights_path:
        path = Path(config.weights_path)
    elif source is None:
        raise WeightsError(f"no source registered for {config.weights_id!r}")
    else:
        path = cache_dir() / "weights" / source.filename
        if not path.exists() and download:
            _download(source.url, path)
    if not path.exists():
        raise WeightsError(
            f"weights for {config.weights_id!r} not found at {path} "
            f"(expected sha256 {expected or 'unpinned'}...); "
            f"download {source.url if source else 'the checkpoint'} into {path.parent} "
            "or run `fade cache --download`"
        )
    if expected:
        digest = _sha256(path)
        if not digest.startswith(expected):
            raise WeightsError(
                f"checksum mismatch for {path}: expected sha256 {expected}..., got {digest[:16]}..."
            )
    return path


def _download(url: str, dest: Path):  # pragma: no cover - network
    import urllib.request

    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_suffix(".part")
    logger.info("downloading %s", url)
    urllib.request.urlretrieve(url, tmp)
    tmp.replace(dest)


def _read_state_dict(path: Path) -> dict[str, torch.Tensor]:
    try:
        obj = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise WeightsError(f"cannot read checkpoint {path}: {exc}") from exc
    if isinstance(obj, torch.jit.ScriptModule):
        obj = obj.state_dict()
    if isinstance(obj, dict) and "state_dict" in obj:
        obj = obj["state_dict"]
    return {k.removeprefix("module."): v for k, v in obj.items()}


def load_state_dict(model: ClipModel, state: dict[str, torch.Tensor]):
    own = model.state_dict()
    missing = [k for k in own if k not in state]
    if missing:
        raise WeightsError(f"checkpoint lacks {len(missing)} parameters, e.g. {missing[:3]}")
    for k in state:
        if k in own and own[k].shape != state[k].shape:
            raise WeightsError(f"shape mismatch for {k}: {tuple(state[k].shape)} vs {tuple(own[k].shape)}")
    model.load_state_dict({k: state[k] for k in own}, strict=True)


def load_backbone(config: BackboneConfig | str = DEFAULT_WEIGHTS_ID, download: bool = False) -> Backbone:
    """Build a frozen :class:`Backbone` from a config or weights id."""
    if isinstance(config, str):
        config = config_for(config)
    model = ClipModel(config)
    if config.weights_id == "toy":
        model.random_init(config.seed, config.init_scale)
        tokenizer = ByteTokenizer()
    else:
        path = resolve_weights(config, download=download)
        load_state_dict(model, _read_state_dict(path))
        tokenizer = ClipBPETokenizer()
    return Backbone(config, model, tokenizer)


def toy_backbone(seed: int = 0, **overrides) -> Backbone:
    """Randomly initialised miniature backbone (no weights needed)."""
    return load_backbone(replace(BackboneConfig.toy(**overrides), seed=seed))
