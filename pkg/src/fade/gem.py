"""Self-self attention pathway that yields language-aligned patch embeddings.

A GEM block runs alongside a frozen transformer block: it replaces the
query-key attention with query-query, key-key and value-value attention,
averages the three, and skips the feed-forward network.  Block outputs of
the last ``layer_span`` layers are summed and mapped to the joint
vision-language space with CLIP's final projection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Backbone, ImageEncoding, LayerArtifacts

KINDS = ("qq", "kk", "vv")


@dataclass(frozen=True)
class GemConfig:
    """Configuration of the GEM pathway.

    ``scale_factor`` multiplies the logits inside the softmax.  A number is
    used as-is; ``"auto"`` uses the mean norm of the block's (layer-normed)
    input tokens times ``1/sqrt(head_dim)``; ``"head"`` is ``1/sqrt(head_dim)``.
    ``layer_span=None`` means the final half of the blocks.
    """

    layer_span: int | None = None
    kinds: tuple[str, ...] = KINDS
    normalize: bool = True
    scale_factor: float | str = "auto"
    include_residual: bool = False
    enabled: bool = True

    def __post_init__(self):
        kinds = tuple(self.kinds)
        object.__setattr__(self, "kinds", kinds)
        if not kinds or any(k not in KINDS for k in kinds) or len(set(kinds)) != len(kinds):
            raise ValueError(f"kinds must be a non-empty subset of {KINDS}, got {kinds}")
        if self.layer_span is not None and self.layer_span < 1:
            raise ValueError("layer_span must be >= 1")
        if isinstance(self.scale_factor, str):
            if self.scale_factor not in ("auto", "head"):
                raise ValueError(f"unknown scale_factor {self.scale_factor!r}")
        elif not self.scale_factor > 0:
            raise ValueError("scale_factor must be positive")

    def span_for(self, layer_count: int) -> int:
        span = max(1, layer_count // 2) if self.layer_span is None else self.layer_span
        if span > layer_count:
            raise ValueError(f"layer_span {span} exceeds the backbone's {layer_count} layers")
        return span

    def resolve_scale(self, tokens: torch.Tensor, head_dim: int) -> float:
        if self.scale_factor == "head":
            return head_dim**-0.5
        if self.scale_factor == "auto":
            return float(tokens.norm(dim=-1).mean()) * head_dim**-0.5
        return float(self.scale_factor)


@dataclass
class GemEncoding:
    patch_grid: np.ndarray  # (g, g, d) unit rows in the joint space
    scale: int

    @property
    def grid_size(self) -> int:
        return self.patch_grid.shape[0]


def self_self_attention(
    tokens: torch.Tensor,
    W: torch.Tensor,
    scale_factor: float = 1.0,
    *,
    bias: torch.Tensor | None = None,
    normalize: bool = True,
    values: torch.Tensor | None = None,
    heads: int = 1,
    return_weights: bool = False,
):
    """``softmax(scale * (XW)(XW)^T) @ V`` computed per head.

    ``V`` defaults to the projected tokens ``XW``.  With ``heads > 1`` the
    projected features are split into equal column groups and the per-head
    outputs are concatenated.  Returns the (N, d_out) output, plus the
    (heads, N, N) weights when ``return_weights`` is set.
    """
    if not torch.isfinite(tokens).all() or not torch.isfinite(W).all():
        raise ValueError("self_self_attention received non-finite input")
    if tokens.ndim != 2 or W.ndim != 2 or tokens.shape[1] != W.shape[0]:
        raise ValueError(f"shape mismatch: tokens {tuple(tokens.shape)}, W {tuple(W.shape)}")
    n, d_out = tokens.shape[0], W.shape[1]
    if d_out % heads:
        raise ValueError(f"{d_out} features cannot be split into {heads} heads")
    dh = d_out // heads
    proj = tokens @ W
    if bias is not None:
        proj = proj + bias
    values = proj if values is None else values
    if values.shape[0] != n or values.shape[1] % heads:
        raise ValueError("values must have one row per token and split evenly into heads")
    dv = values.shape[1] // heads

    outputs, weights = [], []
    for h in range(heads):
        feats = proj[:, h * dh : (h + 1) * dh]
        if normalize:
            feats = F.normalize(feats, dim=-1)
        attn = torch.softmax(scale_factor * (feats @ feats.T), dim=-1)
        outputs.append(attn @ values[:, h * dv : (h + 1) * dv])
        if return_weights:
            weights.append(attn)
    out = torch.cat(outputs, dim=-1)
    if return_weights:
        return out, torch.stack(weights)
    return out


def gem_block(
    layer_tokens: torch.Tensor,
    artifacts: LayerArtifacts,
    layer: int,
    config: GemConfig = GemConfig(),
) -> torch.Tensor:
    """Output of the GEM block attached to frozen block ``layer``.

    Takes the (N+1, width) tokens entering that block; returns the
    out-projected mean of the configured self-self attentions.  All kinds
    aggregate the block's value vectors.
    """
    block = artifacts.blocks[layer]
    x = block.ln_1(layer_tokens)
    projections = artifacts.projections(layer)
    heads = artifacts.heads
    head_dim = x.shape[-1] // heads
    scale = config.resolve_scale(x, head_dim)
    w_v, b_v = projections["v"]
    values = x @ w_v + b_v

    total = 0
    for kind in config.kinds:
        W, b = projections[kind[0]]
        total = total + self_self_attention(
            x, W, scale, bias=b, normalize=config.normalize, values=values, heads=heads
        )
    return block.attn.out_proj(total / len(config.kinds))


@torch.no_grad()
def gem_encode(
    backbone: Backbone,
    image=None,
    scale: int | None = None,
    config: GemConfig = GemConfig(),
    encoding: ImageEncoding | None = None,
) -> GemEncoding:
    """GEM patch embeddings of ``image`` at ``scale``.

    Pass a precomputed ``encoding`` (from ``encode_image(..., keep_layers=True)``)
    to reuse the frozen forward pass.
    """
    if encoding is None or (config.enabled and encoding.layer_artifacts is None):
        encoding = backbone.encode_image(image, scale, keep_layers=config.enabled)
    if not config.enabled:
        return GemEncoding(patch_grid=encoding.patch_grid, scale=encoding.scale)

    art = encoding.layer_artifacts
    n_layers = len(art.blocks)
    start = n_layers - config.span_for(n_layers)
    total = art.hidden[start].clone() if config.include_residual else 0
    for layer in range(start, n_layers):
        total = total + gem_block(art.hidden[layer], art, layer, config)

    joint = F.normalize(art.to_joint(total[1:]), dim=-1)
    g = encoding.grid_size
    return GemEncoding(patch_grid=joint.reshape(g, g, -1).cpu().numpy(), scale=encoding.scale)


def gem_encode_scales(
    backbone: Backbone, image, scales: Sequence[int], config: GemConfig = GemConfig()
) -> dict[int, GemEncoding]:
    return {s: gem_encode(backbone, image, s, config) for s in scales}
