import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import gem_reference, self_self_attention_loops

from fade.gem import GemConfig, gem_block, gem_encode, gem_encode_scales, self_self_attention


def _sd(backbone):
    return {k: v.detach().numpy().astype(np.float64) for k, v in backbone.model.state_dict().items()}


def _pixels(backbone, img):
    return backbone.preprocess(img, backbone.config.native_size).numpy()


@pytest.fixture
def image():
    return np.random.default_rng(7).integers(0, 255, (8, 8, 3), dtype=np.uint8)


# -- self-self attention ------------------------------------------------------


def test_single_token_is_identity_weight():
    x = torch.tensor([[0.3, -1.2, 0.5]], dtype=torch.float64)
    W = torch.randn(3, 4, dtype=torch.float64)
    out, w = self_self_attention(x, W, 2.0, return_weights=True)
    assert w.tolist() == [[[1.0]]]
    torch.testing.assert_close(out, x @ W)


@pytest.mark.parametrize("heads,normalize,scale", [(1, True, 1.0), (2, True, 3.5), (1, False, 0.2), (4, True, 10.0)])
def test_matches_loop_oracle(heads, normalize, scale):
    g = torch.Generator().manual_seed(heads)
    x = torch.randn(5, 8, generator=g, dtype=torch.float64)
    W = torch.randn(8, 8, generator=g, dtype=torch.float64)
    b = torch.randn(8, generator=g, dtype=torch.float64)
    out, w = self_self_attention(x, W, scale, bias=b, normalize=normalize, heads=heads, return_weights=True)
    ref, ref_w = self_self_attention_loops(x.numpy(), W.numpy(), scale, b.numpy(), normalize, heads=heads)
    np.testing.assert_allclose(out.numpy(), ref, atol=1e-6)
    np.testing.assert_allclose(w.numpy(), ref_w, atol=1e-6)


def test_explicit_values_are_aggregated():
    g = torch.Generator().manual_seed(3)
    x, W, V = (torch.randn(*s, generator=g, dtype=torch.float64) for s in ((5, 8), (8, 8), (5, 6)))
    out = self_self_attention(x, W, 2.0, values=V, heads=2)
    ref, _ = self_self_attention_loops(x.numpy(), W.numpy(), 2.0, values=V.numpy(), heads=2)
    np.testing.assert_allclose(out.numpy(), ref, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(1, 12),
    d=st.integers(1, 6),
    heads=st.sampled_from([1, 2]),
    scale=st.floats(0.01, 50.0),
    seed=st.integers(0, 2**31 - 1),
)
def test_rows_sum_to_one_and_permutation_equivariance(n, d, heads, scale, seed):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.normal(size=(n, 4)))
    W = torch.from_numpy(rng.normal(size=(4, d * heads)))
    out, w = self_self_attention(x, W, scale, heads=heads, return_weights=True)
    np.testing.assert_allclose(w.sum(-1).numpy(), 1.0, atol=1e-6)
    perm = torch.from_numpy(rng.permutation(n))
    out_p, w_p = self_self_attention(x[perm], W, scale, heads=heads, return_weights=True)
    # rows and columns of the weights move with the tokens
    np.testing.assert_allclose(out_p.numpy(), out[perm].numpy(), rtol=0, atol=1e-12)
    np.testing.assert_allclose(w_p.numpy(), w[:, perm][:, :, perm].numpy(), rtol=0, atol=1e-12)


def test_non_finite_and_shape_errors():
    W = torch.eye(3, dtype=torch.float64)
    with pytest.raises(ValueError, match="non-finite"):
        self_self_attention(torch.tensor([[np.nan, 0, 0]], dtype=torch.float64), W)
    with pytest.raises(ValueError, match="shape"):
        self_self_attention(torch.zeros(2, 4, dtype=torch.float64), W)
    with pytest.raises(ValueError, match="heads"):
        self_self_attention(torch.ones(2, 3, dtype=torch.float64), W, heads=2)


# -- GEM block ensemble -------------------------------------------------------


def _block_inputs(toy, image):
    art = toy.encode_image(image, keep_layers=True).layer_artifacts
    return art, art.hidden[1]


def test_single_kind_vv_equals_plain_attention(toy, image):
    art, x_in = _block_inputs(toy, image)
    cfg = GemConfig(kinds=("vv",), scale_factor=2.0)
    out = gem_block(x_in, art, 1, cfg)
    x = art.blocks[1].ln_1(x_in)
    w_v, b_v = art.projections(1)["v"]
    ref = self_self_attention(x, w_v, 2.0, bias=b_v, heads=art.heads)
    torch.testing.assert_close(out, art.blocks[1].attn.out_proj(ref))


def test_identical_projections_collapse_to_one_kind(toy, image):
    art, x_in = _block_inputs(toy, image)
    attn = art.blocks[1].attn
    saved_w, saved_b = attn.in_proj_weight.detach().clone(), attn.in_proj_bias.detach().clone()
    try:
        with torch.no_grad():
            w_v = saved_w.chunk(3)[2]
            b_v = saved_b.chunk(3)[2]
            attn.in_proj_weight.copy_(torch.cat([w_v, w_v, w_v]))
            attn.in_proj_bias.copy_(torch.cat([b_v, b_v, b_v]))
        all3 = gem_block(x_in, art, 1, GemConfig(scale_factor=1.7))
        one = gem_block(x_in, art, 1, GemConfig(kinds=("kk",), scale_factor=1.7))
        torch.testing.assert_close(all3, one)
    finally:
        with torch.no_grad():
            attn.in_proj_weight.copy_(saved_w)
            attn.in_proj_bias.copy_(saved_b)


def test_three_kinds_is_mean_of_oracles(toy, image):
    art, x_in = _block_inputs(toy, image)
    x = art.blocks[1].ln_1(x_in).numpy()
    proj = art.projections(1)
    values = x @ proj["v"][0].numpy() + proj["v"][1].numpy()
    refs = [
        self_self_attention_loops(x, proj[k][0].numpy(), 1.3, proj[k][1].numpy(), values=values, heads=art.heads)[0]
        for k in "qkv"
    ]
    out = gem_block(x_in, art, 1, GemConfig(scale_factor=1.3))
    with torch.no_grad():
        expected = art.blocks[1].attn.out_proj(torch.from_numpy(np.mean(refs, axis=0)))
    np.testing.assert_allclose(out.numpy(), expected.numpy(), atol=1e-6)


# -- full pathway -------------------------------------------------------------


@pytest.mark.parametrize(
    "cfg",
    [
        GemConfig(),
        GemConfig(layer_span=2, scale_factor="head"),
        GemConfig(layer_span=2, scale_factor=5.0, kinds=("qq", "vv")),
        GemConfig(layer_span=1, normalize=False, scale_factor=0.5),
        GemConfig(layer_span=2, include_residual=True),
    ],
    ids=["default", "head-scale", "two-kinds", "unnormalised", "residual"],
)
def test_gem_encode_matches_straight_line_reference(toy, image, cfg):
    got = gem_encode(toy, image, config=cfg).patch_grid.reshape(-1, toy.config.embed_dim)
    c = toy.config
    span = cfg.span_for(c.layer_count)
    head_dim = c.vision_width // c.vision_heads
    scale = {"auto": "auto", "head": head_dim**-0.5}.get(cfg.scale_factor, cfg.scale_factor)
    ref = gem_reference(
        _sd(toy), _pixels(toy, image), c.patch_size, c.layer_count, c.vision_heads,
        span, scale, cfg.kinds, cfg.normalize, cfg.include_residual,
    )
    assert got.shape == (4, c.embed_dim)
    np.testing.assert_allclose(got, ref, atol=1e-5)


def test_layer_span_one_is_single_block(toy, image):
    enc = toy.encode_image(image, keep_layers=True)
    art = enc.layer_artifacts
    cfg = GemConfig(layer_span=1, scale_factor=2.0)
    block = gem_block(art.hidden[-2], art, toy.layer_count - 1, cfg)
    expected = torch.nn.functional.normalize(art.to_joint(block[1:]), dim=-1).numpy()
    got = gem_encode(toy, config=cfg, encoding=enc).patch_grid.reshape(expected.shape)
    np.testing.assert_allclose(got, expected)


def test_disabled_gem_returns_clip_patches(toy, image):
    enc = toy.encode_image(image, 16)
    got = gem_encode(toy, image, 16, GemConfig(enabled=False)).patch_grid
    np.testing.assert_array_equal(got, enc.patch_grid)


def test_scales_give_expected_grids_and_unit_rows(toy, image):
    out = gem_encode_scales(toy, image, (8, 16, 32))
    assert {s: e.grid_size for s, e in out.items()} == {8: 2, 16: 4, 32: 8}
    for e in out.values():
        np.testing.assert_allclose(np.linalg.norm(e.patch_grid, axis=-1), 1, atol=1e-9)


def test_config_validation(toy):
    with pytest.raises(ValueError):
        GemConfig(kinds=("qk",))
    with pytest.raises(ValueError):
        GemConfig(kinds=())
    with pytest.raises(ValueError):
        GemConfig(scale_factor=-1.0)
    with pytest.raises(ValueError, match="exceeds"):
        GemConfig(layer_span=3).span_for(toy.layer_count)
    assert GemConfig().span_for(12) == 6
