import numpy as np
import pytest
from conftest import unit_rows
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import bilinear_upsample, nn_distance_scan

from fade.scoring_vision import (
    MemoryBank,
    build_bank_fewshot,
    few_shot_vision_score,
    patch_distance_map,
    vision_score_from_grids,
    zero_shot_vision_map,
)


def test_identical_and_orthogonal_patches():
    bank = np.eye(4)[:2]
    assert patch_distance_map(bank[:1], bank).values.item() == 0.0
    assert patch_distance_map(np.eye(4)[2:3], bank).values.item() == 0.5


def test_matches_exhaustive_scan(rng):
    bank = unit_rows(rng, 20, 8)
    query = unit_rows(rng, 6, 8)
    for rank in (1, 2):
        got = patch_distance_map(query, bank, rank).values.ravel()
        np.testing.assert_allclose(got, nn_distance_scan(query, bank, rank), atol=1e-7)


def test_grid_shape_and_chunking(rng):
    bank = unit_rows(rng, 30, 5)
    grid = unit_rows(rng, 16, 5).reshape(4, 4, 5)
    a = patch_distance_map(grid, bank, chunk=3)
    b = patch_distance_map(grid, bank)
    assert a.shape == (4, 4)
    np.testing.assert_array_equal(a.values, b.values)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 15), extra=st.integers(1, 10), rank=st.sampled_from([1, 2]))
def test_bank_growth_never_increases_distance(seed, n, extra, rank):
    rng = np.random.default_rng(seed)
    bank = unit_rows(rng, n + 1, 6)
    grown = np.vstack([bank, unit_rows(rng, extra, 6)])
    q = unit_rows(rng, 5, 6)
    small = patch_distance_map(q, bank, rank).values
    large = patch_distance_map(q, grown, rank).values
    assert np.all(large <= small + 1e-12)
    assert np.all((0 <= large) & (large <= 1))


def test_rank_validation(rng):
    with pytest.raises(ValueError):
        patch_distance_map(unit_rows(rng, 2, 3), unit_rows(rng, 1, 3), 2)
    with pytest.raises(ValueError):
        patch_distance_map(unit_rows(rng, 2, 3), unit_rows(rng, 4, 3), 3)
    with pytest.raises(ValueError):
        patch_distance_map(unit_rows(rng, 2, 3), unit_rows(rng, 4, 4))


def test_self_bank_constant_image_is_zero():
    grid = np.tile(np.eye(3)[0], (4, 4, 1))
    m = zero_shot_vision_map({8: grid}, 4)
    np.testing.assert_array_equal(m.values, 0)


def test_self_bank_outlier():
    grid = np.tile(np.array([1.0, 0, 0]), (3, 3, 1))
    grid[1, 1] = [0, 1.0, 0]
    m = patch_distance_map(grid, grid.reshape(-1, 3), neighbor_rank=2)
    assert m.values[1, 1] == 0.5
    assert np.count_nonzero(m.values) == 1


def test_self_bank_rank_one_is_degenerate(rng):
    grid = unit_rows(rng, 9, 4).reshape(3, 3, 4)
    np.testing.assert_allclose(patch_distance_map(grid, grid.reshape(-1, 4), 1).values, 0, atol=1e-12)


def test_zero_shot_map_aggregates_scales(rng):
    grids = {s: unit_rows(rng, g * g, 4).reshape(g, g, 4) for s, g in ((8, 2), (16, 4))}
    flat = {s: v.reshape(-1, 4) for s, v in grids.items()}
    expected = np.mean(
        [bilinear_upsample(nn_distance_scan(flat[s], flat[s], 2).reshape(g, g), 8) for s, g in ((8, 2), (16, 4))],
        axis=0,
    )
    np.testing.assert_allclose(zero_shot_vision_map(grids, 8).values, expected, atol=1e-7)


def test_bank_counts_and_multiset(toy, rng):
    refs = [rng.integers(0, 255, (8, 8, 3), dtype=np.uint8) for _ in range(2)]
    bank = build_bank_fewshot(toy, refs, (8, 16))
    assert {s: bank.size(s) for s in bank.scales} == {8: 2 * 4, 16: 2 * 16}
    assert bank.shot_count == 2 and bank.embedding_kind == "clip"
    twice = build_bank_fewshot(toy, [refs[0], refs[0]], (8,))
    assert twice.size(8) == 2 * build_bank_fewshot(toy, refs[:1], (8,)).size(8)


def test_bank_kind_invariant(rng):
    with pytest.raises(ValueError):
        MemoryBank({8: unit_rows(rng, 3, 4)}, 1, "gem")
    with pytest.raises(ValueError):
        MemoryBank({8: unit_rows(rng, 3, 4)}, 0, "clip")
    with pytest.raises(ValueError, match="L2"):
        MemoryBank({8: np.ones((3, 4))}, 1, "clip")


def test_bank_roundtrip(tmp_path, rng):
    bank = MemoryBank({8: unit_rows(rng, 3, 4), 16: unit_rows(rng, 5, 4)}, 2, "clip", "toy")
    loaded = MemoryBank.load(bank.save(tmp_path / "b.bank"))
    assert loaded.scales == (8, 16) and loaded.shot_count == 2 and loaded.weights_id == "toy"
    for s in bank.scales:
        np.testing.assert_array_equal(loaded.banks[s], bank.banks[s])
    (tmp_path / "bad.bank").write_bytes(b"nope")
    with pytest.raises(ValueError):
        MemoryBank.load(tmp_path / "bad.bank")


def test_query_in_reference_set_scores_zero(toy, rng):
    img = rng.integers(0, 255, (8, 8, 3), dtype=np.uint8)
    bank = build_bank_fewshot(toy, [img], (8, 16))
    res = few_shot_vision_score(toy, img, bank, 16)
    assert res.image_score < 1e-6
    assert res.image_score == res.map.values.max()


def test_fewshot_matches_straight_line_oracle(rng):
    d = 5
    refs = [{8: unit_rows(rng, 4, d), 16: unit_rows(rng, 16, d)} for _ in range(2)]
    query = {8: unit_rows(rng, 4, d).reshape(2, 2, d), 16: unit_rows(rng, 16, d).reshape(4, 4, d)}
    bank = MemoryBank({s: np.vstack([r[s] for r in refs]) for s in (8, 16)}, 2, "clip")
    got = vision_score_from_grids(query, bank, 8)
    maps = []
    for s, g in ((8, 2), (16, 4)):
        dist = nn_distance_scan(query[s].reshape(-1, d), bank.banks[s], 1).reshape(g, g)
        maps.append(bilinear_upsample(dist, 8))
    expected = np.mean(maps, axis=0)
    np.testing.assert_allclose(got.map.values, expected, atol=1e-6)
    assert got.image_score == pytest.approx(expected.max(), abs=1e-6)


def test_scale_mismatch_rejected(rng):
    bank = MemoryBank({8: unit_rows(rng, 4, 3)}, 1, "clip")
    with pytest.raises(ValueError, match="scales"):
        vision_score_from_grids({16: unit_rows(rng, 16, 3).reshape(4, 4, 3)}, bank, 8)
