import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fade import FADE, EngineConfig
from fade.fusion import fuse
from fade.gem import GemConfig, gem_encode
from fade.scoring_language import multiscale_language_map, score_image
from fade.scoring_vision import build_bank_fewshot, zero_shot_vision_map

SCALES = (8, 16)


@pytest.fixture
def images(rng):
    return [rng.integers(0, 255, (12, 12, 3), dtype=np.uint8) for _ in range(4)]


def make(toy, **kw):
    kw.setdefault("scales", SCALES)
    kw.setdefault("canonical_map_size", 16)
    return FADE(backbone=toy, object_name="bottle", **kw)


def test_params_and_clone(toy):
    est = make(toy, temperature=0.05)
    params = est.get_params()
    assert params["temperature"] == 0.05 and params["scales"] == SCALES
    assert clone(FADE(backbone="toy")).get_params()["backbone"] == "toy"
    est.set_params(use_vision=False)
    assert not est.use_vision


def test_not_fitted(toy, images):
    with pytest.raises(NotFittedError):
        make(toy).score_samples(images)


def test_zero_shot_pipeline_matches_components(toy, images):
    est = make(toy).fit()
    assert est.n_shots_ == 0 and est.bank_ is None
    res = est.detect(images[:1])[0]
    gem = {s: gem_encode(toy, images[0], s, GemConfig()).patch_grid for s in SCALES}
    m_lang = multiscale_language_map(gem, est.segmentation_embedding_, est.score_config)
    m_vis = zero_shot_vision_map(gem, 16)
    s_lang = score_image(toy.encode_image(images[0]).cls_embedding, est.classification_embedding_)
    ref = fuse(s_lang, m_lang, m_vis, shots=0)
    assert res.image_score == ref.image_score
    np.testing.assert_allclose(res.anomaly_map.values, ref.anomaly_map.values, atol=1e-12)
    assert res.setting == "zero_shot"


def test_few_shot_pipeline(toy, images):
    est = make(toy).fit(images[1:])
    assert est.n_shots_ == 3 and est.bank_.embedding_kind == "clip"
    res = est.detect(images[:1])[0]
    assert res.image_score == pytest.approx(res.components["s_lang"] + res.components["s_vis"])
    assert 0 <= res.anomaly_map.values.min() and res.anomaly_map.values.max() < 2
    # a reference image matches itself in the bank
    again = est.detect(images[1:2])[0]
    assert again.components["s_vis"] < 1e-6


def test_prebuilt_bank_equivalent(toy, images):
    bank = build_bank_fewshot(toy, images[1:], SCALES)
    a = make(toy).fit(images[1:]).score_samples(images[:1])
    b = make(toy).fit(bank=bank).score_samples(images[:1])
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError, match="scales"):
        make(toy, scales=(8,)).fit(bank=bank)


def test_outputs_shapes(toy, images):
    est = make(toy).fit(images[2:])
    assert est.score_samples(images).shape == (4,)
    assert est.transform(images).shape == (4, 16, 16)
    np.testing.assert_array_equal(est.decision_function(images), est.score_samples(images))


def test_ablations(toy, images):
    full = make(toy).fit(images[1:]).detect(images[:1])[0]
    lang = make(toy, use_vision=False).fit(images[1:]).detect(images[:1])[0]
    vis = make(toy, use_language=False).fit(images[1:]).detect(images[:1])[0]
    np.testing.assert_allclose(lang.anomaly_map.values + vis.anomaly_map.values, full.anomaly_map.values, atol=1e-12)
    assert lang.image_score + vis.image_score == pytest.approx(full.image_score)
    with pytest.raises(ValueError):
        make(toy, use_language=False, use_vision=False).fit()


def test_clip_patches_when_gem_disabled(toy, images):
    a = make(toy).fit().transform(images[:1])
    b = make(toy, use_gem=False).fit().transform(images[:1])
    assert not np.allclose(a, b)


def test_references_must_be_normal(toy, images):
    with pytest.raises(ValueError, match="normal"):
        make(toy).fit(images[:2], y=[0, 1])


def test_invalid_scale(toy):
    with pytest.raises(ValueError, match="divisible"):
        make(toy, scales=(10,)).fit()


def test_from_config(toy):
    cfg = EngineConfig().updated(**{"scoring.scales": [8], "gem.layer_span": 1, "fusion.use_vision": False})
    est = FADE.from_config(cfg, "cable", backbone=toy)
    assert est.scales == (8,) and est.gem_layer_span == 1 and not est.use_vision and est.object_name == "cable"


def test_text_cache_dir(toy, tmp_path):
    make(toy, cache_dir=str(tmp_path)).fit()
    files = list((tmp_path / "text").glob("*.npz"))
    assert len(files) == 2
