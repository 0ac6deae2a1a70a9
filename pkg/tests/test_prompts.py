import numpy as np
import pytest

from fade.prompts import (
    EmbeddingCache,
    PromptEnsemble,
    builtin_ensemble,
    combine,
    embed_ensemble,
    ensemble_hash,
    load_ensemble,
    render,
    resolve_ensemble,
)


def write_ensemble(prefix, anomalous, normal):
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_name(prefix.name + ".anomalous.txt").write_text("\n".join(anomalous) + "\n")
    prefix.with_name(prefix.name + ".normal.txt").write_text("\n".join(normal) + "\n")
    return prefix


def test_builtin_counts():
    w = builtin_ensemble("winclip")
    g = builtin_ensemble("generated")
    assert (len(w.anomalous), len(w.normal)) == (88, 154)
    assert (len(g.anomalous), len(g.normal)) == (486, 423)
    assert w.object_templated and not g.object_templated


def test_winclip_contains_quoted_template():
    rendered = render(builtin_ensemble("winclip"), "bottle")
    assert "a cropped photo of the flawless bottle" in rendered.normal


def test_duplicate_line_dropped_with_warning(tmp_path):
    prefix = write_ensemble(tmp_path / "p", ["a broken thing", "a broken thing", "a scratched thing"], ["a good thing"])
    with pytest.warns(UserWarning, match="duplicate"):
        ens = load_ensemble(prefix)
    assert ens.anomalous == ("a broken thing", "a scratched thing")


def test_comments_and_blank_lines_skipped(tmp_path):
    prefix = write_ensemble(tmp_path / "p", ["# header", "", "bad [o]"], ["good [o]"])
    ens = load_ensemble(prefix)
    assert ens.anomalous == ("bad [o]",) and ens.object_templated


def test_missing_and_empty_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_ensemble(tmp_path / "nothing")
    prefix = write_ensemble(tmp_path / "e", ["# only a comment"], ["fine"])
    with pytest.raises(ValueError, match="empty"):
        load_ensemble(prefix)


def test_mixed_placeholder_usage_rejected():
    with pytest.raises(ValueError, match="placeholder"):
        PromptEnsemble(("bad [o]", "bad thing"), ("good [o]",), True)


def test_render_preserves_count_and_distinguishes_objects():
    w = builtin_ensemble("winclip")
    a, b = render(w, "bottle"), render(w, "cable")
    assert len(a) == len(w)
    assert not set(a.anomalous) & set(b.anomalous)
    with pytest.raises(ValueError):
        render(w, " ")
    with pytest.raises(ValueError):
        render(builtin_ensemble("generated"), "bottle")


def test_combine_union_and_idempotence():
    x = PromptEnsemble(("a", "b"), ("n",), False)
    y = PromptEnsemble(("b", "c"), ("n", "m"), False)
    z = combine(x, y)
    assert z.anomalous == ("a", "b", "c") and z.normal == ("n", "m") and z.source_tag == "combined"
    assert combine(x, x).anomalous == x.anomalous and combine(x, x).normal == x.normal
    with pytest.raises(ValueError):
        combine(x, PromptEnsemble((), ("n",), False))


def test_combined_counts_are_set_union():
    w = render(builtin_ensemble("winclip"), "bottle")
    g = builtin_ensemble("generated")
    c = resolve_ensemble("combined", "bottle")
    assert len(c.anomalous) == len(set(w.anomalous) | set(g.anomalous))
    assert len(c.normal) == len(set(w.normal) | set(g.normal))
    assert len(c.anomalous) <= 88 + 486 and len(c.normal) <= 154 + 423


def test_mean_embedding(toy):
    single = PromptEnsemble(("a damaged part",), ("a clean part",), False)
    emb = embed_ensemble(toy, single)
    np.testing.assert_allclose(emb.h_plus, toy.encode_text("a damaged part"), atol=1e-12)
    pair = PromptEnsemble(("a damaged part", "a cracked part"), ("a clean part",), False)
    u, v = toy.encode_text("a damaged part"), toy.encode_text("a cracked part")
    np.testing.assert_allclose(embed_ensemble(toy, pair).h_plus, (u + v) / 2, atol=1e-7)
    assert embed_ensemble(toy, pair).n_plus == 2


def test_templated_ensemble_must_be_rendered(toy):
    with pytest.raises(ValueError, match="render"):
        embed_ensemble(toy, builtin_ensemble("winclip"))


def test_cache_hit_key_change_and_corruption(toy, tmp_path):
    cache = EmbeddingCache(tmp_path / "text")
    ens = PromptEnsemble(("a damaged part",), ("a clean part",), False)
    first = embed_ensemble(toy, ens, cache)
    second = embed_ensemble(toy, ens, cache)
    assert (cache.misses, cache.hits) == (1, 1)
    np.testing.assert_array_equal(first.h_plus, second.h_plus)

    edited = PromptEnsemble(("a damaged part", "a dented part"), ("a clean part",), False)
    assert ensemble_hash(toy, edited) != ensemble_hash(toy, ens)

    cache.path(ensemble_hash(toy, ens)).write_bytes(b"junk")
    with pytest.warns(UserWarning, match="corrupted"):
        again = embed_ensemble(toy, ens, cache)
    np.testing.assert_array_equal(again.h_plus, first.h_plus)
    assert cache.misses == 2


def test_resolve_custom_prefix(tmp_path):
    prefix = write_ensemble(tmp_path / "mine", ["broken [o]"], ["intact [o]"])
    ens = resolve_ensemble(str(prefix), "screw")
    assert ens.anomalous == ("broken screw",) and ens.normal == ("intact screw",)
