import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from synernet.encoders import (
    Embedding,
    FrozenTextEncoder,
    FrozenVisualEncoder,
    Modality,
    PrecomputedVisualFeatures,
    PromptTemplate,
    backbone_hash,
    render_prompt,
    tokenize,
)

from conftest import fd_grad


def test_tokenize_lowercases_and_strips_punctuation():
    assert tokenize("A Photo, of the Dog!") == ["a", "photo", "of", "the", "dog"]


def test_template_placeholder_rules():
    assert render_prompt("a photo of {}", "zorvex") == "a photo of zorvex"
    assert render_prompt(PromptTemplate("{}"), "x y") == "x y"
    with pytest.raises(ValueError):
        PromptTemplate("no slot")
    with pytest.raises(ValueError):
        PromptTemplate("{} and {}")


def test_embedding_checks_and_json():
    e = Embedding(np.array([0.6, 0.8]), Modality.TEXT, normalized=True)
    assert Embedding.from_json(e.to_json()) == e
    with pytest.raises(ValueError):
        Embedding(np.array([1.0, 1.0]), Modality.TEXT, normalized=True)
    with pytest.raises(ValueError):
        Embedding(np.zeros((2, 2)), Modality.VISUAL)


def test_visual_encoder_is_read_only(bench):
    with pytest.raises(ValueError):
        bench.visual.weight[0, 0] = 1.0
    z = bench.samples[0]
    np.testing.assert_array_equal(bench.visual.encode_image(z).values, bench.visual.encode_batch(z[None])[0])
    with pytest.raises(ValueError):
        bench.visual.encode_batch(np.zeros((2, 3)))


def test_text_encoder_outputs_unit_vectors(bench):
    seqs = [bench.vocab.embed(tokenize(render_prompt("a photo of {}", c.name))) for c in bench.classes]
    out, _ = bench.text.forward(seqs)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(out[0], bench.text.encode_text(seqs[0]).values, atol=1e-14)


def test_text_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    enc = FrozenTextEncoder(rng.standard_normal((5, 4)))
    seqs = [rng.standard_normal((3, 4)), rng.standard_normal((2, 4))]
    w = rng.standard_normal((2, 5))
    out, cache = enc.forward(seqs)
    per_token = enc.backward(cache, w)
    for p, seq in enumerate(seqs):
        num = fd_grad(lambda: float(np.sum(w * enc.forward(seqs)[0])), seq)
        for row in num:
            np.testing.assert_allclose(row, per_token[p], atol=1e-8)


def test_text_jacobian_matches_finite_differences():
    rng = np.random.default_rng(1)
    enc = FrozenTextEncoder(rng.standard_normal((4, 4)))
    tv = rng.standard_normal((3, 4))
    jac = enc.jacobian(tv, 1)
    for i in range(4):
        num = fd_grad(lambda: enc.encode_text(tv).values[i], tv)[1]
        np.testing.assert_allclose(jac[i], num, atol=1e-8)


def test_encode_text_rejects_empty():
    enc = FrozenTextEncoder(np.eye(3))
    with pytest.raises(ValueError):
        enc.encode_text(np.zeros((0, 3)))


def test_precomputed_features_round_trip(tmp_path, bench):
    ids = [5, 2, 9]
    feats = np.asarray(bench.visual.encode_batch(bench.samples[ids]), dtype=np.float32).astype(np.float64)
    PrecomputedVisualFeatures.save(tmp_path / "feat", feats, ids)
    loaded = PrecomputedVisualFeatures.load(tmp_path / "feat")
    np.testing.assert_array_equal(loaded.encode_samples([9, 5]), feats[[2, 0]])


def test_backbone_hash_detects_change(bench):
    h = backbone_hash(bench.visual, bench.text, bench.vocab)
    w = bench.visual.weight.copy()
    w[0, 0] += 1e-9
    assert backbone_hash(FrozenVisualEncoder(w), bench.text, bench.vocab) != h


@settings(max_examples=40, deadline=None)
@given(st.text(alphabet="abc ,.!", min_size=0, max_size=20))
def test_tokens_have_no_punctuation(s):
    assert all(t.isalnum() for t in tokenize(s))
