import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlbert.corpus import WorldConfig, make_vl_example, toy_vocabulary
from vlbert.embedding import InputFormat, Kind, assemble_input, permute_visual, sum_embeddings
from vlbert.engine import default_dtype, ops
from vlbert.model import ModelConfig, VLBert, copy_parameters
from vlbert.world import full_image_roi, render_scene

VOCAB = toy_vocabulary()


def tiny(seed=0, **kw):
    cfg = dict(vocab_size=len(VOCAB), d=16, layers=2, heads=2, d_ff=32, d_app=8, d_g=8, max_positions=64)
    cfg.update(kw)
    return VLBert(ModelConfig(**cfg), seed=seed)


def caption_seq(scene_id):
    ex = make_vl_example(scene_id, WorldConfig())
    return assemble_input(InputFormat.CAPTION_IMAGE, [ex.caption], [full_image_roi()] + ex.rois,
                          render_scene(ex.scene), VOCAB)


def text_seq(words="the red square is near the blue circle"):
    return assemble_input(InputFormat.TEXT_ONLY, [words.split()], [], None, VOCAB)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d=10, heads=4).validate()
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_g=12).validate()
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, dropout=1.0).validate()


def test_parameter_names_are_stable_and_seeded():
    a, b = tiny(3), tiny(3)
    assert list(a.named_parameters()) == list(b.named_parameters())
    assert all(np.array_equal(p.data, b.named_parameters()[n].data) for n, p in a.named_parameters().items())
    assert {"head.mlm.weight", "head.roi_cls.weight", "head.nsp.weight", "detector.weight"} <= set(a.named_parameters())


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_visual_permutation_invariance_f32(seed):
    model = tiny(seed % 7)
    seq = caption_seq(seed)
    vis = seq.positions_of(Kind.VISUAL)
    perm = np.random.default_rng(seed).permutation(len(vis))
    a, _, _ = model.forward([seq])
    b, _, _ = model.forward([permute_visual(seq, perm)])
    a, b = a.data[0], b.data[0]
    lang = [i for i in range(len(seq)) if i not in vis]
    assert np.allclose(a[lang], b[lang], atol=1e-5, rtol=0)
    assert np.allclose(a[vis][perm], b[vis], atol=1e-5, rtol=0)


def test_padding_does_not_change_outputs():
    model = tiny(1)
    seqs = [caption_seq(1), text_seq(), caption_seq(2)]
    together, batch, _ = model.forward(seqs)
    for k, s in enumerate(seqs):
        alone, _, _ = model.forward([s])
        assert np.allclose(together.data[k, : len(s)], alone.data[0], atol=1e-5)
    assert batch.valid.sum() == sum(len(s) for s in seqs)


def test_batched_embedding_matches_per_sequence_sum():
    with default_dtype("f64"):
        model = tiny(2, embedding_layer_norm=False)
        seqs = [caption_seq(5), text_seq()]
        x = model.embed(model.featurize(seqs)).data
        for k, s in enumerate(seqs):
            want = sum_embeddings(s, model.tables, model.detector).data
            assert np.allclose(x[k, : len(s)], want, atol=1e-12)


def test_embedding_layer_norm_is_optional():
    assert "embed.ln_gain" in tiny().named_parameters()
    assert "embed.ln_gain" not in tiny(embedding_layer_norm=False).named_parameters()


def test_frozen_detector_gets_no_gradient():
    model = tiny(4)
    model.set_detector_tuning(False)
    out, _, _ = model.forward([caption_seq(4)])
    ops.sum(out * out).backward()
    assert model.detector.weight.grad is None and model.detector.bias.grad is None
    assert model.tables.visual_weight.grad is not None
    assert model.detector.weight not in model.parameters()


def test_position_overflow_rejected():
    model = tiny(max_positions=4)
    with pytest.raises(ValueError):
        model.forward([caption_seq(0)])


def test_add_head_and_copy_parameters():
    a, b = tiny(0), tiny(1)
    a.add_head("extra", 5, seed=9)
    assert a.heads["extra"].weight.shape == (16, 5)
    copy_parameters(a, b)
    assert all(np.array_equal(p.data, a.named_parameters()[n].data) for n, p in b.named_parameters().items())
