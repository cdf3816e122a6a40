import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlbert.corpus import WorldConfig, make_text_corpus, make_vl_corpus, toy_vocabulary
from vlbert.embedding import (
    CLS,
    END,
    IMG,
    MASK,
    SEP,
    SPECIALS,
    EmbeddingTables,
    InputFormat,
    Kind,
    Segment,
    assemble_input,
    build_vocab,
    geometry_embedding,
    permute_visual,
    sum_embeddings,
    visual_feature_embedding,
)
from vlbert.engine import Tensor, ops
from vlbert.world import DetectorParams, RoI, pool_rois


VOCAB = build_vocab("a b the red square is it")


def rois(n):
    return [RoI((0.1 * k, 0.1 * k, 0.1 * k + 0.2, 0.1 * k + 0.3)) for k in range(n)]


def image(seed=0):
    return np.random.default_rng(seed).random((32, 32, 3))


def tokens(seq, vocab=VOCAB):
    return [vocab.token(t) for t in seq.token_ids]


# --- vocabulary ----------------------------------------------------------------------


def test_vocab_specials_then_first_appearance():
    v = build_vocab("a b a")
    assert v.tokens == list(SPECIALS) + ["a", "b"]
    assert build_vocab("a b a").tokens == v.tokens
    with pytest.raises(ValueError):
        build_vocab("")


def test_vocab_save_load(tmp_path):
    VOCAB.save(tmp_path / "v.txt")
    assert VOCAB.tokens == type(VOCAB).load(tmp_path / "v.txt").tokens


def test_templates_are_closed_over_vocabulary():
    vocab = toy_vocabulary()
    for ex in make_vl_corpus(300, WorldConfig()):
        assert all(w in vocab for w in ex.caption)
    for sentence in make_text_corpus(300, seed=1):
        assert all(w in vocab for w in sentence)


# --- geometry --------------------------------------------------------------------------


def test_zero_box_sin_zero_cos_one():
    g = geometry_embedding((0, 0, 0, 0), 32)
    assert np.all(g[0::2] == 0.0) and np.all(g[1::2] == 1.0)


def test_full_box_matches_formula():
    d_g = 16
    want = []
    for c in (0.0, 0.0, 1.0, 1.0):
        for k in range(d_g // 8):
            w = 10000.0 ** (8 * k / d_g)
            want += [math.sin(c / w), math.cos(c / w)]
    assert np.allclose(geometry_embedding((0, 0, 1, 1), d_g), want, atol=1e-15, rtol=0)


def test_distinct_boxes_distinct_embeddings():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = np.sort(rng.random((2, 2, 2)), axis=1).reshape(2, 4)[:, [0, 2, 1, 3]]
        if not np.allclose(a, b):
            assert np.linalg.norm(geometry_embedding(a, 32) - geometry_embedding(b, 32)) > 1e-6


def test_geometry_guards():
    with pytest.raises(ValueError):
        geometry_embedding((0, 0, 1, 1.5), 32)
    with pytest.raises(ValueError):
        geometry_embedding((0, 0, 1, 1), 12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_geometry_bounded_and_deterministic(box):
    g = geometry_embedding(box, 32)
    assert np.all(np.abs(g) <= 1.0) and np.array_equal(g, geometry_embedding(box, 32))


# --- visual feature embedding ----------------------------------------------------------------


def tables(seed=0, d=8, d_app=6, d_g=8, vocab=len(VOCAB)):
    return EmbeddingTables.init(vocab, d, d_app, d_g, 32, np.random.default_rng(seed), dtype=np.float64)


def test_zero_appearance_zero_box_is_bias_plus_geometry():
    t = tables()
    t.visual_bias.data[...] = np.arange(8)
    out = visual_feature_embedding(Tensor(np.zeros(6), dtype=np.float64), (0, 0, 0, 0), t)
    want = t.visual_bias.data + geometry_embedding((0, 0, 0, 0), 8) @ t.visual_weight.data[6:]
    assert np.allclose(out.data, want)


def test_visual_embedding_matches_concat_affine():
    t = tables(1)
    t.visual_bias.data[...] = np.random.default_rng(1).normal(size=8)
    app = np.random.default_rng(2).normal(size=6)
    box = (0.1, 0.2, 0.5, 0.9)
    x = np.concatenate([app, geometry_embedding(box, 8)])
    want = [math.fsum(x[i] * t.visual_weight.data[i, o] for i in range(14)) + t.visual_bias.data[o] for o in range(8)]
    assert np.allclose(visual_feature_embedding(Tensor(app, dtype=np.float64), box, t).data, want, atol=1e-12)
    with pytest.raises(ValueError):
        visual_feature_embedding(Tensor(np.zeros(5)), box, t)


# --- layout ------------------------------------------------------------------------------------------


def test_caption_image_layout():
    seq = assemble_input("caption-image", [["a", "b"]], rois(2), image(), VOCAB)
    assert tokens(seq) == [CLS, "a", "b", SEP, IMG, IMG, END]
    assert [e.segment.name for e in seq.elements] == list("AAAACCC")
    assert [e.position for e in seq.elements] == [0, 1, 2, 3, 4, 4, 5]
    seq.validate(VOCAB)


def test_text_only_layout():
    seq = assemble_input(InputFormat.TEXT_ONLY, [["a"]], rois(2), image(), VOCAB)
    assert tokens(seq) == [CLS, "a", SEP, END] and not seq.positions_of(Kind.VISUAL)
    assert seq.text_only and seq.image is None


def test_empty_answer_becomes_single_mask():
    seq = assemble_input("question-answer-image", [["is", "it", "red"], []], rois(1), image(), VOCAB)
    b = [tokens(seq)[i] for i, e in enumerate(seq.elements) if e.segment == Segment.B and e.kind == Kind.WORD]
    assert b == [MASK]


def test_query_layout_has_no_b_segment():
    seq = assemble_input("query-image", [["the", "red", "square"]], rois(3), image(), VOCAB)
    assert tokens(seq) == [CLS, "the", "red", "square", SEP, IMG, IMG, IMG, END]
    assert Segment.B not in {e.segment for e in seq.elements}


def test_unknown_format_and_bad_arity_rejected():
    with pytest.raises(ValueError):
        assemble_input("image-only", [["a"]], rois(1), image(), VOCAB)
    with pytest.raises(ValueError):
        assemble_input("caption-image", [["a"], ["b"]], rois(1), image(), VOCAB)
    with pytest.raises(KeyError):
        assemble_input("caption-image", [["zebra"]], rois(1), image(), VOCAB)


layouts = st.tuples(
    st.sampled_from(list(InputFormat)),
    st.lists(st.sampled_from(VOCAB.tokens[5:]), max_size=6),
    st.lists(st.sampled_from(VOCAB.tokens[5:]), max_size=6),
    st.integers(1, 6),
)


@settings(max_examples=80, deadline=None)
@given(layouts)
def test_layout_invariants_hold(case):
    fmt, s1, s2, n = case
    sentences = [s1, s2] if fmt == InputFormat.QUESTION_ANSWER_IMAGE else [s1]
    seq = assemble_input(fmt, sentences, rois(n), image(), VOCAB)
    seq.validate(VOCAB)
    visual = [e for e in seq.elements if e.kind == Kind.VISUAL]
    assert all(e.segment == Segment.C for e in visual)
    if fmt == InputFormat.CAPTION_IMAGE:
        assert {e.segment for e in seq.elements} <= {Segment.A, Segment.C}
    assert len(visual) == (0 if fmt == InputFormat.TEXT_ONLY else n)


def test_validate_catches_broken_layouts():
    from dataclasses import replace

    seq = assemble_input("caption-image", [["a"]], rois(2), image(), VOCAB)
    bad = list(seq.elements)
    bad[3] = replace(bad[3], position=7)
    with pytest.raises(ValueError):
        type(seq)(bad, seq.rois, seq.image).validate()
    bad = list(seq.elements)
    bad[1] = replace(bad[1], segment=Segment.C)
    with pytest.raises(ValueError):
        type(seq)(bad, seq.rois, seq.image).validate()
    with pytest.raises(ValueError):
        type(seq)(seq.elements, seq.rois[:1], seq.image).validate()


# --- summed embeddings -------------------------------------------------------------------------------------


def setup_sum(seed=3):
    rng = np.random.default_rng(seed)
    t = tables(seed)
    det = DetectorParams.init(6, rng, dtype=np.float64)
    for p in list(t.named_parameters().values()) + [det.weight, det.bias]:
        p.data[...] = rng.normal(size=p.shape)
    return t, det


def test_zero_tables_leave_visual_term():
    t, det = setup_sum()
    for p in (t.token, t.segment, t.position):
        p.data[...] = 0.0
    seq = assemble_input("caption-image", [["a", "b"]], rois(2), image(), VOCAB)
    out = sum_embeddings(seq, t, det)
    for i, e in enumerate(seq.elements):
        box = seq.rois[e.roi].box if e.roi is not None else (0, 0, 1, 1)
        app = pool_rois(seq.image, [box])[0] @ det.weight.data + det.bias.data
        assert np.allclose(out.data[i], visual_feature_embedding(Tensor(app, dtype=np.float64), box, t).data)


def test_identical_rois_identical_embeddings():
    t, det = setup_sum()
    box = RoI((0.2, 0.2, 0.6, 0.7))
    seq = assemble_input("caption-image", [["a"]], [box, box], image(), VOCAB)
    out = sum_embeddings(seq, t, det).data
    assert np.array_equal(out[3], out[4])


def test_sum_matches_four_term_oracle():
    t, det = setup_sum(4)
    seq = assemble_input("question-answer-image", [["is", "it"], ["red"]], rois(3), image(4), VOCAB)
    out = sum_embeddings(seq, t, det).data
    for i, e in enumerate(seq.elements):
        box = seq.rois[e.roi].box if e.roi is not None else (0, 0, 1, 1)
        app = pool_rois(seq.image, [box])[0] @ det.weight.data + det.bias.data
        vis = np.concatenate([app, geometry_embedding(box, 8)]) @ t.visual_weight.data + t.visual_bias.data
        want = t.token.data[e.token_id] + vis + t.segment.data[int(e.segment)] + t.position.data[e.position]
        assert np.allclose(out[i], want, atol=1e-12)


def test_text_only_uses_shared_visual_vector_and_gets_grad():
    t, det = setup_sum(5)
    seq = assemble_input("text-only", [["a", "b", "a"]], [], None, VOCAB)
    out = sum_embeddings(seq, t, det)
    for i, e in enumerate(seq.elements):
        want = t.token.data[e.token_id] + t.text_visual.data + t.segment.data[int(e.segment)] + t.position.data[e.position]
        assert np.allclose(out.data[i], want)
    ops.sum(out * out).backward()
    assert np.abs(t.text_visual.grad).sum() > 0


def test_missing_image_rejected():
    t, det = setup_sum()
    seq = assemble_input("caption-image", [["a"]], rois(1), None, VOCAB)
    with pytest.raises(ValueError):
        sum_embeddings(seq, t, det)


def test_permute_visual_keeps_roi_refs():
    seq = assemble_input("caption-image", [["a"]], rois(3), image(), VOCAB)
    p = permute_visual(seq, [2, 0, 1])
    assert [e.roi for e in p.elements if e.kind == Kind.VISUAL] == [2, 0, 1]
    p.validate(VOCAB)
    with pytest.raises(ValueError):
        permute_visual(seq, [0, 0, 1])
