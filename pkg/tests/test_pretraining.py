import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlbert.corpus import WorldConfig, make_text_corpus, make_vl_corpus, toy_vocabulary
from vlbert.embedding import InputFormat, Kind, assemble_input, build_vocab
from vlbert.engine import Adam, default_dtype, ops
from vlbert.model import ModelConfig, VLBert
from vlbert.pretraining import (
    ABLATION_SETTINGS,
    TEXT_ONLY,
    VISUAL_LINGUISTIC,
    TaskFlags,
    conditional_logits,
    log_potential,
    make_text_sample,
    make_vl_sample,
    mask_rois,
    mask_words,
    masked_roi_cls_loss,
    mlm_visual_loss,
    nsp_loss,
    pretrain_losses,
    pretrain_step,
    pseudo_log_likelihood,
    sample_minibatch,
    split_counts,
    text_only_mlm_loss,
)
from vlbert.world import full_image_roi

VOCAB = toy_vocabulary()
WORLD = WorldConfig()
VL = make_vl_corpus(40, WORLD)
TEXT = make_text_corpus(40, seed=0, max_len=16)


def tiny(seed=0, vocab_size=len(VOCAB), **kw):
    cfg = dict(vocab_size=vocab_size, d=16, layers=2, heads=2, d_ff=32, d_app=8, d_g=8, max_positions=64)
    cfg.update(kw)
    return VLBert(ModelConfig(**cfg), seed=seed)


def randomise(model, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in model.named_parameters().values():
        p.data[...] = rng.normal(scale=scale, size=p.shape)
    return model


def text_seq(words, vocab=VOCAB):
    return assemble_input(InputFormat.TEXT_ONLY, [words.split()], [], None, vocab)


# --- batches ------------------------------------------------------------------------


def test_ratio_split():
    assert split_counts(8, (1, 1)) == (4, 4)
    assert split_counts(8, (1, 0)) == (8, 0)
    with pytest.raises(ValueError):
        split_counts(7, (1, 1))
    b = sample_minibatch(VL, TEXT, 8, (1, 1), 0, VOCAB)
    assert b.counts == {VISUAL_LINGUISTIC: 4, TEXT_ONLY: 4}
    assert sample_minibatch(VL, TEXT, 6, (1, 0), 0, VOCAB).counts[TEXT_ONLY] == 0


def test_minibatch_is_seed_deterministic():
    a = sample_minibatch(VL, TEXT, 8, (1, 1), 5, VOCAB, nsp=True)
    b = sample_minibatch(VL, TEXT, 8, (1, 1), 5, VOCAB, nsp=True)
    for x, y in zip(a.samples, b.samples):
        assert x.input.token_ids == y.input.token_ids and x.word_positions == y.word_positions
        assert x.roi_positions == y.roi_positions and x.nsp_label == y.nsp_label


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        sample_minibatch([], TEXT, 4, (1, 1), 0, VOCAB)
    with pytest.raises(ValueError):
        sample_minibatch(VL, [], 4, (1, 1), 0, VOCAB)


def test_text_windows_capped():
    long = make_text_corpus(5, seed=1, max_len=60)
    b = sample_minibatch(VL, long, 4, (0, 1), 0, VOCAB, text_max_len=10)
    assert all(len(s.input.positions_of(Kind.WORD)) <= 10 for s in b.samples)


def test_nsp_negatives_are_caption_swaps():
    b = sample_minibatch(VL, TEXT, 16, (1, 0), 3, VOCAB, nsp=True)
    labels = [s.nsp_label for s in b.samples]
    assert labels.count(0) == 8 and labels.count(1) == 8
    captions = {tuple(e.caption) for e in VL}
    for s in b.samples:
        words = [VOCAB.token(s.roi_input.elements[i].token_id) for i in s.roi_input.positions_of(Kind.WORD)]
        assert tuple(words) in captions


# --- masking ---------------------------------------------------------------------------


def test_mask_words_degenerate_probabilities():
    seq = text_seq("the red square is near the blue circle")
    words = seq.positions_of(Kind.WORD)
    _, pos, tgt = mask_words(seq, 0.0, 1, VOCAB)
    assert pos == [words[0]] and tgt == [VOCAB.id("the")]
    masked, pos, _ = mask_words(seq, 1.0, 1, VOCAB)
    assert pos == words and all(masked.elements[i].token_id == VOCAB.mask_id for i in words)


def test_mask_rate_monte_carlo():
    seq = text_seq(" ".join(["red"] * 200))
    hits = sum(len(mask_words(seq, 0.15, s, VOCAB)[1]) for s in range(500))
    assert abs(hits / 100_000 - 0.15) <= 0.01


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_masking_leaves_other_elements_alone(seed, p):
    seq = text_seq("the red square is near the blue circle and it is small")
    masked, pos, tgt = mask_words(seq, p, seed, VOCAB)
    for i, (a, b) in enumerate(zip(seq.elements, masked.elements)):
        if i in pos:
            assert b.token_id == VOCAB.mask_id and a.token_id == tgt[pos.index(i)]
        else:
            assert a == b


def test_bert_scheme_mixes_replacements():
    seq = text_seq(" ".join(["red"] * 200))
    masked, pos, _ = mask_words(seq, 1.0, 0, VOCAB, scheme="bert")
    ids = np.array([masked.elements[i].token_id for i in pos])
    frac_mask = np.mean(ids == VOCAB.mask_id)
    assert 0.7 < frac_mask < 0.9 and np.any(ids == VOCAB.id("red"))
    with pytest.raises(ValueError):
        mask_words(seq, 0.5, 0, VOCAB, scheme="whole-word")


def test_mask_rois_forced_and_targets():
    ex = VL[0]
    rois = [full_image_roi()] + ex.rois
    flags, targets = mask_rois(rois, 0.0, 0)
    assert sum(flags) == 1 and not flags[0]
    flags, targets = mask_rois(rois, 0.6, 1)
    assert targets == [r.category for r, f in zip(rois, flags) if f]


def test_full_image_roi_never_flagged():
    rois = [full_image_roi()] + VL[1].rois
    rng = np.random.default_rng(0)
    assert not any(mask_rois(rois, 0.9, rng)[0][0] for _ in range(10_000))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_vl_sample_invariants(seed, p):
    s = make_vl_sample(VL[seed % len(VL)], VOCAB, seed, word_p=p, roi_p=p)
    assert s.roi_input.rois[0].full_image and not s.roi_input.rois[0].masked
    for i in s.roi_positions:
        e = s.roi_input.elements[i]
        assert e.kind == Kind.VISUAL and s.roi_input.rois[e.roi].masked
    assert all(s.input.elements[i].kind == Kind.WORD for i in s.word_positions)
    # Task #2 view keeps the caption intact, Task #1 view keeps the image clean
    assert all(s.roi_input.elements[i].token_id == t for i, t in zip(s.word_positions, s.word_targets))
    assert s.input.image is s.image
    s.input.validate(VOCAB)
    s.roi_input.validate(VOCAB)


# --- losses ---------------------------------------------------------------------------------


def test_untrained_losses_are_near_uniform():
    model = tiny(0)
    batch = sample_minibatch(make_vl_corpus(100, WORLD), make_text_corpus(100, 1, 16), 200, (1, 1), 0, VOCAB)
    ln_v = math.log(len(VOCAB))
    assert abs(float(mlm_visual_loss(model, batch.visual).data) - ln_v) < 0.5
    assert abs(float(text_only_mlm_loss(model, batch.text).data) - ln_v) < 0.5
    assert abs(float(masked_roi_cls_loss(model, batch.visual).data) - math.log(12)) < 0.5


def test_single_mask_loss_is_neg_log_softmax():
    with default_dtype("f64"):
        model = randomise(tiny(1), 1)
        s = make_text_sample("the red square".split(), VOCAB, 0, word_p=0.0)
        out, _, _ = model.forward([s.input])
        logits = out.data[0, s.word_positions[0]] @ model.heads["mlm"].weight.data + model.heads["mlm"].bias.data
        want = -(logits[s.word_targets[0]] - np.log(np.exp(logits - logits.max()).sum()) - logits.max())
        assert abs(float(text_only_mlm_loss(model, [s]).data) - want) < 1e-12


def test_text_only_loss_guards_and_reaches_shared_vector():
    model = tiny(2)
    vl = make_vl_sample(VL[0], VOCAB, 0)
    with pytest.raises(ValueError):
        text_only_mlm_loss(model, [vl])
    s = make_text_sample(TEXT[0], VOCAB, 0)
    assert [VOCAB.token(t) for t in s.input.token_ids][-2:] == ["[SEP]", "[END]"]
    text_only_mlm_loss(model, [s]).backward()
    assert np.abs(model.tables.text_visual.grad).sum() > 0


def test_nsp_formula():
    with default_dtype("f64"):
        model = randomise(tiny(3), 3)
        samples = [make_vl_sample(VL[k], VOCAB, k, nsp_label=k % 2) for k in range(6)]
        out, _, _ = model.forward([s.input for s in samples])
        head = model.heads["nsp"]
        z = out.data[:, 0] @ head.weight.data[:, 0] + head.bias.data[0]
        g = 1 / (1 + np.exp(-z))
        t = np.array([s.nsp_label for s in samples])
        want = np.mean(-(t * np.log(g) + (1 - t) * np.log(1 - g)))
        assert abs(float(nsp_loss(model, samples).data) - want) < 1e-12
        head.weight.data[...] = 0.0
        head.bias.data[...] = 0.0
        assert abs(float(nsp_loss(model, samples).data) - math.log(2)) < 1e-12
        head.bias.data[...] = 40.0
        assert float(nsp_loss(model, [s for s in samples if s.nsp_label == 1]).data) < 1e-12
    with pytest.raises(ValueError):
        nsp_loss(model, [make_vl_sample(VL[0], VOCAB, 0)])


# --- pseudo-likelihood -------------------------------------------------------------------------------


def test_log_potential_definition():
    with default_dtype("f64"):
        model = randomise(tiny(4), 4)
        seq = text_seq("the red square is near")
        i = seq.positions_of(Kind.WORD)[2]
        from vlbert.embedding import replace_tokens

        out, _, _ = model.forward([replace_tokens(seq, {i: VOCAB.mask_id})])
        logits = out.data[0, i] @ model.heads["mlm"].weight.data + model.heads["mlm"].bias.data
        onehot = np.eye(len(VOCAB))[seq.elements[i].token_id]
        assert abs(log_potential(model, seq, i, VOCAB.mask_id) - onehot @ logits) < 1e-12
        with pytest.raises(ValueError):
            log_potential(model, seq, 0, VOCAB.mask_id)
        model.heads["mlm"].weight.data[...] = 0.0
        model.heads["mlm"].bias.data[...] = 0.0
        assert log_potential(model, seq, i, VOCAB.mask_id) == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_pseudo_likelihood_terms_equal_cross_entropy(seed):
    with default_dtype("f64"):
        model = randomise(tiny(seed), seed)
        seq = text_seq("the blue circle is left of the red square")
        total, terms = pseudo_log_likelihood(model, seq, VOCAB.mask_id, return_terms=True)
        positions = seq.positions_of(Kind.WORD)
        logits = conditional_logits(model, seq, positions, VOCAB.mask_id)
        for k, i in enumerate(positions):
            ce = float(ops.cross_entropy(ops.index(logits, np.array([k])), [seq.elements[i].token_id]).data)
            assert abs(ce + terms[k]) <= 1e-9
        assert abs(total - terms.sum()) < 1e-12


def test_single_word_pseudo_likelihood_is_neg_mlm_loss():
    with default_dtype("f64"):
        model = randomise(tiny(5), 5)
        s = make_text_sample(["red"], VOCAB, 0, word_p=1.0)
        pll = pseudo_log_likelihood(model, text_seq("red"), VOCAB.mask_id)
        assert abs(pll + float(text_only_mlm_loss(model, [s]).data)) < 1e-12


def test_tiny_vocab_conditionals_normalise():
    vocab = build_vocab("x y z")
    with default_dtype("f64"):
        model = randomise(tiny(6, vocab_size=len(vocab)), 6)
        seq = text_seq("x y", vocab)
        logits = conditional_logits(model, seq, seq.positions_of(Kind.WORD), vocab.mask_id)
        probs = np.exp(ops.log_softmax(logits, axis=-1).data)
        assert np.allclose(probs.sum(-1), 1.0, atol=1e-12)


# --- steps and flags ----------------------------------------------------------------------------------------


def test_ablation_rows_map_to_flags():
    rows = {k: (f.mlm, f.roi, f.nsp, f.text, f.tune_detector) if f else None for k, f in ABLATION_SETTINGS.items()}
    assert rows == {
        "w/o pre-training": None,
        "(a)": (True, False, False, False, False),
        "(b)": (True, True, False, False, False),
        "(c)": (True, True, True, False, False),
        "(d)": (True, True, False, True, False),
        "full": (True, True, False, True, True),
    }


def test_no_task_enabled_rejected():
    with pytest.raises(ValueError):
        pretrain_losses(tiny(), sample_minibatch(VL, TEXT, 4, (1, 1), 0, VOCAB),
                        TaskFlags(mlm=False, roi=False, nsp=False, text=False))


def grads(model):
    return {n: (None if p.grad is None else p.grad.copy()) for n, p in model.named_parameters().items()}


def test_row_a_leaves_other_heads_without_gradient():
    model = tiny(7)
    batch = sample_minibatch(VL, TEXT, 8, (1, 1), 1, VOCAB, nsp=True)
    metrics = pretrain_step(model, batch, Adam(model.parameters()), ABLATION_SETTINGS["(a)"], lr=0.0)
    g = grads(model)
    for name in ("head.roi_cls.weight", "head.roi_cls.bias", "head.nsp.weight", "head.nsp.bias"):
        assert g[name] is None or not g[name].any()
    assert metrics["roi"] == metrics["nsp"] == metrics["text"] == 0.0 and metrics["mlm"] > 0


def test_disabled_task_contributes_exactly_zero():
    with default_dtype("f64"):
        model = randomise(tiny(8), 8, scale=0.1)
        batch = sample_minibatch(VL, TEXT, 8, (1, 1), 2, VOCAB, nsp=True)
        opt = Adam(model.parameters())
        pretrain_step(model, batch, opt, TaskFlags(mlm=True, roi=False, nsp=False, text=False), lr=0.0)
        only_mlm = grads(model)
        model.zero_grad()
        mlm_visual_loss(model, batch.visual).backward()
        direct = grads(model)
    for n in only_mlm:
        a, b = only_mlm[n], direct[n]
        if a is None or b is None:
            assert (a is None or not a.any()) and (b is None or not b.any())
        else:
            assert np.allclose(a, b, atol=1e-12)


def test_zero_lr_step_leaves_parameters():
    model = tiny(9)
    before = {n: p.data.copy() for n, p in model.named_parameters().items()}
    pretrain_step(model, sample_minibatch(VL, TEXT, 4, (1, 1), 0, VOCAB), Adam(model.parameters()), TaskFlags(), lr=0.0)
    assert all(np.array_equal(p.data, before[n]) for n, p in model.named_parameters().items())


def test_identical_seed_identical_losses():
    runs = []
    for _ in range(2):
        model = tiny(10)
        opt = Adam(model.parameters(), lr=1e-3)
        runs.append([pretrain_step(model, sample_minibatch(VL, TEXT, 4, (1, 1), [0, s], VOCAB, nsp=True), opt,
                                   TaskFlags(nsp=True)) for s in range(3)])
    assert runs[0] == runs[1]


def test_loss_decreases_over_200_steps():
    corpus, text = make_vl_corpus(200, WORLD), make_text_corpus(200, 0, 16)
    drops = []
    for seed in range(5):
        model = tiny(seed)
        opt = Adam(model.parameters(), lr=2e-3)
        totals = [pretrain_step(model, sample_minibatch(corpus, text, 8, (1, 1), [seed, s], VOCAB), opt,
                                TaskFlags())["total"] for s in range(200)]
        drops.append(np.mean(totals[:20]) - np.mean(totals[-20:]))
    assert np.median(drops) > 0
