import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlbert.corpus import ANSWER_POOL, WorldConfig, toy_vocabulary
from vlbert.downstream import (
    TASKS,
    TaskInstance,
    ToyTaskConfig,
    argmax_lowest,
    ensure_head,
    evaluate,
    finetune,
    FinetuneConfig,
    instance_from_json,
    instance_to_json,
    load_instances,
    make_ref_instance,
    make_toy_tasks,
    make_vcr_instance,
    make_vqa_instance,
    pack_ref,
    pack_instance,
    pack_vcr,
    pack_vqa,
    predict,
    ref_forward_loss,
    ref_inference,
    ref_scores,
    save_instances,
    vcr_forward_loss,
    vcr_logits,
    vqa_forward_loss,
    vqa_logits,
    write_report,
)
from vlbert.embedding import IMG, MASK, Kind, Segment
from vlbert.engine import default_dtype
from vlbert.model import ModelConfig, VLBert
from vlbert.world import RoI, relation_words

VOCAB = toy_vocabulary()
WORLD = WorldConfig()
CFG = ToyTaskConfig()
IMAGE = np.random.default_rng(0).random((32, 32, 3))
ROIS = [RoI((0.1, 0.1, 0.4, 0.4), category=0), RoI((0.5, 0.2, 0.9, 0.6), category=5),
        RoI((0.2, 0.6, 0.5, 0.95), category=9)]


def tiny(seed=0, **kw):
    cfg = dict(vocab_size=len(VOCAB), d=16, layers=2, heads=2, d_ff=32, d_app=8, d_g=8, max_positions=64)
    cfg.update(kw)
    model = VLBert(ModelConfig(**cfg), seed=seed)
    for task in ("vcr_qa", "vqa", "ref"):
        ensure_head(model, task, seed=seed)
    return model


def randomise(model, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in model.named_parameters().values():
        p.data[...] = rng.normal(scale=scale, size=p.shape)
    return model


def words(seq, segment):
    return [VOCAB.token(e.token_id) for e in seq.elements if e.kind == Kind.WORD and e.segment == segment]


# --- packers ---------------------------------------------------------------------------------


def test_vcr_q_to_a_layout():
    seqs = pack_vcr("is it red".split(), [["red"], ["blue"], ["green"], ["yellow"]], ROIS, IMAGE, "Q->A", VOCAB)
    assert len(seqs) == 4
    assert words(seqs[0], Segment.A) == ["is", "it", "red"] and words(seqs[0], Segment.B) == ["red"]
    blocks = [[(e.roi, e.position) for e in s.elements if e.kind == Kind.VISUAL] for s in seqs]
    assert all(b == blocks[0] for b in blocks)
    for s in seqs:
        s.validate(VOCAB)


def test_vcr_qa_to_r_prefixes_answer():
    rationale = [["because", "the", c, "square"] for c in ("red", "blue", "green", "yellow")]
    seqs = pack_vcr(["what", "color"], rationale, ROIS, IMAGE, "QA->R", VOCAB, answer=["red"])
    assert words(seqs[2], Segment.A) == ["what", "color", "red"] and words(seqs[2], Segment.B) == rationale[2]
    with pytest.raises(ValueError):
        pack_vcr(["what"], rationale, ROIS, IMAGE, "QA->R", VOCAB)
    with pytest.raises(ValueError):
        pack_vcr(["what"], rationale[:3], ROIS, IMAGE, "Q->A", VOCAB)


def test_vqa_answer_is_one_mask():
    seq = pack_vqa(["how", "many", "squares"], ROIS, IMAGE, VOCAB)
    assert words(seq, Segment.B) == [MASK]
    assert {e.segment for e in seq.elements if e.kind == Kind.VISUAL} == {Segment.C}
    seq.validate(VOCAB)
    with pytest.raises(ValueError):
        pack_vqa([], ROIS, IMAGE, VOCAB)


def test_ref_layout():
    seq = pack_ref(["the", "red", "square"], ROIS, IMAGE, VOCAB)
    assert [VOCAB.token(t) for t in seq.token_ids] == ["[CLS]", "the", "red", "square", "[SEP]", IMG, IMG, IMG, "[END]"]
    assert Segment.B not in {e.segment for e in seq.elements}


def test_task_instance_guards():
    with pytest.raises(ValueError):
        TaskInstance("vcr_qa", 0, None, ["q"], 0, ROIS, [["a"], ["b"]])
    with pytest.raises(ValueError):
        TaskInstance("ref", 0, None, ["q"], 3, ROIS)
    with pytest.raises(ValueError):
        TaskInstance("caption", 0, None, ["q"], 0, ROIS)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from(TASKS))
def test_generated_instances_pack_validly(scene_id, task):
    makers = {"ref": make_ref_instance, "vqa": make_vqa_instance}
    make = makers.get(task, lambda i, w, c: make_vcr_instance(i, w, c, task))
    packed = pack_instance(make(scene_id, WORLD, CFG), VOCAB)
    for s in packed if isinstance(packed, list) else [packed]:
        s.validate(VOCAB)


# --- VCR -----------------------------------------------------------------------------------------------


def vcr_instance(seed=0, task="vcr_qa"):
    return make_vcr_instance(seed, WORLD, CFG, task)


def test_identical_candidates_give_ln4():
    model = randomise(tiny(1), 1)
    inst = replace(vcr_instance(), candidates=[["red"]] * 4)
    assert abs(float(vcr_forward_loss(model, [inst], VOCAB, aux_weight=0).data) - math.log(4)) < 1e-6


def test_untrained_vcr_near_ln4():
    model = tiny(2)
    insts = [vcr_instance(k) for k in range(100)]
    assert abs(float(vcr_forward_loss(model, insts, VOCAB, aux_weight=0).data) - math.log(4)) < 0.05


def test_vcr_candidate_order_equivariance():
    with default_dtype("f64"):
        model = randomise(tiny(3), 3)
        inst = vcr_instance(3)
        perm = [2, 0, 3, 1]
        permuted = replace(inst, candidates=[inst.candidates[k] for k in perm], target=perm.index(inst.target))
        a = vcr_logits(model, [inst], VOCAB).data[0]
        b = vcr_logits(model, [permuted], VOCAB).data[0]
    assert np.allclose(a[perm], b, atol=1e-12)


def test_vcr_aux_loss_weight():
    model = randomise(tiny(4), 4, scale=0.1)
    insts = [vcr_instance(k) for k in range(3)]
    base = float(vcr_forward_loss(model, insts, VOCAB, aux_weight=0).data)
    one = float(vcr_forward_loss(model, insts, VOCAB, aux_weight=1.0, rng=np.random.default_rng(0)).data)
    two = float(vcr_forward_loss(model, insts, VOCAB, aux_weight=2.0, rng=np.random.default_rng(0)).data)
    assert one > base and abs((two - base) - 2 * (one - base)) < 1e-4


def test_vcr_instances_are_consistent():
    for k in range(200):
        for task in ("vcr_qa", "vcr_qar"):
            inst = vcr_instance(k, task)
            anchor = [o for o in inst.scene.objects if o.shape == inst.text[-1]]
            assert len(anchor) == 1
            left = [o for o in inst.scene.objects if relation_words(o, anchor[0]) == ["left", "of"]]
            assert len(left) == 1
            correct = inst.candidates[inst.target]
            assert (correct == [left[0].color]) if task == "vcr_qa" else (left[0].color in correct)
            assert sorted(c[0] if task == "vcr_qa" else c[2] for c in inst.candidates) == sorted(
                ["red", "green", "blue", "yellow"])


# --- VQA -------------------------------------------------------------------------------------------------


def test_untrained_vqa_near_uniform():
    model = tiny(5)
    insts = [make_vqa_instance(k, WORLD, CFG) for k in range(100)]
    assert abs(float(vqa_forward_loss(model, insts, VOCAB).data) - math.log(len(ANSWER_POOL))) < 0.5


def test_single_answer_pool_has_zero_loss():
    model = tiny(6)
    ensure_head(model, "vqa", pool_size=1)
    inst = replace(make_vqa_instance(0, WORLD, CFG), target=0)
    assert float(vqa_forward_loss(model, [inst], VOCAB, pool_size=1).data) == 0.0
    with pytest.raises(ValueError):
        vqa_forward_loss(model, [replace(inst, target=3)], VOCAB, pool_size=1)


def test_vqa_answers_are_correct():
    for k in range(300):
        inst = make_vqa_instance(k, WORLD, CFG)
        objs = inst.scene.objects
        answer = ANSWER_POOL[inst.target]
        if inst.text[:2] == ["what", "color"]:
            assert [o.color for o in objs if o.shape == inst.text[-1]] == [answer]
        elif inst.text[:2] == ["what", "shape"]:
            assert [o.shape for o in objs if o.color == inst.text[-2]] == [answer]
        else:
            n = sum(o.shape + "s" == inst.text[-1] for o in objs)
            assert answer == ("zero", "one", "two", "three", "four")[n]


def test_vqa_shuffled_rois_same_prediction():
    with default_dtype("f64"):
        model = randomise(tiny(7), 7)
        inst = make_vqa_instance(7, WORLD, CFG)
        perm = np.random.default_rng(7).permutation(len(inst.rois))
        shuffled = replace(inst, rois=[inst.rois[k] for k in perm])
        a = vqa_logits(model, [inst], VOCAB).data
        b = vqa_logits(model, [shuffled], VOCAB).data
    assert np.allclose(a, b, atol=1e-5)


# --- REF --------------------------------------------------------------------------------------------------


def test_ref_queries_are_uniquely_satisfiable():
    for k in range(500):
        inst = make_ref_instance(k, WORLD, CFG)
        _, color, shape = inst.text
        hits = [j for j, o in enumerate(inst.scene.objects) if (o.color, o.shape) == (color, shape)]
        assert hits == [inst.target]
        assert inst.rois[inst.target].category == inst.scene.objects[inst.target].category


def test_ref_loss_matches_direct_formula():
    with default_dtype("f64"):
        model = randomise(tiny(8), 8)
        insts = [make_ref_instance(k, WORLD, CFG) for k in range(4)]
        per = []
        for inst, s in zip(insts, ref_scores(model, insts, VOCAB)):
            z = s.data
            t = np.eye(len(z))[inst.target]
            per.append(np.mean(np.logaddexp(0, z) - t * z))
        assert abs(float(ref_forward_loss(model, insts, VOCAB).data) - np.mean(per)) < 1e-12


def test_ref_single_roi_is_pure_positive():
    with default_dtype("f64"):
        model = randomise(tiny(9), 9)
        inst = make_ref_instance(9, WORLD, CFG)
        one = replace(inst, rois=[inst.rois[inst.target]], target=0)
        z = ref_scores(model, [one], VOCAB)[0].data[0]
        assert abs(float(ref_forward_loss(model, [one], VOCAB).data) - np.logaddexp(0, -z)) < 1e-12
        assert ref_inference(model, [one], VOCAB) == [0]


def test_untrained_ref_near_ln2():
    model = tiny(10)
    insts = [make_ref_instance(k, WORLD, CFG) for k in range(50)]
    assert abs(float(ref_forward_loss(model, insts, VOCAB).data) - math.log(2)) < 0.05


@settings(max_examples=50, deadline=None)
# quarter steps keep exp and the affine map strictly increasing in floating point
@given(st.lists(st.integers(-20, 20).map(lambda k: k / 4), min_size=1, max_size=8))
def test_argmax_monotone_invariant(scores):
    s = np.array(scores)
    assert argmax_lowest(s) == argmax_lowest(np.exp(s)) == argmax_lowest(3 * s + 1)
    assert argmax_lowest(s) == min(i for i, v in enumerate(s) if v == s.max())


def test_argmax_ties_and_empty():
    assert argmax_lowest([1.0, 2.0, 2.0]) == 1
    with pytest.raises(ValueError):
        argmax_lowest([])


def test_ref_shuffled_rois_select_same_object():
    with default_dtype("f64"):
        model = randomise(tiny(11), 11)
        for k in range(5):
            inst = make_ref_instance(100 + k, WORLD, CFG)
            perm = np.random.default_rng(k).permutation(len(inst.rois))
            shuffled = replace(inst, rois=[inst.rois[j] for j in perm], target=int(np.argsort(perm)[inst.target]))
            a = ref_scores(model, [inst], VOCAB)[0].data
            b = ref_scores(model, [shuffled], VOCAB)[0].data
            assert np.allclose(a[perm], b, atol=1e-5)
            assert perm[ref_inference(model, [shuffled], VOCAB)[0]] == ref_inference(model, [inst], VOCAB)[0]


# --- datasets and plumbing ----------------------------------------------------------------------------------


def test_toy_splits_are_disjoint_and_sized():
    data = make_toy_tasks(WORLD, 0, cfg=ToyTaskConfig(train_size=30, val_size=10))
    assert set(data) == set(TASKS)
    for task, split in data.items():
        assert len(split["train"]) == 30 and len(split["val"]) == 10
        assert not {i.scene_id for i in split["train"]} & {i.scene_id for i in split["val"]}
    assert (ToyTaskConfig().train_size, ToyTaskConfig().val_size) == (2000, 500)


def test_jsonl_round_trip(tmp_path):
    data = make_toy_tasks(WORLD, 1, cfg=ToyTaskConfig(train_size=5, val_size=0))
    insts = [i for split in data.values() for i in split["train"]]
    save_instances(tmp_path / "t.jsonl", insts)
    back = load_instances(tmp_path / "t.jsonl")
    assert back == insts
    assert instance_from_json(instance_to_json(insts[0])) == insts[0]


def test_report_is_tab_separated(tmp_path):
    write_report(tmp_path / "r.tsv", [{"task": "vqa", "split": "val", "accuracy": 0.5, "steps": 3, "seed": 0}])
    lines = (tmp_path / "r.tsv").read_text(encoding="utf-8").splitlines()
    assert lines[0].split("\t")[:3] == ["task", "split", "accuracy"] and len(lines) == 2


def test_finetune_lowers_loss_and_predicts_in_range():
    model = tiny(12)
    train = [make_ref_instance(k, WORLD, CFG) for k in range(64)]
    losses = finetune(model, "ref", train, VOCAB, FinetuneConfig(steps=40, batch_size=8, lr=3e-3, warmup=4))
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    preds = predict(model, "ref", train[:8], VOCAB)
    assert all(0 <= p < len(i.rois) for p, i in zip(preds, train[:8]))
    assert 0.0 <= evaluate(model, "ref", train[:8], VOCAB) <= 1.0
