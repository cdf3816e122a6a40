"""Finite-difference checks for every differentiable op and a tiny full model.

Each op check reduces the op's output to a scalar with a fixed random
weighting so every output coordinate contributes to the gradient.
All checks run at 64-bit.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .engine import GradCheckReport, Tensor, default_dtype, grad_check, ops, parameter

OpCase = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    w = rng.normal(size=out.shape)
    return ops.sum(ops.mul(out, w))


def _p(rng, *shape, positive=False, scale=1.0):
    data = rng.normal(scale=scale, size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return parameter(data)


def _unary(fn, positive=False) -> OpCase:
    def case(rng):
        x = _p(rng, 3, 4, positive=positive)
        w = rng.normal(size=fn(x).shape)
        return (lambda: ops.sum(ops.mul(fn(x), w))), [x]
    return case


def _binary(fn, positive_b=False) -> OpCase:
    def case(rng):
        a, b = _p(rng, 3, 4), _p(rng, 4, positive=positive_b)  # exercises broadcasting
        w = rng.normal(size=(3, 4))
        return (lambda: ops.sum(ops.mul(fn(a, b), w))), [a, b]
    return case


def _case_matmul(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    return (lambda: ops.sum(ops.mul(ops.matmul(a, b), w))), [a, b]


def _case_linear(rng):
    x, wt, bias = _p(rng, 3, 4), _p(rng, 4, 2), _p(rng, 2)
    w = rng.normal(size=(3, 2))
    return (lambda: ops.sum(ops.mul(ops.linear(x, wt, bias), w))), [x, wt, bias]


def _case_layer_norm(rng):
    x, g, b = _p(rng, 3, 6), _p(rng, 6), _p(rng, 6)
    w = rng.normal(size=(3, 6))
    return (lambda: ops.sum(ops.mul(ops.layer_norm(x, g, b), w))), [x, g, b]


def _case_index(rng):
    x = _p(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])  # repeated row accumulates
    w = rng.normal(size=(4, 3))
    return (lambda: ops.sum(ops.mul(ops.index(x, idx), w))), [x]


def _case_concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 2)
    w = rng.normal(size=(2, 5))
    return (lambda: ops.sum(ops.mul(ops.concat([a, b], axis=-1), w))), [a, b]


def _case_stack(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 3)
    w = rng.normal(size=(2, 2, 3))
    return (lambda: ops.sum(ops.mul(ops.stack([a, b], axis=0), w))), [a, b]


def _case_reshape(rng):
    x = _p(rng, 2, 6)
    w = rng.normal(size=(3, 4))
    return (lambda: ops.sum(ops.mul(ops.reshape(x, (3, 4)), w))), [x]


def _case_transpose(rng):
    x = _p(rng, 2, 3, 4)
    w = rng.normal(size=(4, 2, 3))
    return (lambda: ops.sum(ops.mul(ops.transpose(x, (2, 0, 1)), w))), [x]


def _case_reduce(fn):
    def case(rng):
        x = _p(rng, 3, 4)
        w = rng.normal(size=(4,))
        return (lambda: ops.sum(ops.mul(fn(x, axis=0), w))), [x]
    return case


def _case_embedding(rng):
    table = _p(rng, 6, 3)
    ids = np.array([[1, 4, 1], [0, 5, 5]])
    w = rng.normal(size=(2, 3, 3))
    return (lambda: ops.sum(ops.mul(ops.embedding_lookup(table, ids), w))), [table]


def _case_cross_entropy(rng):
    logits = _p(rng, 4, 5)
    targets = rng.integers(5, size=4)
    mask = np.array([True, True, False, True])
    return (lambda: ops.cross_entropy(logits, targets, mask)), [logits]


def _case_bce(rng):
    logits = _p(rng, 6, scale=2.0)
    targets = rng.integers(2, size=6).astype(float)
    return (lambda: ops.binary_cross_entropy_with_logits(logits, targets)), [logits]


def _case_dropout(rng):
    x = _p(rng, 3, 4)
    seed = int(rng.integers(2**31))
    w = rng.normal(size=(3, 4))
    return (lambda: ops.sum(ops.mul(ops.dropout(x, 0.3, np.random.default_rng(seed)), w))), [x]


def _case_attention(rng):
    from .transformer import LayerParams, transformer_layer

    layer = LayerParams.init(8, 2, 12, rng)
    for p in layer.named_parameters().values():
        p.data[...] = rng.normal(scale=0.3, size=p.shape)
    x = _p(rng, 2, 5, 8)
    valid = np.ones((2, 5), dtype=bool)
    valid[1, 3:] = False
    w = rng.normal(size=(2, 5, 8)) * valid[..., None]
    params = [x] + list(layer.named_parameters().values())
    return (lambda: ops.sum(ops.mul(transformer_layer(x, layer, valid=valid), w))), params


OP_CASES: dict[str, OpCase] = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, positive_b=True),
    "power": _unary(lambda x: ops.power(x, 3.0)),
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, positive=True),
    "tanh": _unary(ops.tanh),
    "sigmoid": _unary(ops.sigmoid),
    "gelu": _unary(ops.gelu),
    "softmax": _unary(lambda x: ops.softmax(x, axis=-1)),
    "log_softmax": _unary(lambda x: ops.log_softmax(x, axis=-1)),
    "swap_last": _unary(ops.swap_last),
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "sum": _case_reduce(ops.sum),
    "mean": _case_reduce(ops.mean),
    "index": _case_index,
    "concat": _case_concat,
    "stack": _case_stack,
    "matmul": _case_matmul,
    "linear": _case_linear,
    "layer_norm": _case_layer_norm,
    "embedding_lookup": _case_embedding,
    "cross_entropy": _case_cross_entropy,
    "bce_with_logits": _case_bce,
    "dropout": _case_dropout,
    "transformer_layer": _case_attention,
}


def check_op(name: str, seed: int, tolerance: float = 1e-4) -> GradCheckReport:
    with default_dtype("f64"):
        rng = np.random.default_rng([seed, 77])
        f, params = OP_CASES[name](rng)
        return grad_check(f, params, tolerance=tolerance, rng=rng,
                          names=[f"{name}.arg{k}" for k in range(len(params))])


def _tiny_model(seed: int):
    from .corpus import WorldConfig, make_text_corpus, make_vl_corpus, toy_vocabulary
    from .model import ModelConfig, VLBert

    vocab = toy_vocabulary()
    config = ModelConfig(vocab_size=len(vocab), d=8, layers=2, heads=2, d_ff=16, d_app=8, d_g=8, max_positions=64)
    model = VLBert(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 78])
    # Break the symmetry of the default init so no gradient vanishes by accident.
    for p in model.named_parameters().values():
        p.data[...] += rng.normal(scale=0.1, size=p.shape)
    world = WorldConfig(max_objects=2, duplicates=1)
    vl = make_vl_corpus(4, world, first_id=seed * 10)
    text = make_text_corpus(4, seed, max_len=8)
    return model, vocab, vl, text, rng


def model_loss_fn(seed: int):
    """Closure summing every pretraining loss plus the three fine-tuning losses."""
    from .downstream import ToyTaskConfig, ensure_head, make_toy_tasks, ref_forward_loss, vcr_forward_loss, \
        vqa_forward_loss
    from .corpus import WorldConfig
    from .pretraining import TaskFlags, pretrain_losses, sample_minibatch

    model, vocab, vl, text, rng = _tiny_model(seed)
    batch = sample_minibatch(vl, text, 2, (1, 1), rng, vocab, nsp=True, text_max_len=8)
    tasks = make_toy_tasks(WorldConfig(), seed, tasks=("vcr_qa", "vqa", "ref"),
                           cfg=ToyTaskConfig(train_size=1, val_size=0, max_objects=2))
    for task in ("vcr_qa", "vqa", "ref"):
        ensure_head(model, task, seed=seed)
    flags = TaskFlags(mlm=True, roi=True, nsp=True, text=True)
    aux_seed = int(rng.integers(2**31))

    def f() -> Tensor:
        total = None
        for loss in pretrain_losses(model, batch, flags).values():
            total = loss if total is None else total + loss
        total = total + vcr_forward_loss(model, tasks["vcr_qa"]["train"], vocab,
                                         rng=np.random.default_rng(aux_seed))
        total = total + vqa_forward_loss(model, tasks["vqa"]["train"], vocab)
        return total + ref_forward_loss(model, tasks["ref"]["train"], vocab)

    return model, f


def check_model(seed: int, max_entries: Optional[int] = 6, tolerance: float = 1e-4) -> GradCheckReport:
    with default_dtype("f64"):
        model, f = model_loss_fn(seed)
        named = model.named_parameters()
        return grad_check(f, list(named.values()), tolerance=tolerance, max_entries=max_entries,
                          rng=np.random.default_rng([seed, 79]), names=list(named))


def run_suite(seeds=range(20), tolerance: float = 1e-4, max_entries: Optional[int] = 6) -> dict[str, float]:
    """Worst relative error per op (and ``model``) across ``seeds``."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name in OP_CASES:
            err = check_op(name, seed, tolerance).max_rel_error
            worst[name] = max(worst.get(name, 0.0), err)
        err = check_model(seed, max_entries, tolerance).max_rel_error
        worst["model"] = max(worst.get("model", 0.0), err)
    return worst
