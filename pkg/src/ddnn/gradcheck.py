"""Finite-difference verification of every autodiff primitive and loss term.

Each case builds a small float64 problem, runs one backward pass, and
compares every parameter gradient against the central-difference oracle.
Inputs of kinked ops (relu, abs, max, pooling) are conditioned away from
their non-smooth points so the oracle is well defined. The suite backs both
the test suite and the ``gradcheck`` CLI command.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .ekd import (
    EkdWeights,
    attention_map,
    attention_mse,
    cross_entropy,
    kl_distillation,
    softmax_posterior,
    total_loss,
)
from .layers import BatchNorm2d, Conv2d, ConvBnRelu, Linear, ResidualBlock, global_avg_pool
from .tensor import Tensor, finite_difference_grad

DEFAULT_TOLERANCE = 1e-4
DEFAULT_SEEDS = 10
DEFAULT_STEP = 1e-3

SCOPES = ("tensor", "layers", "losses")


@dataclass
class CheckResult:
    name: str
    scope: str
    max_rel_err: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1) over elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(params: Sequence[Tensor], forward: Callable[[], Tensor],
                    step: float = DEFAULT_STEP) -> float:
    """Worst relative error between backward() and finite differences."""
    for p in params:
        p.grad = None
    loss = forward()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = finite_difference_grad(lambda _: forward(), p, step).data
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# -- input conditioning -------------------------------------------------------


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(x >= 0, x + margin, x - margin)


def _distinct(rng, shape, gap=0.05):
    """Values with pairwise gaps >= gap/2: safe for max/pool tie-free checks."""
    n = int(np.prod(shape))
    base = np.arange(n, dtype=np.float64) * gap
    rng.shuffle(base)
    return (base + rng.uniform(-gap / 4, gap / 4, size=n)).reshape(shape)


def _t(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def _probe(out: Tensor, r: np.ndarray) -> Tensor:
    """Random-projection scalar so every output element is exercised."""
    return (out * Tensor(r)).sum()


# -- case builders --------------------------------------------------------------
# each returns (params, forward)


def _case_add(rng):
    x, y = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(3, 4)))
    r = rng.normal(size=(3, 4))
    return [x, y], lambda: _probe(x + y, r)


def _case_mul(rng):
    x, y = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(3, 4)))
    r = rng.normal(size=(3, 4))
    return [x, y], lambda: _probe(x * y, r)


def _case_neg(rng):
    x = _t(rng.normal(size=(2, 5)))
    r = rng.normal(size=(2, 5))
    return [x], lambda: _probe(-x, r)


def _case_relu(rng):
    x = _t(_away_from_zero(rng, (4, 4)))
    r = rng.normal(size=(4, 4))
    return [x], lambda: _probe(x.relu(), r)


def _case_exp(rng):
    x = _t(rng.normal(size=(3, 3)) * 0.5)
    r = rng.normal(size=(3, 3))
    return [x], lambda: _probe(x.exp(), r)


def _case_log(rng):
    x = _t(rng.uniform(0.5, 2.0, size=(3, 3)))
    r = rng.normal(size=(3, 3))
    return [x], lambda: _probe(x.log(), r)


def _case_abs(rng):
    x = _t(_away_from_zero(rng, (3, 4)))
    r = rng.normal(size=(3, 4))
    return [x], lambda: _probe(x.abs(), r)


def _case_cast(rng):
    x = _t(rng.normal(size=(2, 3)))
    r = rng.normal(size=(2, 3))
    return [x], lambda: _probe(T.cast(T.cast(x, np.float32), np.float64), r)


def _case_matmul(transpose_a, transpose_b):
    def build(rng):
        a_shape = (4, 3) if transpose_a else (3, 4)
        b_shape = (5, 4) if transpose_b else (4, 5)
        a, b = _t(rng.normal(size=a_shape)), _t(rng.normal(size=b_shape))
        r = rng.normal(size=(3, 5))
        return [a, b], lambda: _probe(T.matmul(a, b, transpose_a, transpose_b), r)
    return build


def _case_sum(axes, keepdims):
    def build(rng):
        x = _t(rng.normal(size=(3, 4, 2)))
        out_shape = np.sum(x.data, axis=axes, keepdims=keepdims).shape
        r = rng.normal(size=out_shape)
        return [x], lambda: _probe(x.sum(axes, keepdims), r)
    return build


def _case_mean(axes, keepdims):
    def build(rng):
        x = _t(rng.normal(size=(3, 4, 2)))
        out_shape = np.mean(x.data, axis=axes, keepdims=keepdims).shape
        r = rng.normal(size=out_shape)
        return [x], lambda: _probe(x.mean(axes, keepdims), r)
    return build


def _case_max(keepdims):
    def build(rng):
        x = _t(_distinct(rng, (3, 5)))
        out_shape = np.max(x.data, axis=1, keepdims=keepdims).shape
        r = rng.normal(size=out_shape)
        return [x], lambda: _probe(x.max(1, keepdims), r)
    return build


def _case_reshape(rng):
    x = _t(rng.normal(size=(2, 6)))
    r = rng.normal(size=(3, 4))
    return [x], lambda: _probe(x.reshape(3, 4), r)


def _case_broadcast(rng):
    x = _t(rng.normal(size=(3, 1)))
    r = rng.normal(size=(2, 3, 4))
    return [x], lambda: _probe(x.broadcast_to((2, 3, 4)), r)


def _case_pad(rng):
    x = _t(rng.normal(size=(2, 3)))
    r = rng.normal(size=(5, 4))
    return [x], lambda: _probe(T.pad(x, [(1, 2), (0, 1)]), r)


def _case_slice(rng):
    x = _t(rng.normal(size=(4, 5)))
    r = rng.normal(size=(2, 3))
    return [x], lambda: _probe(x[1:3, 2:5], r)


def _case_conv(stride, padding, kernel):
    def build(rng):
        x = _t(rng.normal(size=(2, 3, 5, 5)))
        w = _t(rng.normal(size=(4, 3, kernel, kernel)) * 0.5)
        out = T.conv2d(x, w, stride=stride, padding=padding)
        r = rng.normal(size=out.shape)
        return [x, w], lambda: _probe(T.conv2d(x, w, stride=stride, padding=padding), r)
    return build


def _case_max_pool(kernel, stride, padding):
    def build(rng):
        x = _t(_distinct(rng, (2, 2, 5, 5)))
        out = T.max_pool2d(x, kernel, stride, padding)
        r = rng.normal(size=out.shape)
        return [x], lambda: _probe(T.max_pool2d(x, kernel, stride, padding), r)
    return build


def _case_linear(rng):
    layer = Linear(4, 5, rng=rng, dtype=np.float64)
    x = _t(rng.normal(size=(3, 4)))
    r = rng.normal(size=(3, 5))
    params = [x, layer.weight, layer.bias]
    return params, lambda: _probe(layer.forward(x), r)


def _case_batchnorm(mode):
    def build(rng):
        bn = BatchNorm2d(3, dtype=np.float64)
        bn.gamma.data[:] = rng.uniform(0.5, 1.5, size=3)
        bn.beta.data[:] = rng.normal(size=3) * 0.2
        if mode == "eval":
            bn.running_mean[:] = rng.normal(size=3)
            bn.running_var[:] = rng.uniform(0.5, 2.0, size=3)
        x = _t(rng.normal(size=(4, 3, 3, 3)))
        r = rng.normal(size=(4, 3, 3, 3))
        params = [x, bn.gamma, bn.beta]
        return params, lambda: _probe(bn.forward(x, mode), r)
    return build


def _case_block(kind, stride, variant="post"):
    # relu kinks make FD ill-posed exactly at 0; bias the BN shifts so
    # activations sit away from the kinks (checked with a smaller step)
    def build(rng):
        in_ch = 4 if kind == "basic" else 8
        block = ResidualBlock(kind, in_ch, 2 if kind == "bottleneck" else 4,
                              stride=stride, variant=variant, rng=rng, dtype=np.float64)
        for name, p in block.named_parameters():
            if name.endswith("beta"):
                p.data += rng.uniform(0.3, 0.8, size=p.shape)
        x = _t(rng.normal(size=(2, in_ch, 4, 4)))
        out = block.forward(x, "train")
        r = rng.normal(size=out.shape)
        params = [x] + [p for _, p in block.named_parameters()]
        return params, lambda: _probe(block.forward(x, "train"), r)
    return build


def _case_conv_bn_softmax(rng):
    # smooth composite across modules, checked at the documented 1e-3 step
    conv = Conv2d(2, 3, 3, stride=1, padding=1, rng=rng, dtype=np.float64)
    bn = BatchNorm2d(3, dtype=np.float64)
    x = _t(rng.normal(size=(3, 2, 4, 4)))
    labels = rng.integers(0, 3, size=3)
    params = [x, conv.weight, bn.gamma, bn.beta]

    def forward():
        h = bn.forward(conv.forward(x), "train")
        return cross_entropy(global_avg_pool(h), labels)

    return params, forward


def _case_conv_bn_relu(rng):
    unit = ConvBnRelu(2, 3, rng=rng, dtype=np.float64)
    x = _t(rng.normal(size=(3, 2, 4, 4)))
    r = rng.normal(size=(3, 3, 4, 4))
    params = [x] + [p for _, p in unit.named_parameters()]
    return params, lambda: _probe(unit.forward(x, "train"), r)


def _case_global_avg_pool(rng):
    x = _t(rng.normal(size=(2, 3, 4, 4)))
    r = rng.normal(size=(2, 3))
    return [x], lambda: _probe(global_avg_pool(x), r)


def _case_softmax(rng):
    logits = _t(rng.normal(size=(4, 5)) * 2.0)
    r = rng.normal(size=(4, 5))
    return [logits], lambda: _probe(softmax_posterior(logits), r)


def _case_cross_entropy(rng):
    logits = _t(rng.normal(size=(5, 7)) * 2.0)
    labels = rng.integers(0, 7, size=5)
    return [logits], lambda: cross_entropy(logits, labels)


def _case_kl_student(rng):
    teacher = Tensor(rng.normal(size=(4, 6)) * 2.0, dtype=np.float64)
    student = _t(rng.normal(size=(4, 6)) * 2.0)
    p_t = softmax_posterior(teacher)
    return [student], lambda: kl_distillation(p_t, softmax_posterior(student))


def _case_kl_teacher_grad(rng):
    teacher = _t(rng.normal(size=(4, 6)) * 2.0)
    student = _t(rng.normal(size=(4, 6)) * 2.0)
    return [teacher, student], lambda: kl_distillation(
        softmax_posterior(teacher), softmax_posterior(student), teacher_grad=True)


def _case_attention(rng):
    feats_s = _t(_away_from_zero(rng, (2, 3, 4, 4)))
    feats_t = _t(_away_from_zero(rng, (2, 3, 4, 4)))
    return [feats_s, feats_t], lambda: attention_mse(
        attention_map(feats_s), attention_map(feats_t), teacher_grad=True)


def _case_total(rng):
    # full combination with teacher gradients kept so FD sees the same function
    logits0 = _t(rng.normal(size=(3, 5)) * 2.0)
    logits1 = _t(rng.normal(size=(3, 5)) * 2.0)
    feats0 = _t(_away_from_zero(rng, (3, 2, 3, 3)))
    feats1 = _t(_away_from_zero(rng, (3, 2, 3, 3)))
    labels = rng.integers(0, 5, size=3)
    weights = EkdWeights((0.7,), (0.01,))

    def forward():
        kl = kl_distillation(softmax_posterior(logits0), softmax_posterior(logits1),
                             teacher_grad=True)
        att = attention_mse(attention_map(feats1), attention_map(feats0),
                            teacher_grad=True)
        total, _ = total_loss(cross_entropy(logits0, labels),
                              [cross_entropy(logits1, labels)], [kl], [att], weights)
        return total

    return [logits0, logits1, feats0, feats1], forward


# (name, scope, builder, fd step) -- relu/abs-bearing composites use a finer
# step so a kink rarely falls inside the difference window
_FINE = 1e-5
CASES = [
    ("add", "tensor", _case_add, DEFAULT_STEP),
    ("mul", "tensor", _case_mul, DEFAULT_STEP),
    ("neg", "tensor", _case_neg, DEFAULT_STEP),
    ("relu", "tensor", _case_relu, DEFAULT_STEP),
    ("exp", "tensor", _case_exp, DEFAULT_STEP),
    ("log", "tensor", _case_log, DEFAULT_STEP),
    ("abs", "tensor", _case_abs, DEFAULT_STEP),
    ("cast", "tensor", _case_cast, DEFAULT_STEP),
    ("matmul", "tensor", _case_matmul(False, False), DEFAULT_STEP),
    ("matmul_ta", "tensor", _case_matmul(True, False), DEFAULT_STEP),
    ("matmul_tb", "tensor", _case_matmul(False, True), DEFAULT_STEP),
    ("matmul_ta_tb", "tensor", _case_matmul(True, True), DEFAULT_STEP),
    ("sum_all", "tensor", _case_sum(None, False), DEFAULT_STEP),
    ("sum_axis", "tensor", _case_sum((0, 2), False), DEFAULT_STEP),
    ("sum_keepdims", "tensor", _case_sum((1,), True), DEFAULT_STEP),
    ("mean_all", "tensor", _case_mean(None, False), DEFAULT_STEP),
    ("mean_axis", "tensor", _case_mean((0, 2), True), DEFAULT_STEP),
    ("max_axis", "tensor", _case_max(False), DEFAULT_STEP),
    ("max_keepdims", "tensor", _case_max(True), DEFAULT_STEP),
    ("reshape", "tensor", _case_reshape, DEFAULT_STEP),
    ("broadcast", "tensor", _case_broadcast, DEFAULT_STEP),
    ("pad", "tensor", _case_pad, DEFAULT_STEP),
    ("slice", "tensor", _case_slice, DEFAULT_STEP),
    ("conv2d_3x3", "tensor", _case_conv(1, 1, 3), DEFAULT_STEP),
    ("conv2d_stride2", "tensor", _case_conv(2, 1, 3), DEFAULT_STEP),
    ("conv2d_1x1", "tensor", _case_conv(1, 0, 1), DEFAULT_STEP),
    ("max_pool_2x2", "tensor", _case_max_pool(2, 2, 0), DEFAULT_STEP),
    ("max_pool_3x3_pad", "tensor", _case_max_pool(3, 2, 1), DEFAULT_STEP),
    ("conv_bn_softmax", "tensor", _case_conv_bn_softmax, DEFAULT_STEP),
    ("linear", "layers", _case_linear, DEFAULT_STEP),
    ("batchnorm_train", "layers", _case_batchnorm("train"), DEFAULT_STEP),
    ("batchnorm_eval", "layers", _case_batchnorm("eval"), DEFAULT_STEP),
    ("basic_block", "layers", _case_block("basic", 1), _FINE),
    ("basic_block_stride2", "layers", _case_block("basic", 2), _FINE),
    ("basic_block_preact", "layers", _case_block("basic", 2, "pre"), _FINE),
    ("bottleneck_block", "layers", _case_block("bottleneck", 2), _FINE),
    ("conv_bn_relu", "layers", _case_conv_bn_relu, _FINE),
    ("global_avg_pool", "layers", _case_global_avg_pool, DEFAULT_STEP),
    ("softmax_posterior", "losses", _case_softmax, DEFAULT_STEP),
    ("cross_entropy", "losses", _case_cross_entropy, DEFAULT_STEP),
    ("kl_distillation", "losses", _case_kl_student, DEFAULT_STEP),
    ("kl_teacher_grad", "losses", _case_kl_teacher_grad, DEFAULT_STEP),
    ("attention_mse", "losses", _case_attention, DEFAULT_STEP),
    ("total_objective", "losses", _case_total, DEFAULT_STEP),
]


def run_suite(scope: str = "all", seeds: int = DEFAULT_SEEDS,
              tolerance: float = DEFAULT_TOLERANCE) -> list:
    """Run all cases in a scope; one CheckResult per case (worst seed)."""
    if scope not in SCOPES + ("all",):
        raise ValueError(f"unknown gradcheck scope {scope!r}; expected all|{'|'.join(SCOPES)}")
    results = []
    for name, case_scope, builder, step in CASES:
        if scope not in ("all", case_scope):
            continue
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(1000 + seed)
            params, forward = builder(rng)
            worst = max(worst, check_gradients(params, forward, step))
        results.append(CheckResult(name, case_scope, worst, tolerance))
    return results
