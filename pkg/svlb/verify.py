"""In-process numerical self-checks behind `svlb verify`."""
from __future__ import annotations
import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from svlb.encoders import EncoderConfig, HeadToken, Pooling, encode_images, encoder_shapes, init_params
from svlb.gradcheck import gradcheck
from svlb.posenc import PositionKind, PositionMode, apply_rope1d, apply_rope2d, grid_positions, make_plan
from svlb.tensor import (
    Tensor, add, concat, cross_entropy, div, embedding, exp, gelu, l2_normalize, layer_norm, log, log_sigmoid,
    log_softmax, matmul, mean, mse, mul, neg, precision, reshape, softmax, stack, sub, sum_, swapaxes, take,
    transpose,
)

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _param(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    # random projection so every output entry contributes a distinct gradient
    return sum_(mul(out, rng.standard_normal(out.shape)))


def _positive(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(np.abs(rng.standard_normal(shape)) + 0.5, requires_grad=True)


def _unary(op):
    def make(rng):
        return (lambda x: _weighted(op(x), np.random.default_rng(0))), [_param(rng, 2, int(rng.integers(1, 5)))]
    return make


def _binary(op, positive_rhs: bool = False):
    # rhs is a row vector so the broadcast reduction is checked as well
    def make(rng):
        n = int(rng.integers(1, 5))
        rhs = _positive(rng, n) if positive_rhs else _param(rng, n)
        return (lambda a, b: _weighted(op(a, b), np.random.default_rng(0))), [_param(rng, 3, n), rhs]
    return make


def _case_log(rng):
    return (lambda x: _weighted(log(x), np.random.default_rng(0))), [_positive(rng, 2, int(rng.integers(1, 5)))]


def _case_transpose(rng):
    x = _param(rng, 2, 3, int(rng.integers(1, 4)))
    return (lambda x: _weighted(transpose(x, (1, 2, 0)), np.random.default_rng(0))), [x]


def _case_swapaxes(rng):
    x = _param(rng, 2, 3, int(rng.integers(1, 4)))
    return (lambda x: _weighted(swapaxes(x, -1, -2), np.random.default_rng(0))), [x]


def _case_reshape(rng):
    n = int(rng.integers(1, 4))
    return (lambda x: _weighted(reshape(x, (n, 6)), np.random.default_rng(0))), [_param(rng, 2, 3, n)]


def _case_take_slice(rng):
    x = _param(rng, 2, int(rng.integers(3, 6)))
    return (lambda x: _weighted(take(x, (slice(None), slice(1, 3))), np.random.default_rng(0))), [x]


def _case_take_index(rng):
    n = int(rng.integers(2, 6))
    idx = rng.integers(0, n, size=4)
    idx[-1] = idx[0]
    return (lambda x: _weighted(take(x, idx), np.random.default_rng(0))), [_param(rng, n, 2)]


def _case_concat(rng):
    a, b = _param(rng, 2, int(rng.integers(1, 4))), _param(rng, 2, int(rng.integers(1, 4)))
    return (lambda a, b: _weighted(concat([a, b], axis=1), np.random.default_rng(0))), [a, b]


def _case_stack(rng):
    shape = (2, int(rng.integers(1, 4)))
    return ((lambda a, b: _weighted(stack([a, b], axis=1), np.random.default_rng(0))),
            [_param(rng, *shape), _param(rng, *shape)])


def _case_sum(rng):
    x = _param(rng, 2, 3, int(rng.integers(1, 4)))
    return (lambda x: _weighted(sum_(x, axis=1), np.random.default_rng(0))), [x]


def _case_mean(rng):
    x = _param(rng, 2, 3, int(rng.integers(1, 4)))
    return (lambda x: _weighted(mean(x, axis=(0, 2), keepdims=True), np.random.default_rng(0))), [x]


def _case_embedding(rng):
    v = int(rng.integers(2, 6))
    ids = rng.integers(0, v, size=(2, 3))
    ids[1, 2] = ids[0, 0]
    return (lambda t: _weighted(embedding(t, ids), np.random.default_rng(0))), [_param(rng, v, 3)]


def _case_log_softmax(rng):
    x = _param(rng, int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    return (lambda x: _weighted(log_softmax(x, axis=-1), np.random.default_rng(0))), [x]


def _case_encoder_block(rng):
    """A depth-1 encoder end to end: patch projection, one attention block, final norm, mean pooling."""
    cfg = EncoderConfig(depth=1, d_model=4, heads=2, head_dim=2, patch_size=1, image_size=2, mlp_ratio=2,
                        position_mode=PositionMode(kind=PositionKind.ROPE_1D), head_token=HeadToken.NONE,
                        pooling=Pooling.MEAN)
    params = init_params(encoder_shapes(cfg), rng)
    leaves = [t for _, t in params.items()]

    def fn(tokens, *_):
        # the ParamSet holds the same Tensor objects gradcheck perturbs
        seq, pooled = encode_images(tokens, cfg, params)
        return add(_weighted(seq, np.random.default_rng(0)), _weighted(pooled, np.random.default_rng(1)))
    return fn, [_param(rng, 1, 4, cfg.patch_dim)] + leaves


def _case_matmul(rng):
    m, k, n = rng.integers(1, 5, size=3)
    a, b = _param(rng, m, k), _param(rng, k, n)
    return (lambda a, b: _weighted(matmul(a, b), np.random.default_rng(0))), [a, b]


def _case_softmax(rng):
    x = _param(rng, int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    return (lambda x: _weighted(softmax(x, axis=-1), np.random.default_rng(0))), [x]


def _case_cross_entropy(rng):
    b, v = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    targets = rng.integers(0, v, size=b)
    targets[0] = -100 if b > 1 else targets[0]
    return (lambda x: cross_entropy(x, targets)), [_param(rng, b, v)]


def _case_layer_norm(rng):
    d = int(rng.integers(2, 6))
    x, g, b = _param(rng, int(rng.integers(1, 4)), d), _param(rng, d), _param(rng, d)
    return (lambda x, g, b: _weighted(layer_norm(x, g, b), np.random.default_rng(0))), [x, g, b]


def _case_gelu(rng):
    return (lambda x: _weighted(gelu(x), np.random.default_rng(0))), [_param(rng, 3, int(rng.integers(1, 5)))]


def _case_log_sigmoid(rng):
    return (lambda x: _weighted(log_sigmoid(x), np.random.default_rng(0))), [_param(rng, 2, int(rng.integers(1, 5)))]


def _case_l2(rng):
    return (lambda x: _weighted(l2_normalize(x), np.random.default_rng(0))), [_param(rng, 2, int(rng.integers(2, 5)))]


def _case_mse(rng):
    shape = (2, int(rng.integers(1, 5)))
    return (lambda a, b: mse(a, b)), [_param(rng, *shape), _param(rng, *shape)]


def _case_rope1d(rng):
    length, dh = int(rng.integers(1, 5)), 2 * int(rng.integers(1, 4))
    plan = make_plan(PositionMode(kind=PositionKind.ROPE_1D), dh)
    pos = rng.integers(0, 20, size=length)
    return (lambda x: _weighted(apply_rope1d(x, pos, plan), np.random.default_rng(0))), [_param(rng, 1, 2, length, dh)]


def _case_rope2d(rng):
    hp, wp, dh = int(rng.integers(1, 3)), int(rng.integers(1, 3)), 4 * int(rng.integers(1, 3))
    plan = make_plan(PositionMode(kind=PositionKind.ROPE_2D), dh)
    return ((lambda x: _weighted(apply_rope2d(x, (hp, wp), plan), np.random.default_rng(0))),
            [_param(rng, 1, 2, hp * wp, dh)])


GRADIENT_CASES: Dict[str, Callable] = {
    "add": _binary(add),
    "sub": _binary(sub),
    "mul": _binary(mul),
    "div": _binary(div, positive_rhs=True),
    "neg": _unary(neg),
    "exp": _unary(exp),
    "log": _case_log,
    "transpose": _case_transpose,
    "swapaxes": _case_swapaxes,
    "reshape": _case_reshape,
    "take_slice": _case_take_slice,
    "take_index": _case_take_index,
    "concat": _case_concat,
    "stack": _case_stack,
    "sum": _case_sum,
    "mean": _case_mean,
    "embedding": _case_embedding,
    "log_softmax": _case_log_softmax,
    "matmul": _case_matmul,
    "softmax": _case_softmax,
    "cross_entropy": _case_cross_entropy,
    "layer_norm": _case_layer_norm,
    "gelu": _case_gelu,
    "log_sigmoid": _case_log_sigmoid,
    "l2_normalize": _case_l2,
    "mse": _case_mse,
    "rope1d": _case_rope1d,
    "rope2d": _case_rope2d,
    "encoder_block": _case_encoder_block,
}


def gradient_suite(trials: int = 20, seed: int = 0) -> List[CheckResult]:
    results = []
    with precision("verify"):
        for k, (name, make) in enumerate(GRADIENT_CASES.items()):
            rng = np.random.default_rng([seed, k])
            worst, ok = 0.0, True
            for _ in range(trials):
                fn, inputs = make(rng)
                passed, err = gradcheck(fn, inputs)
                ok &= passed
                worst = max(worst, err)
            results.append(CheckResult(f"grad:{name}", ok, f"{trials} trials, worst rel err {worst:.2e}"))
    return results


def rope2d_relative_errors(grid: Tuple[int, int] = (4, 4), head_dim: int = 8, seed: int = 0) -> Tuple[float, float, int]:
    """(max relative-position disagreement, max norm change, pairs compared) for fixed q, k vectors."""
    rng = np.random.default_rng(seed)
    plan = make_plan(PositionMode(kind=PositionKind.ROPE_2D), head_dim)
    hp, wp = grid
    n = hp * wp
    q = np.broadcast_to(rng.standard_normal(head_dim), (n, head_dim))
    k = np.broadcast_to(rng.standard_normal(head_dim), (n, head_dim))
    with precision("verify"):
        rq = apply_rope2d(Tensor(q.reshape(1, 1, n, head_dim)), grid, plan).data.reshape(n, head_dim)
        rk = apply_rope2d(Tensor(k.reshape(1, 1, n, head_dim)), grid, plan).data.reshape(n, head_dim)
    h, w = grid_positions(hp, wp)
    by_offset: Dict[Tuple[int, int], List[float]] = {}
    for i, j in itertools.product(range(n), repeat=2):
        by_offset.setdefault((int(h[j] - h[i]), int(w[j] - w[i])), []).append(float(rq[i] @ rk[j]))
    rel = max((max(v) - min(v) for v in by_offset.values()), default=0.0)
    norm = float(np.max(np.abs(np.linalg.norm(rq, axis=1) - np.linalg.norm(q, axis=1))))
    return rel, norm, n * n


def rope_suite() -> List[CheckResult]:
    rel, norm, pairs = rope2d_relative_errors()
    return [
        CheckResult("rope2d:relative", rel <= 1e-10, f"{pairs} pairs, max spread {rel:.1e}"),
        CheckResult("rope2d:norm", norm <= 1e-10, f"max norm change {norm:.1e}"),
    ]


def run_all(trials: int = 20) -> List[CheckResult]:
    results = gradient_suite(trials) + rope_suite()
    for r in results:
        logger.debug("%s %s %s", r.name, "ok" if r.ok else "FAIL", r.detail)
    return results


def format_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name.ljust(width)}  {'PASS' if r.ok else 'FAIL'}  {r.detail}" for r in results]
    return "\n".join(lines)
