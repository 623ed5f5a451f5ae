"""Central finite-difference checks of every differentiable op, in float64.

Each case builds a scalar function of some leaf tensors.  Non-scalar op outputs
are contracted against a fixed random tensor so every output element matters.
The error of a case is the max-norm relative error of its whole gradient
vector: ``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` taken over
all leaves together, so leaves whose true gradient is zero (a conv bias feeding
batchnorm) do not divide noise by noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import cbam, layers, network
from . import tensor as T
from .tensor import Tensor

OP_THRESHOLD = 1e-4
END_TO_END_THRESHOLD = 1e-3
STEP = 1e-3
# Deep stacks behind train-mode batchnorm: every probe shifts every activation, so
# at STEP some LeakyReLU input almost always changes sign.
DEEP_STEP = 1e-5

F64 = np.float64


@dataclass
class CaseResult:
    name: str
    error: float
    threshold: float
    trials: int
    checked: int = 0
    straddled: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.error < self.threshold)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


@dataclass
class GradCheck:
    error: float
    checked: int
    straddled: int  # elements whose +/- step evaluations took different branches


def check_gradients(fn: Callable[[], Tensor], leaves: list[Tensor], step: float = STEP) -> GradCheck:
    """Compare backprop against central differences over every element of ``leaves``.

    An element whose two probes land on different branches of a ReLU or max is
    not differentiable at that scale; it is counted in ``straddled`` and left
    out of the error.
    """
    for leaf in leaves:
        leaf.grad = None
    T.backward(fn())
    analytic_all, numeric_all = [], []
    straddled = 0
    with T.no_grad():
        for leaf in leaves:
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                with T.branch_trace() as up_branches:
                    up = float(fn().data)
                flat[i] = orig - step
                with T.branch_trace() as down_branches:
                    down = float(fn().data)
                flat[i] = orig
                if up_branches != down_branches:
                    straddled += 1
                    continue
                analytic_all.append(analytic.reshape(-1)[i])
                numeric_all.append((up - down) / (2 * step))
    error = relative_error(np.asarray(analytic_all), np.asarray(numeric_all))
    return GradCheck(error, len(analytic_all), straddled)


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=F64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def _distinct(rng, shape):
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape) - 0.05 * n


class _Fixed:
    def __init__(self, w):
        self.w = Tensor(w)

    def __call__(self, out: Tensor) -> Tensor:
        return T.reduce(T.mul(out, self.w), None, "sum")


def _with_weights(rng, op: Callable[[], Tensor]):
    probe = op()
    w = _Fixed(rng.standard_normal(probe.shape))
    return lambda: w(op())


# Each builder takes an rng and returns (scalar fn, leaves).


def _case_elementwise(kind):
    def build(rng):
        a = _leaf(rng.standard_normal((2, 3, 4)))
        b = _leaf(rng.standard_normal((1, 3, 1)))
        return _with_weights(rng, lambda: T.elementwise(a, b, kind)), [a, b]

    return build


def _case_scale(rng):
    a = _leaf(rng.standard_normal((3, 4)))
    return _with_weights(rng, lambda: T.scale(a, -1.7)), [a]


def _case_matmul(rng):
    a = _leaf(rng.standard_normal((3, 4)))
    w = _leaf(rng.standard_normal((4, 2)))
    return _with_weights(rng, lambda: T.matmul(a, w)), [a, w]


def _case_reshape(rng):
    a = _leaf(rng.standard_normal((2, 3, 4)))
    return _with_weights(rng, lambda: T.reshape(a, (6, 4))), [a]


def _case_concat(rng):
    a = _leaf(rng.standard_normal((2, 1, 5)))
    b = _leaf(rng.standard_normal((2, 2, 5)))
    return _with_weights(rng, lambda: T.concat([a, b], axis=1)), [a, b]


def _case_reduce(kind):
    def build(rng):
        data = _distinct(rng, (2, 3, 5)) if kind == "max" else rng.standard_normal((2, 3, 5))
        a = _leaf(data)
        axis = int(rng.integers(0, 3))
        return _with_weights(rng, lambda: T.reduce(a, axis, kind)), [a]

    return build


def _case_activation(kind):
    def build(rng):
        a = _leaf(_away_from_zero(rng, (2, 3, 4)) * (4 if kind == "sigmoid" else 1))
        return _with_weights(rng, lambda: layers.activation(a, kind, 0.1)), [a]

    return build


def _conv_params(rng, cin, cout, k):
    return layers.Conv1dParams(_leaf(rng.standard_normal((cout, cin, k)) * 0.5), _leaf(rng.standard_normal(cout)))


def _bn_params(rng, c):
    return layers.BatchNorm1dParams(
        _leaf(1 + 0.3 * rng.standard_normal(c)),
        _leaf(0.3 * rng.standard_normal(c)),
        rng.standard_normal(c),
        rng.uniform(0.5, 2.0, c),
    )


def _case_conv1d(rng):
    x = _leaf(rng.standard_normal((2, 3, 9)))
    p = _conv_params(rng, 3, 4, 5)
    return _with_weights(rng, lambda: layers.conv1d(x, p)), [x, p.weight, p.bias]


def _case_batchnorm(mode):
    def build(rng):
        x = _leaf(rng.standard_normal((3, 4, 5)))
        p = _bn_params(rng, 4)
        return _with_weights(rng, lambda: layers.batchnorm1d(x, p, mode)), [x, p.gamma, p.beta]

    return build


def _case_avg_pool(rng):
    x = _leaf(rng.standard_normal((2, 3, 9)))
    return _with_weights(rng, lambda: layers.avg_pool1d(x, 2)), [x]


def _case_gap(rng):
    x = _leaf(rng.standard_normal((2, 3, 7)))
    return _with_weights(rng, lambda: layers.global_avg_pool(x)), [x]


def _case_dropout(rng):
    x = _leaf(rng.standard_normal((2, 3, 8)))
    seed = int(rng.integers(1 << 30))
    return _with_weights(rng, lambda: layers.dropout(x, 0.5, "train", np.random.default_rng(seed))), [x]


def _case_linear(rng):
    x = _leaf(rng.standard_normal((3, 4)))
    w = _leaf(rng.standard_normal((4, 2)))
    b = _leaf(rng.standard_normal(2))
    return _with_weights(rng, lambda: layers.linear(x, w, b)), [x, w, b]


def _case_mse(rng):
    from .training import mse_loss

    p = _leaf(rng.standard_normal((5, 1)))
    t = Tensor(rng.standard_normal((5, 1)))
    return (lambda: mse_loss(p, t)), [p]


def _cbam_params(rng, c, r):
    cp = cbam.ChannelAttentionParams.init(c, r, rng, F64)
    for t in (cp.b1, cp.b2):
        t.data[:] = 0.1 * rng.standard_normal(t.shape)
    sp = cbam.SpatialAttentionParams(_conv_params(rng, 2, 1, 7))
    return cp, sp


def _cbam_leaves(cp, sp):
    return [cp.w1, cp.b1, cp.w2, cp.b2, sp.conv.weight, sp.conv.bias]


def _case_channel_attention(rng):
    x = _leaf(rng.standard_normal((2, 4, 8)))
    cp, _ = _cbam_params(rng, 4, 2)
    return _with_weights(rng, lambda: cbam.channel_attention(x, cp)), [x, cp.w1, cp.b1, cp.w2, cp.b2]


def _case_spatial_attention(rng):
    x = _leaf(rng.standard_normal((2, 4, 8)))
    _, sp = _cbam_params(rng, 4, 2)
    return _with_weights(rng, lambda: cbam.spatial_attention(x, sp)), [x, sp.conv.weight, sp.conv.bias]


def _case_apply_cbam(rng):
    x = _leaf(rng.standard_normal((2, 4, 8)))
    cp, sp = _cbam_params(rng, 4, 2)
    return _with_weights(rng, lambda: cbam.apply_cbam(x, cp, sp)), [x] + _cbam_leaves(cp, sp)


def _case_residual(rng):
    cfg = network.AicrnConfig(stem_width=4, num_blocks=1, cbam_ratio=2, input_len=16)
    model = network.build(cfg, rng, F64)
    block = model.blocks[0]
    x = _leaf(rng.standard_normal((2, 4, 12)))
    leaves = [x] + [p for _, p in block.named_parameters("b")]
    return _with_weights(rng, lambda: network.residual_forward(x, block, "train")), leaves


def _case_composite(rng):
    """conv -> batchnorm -> LeakyReLU -> sum."""
    x = _leaf(rng.standard_normal((3, 2, 10)))
    conv = _conv_params(rng, 2, 3, 3)
    bn = _bn_params(rng, 3)

    def fn():
        return T.reduce(layers.leaky_relu(layers.batchnorm1d(layers.conv1d(x, conv), bn, "train"), 0.1), None, "sum")

    return fn, [x, conv.weight, conv.bias, bn.gamma, bn.beta]


def _case_end_to_end(rng):
    from .training import mse_loss

    cfg = network.AicrnConfig(stem_width=8, num_blocks=2, input_len=64, cbam_ratio=4)
    model = network.build(cfg, rng, F64)
    for block in model.blocks:
        for t in (block.channel.b1, block.channel.b2):
            t.data[:] = 0.1 * rng.standard_normal(t.shape)
    x = Tensor(rng.standard_normal((4, 8, 64)))
    y = Tensor(rng.standard_normal((4, 1)))
    seed = int(rng.integers(1 << 30))
    leaves = [p for _, p in model.named_parameters()]

    def fn():
        return mse_loss(network.forward(model, x, "train", np.random.default_rng(seed)), y)

    return fn, leaves


CASES: dict[str, tuple] = {
    # name: (builder, threshold, trials[, step])
    "add": (_case_elementwise("add"), OP_THRESHOLD, 20),
    "sub": (_case_elementwise("sub"), OP_THRESHOLD, 20),
    "mul": (_case_elementwise("mul"), OP_THRESHOLD, 20),
    "scale": (_case_scale, OP_THRESHOLD, 20),
    "matmul": (_case_matmul, OP_THRESHOLD, 20),
    "reshape": (_case_reshape, OP_THRESHOLD, 20),
    "concat": (_case_concat, OP_THRESHOLD, 20),
    "reduce_sum": (_case_reduce("sum"), OP_THRESHOLD, 20),
    "reduce_mean": (_case_reduce("mean"), OP_THRESHOLD, 20),
    "reduce_max": (_case_reduce("max"), OP_THRESHOLD, 20),
    "relu": (_case_activation("relu"), OP_THRESHOLD, 20),
    "leaky_relu": (_case_activation("leaky_relu"), OP_THRESHOLD, 20),
    "sigmoid": (_case_activation("sigmoid"), OP_THRESHOLD, 20),
    "conv1d": (_case_conv1d, OP_THRESHOLD, 20),
    "batchnorm1d_train": (_case_batchnorm("train"), OP_THRESHOLD, 20),
    "batchnorm1d_eval": (_case_batchnorm("eval"), OP_THRESHOLD, 20),
    "avg_pool1d": (_case_avg_pool, OP_THRESHOLD, 20),
    "global_avg_pool": (_case_gap, OP_THRESHOLD, 20),
    "dropout": (_case_dropout, OP_THRESHOLD, 20),
    "linear": (_case_linear, OP_THRESHOLD, 20),
    "mse_loss": (_case_mse, OP_THRESHOLD, 20),
    "channel_attention": (_case_channel_attention, OP_THRESHOLD, 20),
    "spatial_attention": (_case_spatial_attention, OP_THRESHOLD, 20),
    "apply_cbam": (_case_apply_cbam, OP_THRESHOLD, 20),
    "conv_bn_leaky_composite": (_case_composite, OP_THRESHOLD, 20),
    "residual_module": (_case_residual, OP_THRESHOLD, 5, DEEP_STEP),
    "aicrn_end_to_end": (_case_end_to_end, END_TO_END_THRESHOLD, 1, DEEP_STEP),
}


def run_case(name: str, seed: int = 0, trials: int | None = None) -> CaseResult:
    builder, threshold, default_trials, *rest = CASES[name]
    step = rest[0] if rest else STEP
    n = default_trials if trials is None else trials
    result = CaseResult(name, 0.0, threshold, n)
    for trial in range(n):
        rng = np.random.default_rng([seed, trial, sum(map(ord, name))])
        fn, leaves = builder(rng)
        gc = check_gradients(fn, leaves, step)
        result.error = max(result.error, gc.error)
        result.checked += gc.checked
        result.straddled += gc.straddled
    return result


def run_suite(seed: int = 0, names=None) -> list[CaseResult]:
    return [run_case(name, seed) for name in (names or CASES)]
