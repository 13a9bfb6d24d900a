"""Central finite-difference verification of the analytic gradients.

``gradcheck`` compares backprop against ``(f(x + h) - f(x - h)) / 2h`` on a
seeded subset of input and parameter entries.  ``SUITE`` registers every
differentiable op, layer and loss of the package; ``run_suite`` executes it
in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import NumericError
from .exchange import ExchangeMode, FusionMode, YtmtBlock, ytmt_exchange
from .losses import (Discriminator, FeatureExtractor, LossWeights, adversarial_losses, exclusion_loss,
                     grad_xy, perceptual_loss, reconstruction_loss)
from .networks import NetConfig, build_network
from .tensor import Parameter, Tensor

F64 = np.float64


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _scalar(out: Tensor, weights: Optional[np.ndarray]) -> Tensor:
    if out.size == 1 and weights is None:
        return T.sum_(out)
    return T.sum_(out * Tensor(weights))


def gradcheck(fn: Callable, inputs: Sequence[np.ndarray], params: Sequence[Parameter] = (),
              step: float = 1e-6, seed: int = 0, max_checks: int = 40, floor: float = 1e-6,
              name: str = "op") -> GradReport:
    """Max relative error between analytic and numeric gradients.

    ``fn(*tensors)`` may return any shape; non-scalar outputs are reduced with
    fixed random weights so every output element contributes.  The relative
    error of one entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(seed)
    arrays = [np.array(x, dtype=F64) for x in inputs]

    def evaluate() -> float:
        with T.no_grad():
            out = fn(*[Tensor(a) for a in arrays])
        val = float(_scalar(out, weights).data)
        if not np.isfinite(val):
            raise NumericError(f"{name}: non-finite output during finite differences")
        return val

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    if not np.all(np.isfinite(out.data)):
        raise NumericError(f"{name}: non-finite output")
    weights = None if out.size == 1 else rng.standard_normal(out.shape)
    for p in params:
        p.grad = None
    _scalar(out, weights).backward()

    targets = [(a, leaf.grad) for a, leaf in zip(arrays, leaves)]
    targets += [(p.data, p.grad) for p in params]
    worst_rel = worst_abs = 0.0
    checked = 0
    for data, grad in targets:
        grad = np.zeros_like(data) if grad is None else grad
        flat = data.reshape(-1)
        picks = rng.choice(flat.size, size=min(max_checks, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate()
            flat[i] = orig - step
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            analytic = float(grad.reshape(-1)[i])
            err = abs(analytic - numeric)
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, err / max(abs(analytic), abs(numeric), floor))
            checked += 1
    return GradReport(name, worst_rel, worst_abs, checked)


# -- input samplers ---------------------------------------------------------
def away_from_zero(rng, shape, margin: float = 0.05) -> np.ndarray:
    """Uniform magnitudes in [margin, 1] with random signs."""
    return rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def distinct_values(rng, shape, gap: float = 0.01) -> np.ndarray:
    """Entries pairwise at least ``gap`` apart (no max-pool ties)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(0, gap / 10, size=n)).reshape(shape)


def _positive(rng, shape):
    return rng.uniform(0.2, 1.5, size=shape)


def _min_gradient_magnitude(x: np.ndarray, levels: int) -> float:
    t = Tensor(x)
    lowest = np.inf
    for n in range(levels):
        if n:
            t = L.downsample_bilinear(t)
        gx, gy = grad_xy(t)
        lowest = min(lowest, float(np.abs(gx.data).min()), float(np.abs(gy.data).min()))
    return lowest


def _exclusion_pair(rng, shape, levels: int, margin: float = 1e-3):
    while True:
        a, b = rng.uniform(0, 1, size=shape), rng.uniform(0, 1, size=shape)
        if min(_min_gradient_magnitude(a, levels), _min_gradient_magnitude(b, levels)) > margin:
            return a, b


# -- registry ----------------------------------------------------------------------
@dataclass
class GradCase:
    name: str
    build: Callable  # rng -> (fn, inputs, params)
    # Whole blocks and networks have entries with gradients near 1e-6 where
    # double-precision cancellation (~1e-9 absolute) dominates; their
    # relative error is floored at 1e-4 gradient units instead of 1e-6.
    floor: float = 1e-6


COMPOSITE_FLOOR = 1e-4


def _params(module) -> list:
    return [p for _, p in module.named_parameters()]


def _elementwise(op):
    return lambda rng: (op, [away_from_zero(rng, (2, 3, 4))], [])


def _case_conv(k, bias):
    def build(rng):
        w = rng.standard_normal((3, 2, k, k))
        b = rng.standard_normal(3)
        if bias:
            return (lambda x, w_, b_: L.conv2d(x, w_, b_)), [rng.standard_normal((1, 2, 5, 5)), w, b], []
        return (lambda x, w_: L.conv2d(x, w_)), [rng.standard_normal((1, 2, 5, 5)), w], []
    return build


def _case_block(fusion, exchange):
    def build(rng):
        block = YtmtBlock(2, 4, exchange, fusion, reduction=2, rng=rng, dtype=F64)
        x1, x2 = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 2, 4, 4))

        def fn(a, b):
            y1, y2 = block(a, b)
            return T.concat([y1, y2], axis=1)
        return fn, [x1, x2], _params(block)
    return build


def _case_network(arch):
    def build(rng):
        cfg = NetConfig(architecture=arch, depth=2, base_channels=4, plain_blocks=2, reduction=2)
        net = build_network(cfg, rng, F64)

        def fn(x):
            t, r = net(x)
            return T.concat([t, r], axis=1)
        return fn, [rng.uniform(0, 1, (1, 3, 6, 6))], _params(net)
    return build


def _case_reconstruction(rng):
    shape = (2, 3, 6, 6)
    return (lambda a, b, c, d, e: reconstruction_loss(a, b, c, d, e, LossWeights()),
            [rng.uniform(0, 1, shape) for _ in range(5)], [])


def _case_perceptual(rng):
    # targets are constants of the objective: their features are taken without a tape
    ext = FeatureExtractor(dtype=F64)
    shape = (1, 3, 16, 16)
    t, r = Tensor(rng.uniform(0, 1, shape)), Tensor(rng.uniform(0, 1, shape))
    return (lambda a, b: perceptual_loss(a, b, t, r, ext),
            [rng.uniform(0, 1, shape) for _ in range(2)], [])


def _case_exclusion(rng):
    a, b = _exclusion_pair(rng, (1, 3, 8, 8), 3)
    return (lambda x, y: exclusion_loss(x, y, levels=3)), [a, b], []


def _case_adversarial(which):
    def build(rng):
        disc = Discriminator(width=4, rng=rng, dtype=F64)
        shape = (2, 3, 8, 8)

        def fn(t, th):
            gen, dis = adversarial_losses(t, th, disc)
            return gen if which == "gen" else dis
        return fn, [rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)], _params(disc)
    return build


def _case_attention(rng):
    unit = L.AttentionUnit(8, reduction=4, rng=rng, dtype=F64)
    return unit, [rng.standard_normal((1, 8, 3, 3))], _params(unit)


_IDX = (slice(None), slice(1, 3), slice(None, None, 2))

SUITE = [
    GradCase("add", lambda r: (T.add, [r.standard_normal((2, 3)), r.standard_normal((2, 3))], [])),
    GradCase("add_broadcast", lambda r: (T.add, [r.standard_normal((2, 3)), r.standard_normal((1, 3))], [])),
    GradCase("sub", lambda r: (T.sub, [r.standard_normal((2, 3)), r.standard_normal((2, 1))], [])),
    GradCase("mul", lambda r: (T.mul, [r.standard_normal((2, 3)), r.standard_normal((2, 3))], [])),
    GradCase("div", lambda r: (T.div, [r.standard_normal((2, 3)), _positive(r, (2, 3))], [])),
    GradCase("neg", _elementwise(T.neg)),
    GradCase("relu", _elementwise(T.relu)),
    GradCase("negative_relu", _elementwise(T.negative_relu)),
    GradCase("square", _elementwise(T.square)),
    GradCase("abs", _elementwise(T.abs_)),
    GradCase("sqrt", lambda r: (T.sqrt, [_positive(r, (2, 3))], [])),
    GradCase("exp", _elementwise(T.exp)),
    GradCase("log", lambda r: (T.log, [_positive(r, (2, 3))], [])),
    GradCase("sigmoid", _elementwise(T.sigmoid)),
    GradCase("tanh", _elementwise(T.tanh)),
    GradCase("clamp", lambda r: ((lambda x: T.clamp(x, -0.5, 0.5)),
                                 [np.array([-0.9, -0.3, 0.1, 0.45, 0.8, -0.6])], [])),
    GradCase("sum", lambda r: ((lambda x: T.sum_(x, axis=1)), [r.standard_normal((2, 3, 4))], [])),
    GradCase("mean", lambda r: ((lambda x: T.mean(x, axis=(0, 2), keepdims=True)), [r.standard_normal((2, 3, 4))], [])),
    GradCase("reshape", lambda r: ((lambda x: T.reshape(x, (6, 4))), [r.standard_normal((2, 3, 4))], [])),
    GradCase("getitem", lambda r: ((lambda x: T.getitem(x, _IDX)), [r.standard_normal((2, 4, 5))], [])),
    GradCase("concat", lambda r: ((lambda a, b: T.concat([a, b], axis=1)),
                                  [r.standard_normal((1, 2, 3, 3)), r.standard_normal((1, 3, 3, 3))], [])),
    GradCase("slice_channels", lambda r: ((lambda x: T.slice_channels(x, 1, 3)), [r.standard_normal((1, 4, 3, 3))], [])),
    GradCase("pad_edge", lambda r: ((lambda x: T.pad_edge(x, 1, 1)), [r.standard_normal((1, 2, 3, 3))], [])),
    GradCase("conv2d_3x3", _case_conv(3, bias=True)),
    GradCase("conv2d_3x3_nobias", _case_conv(3, bias=False)),
    GradCase("conv2d_1x1", _case_conv(1, bias=True)),
    GradCase("maxpool2", lambda r: (L.maxpool2, [distinct_values(r, (1, 2, 4, 4))], [])),
    GradCase("downsample_max_odd", lambda r: (L.downsample_max, [distinct_values(r, (1, 2, 5, 5))], [])),
    GradCase("avgpool2", lambda r: (L.avgpool2, [r.standard_normal((1, 2, 4, 4))], [])),
    GradCase("downsample_bilinear_odd", lambda r: (L.downsample_bilinear, [r.standard_normal((1, 2, 5, 3))], [])),
    GradCase("bilinear_up2", lambda r: (L.bilinear_up2, [r.standard_normal((1, 2, 3, 4))], [])),
    GradCase("upsample_to", lambda r: ((lambda x: L.upsample_to(x, 5, 7)), [r.standard_normal((1, 2, 3, 4))], [])),
    GradCase("global_avg_pool", lambda r: (L.global_avg_pool, [r.standard_normal((2, 3, 3, 4))], [])),
    GradCase("attention_unit", _case_attention),
    GradCase("exchange_ytmt_add", lambda r: ((lambda a, b: T.concat(list(ytmt_exchange(a, b, ExchangeMode.YTMT, FusionMode.ADD)), axis=1)),
                                             [away_from_zero(r, (1, 2, 3, 3)), away_from_zero(r, (1, 2, 3, 3))], [])),
    GradCase("exchange_ytmt_concat", lambda r: ((lambda a, b: T.concat(list(ytmt_exchange(a, b, ExchangeMode.YTMT, FusionMode.CONCAT)), axis=1)),
                                                [away_from_zero(r, (1, 2, 3, 3)), away_from_zero(r, (1, 2, 3, 3))], [])),
    GradCase("exchange_relu_only", lambda r: ((lambda a, b: T.concat(list(ytmt_exchange(a, b, ExchangeMode.RELU_ONLY, FusionMode.ADD)), axis=1)),
                                              [away_from_zero(r, (1, 2, 3, 3)), away_from_zero(r, (1, 2, 3, 3))], [])),
    GradCase("ytmt_block_concat", _case_block(FusionMode.CONCAT, ExchangeMode.YTMT), COMPOSITE_FLOOR),
    GradCase("ytmt_block_add", _case_block(FusionMode.ADD, ExchangeMode.YTMT), COMPOSITE_FLOOR),
    GradCase("block_no_exchange", _case_block(FusionMode.CONCAT, ExchangeMode.NONE), COMPOSITE_FLOOR),
    GradCase("ushaped_net", _case_network("ushaped"), COMPOSITE_FLOOR),
    GradCase("plain_net", _case_network("plain"), COMPOSITE_FLOOR),
    GradCase("loss_reconstruction", _case_reconstruction),
    GradCase("loss_perceptual", _case_perceptual),
    GradCase("loss_exclusion", _case_exclusion),
    GradCase("loss_adversarial_gen", _case_adversarial("gen")),
    GradCase("loss_adversarial_disc", _case_adversarial("disc")),
]


def run_suite(tol: float = 1e-4, seed: int = 0, step: float = 1e-6, max_checks: int = 40,
              names: Optional[Sequence[str]] = None) -> list:
    """Run the registered cases; returns ``[(report, passed)]``."""
    results = []
    for k, case in enumerate(SUITE):
        if names is not None and case.name not in names:
            continue
        rng = np.random.default_rng([seed, k])
        fn, inputs, params = case.build(rng)
        report = gradcheck(fn, inputs, params, step=step, seed=seed, max_checks=max_checks,
                           floor=case.floor, name=case.name)
        results.append((report, report.passed(tol)))
    return results
