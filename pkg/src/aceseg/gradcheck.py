"""Finite-difference verification of analytic gradients.

Each registered case builds float64 inputs, a forward closure producing a
scalar, and runs central differences (f(x+eps) - f(x-eps)) / 2eps against
the tape gradients for every learnable element. Offsets for the
deformable cases are drawn so that no sampling point comes within 1e-3 of
an integer grid line, where bilinear interpolation has a kink.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .errors import ConfigError
from .ops import ConvParams, OffsetField
from .tensor import Tape, Tensor, backward

OFFGRID_MARGIN = 0.05


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    tolerance: float
    passed: bool
    per_input: dict[str, float]

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"op={self.op} max_rel_err={self.max_rel_error:.3e} "
                f"tol={self.tolerance:.1e} {status}")


@dataclass
class GradCase:
    """Named learnable inputs plus a forward closure reading their data."""

    inputs: dict[str, Tensor]
    forward: Callable[[], Tensor]


def _weighted_sum(t: Tensor, r: np.ndarray) -> Tensor:
    """Random-projection loss: catches transposition bugs a plain sum hides."""
    return ops.sum_all(ops.mul(t, Tensor(r)))


def _push_offgrid(raw: np.ndarray) -> np.ndarray:
    """Squeeze fractional parts into [margin, 1 - margin].

    The integer tap grid plus these offsets then stays clear of grid lines,
    keeping the bilinear kernel differentiable at the sampled points.
    """
    base = np.floor(raw)
    frac = raw - base
    return base + OFFGRID_MARGIN + frac * (1.0 - 2.0 * OFFGRID_MARGIN)


def _case_conv2d(rng: np.random.Generator) -> GradCase:
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 3, 1, 1)), requires_grad=True)
    p = ConvParams(3, 3, stride=2, padding=2, dilation=2)
    r = rng.normal(size=(1, 3) + p.out_size(5, 5))
    return GradCase({"x": x, "w": w, "b": b},
                    lambda: _weighted_sum(ops.conv2d(x, w, b, p), r))


def _case_bilinear_sample(rng: np.random.Generator) -> GradCase:
    plane = Tensor(rng.normal(size=(1, 1, 4, 5)), requires_grad=True)
    row = Tensor(_push_offgrid(rng.uniform(0, 3, size=(1, 1, 1, 1))), requires_grad=True)
    col = Tensor(_push_offgrid(rng.uniform(0, 4, size=(1, 1, 1, 1))), requires_grad=True)
    return GradCase({"plane": plane, "row": row, "col": col},
                    lambda: ops.bilinear_sample(plane, row, col))


def _deform_case(rng: np.random.Generator, modulated: bool) -> GradCase:
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
    p = ConvParams(3, 3, padding=1)
    off = Tensor(_push_offgrid(rng.uniform(-1.6, 1.6, size=(1, 18, 5, 5))),
                 requires_grad=True)
    inputs = {"x": x, "w": w, "offsets": off}
    r = rng.normal(size=(1, 2, 5, 5))
    if modulated:
        mod = Tensor(rng.uniform(0.1, 0.9, size=(1, 9, 5, 5)), requires_grad=True)
        inputs["modulation"] = mod
        fwd = lambda: _weighted_sum(
            ops.deform_conv_v2(x, w, OffsetField(off, mod), p), r)
    else:
        fwd = lambda: _weighted_sum(
            ops.deform_conv_v1(x, w, OffsetField(off), p), r)
    return GradCase(inputs, fwd)


def _case_offset_predictor(rng: np.random.Generator) -> GradCase:
    x = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(27, 3, 3, 3)) * 0.2, requires_grad=True)
    b = Tensor(rng.normal(size=(1, 27, 1, 1)) * 0.2, requires_grad=True)
    ro = rng.normal(size=(1, 18, 4, 4))
    rm = rng.normal(size=(1, 9, 4, 4))

    def fwd():
        field = ops.offset_predictor(x, w, b)
        return ops.add(_weighted_sum(field.offsets, ro),
                       _weighted_sum(field.modulation, rm))

    return GradCase({"x": x, "w_off": w, "b_off": b}, fwd)


def _case_batch_norm(rng: np.random.Generator) -> GradCase:
    x = Tensor(rng.normal(2.0, 1.5, size=(2, 3, 4, 4)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=(1, 3, 1, 1)), requires_grad=True)
    beta = Tensor(rng.normal(size=(1, 3, 1, 1)), requires_grad=True)
    r = rng.normal(size=(2, 3, 4, 4))
    return GradCase({"x": x, "gamma": gamma, "beta": beta},
                    lambda: _weighted_sum(ops.batch_norm(x, gamma, beta, training=True), r))


def _case_relu(rng: np.random.Generator) -> GradCase:
    # strictly positive input: the linear region, far from the kink at zero
    x = Tensor(np.abs(rng.normal(size=(1, 2, 4, 4))) + 0.5, requires_grad=True)
    r = rng.normal(size=(1, 2, 4, 4))
    return GradCase({"x": x}, lambda: _weighted_sum(ops.relu(x), r))


def _case_adaptive_avg_pool(rng: np.random.Generator) -> GradCase:
    x = Tensor(rng.normal(size=(1, 3, 5, 7)), requires_grad=True)
    r = rng.normal(size=(1, 3, 2, 3))
    return GradCase({"x": x}, lambda: _weighted_sum(ops.adaptive_avg_pool(x, 2, 3), r))


def _case_upsample_bilinear(rng: np.random.Generator) -> GradCase:
    x = Tensor(rng.normal(size=(1, 2, 3, 4)), requires_grad=True)
    r = rng.normal(size=(1, 2, 7, 5))
    return GradCase({"x": x}, lambda: _weighted_sum(ops.upsample_bilinear(x, 7, 5), r))


def _case_softmax_cross_entropy(rng: np.random.Generator) -> GradCase:
    logits = Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 0, 0] = 255
    return GradCase({"logits": logits},
                    lambda: ops.softmax_cross_entropy(logits, labels))


def _case_ace_head(rng: np.random.Generator) -> GradCase:
    # imported here: heads depends on ops, and the registry lives below it
    from .heads import ACEHead, HeadConfig

    head = ACEHead(HeadConfig(in_channels=8, num_classes=2), rng)
    head.cast_(np.float64)
    # push the zero-initialized offset predictors to a differentiable point:
    # small random weights plus a mid-cell bias keep every sampling
    # coordinate well away from the integer grid
    for block in head.blocks:
        ow = block.offset_conv.weight
        ob = block.offset_conv.bias
        k2 = ow.shape[0] // 3
        ow.data = rng.normal(size=ow.shape) * 3e-3
        ob.data = np.concatenate([
            rng.uniform(0.30, 0.45, size=(1, 2 * k2, 1, 1)),
            rng.normal(size=(1, k2, 1, 1)) * 0.3,
        ], axis=1)
    x = Tensor(rng.normal(size=(1, 8, 6, 6)), requires_grad=True)
    inputs = {"x": x}
    for name, p in head.named_parameters():
        inputs[name] = p
    r = rng.normal(size=(1, 1, 6, 6))

    # sanity: all sampling fractions must sit off the grid
    cur = Tensor(x.data.copy())
    for block in head.blocks:
        field = ops.offset_predictor(cur, Tensor(block.offset_conv.weight.data),
                                     Tensor(block.offset_conv.bias.data))
        frac = field.offsets.data - np.floor(field.offsets.data)
        dist = np.minimum(frac, 1.0 - frac).min()
        if dist < 1e-3:
            raise ConfigError("ace_head gradcheck seed produced on-grid sampling points")
        cur = block(cur)

    return GradCase(inputs, lambda: _weighted_sum(head(x), r))


CASES: dict[str, Callable[[np.random.Generator], GradCase]] = {
    "conv2d": _case_conv2d,
    "bilinear_sample": _case_bilinear_sample,
    "deform_conv_v1": lambda rng: _deform_case(rng, modulated=False),
    "deform_conv_v2": lambda rng: _deform_case(rng, modulated=True),
    "offset_predictor": _case_offset_predictor,
    "batch_norm": _case_batch_norm,
    "relu": _case_relu,
    "adaptive_avg_pool": _case_adaptive_avg_pool,
    "upsample_bilinear": _case_upsample_bilinear,
    "softmax_cross_entropy": _case_softmax_cross_entropy,
    "ace_head": _case_ace_head,
}


def registered_ops() -> list[str]:
    return sorted(CASES)


def grad_check(op: str, seed: int = 0, epsilon: float = 1e-6,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients with central finite differences for one op."""
    if op not in CASES:
        raise ConfigError(f"unknown op '{op}'; known: {', '.join(registered_ops())}")
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    case = CASES[op](np.random.default_rng(seed))

    with Tape() as tape:
        loss = case.forward()
    backward(tape, loss)
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in case.inputs.items()}

    def eval_loss() -> float:
        return case.forward().item()

    per_input: dict[str, float] = {}
    worst = 0.0
    for name, t in case.inputs.items():
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = eval_loss()
            flat[i] = orig - epsilon
            fm = eval_loss()
            flat[i] = orig
            num = (fp - fm) / (2.0 * epsilon)
            ana = float(a_flat[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            err = max(err, rel)
        per_input[name] = err
        worst = max(worst, err)

    return GradCheckReport(op=op, max_rel_error=worst, tolerance=tolerance,
                           passed=worst <= tolerance, per_input=per_input)
