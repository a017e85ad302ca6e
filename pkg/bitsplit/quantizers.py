"""
Weight and activation quantizers.
Ternary (threshold + scale), binary (sign + scale), symmetric uniform k-bit weights,
per-batch min-max activations and learned-step-size (LSQ) activations.
"""
import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional

import torch
from torch import nn

from bitsplit.exceptions import ConfigurationError, QuantizerStateError
from bitsplit.numerics import ste
from bitsplit.schemas import Granularity, QuantScheme

logger = logging.getLogger(__name__)

TERNARY_THRESHOLD = 0.7
LSQ_MIN_STEP = 1e-8


def sign(w: torch.Tensor) -> torch.Tensor:
    """Sign with sign(0) = +1."""
    return torch.where(w >= 0, torch.ones_like(w), -torch.ones_like(w))


def _reduce_dims(w: torch.Tensor, granularity: Granularity) -> Optional[tuple[int, ...]]:
    if granularity == "row":
        if w.dim() < 2:
            raise ConfigurationError("row granularity needs a matrix")
        return (-1,)
    return tuple(range(w.dim()))


@dataclass
class TernaryResult:
    """Ternary image of a latent tensor. Masks partition the entries into I, J and K."""
    latent: torch.Tensor
    w_hat: torch.Tensor
    alpha: torch.Tensor
    delta: torch.Tensor
    support: torch.Tensor
    zero_pos: torch.Tensor
    zero_neg: torch.Tensor
    granularity: Granularity = "matrix"


@dataclass
class BinaryResult:
    w_hat: torch.Tensor
    alpha: torch.Tensor
    granularity: Granularity = "matrix"


def ternarize(w: torch.Tensor, granularity: Granularity = "matrix") -> TernaryResult:
    """
    Per group: delta = 0.7 * mean|w|, support I = {|w| >= delta}, alpha = mean of |w| over I.
    Entries outside I with w > 0 form J; the rest (w <= 0) form K.
    An all-zero group keeps every entry in I with alpha = 0.
    """
    w = w.detach()
    dims = _reduce_dims(w, granularity)
    absw = w.abs()
    delta = TERNARY_THRESHOLD * absw.mean(dim=dims, keepdim=True)
    support = absw >= delta
    count = support.sum(dim=dims, keepdim=True).clamp_min(1)
    alpha = (absw * support).sum(dim=dims, keepdim=True) / count
    w_hat = alpha * sign(w) * support
    outside = ~support
    return TernaryResult(
        latent=w,
        w_hat=w_hat,
        alpha=alpha,
        delta=delta,
        support=support,
        zero_pos=outside & (w > 0),
        zero_neg=outside & (w <= 0),
        granularity=granularity,
    )


def binarize(
    w: torch.Tensor,
    granularity: Granularity = "matrix",
    scale_rule: Literal["mean", "ternary"] = "mean",
) -> BinaryResult:
    """
    alpha * sign(w) with alpha = mean|w| per group.
    scale_rule='ternary' reuses the ternary scale of the same weights instead.
    """
    w = w.detach()
    if scale_rule == "ternary":
        alpha = ternarize(w, granularity).alpha
    else:
        alpha = w.abs().mean(dim=_reduce_dims(w, granularity), keepdim=True)
    return BinaryResult(w_hat=alpha * sign(w), alpha=alpha, granularity=granularity)


def quantize_uniform_weight(w: torch.Tensor, bits: int, granularity: Granularity = "matrix") -> torch.Tensor:
    """Symmetric absmax grid with 2^bits - 1 levels including 0; round half to even."""
    if bits < 2:
        raise ConfigurationError(f"uniform weight quantization needs at least 2 bits, got {bits}")
    w = w.detach()
    levels = 2 ** (bits - 1) - 1
    absmax = w.abs().amax(dim=_reduce_dims(w, granularity), keepdim=True)
    safe = torch.where(absmax > 0, absmax, torch.ones_like(absmax))
    q = torch.round(w / (safe / levels)).clamp(-levels, levels)
    return torch.where(absmax > 0, (q / levels) * absmax, torch.zeros_like(w))


def quantize_activation_minmax(x: torch.Tensor, bits: int = 8) -> torch.Tensor:
    """
    Symmetric grid from the batch absmax: 2^bits levels absmax * (2i - m) / m, m = 2^bits - 1.
    Endpoints are exact and the rounding error is at most absmax / m.
    """
    x = x.detach()
    m = 2 ** bits - 1
    absmax = x.abs().max()
    if absmax == 0:
        return torch.zeros_like(x)
    i = torch.round((x / absmax * m + m) / 2).clamp(0, m)
    return absmax * (2 * i - m) / m


def quantize_weight(w: torch.Tensor, scheme: QuantScheme, scale_rule: str = "mean") -> torch.Tensor:
    """Quantized image of a latent weight with straight-through gradients."""
    if scheme.kind == "full":
        return w
    if scheme.kind == "ternary":
        return ste(w, lambda t: ternarize(t, scheme.granularity).w_hat)
    if scheme.kind == "binary":
        return ste(w, lambda t: binarize(t, scheme.granularity, scale_rule).w_hat)
    return ste(w, lambda t: quantize_uniform_weight(t, scheme.bits, scheme.granularity))


def lsq_bounds(bits: int, signed: bool) -> tuple[int, int]:
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


class LsqFunction(torch.autograd.Function):
    """
    x_hat = s * clip(round(x / s), qn, qp).
    d/dx is 1 inside the clip range and 0 outside; d/ds follows the LSQ rule scaled by grad_scale.
    """

    @staticmethod
    def forward(ctx, x, step, qn, qp, grad_scale):
        ctx.save_for_backward(x, step)
        ctx.other = qn, qp, grad_scale
        return (x / step).round().clamp(qn, qp) * step

    @staticmethod
    def backward(ctx, grad_output):
        x, step = ctx.saved_tensors
        qn, qp, grad_scale = ctx.other
        v = x / step
        below = (v < qn).to(x.dtype)
        above = (v > qp).to(x.dtype)
        middle = 1.0 - below - above
        grad_step = (below * qn + above * qp + middle * (v.round() - v)) * grad_output * grad_scale
        return middle * grad_output, grad_step.sum().reshape(step.shape), None, None, None


def lsq_quantize(x: torch.Tensor, step: torch.Tensor, bits: int, signed: bool = True) -> torch.Tensor:
    """LSQ quantization with gradient scale g = 1 / sqrt(N * qp)."""
    if float(step) <= 0:
        raise QuantizerStateError(float(step))
    qn, qp = lsq_bounds(bits, signed)
    grad_scale = 1.0 / math.sqrt(x.numel() * qp)
    return LsqFunction.apply(x, step, qn, qp, grad_scale)


class ActivationQuantizer(nn.Module):
    """Base activation quantizer; identity when disabled."""

    def __init__(self, bits: int = 32):
        super().__init__()
        self.bits = bits
        self.enabled = True

    def quantize(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.enabled or self.bits >= 32:
            return x
        return self.quantize(x)


class MinMaxQuantizer(ActivationQuantizer):
    """Per-batch absmax uniform quantizer with straight-through gradients."""

    def quantize(self, x):
        return ste(x, lambda t: quantize_activation_minmax(t, self.bits))


class LsqQuantizer(ActivationQuantizer):
    """Learned step size; initialized from the first batch as 2 * mean|x| / sqrt(qp)."""

    def __init__(self, bits: int = 8, signed: bool = True):
        super().__init__(bits)
        self.signed = signed
        self.step = nn.Parameter(torch.tensor(1.0))
        self.register_buffer("initialized", torch.tensor(False))

    def quantize(self, x):
        if not bool(self.initialized):
            _, qp = lsq_bounds(self.bits, self.signed)
            init = 2 * x.detach().abs().mean() / math.sqrt(qp)
            with torch.no_grad():
                self.step.fill_(max(float(init), LSQ_MIN_STEP))
                self.initialized.fill_(True)
        return lsq_quantize(x, self.step, self.bits, self.signed)

    def clamp_step(self) -> None:
        """Keep the step strictly positive after an optimizer update."""
        with torch.no_grad():
            self.step.clamp_(min=LSQ_MIN_STEP)


def make_activation_quantizer(kind: str, bits: int, signed: bool = True) -> ActivationQuantizer:
    if bits >= 32:
        return ActivationQuantizer(32)
    if kind == "minmax":
        return MinMaxQuantizer(bits)
    if kind == "lsq":
        return LsqQuantizer(bits, signed)
    raise ConfigurationError(f"Unknown activation quantizer '{kind}'")
