"""
Ternary weight splitting: turn a ternary matrix into two binary branches whose latent
weights sum to the original latent weights and whose binarized images sum to the
original ternary image.
"""
import copy
import logging
from dataclasses import dataclass

import torch

from bitsplit.exceptions import ConfigurationError, DegenerateTernaryError
from bitsplit.quantizers import TernaryResult, binarize, ternarize
from bitsplit.schemas import QuantScheme
from bitsplit.transformer import QuantBert

logger = logging.getLogger(__name__)


@dataclass
class SplitResult:
    """Two latent branches with their split coefficients (per group) and diagnostics."""
    w1: torch.Tensor
    w2: torch.Tensor
    a: torch.Tensor
    b: torch.Tensor
    latent_error: float
    quantized_error: float


def tws_split(t: TernaryResult, tag: str = "matrix") -> SplitResult:
    """
    Split a ternary result into two binary-ready latent branches.

    Per group, with S_X the sum of |w| over index set X:
        a = (S_I - S_J + S_K) / (2 S_I)
        b = (n / |I| * S_I - S_all) / (2 (|J| + |K|)),  b = 0 when J and K are empty
    and
        I: w1 = a w,   w2 = (1 - a) w
        J: w1 = w + b, w2 = -b
        K: w1 = b,     w2 = w - b
    The larger-magnitude branch is computed from the formula and the other as w - w1,
    so w1 + w2 reproduces w bit-for-bit on I and wherever b <= |w|. Elsewhere two floats near b
    cannot sum to a much smaller w; the residual stays within half an ulp of b.
    """
    w = t.latent
    dims = (-1,) if t.granularity == "row" else tuple(range(w.dim()))
    absw = w.abs()
    support, zero_pos, zero_neg = t.support, t.zero_pos, t.zero_neg

    s_i = (absw * support).sum(dim=dims, keepdim=True)
    if bool((s_i == 0).any()):
        raise DegenerateTernaryError(tag)
    s_j = (absw * zero_pos).sum(dim=dims, keepdim=True)
    s_k = (absw * zero_neg).sum(dim=dims, keepdim=True)
    s_all = absw.sum(dim=dims, keepdim=True)
    n = absw.numel() // s_i.numel()
    n_i = support.sum(dim=dims, keepdim=True).to(w.dtype)
    n_jk = n - n_i

    a = (s_i - s_j + s_k) / (2 * s_i)
    b = torch.where(n_jk > 0, (n / n_i * s_i - s_all) / (2 * n_jk.clamp_min(1)), torch.zeros_like(s_i))

    w1_first = support & (a >= 0.5) | zero_pos
    formula1 = torch.where(support, a * w, w + b)
    formula2 = torch.where(support, (1 - a) * w, w - b)
    w1 = torch.where(w1_first, formula1, w - formula2)
    w2 = w - w1

    w_hat = binarize(w1, t.granularity).w_hat + binarize(w2, t.granularity).w_hat
    return SplitResult(
        w1=w1,
        w2=w2,
        a=a,
        b=b,
        latent_error=float((w1 + w2 - w).abs().max()),
        quantized_error=float((w_hat - t.w_hat).abs().max()),
    )


def split_model(model: QuantBert) -> QuantBert:
    """
    Copy a model and replace every ternary Single with a binary Pair.
    Binary matrices are copied unchanged; other schemes are rejected.
    """
    result = copy.deepcopy(model)
    split_count = 0
    worst_latent = worst_quantized = 0.0
    for name, module in result.matrices().items():
        kind = module.scheme.kind
        if kind == "binary":
            continue
        if kind != "ternary" or module.is_pair:
            raise ConfigurationError(f"'{name}' is {kind} with {len(module.branches)} branches; only ternary singles split")
        if module.scale_rule != "mean":
            raise ConfigurationError(f"'{name}' uses the '{module.scale_rule}' binary scale; splitting needs 'mean'")
        granularity = module.scheme.granularity
        split = tws_split(ternarize(module.branches[0].detach(), granularity), tag=name)
        module.set_branches([split.w1, split.w2], QuantScheme.binary(granularity))
        split_count += 1
        worst_latent = max(worst_latent, split.latent_error)
        worst_quantized = max(worst_quantized, split.quantized_error)
    logger.info(
        "✂️  Split %d ternary matrices (max latent error %.2e, max quantized error %.2e)",
        split_count, worst_latent, worst_quantized,
    )
    return result
