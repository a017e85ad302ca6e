"""
Dense tensor arithmetic on top of torch autograd.
Shape-checked products, transformer kernels, gradient extraction, the straight-through
estimator and a read-only view of the recorded gradient graph.
"""
import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from bitsplit.exceptions import GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-12


def configure_determinism(num_threads: Optional[int] = None) -> None:
    """64-bit default dtype and deterministic kernels; optionally pin intra-op threads."""
    torch.set_default_dtype(torch.float64)
    torch.use_deterministic_algorithms(True)
    if num_threads is not None:
        torch.set_num_threads(num_threads)


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; returns a dedicated torch generator."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(what)
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product a[..., m, k] @ b[..., k, n]."""
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError("matmul needs at least 2-d operands", tuple(a.shape), tuple(b.shape))
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul inner dimensions disagree", tuple(a.shape), tuple(b.shape))
    return torch.matmul(a, b)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """x[..., in] against weight[out, in], plus an optional bias[out]."""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError("linear input width disagrees with weight", tuple(x.shape), tuple(weight.shape))
    squeeze = x.dim() == 1
    out = matmul(x.unsqueeze(0) if squeeze else x, weight.transpose(-1, -2))
    if bias is not None:
        out = out + bias
    return out.squeeze(0) if squeeze else out


# Kernels
def softmax(x: torch.Tensor) -> torch.Tensor:
    check_finite(x, "softmax input")
    return torch.softmax(x, dim=-1)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    check_finite(x, "layer_norm input")
    return F.layer_norm(x, x.shape[-1:], gain, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))."""
    check_finite(x, "gelu input")
    return F.gelu(x, approximate="tanh")


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean hard-label cross-entropy over the batch."""
    check_finite(logits, "logits")
    if logits.shape[0] != labels.shape[0]:
        raise ShapeError("logits and labels disagree on batch size", tuple(logits.shape), tuple(labels.shape))
    return F.cross_entropy(logits, labels)


# Gradients
def backward(loss: torch.Tensor, params: Sequence[torch.Tensor], write_grad: bool = False) -> list[torch.Tensor]:
    """
    Gradients of a scalar loss with respect to params.
    Parameters the loss does not depend on get zero gradients.
    With write_grad the results are also stored in each parameter's .grad
    (left as None for unused parameters so optimizers skip them).
    """
    if loss.numel() != 1:
        raise ShapeError("backward needs a scalar loss", tuple(loss.shape))
    if loss.grad_fn is None:
        raise GraphError("loss was not produced by recorded operations")
    check_finite(loss.detach(), "loss")
    params = list(params)
    raw = torch.autograd.grad(loss, params, allow_unused=True)
    if write_grad:
        for p, g in zip(params, raw):
            p.grad = None if g is None else g.detach().clone()
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, raw)]


class StraightThroughEstimator(torch.autograd.Function):
    """
    Forward: apply the quantizer.
    Backward: pass the incoming gradient through unchanged.
    """

    @staticmethod
    def forward(ctx, x: torch.Tensor, quant_fn: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
        return quant_fn(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor) -> tuple[torch.Tensor, None]:
        return grad_output, None


def ste(x: torch.Tensor, quant_fn: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """Quantize x in the forward pass with an identity Jacobian in the backward pass."""
    return StraightThroughEstimator.apply(x, quant_fn)


def numerical_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar function, one element at a time."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat_x = x.view(-1)
    flat_g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat_x.numel()):
            original = flat_x[i].item()
            flat_x[i] = original + step
            plus = float(fn(x))
            flat_x[i] = original - step
            minus = float(fn(x))
            flat_x[i] = original
            flat_g[i] = (plus - minus) / (2 * step)
    return grad


# Graph inspection
@dataclass
class GradRecord:
    """One node of a recorded gradient graph."""
    node_id: int
    op: str
    parent_ids: tuple[int, ...]
    saved: dict[str, tuple[int, ...]] = field(default_factory=dict)


def _saved_shapes(fn) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name in dir(fn):
        if not name.startswith("_saved_"):
            continue
        try:
            value = getattr(fn, name)
        except RuntimeError:
            # buffers already freed by a previous backward
            continue
        if isinstance(value, torch.Tensor):
            shapes[name[len("_saved_"):]] = tuple(value.shape)
    variable = getattr(fn, "variable", None)
    if isinstance(variable, torch.Tensor):
        shapes["variable"] = tuple(variable.shape)
    return shapes


def trace_graph(loss: torch.Tensor) -> list[GradRecord]:
    """
    Snapshot the autograd graph behind a loss.
    Nodes are numbered in discovery order from the loss; parents are the nodes the
    backward pass flows into. Each node appears once.
    """
    if loss.grad_fn is None:
        raise GraphError("loss was not produced by recorded operations")

    ids: dict = {}
    order: list = []
    stack = [loss.grad_fn]
    while stack:
        fn = stack.pop()
        if fn in ids:
            continue
        ids[fn] = len(order)
        order.append(fn)
        for parent, _ in reversed(fn.next_functions):
            if parent is not None and parent not in ids:
                stack.append(parent)

    records = [
        GradRecord(
            node_id=ids[fn],
            op=type(fn).__name__,
            parent_ids=tuple(ids[p] for p, _ in fn.next_functions if p is not None),
            saved=_saved_shapes(fn),
        )
        for fn in order
    ]
    _check_acyclic(records)
    logger.debug("Traced %d autograd nodes", len(records))
    return records


def _check_acyclic(records: list[GradRecord]) -> None:
    state = [0] * len(records)  # 0 new, 1 on stack, 2 done
    for root in range(len(records)):
        if state[root]:
            continue
        stack = [(root, iter(records[root].parent_ids))]
        state[root] = 1
        while stack:
            node, parents = stack[-1]
            nxt = next(parents, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state[nxt] == 1:
                raise GraphError(f"cycle through node {nxt}")
            elif state[nxt] == 0:
                state[nxt] = 1
                stack.append((nxt, iter(records[nxt].parent_ids)))
