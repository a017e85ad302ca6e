"""
Loss-landscape grids and curvature (top Hessian eigenvalue) diagnostics.

Perturbations are applied to latent weights; quantizers then act as the model dictates.
Hessians are taken of the training loss with respect to latent weights, with gradients
flowing through quantizers by the straight-through rule, using finite differences of
gradients for Hessian-vector products.
"""
import logging
import statistics
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from bitsplit.distillation import task_loss
from bitsplit.exceptions import ConfigurationError
from bitsplit.numerics import backward
from bitsplit.tasks import Examples
from bitsplit.transformer import TRANSFORMER_PARTS, PartTag, QuantBert, modules_by_tag, resolve_modules

logger = logging.getLogger(__name__)

GRID_STEPS = 5
HVP_RELATIVE_STEP = 1e-3
POWER_MAX_ITER = 100
POWER_TOL = 1e-4

Vector = torch.Tensor


@dataclass
class LandscapeGrid:
    """Loss over a (2k+1) x (2k+1) grid of perturbations of two parameter groups."""
    tag_a: str
    tag_b: str
    fractions: list[float]
    scale_a: float
    scale_b: float
    losses: np.ndarray

    @property
    def center(self) -> float:
        k = len(self.fractions) // 2
        return float(self.losses[k, k])

    def rows(self) -> list[dict]:
        return [
            {
                "tag_a": self.tag_a,
                "tag_b": self.tag_b,
                "x": fx * self.scale_a,
                "y": fy * self.scale_b,
                "fraction_x": fx,
                "fraction_y": fy,
                "loss": float(self.losses[i, j]),
            }
            for i, fx in enumerate(self.fractions)
            for j, fy in enumerate(self.fractions)
        ]


def grid_fractions(k: int = GRID_STEPS) -> list[float]:
    """-1, ..., 0, ..., 1 in steps of 1/k."""
    if k < 1:
        raise ConfigurationError(f"grid needs at least one step per side, got {k}")
    return [i / k for i in range(-k, k + 1)]


def loss_grid(
    group_a: Sequence[torch.Tensor],
    group_b: Sequence[torch.Tensor],
    loss_fn: Callable[[], float],
    scale_a: float,
    scale_b: float,
    k: int = GRID_STEPS,
    share_a: int = 1,
    share_b: int = 1,
) -> np.ndarray:
    """
    Evaluate loss_fn with x added to every entry of group_a and y to group_b.
    A group realized as several branches takes x / share on each. Tensors are restored exactly.
    """
    fractions = grid_fractions(k)
    saved = [t.detach().clone() for t in (*group_a, *group_b)]
    losses = np.zeros((len(fractions), len(fractions)))
    try:
        for i, fx in enumerate(fractions):
            for j, fy in enumerate(fractions):
                with torch.no_grad():
                    for t, original in zip((*group_a, *group_b), saved):
                        t.copy_(original)
                    for t in group_a:
                        t.add_(fx * scale_a / share_a)
                    for t in group_b:
                        t.add_(fy * scale_b / share_b)
                losses[i, j] = float(loss_fn())
    finally:
        with torch.no_grad():
            for t, original in zip((*group_a, *group_b), saved):
                t.copy_(original)
    return losses


def _mean_abs_latent(modules) -> float:
    with torch.no_grad():
        total = sum(float(sum(m.branches).abs().sum()) for m in modules)
        count = sum(m.branches[0].numel() for m in modules)
    return total / count


def _branch_count(modules) -> int:
    counts = {len(m.branches) for m in modules}
    if len(counts) != 1:
        raise ConfigurationError("a tag group mixes single and paired matrices")
    return counts.pop()


def batch_loss(model: QuantBert, batch: Examples) -> float:
    """Task cross-entropy in eval mode."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        loss = float(task_loss(model(batch.input_ids, batch.token_type_ids).logits, batch.labels))
    model.train(was_training)
    return loss


def landscape_grid(model: QuantBert, tag_a: str, tag_b: str, batch: Examples, k: int = GRID_STEPS) -> LandscapeGrid:
    """Loss surface around the current latent weights of two tags, axes in fractions of mean |w|."""
    modules_a = resolve_modules(model, tag_a)
    modules_b = resolve_modules(model, tag_b)
    scale_a, scale_b = _mean_abs_latent(modules_a), _mean_abs_latent(modules_b)
    losses = loss_grid(
        [p for m in modules_a for p in m.branches],
        [p for m in modules_b for p in m.branches],
        lambda: batch_loss(model, batch),
        scale_a,
        scale_b,
        k,
        _branch_count(modules_a),
        _branch_count(modules_b),
    )
    logger.info("🗺️  Landscape %s x %s: center loss %.4f", tag_a, tag_b, losses[k, k])
    return LandscapeGrid(tag_a, tag_b, grid_fractions(k), scale_a, scale_b, losses)


# Curvature
@dataclass
class EigenResult:
    value: float
    converged: bool
    iterations: int


def power_iteration(
    hvp: Callable[[Vector], Vector],
    v0: Vector,
    max_iter: int = POWER_MAX_ITER,
    tol: float = POWER_TOL,
) -> EigenResult:
    """
    Dominant eigenvalue magnitude of a symmetric operator given by its products.
    Stops when the Rayleigh quotient changes by less than tol relative, or after max_iter
    products; the last estimate is returned either way.
    """
    v = v0 / v0.norm()
    estimate = None
    for iteration in range(1, max_iter + 1):
        hv = hvp(v)
        rayleigh = float(torch.dot(v, hv))
        norm = float(hv.norm())
        if norm == 0.0:
            return EigenResult(0.0, True, iteration)
        if estimate is not None and abs(rayleigh - estimate) < tol * abs(rayleigh):
            return EigenResult(abs(rayleigh), True, iteration)
        estimate = rayleigh
        v = hv / norm
    logger.warning("⚠️  Power method stopped after %d iterations without converging", max_iter)
    return EigenResult(abs(estimate), False, max_iter)


def hvp_step(w: Vector, v: Vector) -> float:
    """Finite-difference step 1e-3 * |w| / |v| (1e-3 / |v| at w = 0)."""
    w_norm = float(w.norm())
    return HVP_RELATIVE_STEP * (w_norm if w_norm > 0 else 1.0) / float(v.norm())


def fd_hvp(grad_fn: Callable[[Vector], Vector], w: Vector) -> Callable[[Vector], Vector]:
    """Hv = (g(w + eps v) - g(w - eps v)) / (2 eps)."""
    def product(v: Vector) -> Vector:
        eps = hvp_step(w, v)
        return (grad_fn(w + eps * v) - grad_fn(w - eps * v)) / (2 * eps)
    return product


def dense_hessian(grad_fn: Callable[[Vector], Vector], w: Vector, step: float = 1e-5) -> torch.Tensor:
    """Symmetrized finite-difference Hessian, one column per coordinate."""
    n = w.numel()
    columns = []
    for i in range(n):
        e = torch.zeros(n)
        e[i] = step
        columns.append((grad_fn(w + e) - grad_fn(w - e)) / (2 * step))
    hessian = torch.stack(columns, dim=1)
    return (hessian + hessian.T) / 2


def gradient_fn(model: QuantBert, params: Sequence[torch.nn.Parameter], batch: Examples) -> Callable[[Vector], Vector]:
    """Flat loss gradient at a given flat value of params; params are restored after each call."""
    params = list(params)

    def grad(vector: Vector) -> Vector:
        original = parameters_to_vector(params).detach().clone()
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                vector_to_parameters(vector, params)
            loss = task_loss(model(batch.input_ids, batch.token_type_ids).logits, batch.labels)
            return torch.cat([g.reshape(-1) for g in backward(loss, params)]).detach()
        finally:
            with torch.no_grad():
                vector_to_parameters(original, params)
            model.train(was_training)
    return grad


def top_eigenvalue(
    model: QuantBert,
    params: Sequence[torch.nn.Parameter],
    batch: Examples,
    seed: int = 0,
    max_iter: int = POWER_MAX_ITER,
    tol: float = POWER_TOL,
) -> EigenResult:
    """Power method on finite-difference Hessian-vector products of the latent training loss."""
    w = parameters_to_vector(params).detach().clone()
    v0 = torch.randn(w.numel(), generator=torch.Generator().manual_seed(seed))
    return power_iteration(fd_hvp(gradient_fn(model, params, batch), w), v0, max_iter, tol)


# Steepness
@dataclass
class EigenSample:
    model: str
    tag: str
    part: str
    layer: int
    batch: int
    value: float
    converged: bool


@dataclass
class SteepnessReport:
    """Top eigenvalues per part, layer and batch, with ratios against the full-precision model."""
    samples: list[EigenSample] = field(default_factory=list)
    summary: dict[str, dict[str, tuple[float, float]]] = field(default_factory=dict)
    ratios: dict[str, dict[str, tuple[float, float]]] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        rows = []
        for model, parts in self.summary.items():
            for part, (mean, std) in parts.items():
                ratio_mean, ratio_std = self.ratios.get(model, {}).get(part, (float("nan"), float("nan")))
                rows.append({
                    "model": model,
                    "part": part,
                    "lambda_mean": mean,
                    "lambda_std": std,
                    "ratio_mean": ratio_mean,
                    "ratio_std": ratio_std,
                })
        return rows


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    return statistics.fmean(values), statistics.stdev(values) if len(values) > 1 else 0.0


def steepness_report(
    models: Mapping[str, QuantBert],
    batches: Sequence[Examples],
    reference: str = "full",
    max_iter: int = POWER_MAX_ITER,
    tol: float = POWER_TOL,
) -> SteepnessReport:
    """
    lambda_max of each Transformer part in each layer, per model and batch, and the per-sample
    ratios against the reference model. Start vectors depend only on the part index and batch,
    so a model compared with itself has ratio 1.
    """
    if reference not in models:
        raise ConfigurationError(f"reference model '{reference}' is missing")
    report = SteepnessReport()
    values: dict[tuple[str, str, int, int], float] = {}
    for name, model in models.items():
        groups = modules_by_tag(model)
        for layer in range(model.spec.num_layers):
            for index, part in enumerate(TRANSFORMER_PARTS):
                tag = PartTag(part, layer)
                params = [p for m in groups[tag] for p in m.branches]
                for b, batch in enumerate(batches):
                    seed = 1000 * index + b
                    result = top_eigenvalue(model, params, batch, seed, max_iter, tol)
                    report.samples.append(EigenSample(name, str(tag), part.value, layer, b, result.value, result.converged))
                    values[(name, part.value, layer, b)] = result.value
        logger.info("📐 Curvature measured for %s model", name)

    for name in models:
        report.summary[name] = {}
        report.ratios[name] = {}
        for part in TRANSFORMER_PARTS:
            own = [s.value for s in report.samples if s.model == name and s.part == part.value]
            report.summary[name][part.value] = _mean_std(own)
            ratios = [
                values[(name, part.value, s.layer, s.batch)] / s.value
                for s in report.samples
                if s.model == reference and s.part == part.value and s.value > 0
                and (name, part.value, s.layer, s.batch) in values
            ]
            if ratios:
                report.ratios[name][part.value] = _mean_std(ratios)
    return report


# Quantization noise bound
@dataclass
class BoundCheck:
    matrix: str
    loss_increase: float
    bound: float
    noise_norm: float
    grad_norm: float
    top_eigenvalue: float

    @property
    def holds(self) -> bool:
        return self.loss_increase <= self.bound


def noise_bound_check(
    model: QuantBert,
    batch: Examples,
    names: Optional[Sequence[str]] = None,
    max_iter: int = POWER_MAX_ITER,
) -> tuple[list[BoundCheck], float]:
    """
    Per quantized matrix: the loss increase from quantizing it, l(w_hat) - l(w), against
    lambda_max * |w - w_hat|^2, where lambda_max is taken at the unquantized latent weights.
    The gradient norm there is reported since the first-order term is assumed to vanish.
    Returns the checks and the fraction that hold.
    """
    matrices = model.matrices()
    names = list(names) if names is not None else [n for n, m in matrices.items() if m.scheme.quantized]
    checks = []
    for name in names:
        module = matrices[name]
        params = list(module.branches)
        with torch.no_grad():
            latent = sum(module.branches)
            noise = latent - module.effective_weight()
        quantized_loss = batch_loss(model, batch)
        module.quantize_weights = False
        try:
            full_loss = batch_loss(model, batch)
            grad = gradient_fn(model, params, batch)(parameters_to_vector(params).detach().clone())
            eigen = top_eigenvalue(model, params, batch, max_iter=max_iter)
        finally:
            module.quantize_weights = True
        norm = float(noise.norm())
        checks.append(BoundCheck(
            matrix=name,
            loss_increase=quantized_loss - full_loss,
            bound=eigen.value * norm ** 2,
            noise_norm=norm,
            grad_norm=float(grad.norm()),
            top_eigenvalue=eigen.value,
        ))
    fraction = sum(c.holds for c in checks) / len(checks) if checks else 1.0
    logger.info("📏 Noise bound holds on %d of %d matrices", sum(c.holds for c in checks), len(checks))
    return checks, fraction
