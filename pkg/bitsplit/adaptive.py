"""
Adaptive splitting: measure how much each part of a half-width binary model gains from staying
full precision, then choose which matrices to ternarize-then-split under a size budget.
"""
import logging
import math
import statistics
from functools import partial, reduce
from typing import Mapping, Optional, Sequence

import numpy as np

from bitsplit.accounting import CostModel, base_size, split_costs
from bitsplit.exceptions import BudgetError, ConfigurationError, MissingBaselineError
from bitsplit.pipeline import (
    Objective,
    StageTag,
    check_split,
    distill,
    evaluate,
    map_seeds,
    student_from_teacher,
    train_quantized,
    train_stage,
    train_teacher,
)
from bitsplit.schemas import GainStat, ModelSpec, QuantConfig, QuantScheme, SensitivityReport, SplitPlan, TrainConfig
from bitsplit.splitting import split_model
from bitsplit.tasks import Task
from bitsplit.transformer import (
    TRANSFORMER_PARTS,
    Part,
    QuantBert,
    matrix_names,
    matrix_shape,
    matrix_tag,
    plan_precision,
    uniform_precision,
)

logger = logging.getLogger(__name__)

VALUE_TOLERANCE = 1e-9
STRATEGIES = ("maximal", "minimal", "random")


# Leave-one-out groups
def _group_members(spec: ModelSpec) -> dict[str, list[str]]:
    """Matrices kept full precision for each leave-one-out configuration."""
    names = matrix_names(spec)
    groups: dict[str, list[str]] = {part.value: [] for part in TRANSFORMER_PARTS}
    for layer in range(spec.num_layers):
        groups[f"layer{layer}"] = []
    for name in names:
        tag = matrix_tag(name)
        if tag.layer is None:
            groups[tag.part.value] = [name]
        else:
            groups[tag.part.value].append(name)
            groups[f"layer{tag.layer}"].append(name)
    return groups


def _group_params(spec: ModelSpec, members: Sequence[str]) -> int:
    return sum(math.prod(matrix_shape(spec, name)) for name in members)


def leave_one_out_precision(spec: ModelSpec, keep_full: Sequence[str]) -> dict[str, QuantScheme]:
    """All-binary precision except the named matrices, which stay full precision."""
    precision = uniform_precision(spec, QuantScheme.binary())
    for name in keep_full:
        precision[name] = QuantScheme.full()
    return precision


def _sensitivity_seed(
    task: Task,
    spec: ModelSpec,
    config: TrainConfig,
    quant: QuantConfig,
    seed: int,
) -> dict[str, float]:
    teacher = train_teacher(task, spec.at_width(1.0), config, seed).model
    half = spec.at_width(0.5)
    accuracies = {}
    _, accuracies["baseline"] = train_quantized(task, half, leave_one_out_precision(half, []), config, quant, seed, teacher)
    for group, members in _group_members(half).items():
        _, accuracies[group] = train_quantized(
            task, half, leave_one_out_precision(half, members), config, quant, seed, teacher,
        )
        logger.info("🔬 Seed %d, %s full precision: %.3f", seed, group, accuracies[group])
    return accuracies


# Sensitivity
def _gain(samples: Sequence[float], baseline: Sequence[float]) -> GainStat:
    gains = [s - b for s, b in zip(samples, baseline)]
    mean = statistics.fmean(gains)
    return GainStat(mean=mean, std=statistics.stdev(gains) if len(gains) > 1 else 0.0, samples=gains)


def compute_sensitivity(
    spec: ModelSpec,
    accuracies: Mapping[str, Sequence[float]],
    scale_by_matrix_params: bool = False,
) -> SensitivityReport:
    """
    Sensitivity vector from per-seed leave-one-out accuracies.

    accuracies holds a 'baseline' entry (all binary) and one entry per part ('MHA-QK', ...,
    'Embedding', 'Pooler') and per layer ('layer0', ...). For a layer matrix of part p in
    layer l: u = max(gain_p, 0) / params_p + max(gain_l, 0) / params_l. The embedding and
    pooler use their own gains. With scale_by_matrix_params u is multiplied by the matrix's
    own parameter count.
    """
    baseline = accuracies.get("baseline")
    if not baseline:
        raise MissingBaselineError()
    groups = _group_members(spec)
    missing = [group for group in groups if group not in accuracies]
    if missing:
        raise ConfigurationError(f"missing leave-one-out results for: {', '.join(missing)}")

    gains = {group: _gain(accuracies[group], baseline) for group in groups}
    params = {group: _group_params(spec, members) for group, members in groups.items()}

    def per_param(group: str) -> float:
        return max(gains[group].mean, 0.0) / params[group]

    names = matrix_names(spec)
    u = []
    for name in names:
        tag = matrix_tag(name)
        value = per_param(tag.part.value)
        if tag.layer is not None:
            value += per_param(f"layer{tag.layer}")
        if scale_by_matrix_params:
            value *= math.prod(matrix_shape(spec, name))
        u.append(value)

    layers = range(spec.num_layers)
    return SensitivityReport(
        baseline=GainStat(mean=statistics.fmean(baseline), std=statistics.stdev(baseline) if len(baseline) > 1 else 0.0,
                          samples=list(baseline)),
        part_gains={part.value: gains[part.value] for part in TRANSFORMER_PARTS},
        layer_gains={layer: gains[f"layer{layer}"] for layer in layers},
        embedding_gain=gains[Part.EMBEDDING.value],
        pooler_gain=gains[Part.POOLER.value],
        part_params={part.value: params[part.value] for part in TRANSFORMER_PARTS},
        layer_params={layer: params[f"layer{layer}"] for layer in layers},
        embedding_params=params[Part.EMBEDDING.value],
        pooler_params=params[Part.POOLER.value],
        matrix_names=names,
        u=u,
    )


def measure_sensitivity(
    task: Task,
    spec: ModelSpec,
    config: TrainConfig,
    quant: QuantConfig,
    seeds: Sequence[int],
    workers: int = 1,
    scale_by_matrix_params: bool = False,
) -> SensitivityReport:
    """Leave-one-out gains of parts, layers, embedding and pooler over the half-width binary model."""
    per_seed = map_seeds(partial(_sensitivity_seed, task, spec, config, quant), seeds, workers)
    accuracies: dict[str, list[float]] = {}
    for result in per_seed:
        for group, accuracy in result.items():
            accuracies.setdefault(group, []).append(accuracy)
    return compute_sensitivity(spec.at_width(0.5), accuracies, scale_by_matrix_params)


# Selection
def knapsack_select(u: Sequence[float], costs: Sequence[int], budget: int) -> tuple[list[int], float]:
    """
    Exact 0/1 knapsack: maximize u.s subject to costs.s <= budget.
    Among optimal selections the cheapest wins, then the lexicographically largest s.
    """
    if budget < 0:
        raise BudgetError(0, budget)
    if len(u) != len(costs):
        raise ConfigurationError("sensitivity and cost vectors differ in length")
    if any(c <= 0 for c in costs):
        raise ConfigurationError("split costs must be positive")
    z = len(u)
    if z == 0:
        return [], 0.0

    # shared divisor keeps the table small without changing the feasible set
    unit = reduce(math.gcd, costs)
    weights = [c // unit for c in costs]
    capacity = min(budget // unit, sum(weights))
    values = np.asarray(u, dtype=np.float64)

    best = np.zeros((z + 1, capacity + 1))
    for i in range(z - 1, -1, -1):
        best[i] = best[i + 1]
        w = weights[i]
        if w <= capacity:
            best[i, w:] = np.maximum(best[i + 1, w:], best[i + 1, :capacity + 1 - w] + values[i])

    optimum = best[0, capacity]
    cap = int(np.argmax(best[0] >= optimum - VALUE_TOLERANCE))
    selection = []
    for i in range(z):
        w = weights[i]
        take = w <= cap and values[i] + best[i + 1, cap - w] >= best[i, cap] - VALUE_TOLERANCE
        selection.append(int(take))
        if take:
            cap -= w
    value = float(sum(values[i] for i in range(z) if selection[i]))
    return selection, value


def greedy_select(order: Sequence[int], costs: Sequence[int], budget: int) -> list[int]:
    """Take matrices in the given order while they fit."""
    if budget < 0:
        raise BudgetError(0, budget)
    selection = [0] * len(costs)
    remaining = budget
    for index in order:
        if costs[index] <= remaining:
            selection[index] = 1
            remaining -= costs[index]
    return selection


def make_plan(
    report: SensitivityReport,
    spec: ModelSpec,
    budget: int,
    strategy: str = "maximal",
    seed: int = 0,
) -> SplitPlan:
    """
    Split plan over the half-width model with `budget` extra bytes above the all-binary size.
    maximal: knapsack on u; minimal: ascending u, greedy; random: seeded order, greedy.
    """
    cost_map = split_costs(spec)
    names = report.matrix_names
    if names != matrix_names(spec.at_width(0.5)):
        raise ConfigurationError("sensitivity report does not match the model")
    costs = [cost_map[name] for name in names]

    if strategy == "maximal":
        selection, _ = knapsack_select(report.u, costs, budget)
    elif strategy == "minimal":
        selection = greedy_select(sorted(range(len(names)), key=lambda i: (report.u[i], i)), costs, budget)
    elif strategy == "random":
        order = np.random.default_rng(seed).permutation(len(names)).tolist()
        selection = greedy_select(order, costs, budget)
    else:
        raise ConfigurationError(f"Unknown plan strategy '{strategy}', expected one of {', '.join(STRATEGIES)}")

    plan = SplitPlan(
        strategy=strategy,
        matrix_names=names,
        selection=selection,
        costs=costs,
        budget=budget,
        base_size=base_size(spec),
        value=float(sum(u for u, s in zip(report.u, selection) if s)),
    )
    logger.info(
        "🎯 %s plan: %d of %d matrices split, %d of %d extra bytes",
        strategy, len(plan.selected), len(names), plan.extra_cost, budget,
    )
    return plan


# Plan execution
def plan_size_bytes(model: QuantBert) -> int:
    """Measured size of a model from its current precision and branch counts."""
    pairs = [name for name, module in model.matrices().items() if module.is_pair]
    return CostModel(model.spec, model.precision, split=pairs).size_bytes()


def build_plan_model(
    plan: SplitPlan,
    spec: ModelSpec,
    teacher: QuantBert,
    quant: QuantConfig,
    config: TrainConfig,
) -> QuantBert:
    """Half-width model with the plan's matrices ternary and the rest binary, sliced from the teacher."""
    half = spec.at_width(0.5)
    return student_from_teacher(teacher, half, plan_precision(half, set(plan.selected)), quant, config)


def apply_plan(
    plan: SplitPlan,
    task: Task,
    spec: ModelSpec,
    config: TrainConfig,
    quant: QuantConfig,
    seed: int,
    teacher: Optional[QuantBert] = None,
) -> tuple[QuantBert, dict[str, float]]:
    """
    Train the mixed ternary/binary model with both distillation stages, split its ternary
    matrices, fine-tune, and check the all-binary result fits base_size + budget.
    """
    if teacher is None:
        teacher = train_teacher(task, spec.at_width(1.0), config, seed).model
    mixed = build_plan_model(plan, spec, teacher, quant, config)
    distill(mixed, teacher, task, config, seed, config.epochs_int, config.epochs_pred, f"plan-{plan.strategy}")
    metrics = {"mixed": evaluate(mixed, task.dev, config.eval_batch_size).accuracy}

    binary = split_model(mixed)
    metrics["split_max_logit_diff"] = check_split(mixed, binary, task.dev, config.eval_batch_size).max_logit_diff
    train_stage(binary, Objective.PREDICTION, task.train, config, config.lr_split, config.epochs_split,
                StageTag.SPLIT_FINETUNE.value, teacher, seed + 2)
    metrics["accuracy"] = evaluate(binary, task.dev, config.eval_batch_size).accuracy

    size = plan_size_bytes(binary)
    limit = plan.base_size + plan.budget
    if size > limit:
        raise BudgetError(size, limit)
    metrics["size_bytes"] = float(size)
    logger.info("✅ %s plan seed %d: accuracy %.3f, %d bytes", plan.strategy, seed, metrics["accuracy"], size)
    return binary, metrics
