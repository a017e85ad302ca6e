"""
Sensitivity scoring, knapsack selection and split plans.
"""
import itertools
import statistics

import numpy as np
import pytest

from bitsplit.accounting import base_size, split_costs
from bitsplit.adaptive import (
    _group_members,
    apply_plan,
    compute_sensitivity,
    greedy_select,
    knapsack_select,
    leave_one_out_precision,
    make_plan,
    measure_sensitivity,
)
from bitsplit.exceptions import BudgetError, ConfigurationError, MissingBaselineError
from bitsplit.pipeline import train_teacher
from bitsplit.schemas import ExperimentConfig, ModelSpec, SensitivityReport, SplitPlan
from bitsplit.tasks import load_task
from bitsplit.transformer import build, full_precision, matrix_names


def _brute_force(u, costs, budget):
    selections = np.array(list(itertools.product((0, 1), repeat=len(u))))
    fits = selections @ np.asarray(costs) <= budget
    return float((selections[fits] @ np.asarray(u)).max())


def _accuracies(spec, gains=None, baseline=(0.6, 0.62, 0.58)):
    """Per-seed accuracies: baseline plus a fixed gain per leave-one-out group."""
    gains = gains or {}
    result = {"baseline": list(baseline)}
    for group in _group_members(spec):
        result[group] = [b + gains.get(group, 0.0) for b in baseline]
    return result


def test_knapsack_worked_example():
    selection, value = knapsack_select([3, 1, 2], [2, 2, 3], 4)
    assert selection == [1, 1, 0]
    assert value == 4


def test_knapsack_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        z = int(rng.integers(1, 16))
        u = rng.random(z).round(3).tolist()
        costs = rng.integers(1, 20, size=z).tolist()
        budget = int(rng.integers(0, sum(costs) + 5))
        selection, value = knapsack_select(u, costs, budget)
        assert sum(c * s for c, s in zip(costs, selection)) <= budget
        assert value == pytest.approx(sum(v * s for v, s in zip(u, selection)))
        assert value == pytest.approx(_brute_force(u, costs, budget), abs=1e-9)


def test_knapsack_is_monotone_in_budget():
    rng = np.random.default_rng(9)
    u = rng.random(10).tolist()
    costs = (rng.integers(1, 8, size=10) * 4).tolist()
    values = [knapsack_select(u, costs, budget)[1] for budget in range(0, sum(costs) + 1, 2)]
    assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))


def test_knapsack_budget_extremes():
    u, costs = [0.5, 0.2, 0.9], [4, 6, 2]
    assert knapsack_select(u, costs, 0) == ([0, 0, 0], 0.0)
    selection, value = knapsack_select(u, costs, sum(costs))
    assert selection == [1, 1, 1]
    assert value == pytest.approx(1.6)
    with pytest.raises(BudgetError):
        knapsack_select(u, costs, -1)


def test_knapsack_tie_break_prefers_cheaper_selection():
    selection, value = knapsack_select([1.0, 1.0, 0.0], [2, 3, 1], 3)
    assert value == 1.0
    assert selection == [1, 0, 0]


def test_knapsack_rejects_bad_costs():
    with pytest.raises(ConfigurationError):
        knapsack_select([1.0], [0], 5)
    with pytest.raises(ConfigurationError):
        knapsack_select([1.0, 2.0], [1], 5)
    assert knapsack_select([], [], 10) == ([], 0.0)


def test_greedy_select():
    assert greedy_select([2, 0, 1], [4, 6, 2], 7) == [1, 0, 1]
    assert greedy_select([0, 1, 2], [4, 6, 2], 0) == [0, 0, 0]


def test_leave_one_out_precision(tiny_spec):
    precision = leave_one_out_precision(tiny_spec, ["layer0.query", "pooler"])
    assert precision["layer0.query"].kind == "full"
    assert precision["pooler"].kind == "full"
    assert precision["layer1.query"].kind == "binary"
    assert precision["embedding"].granularity == "row"


def test_group_members(tiny_spec):
    groups = _group_members(tiny_spec)
    assert groups["MHA-QK"] == ["layer0.query", "layer0.key", "layer1.query", "layer1.key"]
    assert groups["layer1"] == [f"layer1.{m}" for m in ("query", "key", "value", "attn_out", "ffn_mid", "ffn_out")]
    assert groups["Embedding"] == ["embedding"]
    assert groups["Pooler"] == ["pooler"]


def test_sensitivity_all_zero_gains(tiny_spec):
    report = compute_sensitivity(tiny_spec, _accuracies(tiny_spec))
    assert report.u == [0.0] * len(matrix_names(tiny_spec))
    assert report.baseline.mean == pytest.approx(0.6)


def test_sensitivity_negative_gains_count_as_zero(tiny_spec):
    report = compute_sensitivity(tiny_spec, _accuracies(tiny_spec, {"FFN-Mid": -0.1, "layer0": -0.2}))
    assert all(u == 0.0 for u in report.u)
    assert report.part_gains["FFN-Mid"].mean == pytest.approx(-0.1)


def test_sensitivity_dominant_part(tiny_spec):
    report = compute_sensitivity(tiny_spec, _accuracies(tiny_spec, {"FFN-Mid": 0.2, "layer1": 0.05}))
    u = dict(zip(report.matrix_names, report.u))
    ffn_params = report.part_params["FFN-Mid"]
    layer_params = report.layer_params[1]
    assert u["layer0.ffn_mid"] == pytest.approx(0.2 / ffn_params)
    assert u["layer1.ffn_mid"] == pytest.approx(0.2 / ffn_params + 0.05 / layer_params)
    assert u["layer1.query"] == pytest.approx(0.05 / layer_params)
    assert u["layer0.query"] == 0.0
    assert max(u, key=u.get) == "layer1.ffn_mid"


def test_sensitivity_embedding_and_pooler_use_own_gain(tiny_spec):
    report = compute_sensitivity(tiny_spec, _accuracies(tiny_spec, {"Embedding": 0.1, "Pooler": 0.03}))
    assert report.u[0] == pytest.approx(0.1 / report.embedding_params)
    assert report.u[-1] == pytest.approx(0.03 / report.pooler_params)
    assert report.pooler_params == tiny_spec.hidden ** 2


def test_sensitivity_scaled_by_matrix_params(tiny_spec):
    report = compute_sensitivity(tiny_spec, _accuracies(tiny_spec, {"Pooler": 0.03}), scale_by_matrix_params=True)
    assert report.u[-1] == pytest.approx(0.03)


def test_sensitivity_gain_statistics(tiny_spec):
    accuracies = _accuracies(tiny_spec)
    accuracies["MHA-V"] = [0.7, 0.62, 0.58]
    report = compute_sensitivity(tiny_spec, accuracies)
    gain = report.part_gains["MHA-V"]
    assert gain.samples == pytest.approx([0.1, 0.0, 0.0])
    assert gain.mean == pytest.approx(0.1 / 3)
    assert gain.std > 0


def test_sensitivity_needs_baseline_and_groups(tiny_spec):
    accuracies = _accuracies(tiny_spec)
    del accuracies["baseline"]
    with pytest.raises(MissingBaselineError):
        compute_sensitivity(tiny_spec, accuracies)
    accuracies = _accuracies(tiny_spec)
    del accuracies["layer1"]
    with pytest.raises(ConfigurationError):
        compute_sensitivity(tiny_spec, accuracies)


@pytest.fixture
def report(tiny_spec):
    half = tiny_spec.at_width(0.5)
    return compute_sensitivity(half, _accuracies(half, {"FFN-Mid": 0.2, "MHA-O": 0.05, "layer0": 0.02, "Pooler": 0.01}))


def test_plan_budget_zero_is_all_binary(tiny_spec, report):
    for strategy in ("maximal", "minimal", "random"):
        plan = make_plan(report, tiny_spec, 0, strategy)
        assert plan.selection == [0] * len(plan.matrix_names)
        assert plan.base_size == base_size(tiny_spec)


def test_plan_full_budget_splits_everything(tiny_spec, report):
    budget = sum(split_costs(tiny_spec).values())
    plan = make_plan(report, tiny_spec, budget, "maximal")
    assert all(plan.selection[i] for i, u in enumerate(report.u) if u > 0)
    assert plan.extra_cost <= budget


def test_plan_strategies_respect_budget(tiny_spec, report):
    costs = split_costs(tiny_spec)
    budget = costs["layer0.ffn_mid"] + costs["layer1.ffn_mid"]
    maximal = make_plan(report, tiny_spec, budget, "maximal")
    minimal = make_plan(report, tiny_spec, budget, "minimal")
    random = make_plan(report, tiny_spec, budget, "random", seed=3)
    for plan in (maximal, minimal, random):
        assert plan.extra_cost <= budget
    assert set(maximal.selected) == {"layer0.ffn_mid", "layer1.ffn_mid"}
    assert maximal.value >= minimal.value
    assert maximal.value >= random.value
    assert "layer1.ffn_mid" not in minimal.selected
    assert make_plan(report, tiny_spec, budget, "random", seed=3).selection == random.selection


def test_plan_rejects_mismatched_report(tiny_spec, report):
    with pytest.raises(ConfigurationError):
        make_plan(report, tiny_spec.model_copy(update={"num_layers": 3}), 100)
    with pytest.raises(ConfigurationError):
        make_plan(report, tiny_spec, 100, "greedy")
    with pytest.raises(BudgetError):
        make_plan(report, tiny_spec, -5)


def test_plan_round_trips_through_json(tiny_spec, report):
    plan = make_plan(report, tiny_spec, 5000, "maximal")
    assert SplitPlan.model_validate_json(plan.model_dump_json()) == plan
    assert SensitivityReport.model_validate_json(report.model_dump_json()).u == report.u


def test_report_for_desk_model_has_one_entry_per_matrix():
    half = ModelSpec().at_width(0.5)
    report = compute_sensitivity(half, _accuracies(half))
    assert len(report.u) == 6 * half.num_layers + 2


def test_measured_plans_train_within_budget(tiny_spec, tiny_task, quick_train, exact_quant):
    measured = measure_sensitivity(tiny_task, tiny_spec, quick_train, exact_quant, seeds=[0])
    assert measured.matrix_names == matrix_names(tiny_spec.at_width(0.5))
    assert all(u >= 0 for u in measured.u)

    teacher = train_teacher(tiny_task, tiny_spec, quick_train, seed=0).model
    costs = split_costs(tiny_spec)
    budget = costs["layer0.ffn_mid"] + costs["pooler"]
    for strategy in ("maximal", "minimal"):
        plan = make_plan(measured, tiny_spec, budget, strategy)
        binary, metrics = apply_plan(plan, tiny_task, tiny_spec, quick_train, exact_quant, seed=0, teacher=teacher)
        assert sorted(name for name, module in binary.matrices().items() if module.is_pair) == sorted(plan.selected)
        assert all(scheme.kind == "binary" for scheme in binary.precision.values())
        assert metrics["size_bytes"] == plan.base_size + plan.extra_cost <= plan.base_size + budget
        assert metrics["split_max_logit_diff"] <= 1e-9
        assert 0.0 <= metrics["accuracy"] <= 1.0


def test_apply_plan_rejects_result_over_budget(tiny_spec, tiny_task, quick_train, exact_quant, report):
    untrained = quick_train.model_copy(update={"epochs_int": 0, "epochs_pred": 0, "epochs_split": 0})
    teacher = build(tiny_spec, full_precision(tiny_spec))
    plan = make_plan(report, tiny_spec, sum(split_costs(tiny_spec).values()), "maximal")
    assert plan.selected
    with pytest.raises(BudgetError) as excinfo:
        apply_plan(plan.model_copy(update={"budget": 0}), tiny_task, tiny_spec, untrained, exact_quant, 0, teacher)
    assert excinfo.value.budget == plan.base_size
    assert excinfo.value.size == plan.base_size + plan.extra_cost


@pytest.mark.slow
def test_maximal_plan_beats_minimal_plan():
    config = ExperimentConfig(seeds=[0, 1, 2])
    task = load_task(config.task, config.model, config.train.seq_len)
    measured = measure_sensitivity(task, config.model, config.train, config.quant, config.adaptive.sensitivity_seeds)
    budget = sum(split_costs(config.model).values()) // 4
    plans = {strategy: make_plan(measured, config.model, budget, strategy) for strategy in ("maximal", "minimal")}
    accuracy = {strategy: [] for strategy in plans}
    for seed in config.seeds:
        teacher = train_teacher(task, config.model, config.train, seed).model
        for strategy, plan in plans.items():
            _, metrics = apply_plan(plan, task, config.model, config.train, config.quant, seed, teacher)
            assert metrics["size_bytes"] <= plan.base_size + budget
            accuracy[strategy].append(metrics["accuracy"])
    assert statistics.fmean(accuracy["maximal"]) >= statistics.fmean(accuracy["minimal"])
