"""
Analysis subcommands: sensitivity, split plans, loss landscapes, curvature and cost accounting.
"""
import argparse
import logging
from dataclasses import asdict
from pathlib import Path

from bitsplit.accounting import PRESETS, BitConfig, CostModel, reference_rows
from bitsplit.adaptive import STRATEGIES, apply_plan, make_plan, measure_sensitivity
from bitsplit.analysis import GRID_STEPS, POWER_MAX_ITER, landscape_grid, noise_bound_check, steepness_report
from bitsplit.commands import (
    experiment_task,
    load_experiment,
    open_run,
    read_checkpoint,
)
from bitsplit.exceptions import ConfigurationError
from bitsplit.pipeline import train_quantized, train_teacher
from bitsplit.schemas import QuantScheme, SensitivityReport
from bitsplit.storage import ArtifactStore
from bitsplit.tasks import batches
from bitsplit.transformer import matrix_names, uniform_precision

logger = logging.getLogger(__name__)


async def sensitivity(args: argparse.Namespace, store: ArtifactStore) -> None:
    """Leave-one-out sensitivity of parts, layers, embedding and pooler."""
    config = load_experiment(args)
    task = experiment_task(config)
    seeds = config.adaptive.sensitivity_seeds if args.seeds is None and args.seed is None else config.seeds
    report = measure_sensitivity(task, config.model, config.train, config.quant, seeds, config.workers,
                                 config.adaptive.scale_by_matrix_params)
    run = await open_run(store, "sensitivity", config)
    run.seeds = list(seeds)
    await run.put_json("sensitivity.json", report.model_dump(mode="json"))
    await run.put_csv("sensitivity.csv", [
        {"matrix": name, "u": u} for name, u in zip(report.matrix_names, report.u)
    ])
    await run.finish()
    for part, gain in report.part_gains.items():
        print(f"🔬 {part:<8} gain {gain.mean:+.4f} ± {gain.std:.4f}")


async def plan(args: argparse.Namespace, store: ArtifactStore) -> None:
    """Choose matrices to ternarize-then-split under an extra-bytes budget; optionally train the plan."""
    config = load_experiment(args)
    budget = args.budget if args.budget is not None else config.adaptive.budget_bytes
    if budget is None:
        raise ConfigurationError("plan needs --budget or adaptive.budget_bytes")
    strategy = args.strategy or config.adaptive.strategy
    task = experiment_task(config) if args.train or not args.report else None
    if args.report:
        report = SensitivityReport.model_validate_json(args.report.read_text(encoding="utf-8"))
    else:
        report = measure_sensitivity(task, config.model, config.train, config.quant, config.adaptive.sensitivity_seeds,
                                     config.workers, config.adaptive.scale_by_matrix_params)

    run = await open_run(store, f"plan-{strategy}-b{budget}", config)
    split_plan = make_plan(report, config.model, budget, strategy, seed=config.seeds[0])
    await run.put_json("plan.json", split_plan.model_dump(mode="json"))
    if args.train:
        rows = []
        for seed in config.seeds:
            _, metrics = apply_plan(split_plan, task, config.model, config.train, config.quant, seed)
            rows.append({"seed": seed, **metrics})
        await run.put_csv("plan_metrics.csv", rows)
    await run.finish({"budget": budget, "strategy": strategy, "report": args.report or "", "train": args.train})
    print(f"🎯 {strategy}: {len(split_plan.selected)} of {len(split_plan.matrix_names)} matrices split, "
          f"{split_plan.base_size + split_plan.extra_cost} bytes ({run.name})")


async def landscape(args: argparse.Namespace, store: ArtifactStore) -> None:
    """Loss grid over perturbations of two parameter tags of a checkpoint."""
    config = load_experiment(args)
    task = experiment_task(config)
    model, stage = await read_checkpoint(args.checkpoint)
    batch = next(batches(task.train, args.batch_size))
    grid = landscape_grid(model, args.tag_a, args.tag_b, batch, args.k)
    run = await open_run(store, f"landscape-{stage}", config)
    await run.put_csv("landscape.csv", grid.rows())
    await run.finish({"checkpoint": args.checkpoint, "tag_a": args.tag_a, "tag_b": args.tag_b, "k": args.k})
    print(f"🗺️  {len(grid.rows())} grid points, center loss {grid.center:.4f} ({run.name})")


async def steepness(args: argparse.Namespace, store: ArtifactStore) -> None:
    """Top Hessian eigenvalues per part for full-precision, ternary and binary models of equal width."""
    config = load_experiment(args)
    task = experiment_task(config)
    seed = config.seeds[0]
    if args.full and args.ternary and args.binary:
        models = {name: (await read_checkpoint(path))[0]
                  for name, path in (("full", args.full), ("ternary", args.ternary), ("binary", args.binary))}
    else:
        spec = config.model.at_width(1.0)
        teacher = train_teacher(task, spec, config.train, seed).model
        models = {"full": teacher}
        for name, scheme in (("ternary", QuantScheme.ternary()), ("binary", QuantScheme.binary())):
            models[name], _ = train_quantized(task, spec, uniform_precision(spec, scheme), config.train,
                                              config.quant, seed, teacher)
    sample = [batch for _, batch in zip(range(args.batches), batches(task.dev, args.batch_size))]
    report = steepness_report(models, sample, max_iter=args.max_iter)

    run = await open_run(store, "steepness", config, seed)
    await run.put_csv("steepness.csv", report.rows())
    await run.put_csv("eigenvalues.csv", [asdict(s) for s in report.samples])
    if args.noise_bound:
        rows = []
        for name in ("ternary", "binary"):
            checks, fraction = noise_bound_check(models[name], sample[0], max_iter=args.max_iter)
            rows.extend({"model": name, **asdict(c), "holds": c.holds} for c in checks)
            print(f"📏 {name}: bound holds on {fraction:.0%} of matrices")
        await run.put_csv("noise_bound.csv", rows)
    await run.finish({"batches": args.batches, "batch_size": args.batch_size, "noise_bound": args.noise_bound})
    for row in report.rows():
        print(f"📐 {row['model']:<8} {row['part']:<8} ratio {row['ratio_mean']:.3f} ± {row['ratio_std']:.3f}")


async def account(args: argparse.Namespace, store: ArtifactStore) -> None:
    """Size and FLOPs of bit configurations for a preset architecture."""
    spec = PRESETS[args.preset]
    if args.bits:
        rows = []
        for text in args.bits.split(","):
            bits = BitConfig.parse(text)
            rows.append((f"direct {bits}", CostModel(spec, bits.precision(spec), bits.activation_bits)))
            if bits.weight_bits != 1 or bits.embedding_bits != 1:
                continue
            half = spec.at_width(0.5)
            rows.append((f"split {bits}", CostModel(half, bits.precision(half), bits.activation_bits, matrix_names(half))))
    else:
        rows = reference_rows(spec)

    full_size = CostModel(spec, uniform_precision(spec, QuantScheme.full())).size_bytes()
    summary = []
    breakdown = []
    for label, cost in rows:
        size = cost.size_bytes()
        summary.append({
            "config": label,
            "size_bytes": size,
            "size_mb": cost.size_mb(),
            "flops": cost.flops(args.seq_len),
            "compression": full_size / size,
        })
        for row in cost.size_breakdown() + cost.flop_breakdown(args.seq_len):
            breakdown.append({"config": label, **asdict(row)})

    config = load_experiment(args)
    run = await open_run(store, f"account-{args.preset}", config)
    await run.put_json("summary.json", summary)
    await run.put_csv("summary.csv", summary)
    await run.put_csv("breakdown.csv", breakdown)
    await run.finish({"preset": args.preset, "bits": args.bits or "", "seq_len": args.seq_len})
    for entry in summary:
        print(f"🧮 {entry['config']:<20} {entry['size_mb']:>9.2f} MB {entry['flops'] / 1e9:>8.2f} GFLOPs "
              f"{entry['compression']:>6.1f}x")


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    """Add the analysis subcommands."""
    parser = subparsers.add_parser("sensitivity", parents=[common], help="Measure quantization sensitivity")
    parser.set_defaults(handler=sensitivity)

    parser = subparsers.add_parser("plan", parents=[common], help="Select matrices to split under a budget")
    parser.add_argument("--budget", type=int, help="Extra bytes above the half-width binary model")
    parser.add_argument("--strategy", choices=STRATEGIES)
    parser.add_argument("--report", type=Path, help="Sensitivity report JSON (measured when omitted)")
    parser.add_argument("--train", action="store_true", help="Train, split and fine-tune the planned model")
    parser.set_defaults(handler=plan)

    parser = subparsers.add_parser("landscape", parents=[common], help="Loss grid around a checkpoint")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--tag-a", required=True, help="Matrix name or part tag, e.g. layer0.ffn_mid or MHA-QK@0")
    parser.add_argument("--tag-b", required=True)
    parser.add_argument("--k", type=int, default=GRID_STEPS, help="Grid steps per side")
    parser.add_argument("--batch-size", type=int, default=128)
    parser.set_defaults(handler=landscape)

    parser = subparsers.add_parser("steepness", parents=[common], help="Top Hessian eigenvalue per part")
    parser.add_argument("--full", help="Full-precision checkpoint")
    parser.add_argument("--ternary", help="Ternary checkpoint")
    parser.add_argument("--binary", help="Binary checkpoint")
    parser.add_argument("--batches", type=int, default=3)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--max-iter", type=int, default=POWER_MAX_ITER)
    parser.add_argument("--noise-bound", action="store_true", help="Also check the quantization-noise bound")
    parser.set_defaults(handler=steepness)

    parser = subparsers.add_parser("account", parents=[common], help="Model size and FLOPs")
    parser.add_argument("--preset", choices=sorted(PRESETS), default="bert-base")
    parser.add_argument("--bits", help="Comma-separated W-E-A configurations, e.g. 1-1-8,1-1-4")
    parser.add_argument("--seq-len", type=int, default=128)
    parser.set_defaults(handler=account)
