"""
Training subcommands: teacher, ternary distillation, split, fine-tune, the full pipeline,
binary baselines, training-curve comparison and the bit-width sweep.
"""
import argparse
import logging

from bitsplit.commands import (
    curve_rows,
    experiment_task,
    load_experiment,
    open_run,
    parse_int_list,
    read_checkpoint,
)
from bitsplit.exceptions import ConfigurationError
from bitsplit.pipeline import (
    Objective,
    StageTag,
    check_split,
    compare_training_curves,
    evaluate,
    run_bwn_baseline,
    run_tws_pipeline,
    student_from_teacher,
    sweep_bits,
    train_stage,
    train_teacher,
)
from bitsplit.schemas import QuantScheme
from bitsplit.splitting import split_model
from bitsplit.storage import ArtifactStore
from bitsplit.transformer import uniform_precision

logger = logging.getLogger(__name__)

BWN_VARIANTS = ("direct", "ternary-scale", "gradual")


async def _teacher(args, config, task, seed):
    if getattr(args, "teacher", None):
        teacher, _ = await read_checkpoint(args.teacher)
        return teacher
    return train_teacher(task, config.model.at_width(config.teacher_width), config.train, seed).model


async def train_fp(args: argparse.Namespace, store: ArtifactStore) -> None:
    """Full-precision teacher per seed, with the learnability gate."""
    config = load_experiment(args)
    task = experiment_task(config)
    for seed in config.seeds:
        run = await open_run(store, "train-fp", config, seed)
        result = train_teacher(task, config.model.at_width(config.teacher_width), config.train, seed)
        await run.put_json("metrics.json", {"accuracy": result.accuracy, "gate_passed": result.gate_passed})
        await run.put_csv("curves.csv", curve_rows({result.stage.stage: result.stage.losses}), ["stage", "step", "loss"])
        await run.put_checkpoint("teacher.bsck", result.model, StageTag.TEACHER.value)
        await run.finish()
        print(f"🎓 seed {seed}: accuracy {result.accuracy:.4f} ({run.name})")


async def train_ternary(args: argparse.Namespace, store: ArtifactStore) -> None:
    """Half-width ternary student: intermediate then prediction distillation."""
    config = load_experiment(args)
    task = experiment_task(config)
    half = config.model.at_width(0.5)
    for seed in config.seeds:
        run = await open_run(store, "train-ternary", config, seed)
        teacher = await _teacher(args, config, task, seed)
        model = student_from_teacher(teacher, half, uniform_precision(half, QuantScheme.ternary()), config.quant, config.train)
        curves = {}
        first = train_stage(model, Objective.INTERMEDIATE, task.train, config.train, config.train.lr_int,
                            config.train.epochs_int, StageTag.INT_DISTIL_TERNARY.value, teacher, seed)
        second = train_stage(model, Objective.PREDICTION, task.train, config.train, config.train.lr_pred,
                             config.train.epochs_pred, StageTag.PRED_DISTIL_TERNARY.value, teacher, seed + 1)
        curves[first.stage], curves[second.stage] = first.losses, second.losses
        accuracy = evaluate(model, task.dev, config.train.eval_batch_size).accuracy
        await run.put_json("metrics.json", {"accuracy": accuracy})
        await run.put_csv("curves.csv", curve_rows(curves), ["stage", "step", "loss"])
        await run.put_checkpoint("teacher.bsck", teacher, StageTag.TEACHER.value)
        await run.put_checkpoint("ternary.bsck", model, StageTag.PRED_DISTIL_TERNARY.value)
        await run.finish({"teacher": args.teacher or ""})
        print(f"🔺 seed {seed}: ternary accuracy {accuracy:.4f} ({run.name})")


async def split(args: argparse.Namespace, store: ArtifactStore) -> None:
    """Split a ternary checkpoint into binary pairs and verify predictions are unchanged."""
    config = load_experiment(args)
    task = experiment_task(config)
    ternary, _ = await read_checkpoint(args.checkpoint)
    binary = split_model(ternary)
    check = check_split(ternary, binary, task.dev, config.train.eval_batch_size)
    metrics = {
        "ternary_accuracy": evaluate(ternary, task.dev, config.train.eval_batch_size).accuracy,
        "split_accuracy": evaluate(binary, task.dev, config.train.eval_batch_size).accuracy,
        "max_logit_diff": check.max_logit_diff,
        "predictions_match": check.predictions_match,
    }
    run = await open_run(store, "split", config)
    await run.put_json("metrics.json", metrics)
    await run.put_checkpoint("split.bsck", binary, StageTag.SPLIT_FINETUNE.value)
    await run.finish({"checkpoint": args.checkpoint})
    print(f"✂️  max logit difference {metrics['max_logit_diff']:.3e}, predictions match: {metrics['predictions_match']}")


async def finetune(args: argparse.Namespace, store: ArtifactStore) -> None:
    """Prediction-distillation fine-tuning of a split checkpoint with a fresh optimizer."""
    config = load_experiment(args)
    task = experiment_task(config)
    if not args.teacher:
        raise ConfigurationError("finetune needs --teacher")
    teacher, _ = await read_checkpoint(args.teacher)
    for seed in config.seeds:
        model, _ = await read_checkpoint(args.checkpoint)
        run = await open_run(store, "finetune", config, seed)
        stage = train_stage(model, Objective.PREDICTION, task.train, config.train, config.train.lr_split,
                            config.train.epochs_split, StageTag.SPLIT_FINETUNE.value, teacher, seed + 2)
        accuracy = evaluate(model, task.dev, config.train.eval_batch_size).accuracy
        await run.put_json("metrics.json", {"accuracy": accuracy})
        await run.put_csv("curves.csv", curve_rows({stage.stage: stage.losses}), ["stage", "step", "loss"])
        await run.put_checkpoint("finetuned.bsck", model, StageTag.SPLIT_FINETUNE.value)
        await run.finish({"checkpoint": args.checkpoint, "teacher": args.teacher})
        print(f"🔧 seed {seed}: accuracy {accuracy:.4f} ({run.name})")


async def pipeline(args: argparse.Namespace, store: ArtifactStore) -> None:
    """Teacher, ternary distillation, split and fine-tuning, per seed."""
    config = load_experiment(args)
    task = experiment_task(config)
    for seed in config.seeds:
        run = await open_run(store, "pipeline", config, seed)
        teacher = (await read_checkpoint(args.teacher))[0] if args.teacher else None
        result = run_tws_pipeline(task, config.model, config.train, config.quant, seed, teacher, config.teacher_width)
        metrics = dict(result.metrics, split_predictions_match=result.split_predictions_match)
        await run.put_json("metrics.json", metrics)
        await run.put_csv("curves.csv", curve_rows(result.curves), ["stage", "step", "loss"])
        await run.put_checkpoint("teacher.bsck", result.teacher, StageTag.TEACHER.value)
        await run.put_checkpoint("ternary.bsck", result.ternary, StageTag.PRED_DISTIL_TERNARY.value)
        await run.put_checkpoint("binary.bsck", result.binary, StageTag.SPLIT_FINETUNE.value)
        await run.finish({"teacher": args.teacher or ""})
        print(f"✅ seed {seed}: ternary {result.metrics['stage2']:.4f}, split {result.metrics['split']:.4f}, "
              f"fine-tuned {result.metrics['stage3']:.4f} ({run.name})")


async def train_bwn(args: argparse.Namespace, store: ArtifactStore) -> None:
    """Width-1.0 binary baseline with doubled epochs, or a gradual variant."""
    config = load_experiment(args)
    task = experiment_task(config)
    for seed in config.seeds:
        run = await open_run(store, f"train-bwn-{args.variant}", config, seed)
        teacher = await _teacher(args, config, task, seed)
        result = run_bwn_baseline(task, config.model, config.train, config.quant, seed, teacher, args.variant)
        await run.put_json("metrics.json", result.metrics)
        await run.put_csv("curves.csv", curve_rows(result.curves), ["stage", "step", "loss"])
        await run.put_checkpoint("binary.bsck", result.model, StageTag.BASELINE.value)
        await run.finish({"variant": args.variant, "teacher": args.teacher or ""})
        print(f"⬛ seed {seed}: BWN {args.variant} accuracy {result.metrics['accuracy']:.4f} ({run.name})")


async def compare_curves(args: argparse.Namespace, store: ArtifactStore) -> None:
    """Post-distillation fine-tuning curves of the ternary, split and direct binary models."""
    config = load_experiment(args)
    task = experiment_task(config)
    for seed in config.seeds:
        run = await open_run(store, "compare-curves", config, seed)
        teacher = await _teacher(args, config, task, seed)
        curves = compare_training_curves(task, config.model, config.train, config.quant, seed, teacher)
        await run.put_csv("curves.csv", curve_rows(curves), ["stage", "step", "loss"])
        await run.finish({"teacher": args.teacher or ""})
        print(f"📈 seed {seed}: curves for {', '.join(curves)} ({run.name})")


async def sweep(args: argparse.Namespace, store: ArtifactStore) -> None:
    """Dev accuracy against weight bit-width, mean and std over seeds."""
    config = load_experiment(args)
    task = experiment_task(config)
    bits = parse_int_list(args.bits)
    rows = sweep_bits(task, config.model, config.train, config.quant, bits, config.seeds, config.workers)
    run = await open_run(store, "sweep-bits", config)
    await run.put_csv("sweep.csv", [
        {"bits": row.bits, "mean": row.mean, "std": row.std, "seeds": len(row.accuracies)} for row in rows
    ])
    await run.put_csv("sweep_samples.csv", [
        {"bits": row.bits, "seed": seed, "accuracy": accuracy}
        for row in rows
        for seed, accuracy in zip(config.seeds, row.accuracies)
    ])
    await run.finish({"bits": args.bits})
    for row in rows:
        print(f"📊 {row.bits:>2}-bit: {row.mean:.4f} ± {row.std:.4f}")


def register(subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser) -> None:
    """Add the training subcommands."""
    parser = subparsers.add_parser("train-fp", parents=[common], help="Train the full-precision teacher")
    parser.set_defaults(handler=train_fp)

    parser = subparsers.add_parser("train-ternary", parents=[common], help="Distill a half-width ternary model")
    parser.add_argument("--teacher", help="Teacher checkpoint (trained when omitted)")
    parser.set_defaults(handler=train_ternary)

    parser = subparsers.add_parser("split", parents=[common], help="Split a ternary checkpoint into binary pairs")
    parser.add_argument("--checkpoint", required=True, help="Ternary checkpoint")
    parser.set_defaults(handler=split)

    parser = subparsers.add_parser("finetune", parents=[common], help="Fine-tune a split checkpoint")
    parser.add_argument("--checkpoint", required=True, help="Split checkpoint")
    parser.add_argument("--teacher", help="Teacher checkpoint")
    parser.set_defaults(handler=finetune)

    parser = subparsers.add_parser("pipeline", parents=[common], help="Run all stages: distill, split, fine-tune")
    parser.add_argument("--teacher", help="Teacher checkpoint (trained when omitted)")
    parser.set_defaults(handler=pipeline)

    parser = subparsers.add_parser("train-bwn", parents=[common], help="Train a binary baseline")
    parser.add_argument("--variant", choices=BWN_VARIANTS, default="direct")
    parser.add_argument("--teacher", help="Teacher checkpoint (trained when omitted)")
    parser.set_defaults(handler=train_bwn)

    parser = subparsers.add_parser("compare-curves", parents=[common], help="Fine-tuning curves of TWN, TWS and BWN")
    parser.add_argument("--teacher", help="Teacher checkpoint (trained when omitted)")
    parser.set_defaults(handler=compare_curves)

    parser = subparsers.add_parser("sweep-bits", parents=[common], help="Accuracy against weight bit-width")
    parser.add_argument("--bits", default="32,8,4,3,2,1", help="Comma-separated weight bit-widths")
    parser.set_defaults(handler=sweep)
