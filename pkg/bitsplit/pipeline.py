"""
Training stages and orchestration: teacher training, two-stage distillation of a half-width
ternary student, splitting, post-split fine-tuning, binary baselines and bit-width sweeps.
"""
import copy
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from typing import Callable, Optional, Sequence

import torch
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR

from bitsplit.distillation import DistillTargets, loss_int, loss_pred, task_loss
from bitsplit.exceptions import ConfigurationError, DivergenceError, NonFiniteError, SplitMismatchError
from bitsplit.numerics import backward, configure_determinism, seed_everything
from bitsplit.schemas import ModelSpec, QuantConfig, QuantScheme, TrainConfig
from bitsplit.splitting import split_model
from bitsplit.tasks import Examples, Task, batches
from bitsplit.transformer import (
    LayerNorm,
    QuantBert,
    build,
    full_precision,
    init_from_wider,
    lsq_quantizers,
    uniform_precision,
)

logger = logging.getLogger(__name__)

LEARNABILITY_GATE = 0.95
SPLIT_TIE_MARGIN = 1e-6


class Objective(str, Enum):
    TASK = "task"
    INTERMEDIATE = "intermediate"
    PREDICTION = "prediction"


class StageTag(str, Enum):
    TEACHER = "teacher"
    INT_DISTIL_TERNARY = "int-distil-ternary"
    PRED_DISTIL_TERNARY = "pred-distil-ternary"
    SPLIT_FINETUNE = "split-finetune"
    BASELINE = "baseline"


@dataclass
class StageResult:
    stage: str
    losses: list[float] = field(default_factory=list)
    steps: int = 0


@dataclass
class EvalResult:
    accuracy: float
    predictions: torch.Tensor


@dataclass
class PipelineResult:
    teacher: QuantBert
    ternary: QuantBert
    binary: QuantBert
    metrics: dict[str, float]
    curves: dict[str, list[float]]
    split_predictions_match: bool


@dataclass
class SplitCheck:
    max_logit_diff: float
    flipped: int
    predictions_match: bool


@dataclass
class BaselineResult:
    model: QuantBert
    variant: str
    metrics: dict[str, float]
    curves: dict[str, list[float]]


# Optimization
def linear_warmup_decay(total_steps: int, warmup_steps: int) -> Callable[[int], float]:
    """LR multiplier: linear warmup to 1 at warmup_steps, then linear decay to 0 at total_steps."""
    def multiplier(step: int) -> float:
        if step < warmup_steps:
            return step / warmup_steps
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup_steps))
    return multiplier


def make_optimizer(model: torch.nn.Module, lr: float, config: TrainConfig) -> AdamW:
    """AdamW with no decay on biases, layer norms and quantizer steps."""
    no_decay = set()
    for module in model.modules():
        if isinstance(module, LayerNorm):
            no_decay.update(id(p) for p in module.parameters())
    for name, param in model.named_parameters():
        if name.endswith("bias") or name.endswith(".step"):
            no_decay.add(id(param))
    params = [p for p in model.parameters() if p.requires_grad]
    groups = [
        {"params": [p for p in params if id(p) not in no_decay], "weight_decay": config.weight_decay},
        {"params": [p for p in params if id(p) in no_decay], "weight_decay": 0.0},
    ]
    return AdamW(groups, lr=lr, betas=tuple(config.betas), eps=config.adam_eps)


def make_scheduler(optimizer: AdamW, total_steps: int, config: TrainConfig) -> LambdaLR:
    warmup = int(config.warmup_portion * total_steps)
    return LambdaLR(optimizer, linear_warmup_decay(total_steps, warmup))


def clip_gradients(params: Sequence[torch.nn.Parameter], max_norm: float) -> float:
    """Global-norm clipping; returns the norm before clipping."""
    return float(torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], max_norm))


def _objective_loss(model: QuantBert, objective: Objective, batch: Examples, teacher: Optional[QuantBert]) -> torch.Tensor:
    out = model(batch.input_ids, batch.token_type_ids)
    if objective == Objective.TASK:
        return task_loss(out.logits, batch.labels)
    targets = DistillTargets.from_teacher(teacher, batch.input_ids, batch.token_type_ids)
    if objective == Objective.INTERMEDIATE:
        return loss_int(out.intermediates, targets.intermediates)
    return loss_pred(out.logits, targets.logits)


def train_stage(
    model: QuantBert,
    objective: Objective,
    examples: Examples,
    config: TrainConfig,
    lr: float,
    epochs: int,
    stage: str,
    teacher: Optional[QuantBert] = None,
    seed: int = 0,
) -> StageResult:
    """
    Train latent weights in place with a fresh AdamW and warmup/decay schedule.
    Records the loss of every step; a non-finite loss aborts with DivergenceError.
    """
    result = StageResult(stage=stage)
    if epochs == 0 or len(examples) == 0:
        return result
    if objective != Objective.TASK and teacher is None:
        raise ConfigurationError(f"stage '{stage}' distills and needs a teacher")

    steps_per_epoch = math.ceil(len(examples) / config.batch_size)
    total_steps = epochs * steps_per_epoch
    optimizer = make_optimizer(model, lr, config)
    scheduler = make_scheduler(optimizer, total_steps, config)
    generator = torch.Generator().manual_seed(seed)
    params = [p for p in model.parameters() if p.requires_grad]
    model.train()

    for epoch in range(epochs):
        epoch_losses = []
        for batch in batches(examples, config.batch_size, generator):
            try:
                loss = _objective_loss(model, objective, batch, teacher)
                value = float(loss.detach())
            except NonFiniteError:
                value = math.nan
            if not math.isfinite(value):
                current_lr = scheduler.get_last_lr()[0]
                logger.error("💥 Stage %s diverged at step %d (loss=%s, lr=%.3g)", stage, result.steps, value, current_lr)
                raise DivergenceError(stage, result.steps, value, current_lr)
            optimizer.zero_grad(set_to_none=True)
            backward(loss, params, write_grad=True)
            clip_gradients(params, config.max_grad_norm)
            optimizer.step()
            scheduler.step()
            for quantizer in lsq_quantizers(model):
                quantizer.clamp_step()
            epoch_losses.append(value)
            result.steps += 1
        result.losses.extend(epoch_losses)
        logger.info(
            "📉 %s epoch %d/%d loss %.4f lr %.2e",
            stage, epoch + 1, epochs, statistics.fmean(epoch_losses), scheduler.get_last_lr()[0],
        )
    return result


def evaluate(model: QuantBert, examples: Examples, batch_size: int = 128) -> EvalResult:
    """Dev accuracy and argmax predictions in eval mode."""
    model.eval()
    predictions = []
    with torch.no_grad():
        for batch in batches(examples, batch_size):
            predictions.append(model(batch.input_ids, batch.token_type_ids).logits.argmax(dim=-1))
    if not predictions:
        return EvalResult(accuracy=0.0, predictions=torch.zeros(0, dtype=torch.long))
    predictions = torch.cat(predictions)
    accuracy = float((predictions == examples.labels).to(torch.float64).mean())
    return EvalResult(accuracy=accuracy, predictions=predictions)


def logits_of(model: QuantBert, examples: Examples, batch_size: int = 128) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        return torch.cat([model(b.input_ids, b.token_type_ids).logits for b in batches(examples, batch_size)])


def check_split(ternary: QuantBert, binary: QuantBert, examples: Examples, batch_size: int = 128) -> SplitCheck:
    """
    Compare a split model against its ternary source on the same batches.
    A changed prediction is tolerated only when the ternary top-two margin is within SPLIT_TIE_MARGIN.
    """
    if not len(examples):
        return SplitCheck(max_logit_diff=0.0, flipped=0, predictions_match=True)
    before = logits_of(ternary, examples, batch_size)
    after = logits_of(binary, examples, batch_size)
    changed = before.argmax(dim=-1) != after.argmax(dim=-1)
    top2 = before.topk(2, dim=-1).values
    flipped = int((changed & (top2[:, 0] - top2[:, 1] > SPLIT_TIE_MARGIN)).sum())
    check = SplitCheck(
        max_logit_diff=float((before - after).abs().max()),
        flipped=flipped,
        predictions_match=not bool(changed.any()),
    )
    if check.flipped:
        raise SplitMismatchError(check.flipped, len(examples), check.max_logit_diff)
    return check


def distill_loss(model: QuantBert, teacher: QuantBert, examples: Examples, batch_size: int = 128) -> float:
    """Mean prediction-distillation loss over a set, eval mode."""
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in batches(examples, batch_size):
            targets = DistillTargets.from_teacher(teacher, batch.input_ids, batch.token_type_ids)
            logits = model(batch.input_ids, batch.token_type_ids).logits
            total += float(loss_pred(logits, targets.logits)) * len(batch)
            count += len(batch)
    return total / max(count, 1)


# Model factories
@dataclass
class TeacherResult:
    model: QuantBert
    stage: StageResult
    accuracy: float

    @property
    def gate_passed(self) -> bool:
        return self.accuracy >= LEARNABILITY_GATE


def train_teacher(task: Task, spec: ModelSpec, config: TrainConfig, seed: int) -> TeacherResult:
    """Full-precision teacher trained on hard labels; warns when it misses the learnability gate."""
    seed_everything(seed)
    teacher = build(spec, full_precision(spec), QuantConfig(activation_bits=32), config.dropout)
    stage = train_stage(teacher, Objective.TASK, task.train, config, config.lr_teacher, config.epochs_teacher,
                        StageTag.TEACHER.value, seed=seed)
    accuracy = evaluate(teacher, task.dev, config.eval_batch_size).accuracy if len(task.dev) else 1.0
    result = TeacherResult(teacher, stage, accuracy)
    if not result.gate_passed:
        logger.warning("⚠️  Teacher dev accuracy %.3f is below the %.2f learnability gate", accuracy, LEARNABILITY_GATE)
    else:
        logger.info("🎓 Teacher dev accuracy %.3f", accuracy)
    return result


def student_from_teacher(
    teacher: QuantBert,
    spec: ModelSpec,
    precision: dict[str, QuantScheme],
    quant: QuantConfig,
    config: TrainConfig,
) -> QuantBert:
    student = build(spec, precision, quant, config.dropout)
    return init_from_wider(student, teacher)


def distill(
    model: QuantBert,
    teacher: QuantBert,
    task: Task,
    config: TrainConfig,
    seed: int,
    epochs_int: int,
    epochs_pred: int,
    label: str,
) -> dict[str, list[float]]:
    """Intermediate-layer then prediction-layer distillation, each with a fresh optimizer."""
    first = train_stage(model, Objective.INTERMEDIATE, task.train, config, config.lr_int, epochs_int,
                        f"{label}-int", teacher, seed)
    second = train_stage(model, Objective.PREDICTION, task.train, config, config.lr_pred, epochs_pred,
                         f"{label}-pred", teacher, seed + 1)
    return {first.stage: first.losses, second.stage: second.losses}


def run_tws_pipeline(
    task: Task,
    spec: ModelSpec,
    config: TrainConfig,
    quant: QuantConfig,
    seed: int,
    teacher: Optional[QuantBert] = None,
    teacher_width: float = 1.0,
) -> PipelineResult:
    """
    Teacher, then a half-width ternary student (sliced from the teacher) distilled on
    intermediates and predictions, split into binary pairs and fine-tuned on predictions.
    """
    curves: dict[str, list[float]] = {}
    if teacher is None:
        trained = train_teacher(task, spec.at_width(teacher_width), config, seed)
        teacher = trained.model
        curves[trained.stage.stage] = trained.stage.losses
    seed_everything(seed)
    half = spec.at_width(0.5)
    ternary = student_from_teacher(teacher, half, uniform_precision(half, QuantScheme.ternary()), quant, config)

    metrics = {
        "teacher": evaluate(teacher, task.dev, config.eval_batch_size).accuracy,
        "ternary_init": evaluate(ternary, task.dev, config.eval_batch_size).accuracy,
    }

    stage1 = train_stage(ternary, Objective.INTERMEDIATE, task.train, config, config.lr_int, config.epochs_int,
                         StageTag.INT_DISTIL_TERNARY.value, teacher, seed)
    curves[stage1.stage] = stage1.losses
    metrics["stage1"] = evaluate(ternary, task.dev, config.eval_batch_size).accuracy

    stage2 = train_stage(ternary, Objective.PREDICTION, task.train, config, config.lr_pred, config.epochs_pred,
                         StageTag.PRED_DISTIL_TERNARY.value, teacher, seed + 1)
    curves[stage2.stage] = stage2.losses
    metrics["stage2"] = evaluate(ternary, task.dev, config.eval_batch_size).accuracy

    binary = split_model(ternary)
    check = check_split(ternary, binary, task.dev, config.eval_batch_size)
    metrics["split"] = evaluate(binary, task.dev, config.eval_batch_size).accuracy
    metrics["split_max_logit_diff"] = check.max_logit_diff
    metrics["split_train_loss"] = distill_loss(binary, teacher, task.train, config.eval_batch_size)
    if not check.predictions_match:
        logger.warning("⚠️  Split flipped near-tie predictions (max logit difference %.2e)", check.max_logit_diff)

    stage3 = train_stage(binary, Objective.PREDICTION, task.train, config, config.lr_split, config.epochs_split,
                         StageTag.SPLIT_FINETUNE.value, teacher, seed + 2)
    curves[stage3.stage] = stage3.losses
    metrics["stage3"] = evaluate(binary, task.dev, config.eval_batch_size).accuracy
    metrics["final_train_loss"] = distill_loss(binary, teacher, task.train, config.eval_batch_size)
    logger.info(
        "✅ Pipeline seed %d: ternary %.3f -> split %.3f -> fine-tuned %.3f",
        seed, metrics["stage2"], metrics["split"], metrics["stage3"],
    )
    return PipelineResult(teacher, ternary, binary, metrics, curves, check.predictions_match)


def run_bwn_baseline(
    task: Task,
    spec: ModelSpec,
    config: TrainConfig,
    quant: QuantConfig,
    seed: int,
    teacher: QuantBert,
    variant: str = "direct",
) -> BaselineResult:
    """
    Width-1.0 binary baseline with doubled distillation epochs.
    direct: binary from the start; ternary-scale: binary with the ternary scale rule;
    gradual: a ternary model trained first, then binarized and trained again.
    """
    if teacher.spec.width < 1.0:
        raise ConfigurationError("binary baselines are full width and need a width-1.0 teacher")
    seed_everything(seed)
    full = spec.at_width(1.0)
    if variant == "gradual":
        model = student_from_teacher(teacher, full, uniform_precision(full, QuantScheme.ternary()), quant, config)
        curves = distill(model, teacher, task, config, seed, config.epochs_int, config.epochs_pred, "bwn-gradual-ternary")
        model.set_precision(uniform_precision(full, QuantScheme.binary()))
        curves.update(distill(model, teacher, task, config, seed + 10, config.epochs_int, config.epochs_pred, "bwn-gradual-binary"))
    elif variant in ("direct", "ternary-scale"):
        if variant == "ternary-scale":
            quant = quant.model_copy(update={"scale_rule": "ternary"})
        model = student_from_teacher(teacher, full, uniform_precision(full, QuantScheme.binary()), quant, config)
        curves = distill(model, teacher, task, config, seed, 2 * config.epochs_int, 2 * config.epochs_pred, f"bwn-{variant}")
    else:
        raise ConfigurationError(f"Unknown baseline variant '{variant}'")
    accuracy = evaluate(model, task.dev, config.eval_batch_size).accuracy
    logger.info("✅ BWN %s seed %d: %.3f", variant, seed, accuracy)
    return BaselineResult(model, variant, {"accuracy": accuracy}, curves)


def compare_training_curves(
    task: Task,
    spec: ModelSpec,
    config: TrainConfig,
    quant: QuantConfig,
    seed: int,
    teacher: QuantBert,
) -> dict[str, list[float]]:
    """
    Fine-tuning curves after distillation, each with a reset optimizer and schedule:
    the split model (TWS), the ternary model trained on (TWN) and a width-1.0 binary model (BWN).
    """
    pipeline = run_tws_pipeline(task, spec, config, quant, seed, teacher)
    twn = copy.deepcopy(pipeline.ternary)
    twn_stage = train_stage(twn, Objective.PREDICTION, task.train, config, config.lr_split, config.epochs_split,
                            "twn-finetune", teacher, seed + 2)

    seed_everything(seed)
    full = spec.at_width(1.0)
    bwn = student_from_teacher(teacher, full, uniform_precision(full, QuantScheme.binary()), quant, config)
    distill(bwn, teacher, task, config, seed, config.epochs_int, config.epochs_pred, "bwn")
    bwn_stage = train_stage(bwn, Objective.PREDICTION, task.train, config, config.lr_split, config.epochs_split,
                            "bwn-finetune", teacher, seed + 2)
    return {
        "BWN": bwn_stage.losses,
        "TWN": twn_stage.losses,
        "TWS": pipeline.curves[StageTag.SPLIT_FINETUNE.value],
    }


def train_quantized(
    task: Task,
    spec: ModelSpec,
    precision: dict[str, QuantScheme],
    config: TrainConfig,
    quant: QuantConfig,
    seed: int,
    teacher: QuantBert,
) -> tuple[QuantBert, float]:
    """Distill a model of the given precision from the teacher; returns it with dev accuracy."""
    seed_everything(seed)
    model = student_from_teacher(teacher, spec, precision, quant, config)
    distill(model, teacher, task, config, seed, config.epochs_int, config.epochs_pred, StageTag.BASELINE.value)
    return model, evaluate(model, task.dev, config.eval_batch_size).accuracy


# Sweeps
@dataclass
class SweepRow:
    bits: int
    mean: float
    std: float
    accuracies: list[float]


def _sweep_seed(task: Task, spec: ModelSpec, config: TrainConfig, quant: QuantConfig, bits_list: Sequence[int], seed: int) -> dict[int, float]:
    teacher = train_teacher(task, spec.at_width(1.0), config, seed).model
    results = {}
    for bits in bits_list:
        if bits >= 32:
            results[bits] = evaluate(teacher, task.dev, config.eval_batch_size).accuracy
            continue
        full = spec.at_width(1.0)
        precision = uniform_precision(full, QuantScheme.from_bits(bits))
        _, results[bits] = train_quantized(task, full, precision, config, quant, seed, teacher)
        logger.info("📊 %d-bit weights, seed %d: %.3f", bits, seed, results[bits])
    return results


def _worker_init() -> None:
    configure_determinism(num_threads=1)


def map_seeds(fn: Callable[[int], object], seeds: Sequence[int], workers: int = 1) -> list:
    """Run independent per-seed jobs, in a process pool when workers > 1; results keep seed order."""
    if workers <= 1 or len(seeds) <= 1:
        return [fn(seed) for seed in seeds]
    with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init) as pool:
        return list(pool.map(fn, seeds))


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    mean = statistics.fmean(values)
    return mean, statistics.stdev(values) if len(values) > 1 else 0.0


def sweep_bits(
    task: Task,
    spec: ModelSpec,
    config: TrainConfig,
    quant: QuantConfig,
    bits_list: Sequence[int],
    seeds: Sequence[int],
    workers: int = 1,
) -> list[SweepRow]:
    """Dev accuracy per weight bit-width, mean and std over seeds; 1 bit is direct binarization."""
    per_seed = map_seeds(partial(_sweep_seed, task, spec, config, quant, tuple(bits_list)), seeds, workers)
    rows = []
    for bits in bits_list:
        accuracies = [result[bits] for result in per_seed]
        mean, std = summarize(accuracies)
        rows.append(SweepRow(bits, mean, std, accuracies))
    return rows
