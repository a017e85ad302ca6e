"""
Knowledge-distillation objectives from a full-precision teacher.
"""
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from bitsplit.exceptions import ShapeError
from bitsplit.numerics import check_finite, cross_entropy
from bitsplit.transformer import Intermediates, QuantBert


@dataclass
class DistillTargets:
    """Detached teacher outputs for one batch."""
    intermediates: Intermediates
    logits: torch.Tensor

    @classmethod
    def from_teacher(cls, teacher: QuantBert, input_ids: torch.Tensor, token_type_ids: torch.Tensor) -> "DistillTargets":
        was_training = teacher.training
        teacher.eval()
        with torch.no_grad():
            out = teacher(input_ids, token_type_ids)
        teacher.train(was_training)
        return cls(intermediates=out.intermediates, logits=out.logits)


def _mse(student: torch.Tensor, teacher: torch.Tensor, hook: str) -> torch.Tensor:
    if student.shape != teacher.shape:
        raise ShapeError(f"distillation hook '{hook}' shapes differ", tuple(student.shape), tuple(teacher.shape))
    return F.mse_loss(student, teacher, reduction="mean")


def loss_int(student: Intermediates, teacher: Intermediates) -> torch.Tensor:
    """MSE on the embedding output plus the sum of per-layer MSEs on MHA and FFN outputs."""
    if len(student.attention) != len(teacher.attention) or len(student.ffn) != len(teacher.ffn):
        raise ShapeError("student and teacher differ in layer count", (len(student.attention),), (len(teacher.attention),))
    loss = _mse(student.embedding, teacher.embedding, "embedding")
    for layer, (s, t) in enumerate(zip(student.attention, teacher.attention)):
        loss = loss + _mse(s, t, f"mha{layer}")
    for layer, (s, t) in enumerate(zip(student.ffn, teacher.ffn)):
        loss = loss + _mse(s, t, f"ffn{layer}")
    return loss


def loss_pred(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Soft cross-entropy -sum softmax(teacher) * log_softmax(student), batch mean, temperature 1."""
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError("logit shapes differ", tuple(student_logits.shape), tuple(teacher_logits.shape))
    check_finite(student_logits, "student logits")
    target = torch.softmax(teacher_logits, dim=-1)
    return -(target * torch.log_softmax(student_logits, dim=-1)).sum(dim=-1).mean()


def task_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return cross_entropy(logits, labels)
