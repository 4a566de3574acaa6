from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.tensorgrad.ops import add, cross_entropy, kl_div_logits, scale, softmax_t
from src.tensorgrad.tensor import Tensor, no_grad

if TYPE_CHECKING:
    from numpy.typing import NDArray


class DistillConfig(BaseModel):
    """Knowledge-distillation objective and the teacher it distills from."""

    model_config = ConfigDict(frozen=True)

    temperature: float = Field(default=4.0, gt=0.0, description="Softmax temperature T.")
    alpha: float = Field(default=0.9, ge=0.0, le=1.0, description="Weight of the soft-target term.")
    t2_scale: bool = Field(default=True, description="Multiply the soft-target term by T^2.")
    teacher: Path | None = Field(default=None, description="Run directory of the trained teacher.")


def soft_targets(teacher_logits: Tensor | NDArray[Any], temperature: float) -> Tensor:
    """Teacher probabilities at temperature T, detached from any graph."""
    logits = teacher_logits if isinstance(teacher_logits, Tensor) else Tensor(teacher_logits)
    with no_grad():
        return softmax_t(logits.detach(), temperature)


def kd_loss(
    student_logits: Tensor,
    teacher_logits: Tensor | NDArray[Any],
    labels: NDArray[np.integer[Any]],
    *,
    temperature: float,
    alpha: float,
    t2_scale: bool = True,
) -> Tensor:
    """`alpha * T^2 * KL(softmax_T(teacher) || softmax_T(student)) + (1 - alpha) * CE(student, labels)`.

    Only the student receives gradients. A term with zero weight is not computed at all, so `alpha = 0` is
    cross-entropy exactly.

    Args:
        student_logits (Tensor): Student logits [N, K].
        teacher_logits (Tensor | NDArray[Any]): Teacher logits [N, K].
        labels (NDArray[np.integer[Any]]): Hard labels [N].
        temperature (float): Softmax temperature T.
        alpha (float): Weight of the soft-target term.
        t2_scale (bool): Whether the soft-target term carries the T^2 gradient-scale correction.

    Returns:
        Tensor: The scalar loss.
    """
    terms: list[Tensor] = []
    if alpha > 0:
        targets = soft_targets(teacher_logits, temperature)
        weight = alpha * temperature**2 if t2_scale else alpha
        terms.append(scale(kl_div_logits(targets, student_logits, temperature), weight))
    if alpha < 1:
        ce = cross_entropy(student_logits, labels)
        terms.append(ce if alpha == 0 else scale(ce, 1.0 - alpha))

    loss = terms[0]
    for term in terms[1:]:
        loss = add(loss, term)
    return loss
