from __future__ import annotations

from typing import TYPE_CHECKING, Any

from pydantic import BaseModel, ConfigDict, Field

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import NDArray

    from src.tensorgrad.tensor import Parameter


class SgdConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr0: float = Field(default=0.1, gt=0.0, description="Initial learning rate.")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=4e-4, ge=0.0, description="Coupled L2 decay on conv/linear weights.")
    batch_size: int = Field(default=128, ge=1)
    epochs: int = Field(default=120, ge=1)
    seed: int = 0


class SgdState:
    """Momentum buffers by parameter name."""

    def __init__(self) -> None:  # noqa: D107
        self.velocity: dict[str, NDArray[Any]] = {}


def sgd_step(
    params: Sequence[Parameter],
    state: SgdState,
    *,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """One momentum SGD update with coupled weight decay, in place.

    `v = momentum * v + (grad + weight_decay * p)` and `p = p - lr * v`. Decay only applies to parameters marked
    `decay`; parameters without a gradient are left untouched.
    """
    for p in params:
        grad = p.tensor.grad
        if grad is None:
            continue
        data = p.tensor.data
        if p.decay and weight_decay:
            grad = grad + weight_decay * data

        velocity = state.velocity.get(p.name)
        velocity = grad.copy() if velocity is None else momentum * velocity + grad
        state.velocity[p.name] = velocity.astype(data.dtype, copy=False)
        p.tensor.data = (data - lr * velocity).astype(data.dtype, copy=False)

