from __future__ import annotations

from typing import Annotated, Literal, Self

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.arch.spec import Family

DEFAULT_EPOCHS = 120
DISTILLED_MOBILENETV2_EPOCHS = 300


class StepDecay(BaseModel):
    """Divide the learning rate by `factor` at the start of every milestone epoch (0-indexed)."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["step"] = "step"
    milestones: tuple[int, ...] = (30, 60, 90)
    factor: float = Field(default=10.0, gt=0.0)

    @model_validator(mode="after")
    def check_milestones(self) -> Self:
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:], strict=False)):
            msg = f"Milestones must be strictly increasing, got {self.milestones}"
            raise ValueError(msg)
        if any(m < 0 for m in self.milestones):
            msg = f"Milestones must be non-negative, got {self.milestones}"
            raise ValueError(msg)
        return self


class ExponentialPerEpoch(BaseModel):
    """Multiply the learning rate by `factor` after every epoch."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["exponential"] = "exponential"
    factor: float = Field(default=0.98, gt=0.0)


LrSchedule = Annotated[StepDecay | ExponentialPerEpoch, Field(discriminator="kind")]


def lr_at(schedule: StepDecay | ExponentialPerEpoch, lr0: float, epoch: int) -> float:
    """Learning rate of a 0-indexed epoch.

    Raises:
        ValueError: If `epoch` is negative.
    """
    if epoch < 0:
        msg = f"Epoch must be non-negative, got {epoch}"
        raise ValueError(msg)

    match schedule:
        case StepDecay():
            passed = sum(1 for m in schedule.milestones if epoch >= m)
            return lr0 / schedule.factor**passed
        case ExponentialPerEpoch():
            return lr0 * schedule.factor**epoch


def schedule_for_family(family: Family) -> StepDecay | ExponentialPerEpoch:
    """The published recipe: ResNet-18 divides by 10 and WRN by 5 at 30/60/90; MobileNetV2 decays by 0.98 per epoch."""
    match family:
        case Family.RESNET18:
            return StepDecay(factor=10.0)
        case Family.WRN:
            return StepDecay(factor=5.0)
        case Family.MOBILENETV2:
            return ExponentialPerEpoch(factor=0.98)


def epochs_for(family: Family, *, distilled: bool) -> int:
    if family is Family.MOBILENETV2 and distilled:
        return DISTILLED_MOBILENETV2_EPOCHS
    return DEFAULT_EPOCHS
