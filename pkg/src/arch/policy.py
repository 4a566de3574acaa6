from __future__ import annotations

from enum import StrEnum
from typing import Self

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import NonDivisibleError


class PolicyKind(StrEnum):
    STANDARD = "standard"
    CONSTANT_GROUPS = "constant_groups"
    CONSTANT_GROUP_SIZE = "constant_group_size"
    DEPTHWISE = "depthwise"


class GroupingPolicy(BaseModel):
    """How the spatial 3x3 convolutions of a network are split into groups.

    `ConstantGroups(g)` fixes the number of groups network-wide, so channels per group grow with width.
    `ConstantGroupSize(G)` fixes the channels per group, so the number of groups is `m / G`. For any layer the resolved
    group count times the resolved group size equals the layer's input width `m`.

    Attributes:
        kind (PolicyKind): The policy family.
        value (int | None): `g` for constant groups, `G` for constant group size, absent otherwise.
    """

    model_config = ConfigDict(frozen=True)

    kind: PolicyKind
    value: int | None = Field(default=None, ge=1)

    @model_validator(mode="after")
    def check_value(self) -> Self:
        needs_value = self.kind in {PolicyKind.CONSTANT_GROUPS, PolicyKind.CONSTANT_GROUP_SIZE}
        if needs_value and self.value is None:
            msg = f"Policy {self.kind} needs a value"
            raise ValueError(msg)
        if not needs_value and self.value is not None:
            msg = f"Policy {self.kind} takes no value, got {self.value}"
            raise ValueError(msg)
        return self

    @classmethod
    def standard(cls) -> Self:
        return cls(kind=PolicyKind.STANDARD)

    @classmethod
    def depthwise(cls) -> Self:
        return cls(kind=PolicyKind.DEPTHWISE)

    @classmethod
    def groups(cls, g: int) -> Self:
        return cls(kind=PolicyKind.CONSTANT_GROUPS, value=g)

    @classmethod
    def group_size(cls, group_size: int) -> Self:
        return cls(kind=PolicyKind.CONSTANT_GROUP_SIZE, value=group_size)

    @classmethod
    def parse(cls, text: str) -> Self:
        """Parse the command-line notation: `std`, `dw`, `g=N` or `G=N` (`g2`/`G2` also accepted).

        Raises:
            ValueError: If the text is not a policy.
        """
        text = text.strip()
        if text.lower() in {"std", "standard"}:
            return cls.standard()
        if text.lower() in {"dw", "depthwise"}:
            return cls.depthwise()

        prefix, number = text[:1], text[1:].lstrip("=")
        if prefix in {"g", "G"} and number.isdigit():
            return cls.groups(int(number)) if prefix == "g" else cls.group_size(int(number))

        msg = f"Invalid policy {text!r}. Expected one of: std, dw, g=N, G=N"
        raise ValueError(msg)

    def canonical(self) -> GroupingPolicy:
        """Return the equivalent policy in its simplest form (`g=1` is standard, `G=1` is depthwise)."""
        if self.kind is PolicyKind.CONSTANT_GROUPS and self.value == 1:
            return GroupingPolicy.standard()
        if self.kind is PolicyKind.CONSTANT_GROUP_SIZE and self.value == 1:
            return GroupingPolicy.depthwise()
        return self

    @property
    def label(self) -> str:
        """Short label as used in table headers, e.g. `g2`, `G16`, `std`, `dw`."""
        match self.kind:
            case PolicyKind.STANDARD:
                return "std"
            case PolicyKind.DEPTHWISE:
                return "dw"
            case PolicyKind.CONSTANT_GROUPS:
                return f"g{self.value}"
            case PolicyKind.CONSTANT_GROUP_SIZE:
                return f"G{self.value}"

    @property
    def cli_notation(self) -> str:
        match self.kind:
            case PolicyKind.CONSTANT_GROUPS:
                return f"g={self.value}"
            case PolicyKind.CONSTANT_GROUP_SIZE:
                return f"G={self.value}"
            case _:
                return self.label


def resolve_groups(policy: GroupingPolicy, m: int) -> int:
    """Resolve a policy to the group count of a layer with `m` input channels.

    Args:
        policy (GroupingPolicy): The grouping policy.
        m (int): Input channel count of the layer.

    Returns:
        int: Group count `t`, always a divisor of `m`.

    Raises:
        NonDivisibleError: If `g` or `G` does not divide `m`.
        ValueError: If `m` is not positive.
    """
    if m < 1:
        msg = f"Channel count must be positive, got {m}"
        raise ValueError(msg)

    match policy.kind:
        case PolicyKind.STANDARD:
            return 1
        case PolicyKind.DEPTHWISE:
            return m
        case PolicyKind.CONSTANT_GROUPS:
            g = policy.value or 1
            if m % g:
                msg = f"g={g} does not divide m={m}"
                raise NonDivisibleError(msg)
            return g
        case PolicyKind.CONSTANT_GROUP_SIZE:
            group_size = policy.value or 1
            if m % group_size:
                msg = f"G={group_size} does not divide m={m}"
                raise NonDivisibleError(msg)
            return m // group_size


SWEEP_POLICIES: tuple[GroupingPolicy, ...] = (
    GroupingPolicy.groups(2),
    GroupingPolicy.groups(4),
    GroupingPolicy.groups(8),
    GroupingPolicy.groups(16),
    GroupingPolicy.group_size(1),
    GroupingPolicy.group_size(2),
    GroupingPolicy.group_size(4),
    GroupingPolicy.group_size(8),
    GroupingPolicy.group_size(16),
)
"""The nine policy columns of a cost sweep (`G1` is kept as written, not canonicalised)."""
