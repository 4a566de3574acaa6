from __future__ import annotations

from enum import StrEnum
from typing import TYPE_CHECKING, Literal

from pydantic import BaseModel, ConfigDict

from src.arch.spec import (
    BlockFamily,
    BlockSpec,
    ConvLayerSpec,
    Family,
    LayerRole,
    NetworkSpec,
    ShortcutKind,
    ShortcutStyle,
)

if TYPE_CHECKING:
    from collections.abc import Iterator


class Rule(StrEnum):
    NON_DIVISIBLE = "NonDivisible"
    KERNEL = "KernelRule"
    SHORTCUT = "ShortcutRule"
    PAIR = "PairRule"
    DEPTH = "DepthRule"
    CHANNEL = "ChannelRule"


class Violation(BaseModel):
    """One broken structural rule.

    `index` is the position in `NetworkSpec.main_path()` for layer violations and the block position for block
    violations; network-wide violations carry no index.
    """

    model_config = ConfigDict(frozen=True)

    rule: Rule
    target: Literal["layer", "block", "network"]
    index: int | None
    location: str
    message: str

    def __str__(self) -> str:
        where = self.target if self.index is None else f"{self.target} {self.index}"
        return f"{self.rule}@{where} ({self.location}): {self.message}"


def _conv_violations(conv: ConvLayerSpec, target: Literal["layer", "block"], index: int) -> Iterator[Violation]:
    if conv.in_channels % conv.groups or conv.out_channels % conv.groups:
        yield Violation(
            rule=Rule.NON_DIVISIBLE,
            target=target,
            index=index,
            location=conv.name,
            message=f"groups={conv.groups} must divide m={conv.in_channels} and n={conv.out_channels}",
        )
    if conv.role in {LayerRole.POINTWISE1X1, LayerRole.SHORTCUT1X1} and conv.kernel != 1:
        yield Violation(
            rule=Rule.KERNEL,
            target=target,
            index=index,
            location=conv.name,
            message=f"{conv.role} layers must have k=1, got k={conv.kernel}",
        )


def _expected_shortcut(spec: NetworkSpec, block: BlockSpec) -> set[ShortcutKind]:
    if not spec.residual:
        return {ShortcutKind.NONE}

    shape_changes = block.in_channels != block.out_channels or block.stride != 1
    if block.family is BlockFamily.MV2_INVERTED:
        return {ShortcutKind.NONE} if shape_changes else {ShortcutKind.IDENTITY}
    if shape_changes or spec.shortcut_style is ShortcutStyle.ALWAYS_PROJECTION:
        return {ShortcutKind.PROJECTION1X1}
    return {ShortcutKind.IDENTITY}


def _block_violations(spec: NetworkSpec, block: BlockSpec, index: int) -> Iterator[Violation]:
    expected = _expected_shortcut(spec, block)
    if block.shortcut not in expected:
        yield Violation(
            rule=Rule.SHORTCUT,
            target="block",
            index=index,
            location=block.name,
            message=f"shortcut={block.shortcut}, expected {' or '.join(sorted(expected))}",
        )

    has_projection = any(isinstance(layer, ConvLayerSpec) for layer in block.shortcut_layers)
    if has_projection != (block.shortcut is ShortcutKind.PROJECTION1X1):
        yield Violation(
            rule=Rule.SHORTCUT,
            target="block",
            index=index,
            location=block.name,
            message=f"shortcut={block.shortcut} does not match its {len(block.shortcut_layers)} shortcut layers",
        )

    for layer in block.shortcut_layers:
        if isinstance(layer, ConvLayerSpec):
            yield from _conv_violations(layer, "block", index)

    if block.family is BlockFamily.MV2_INVERTED:
        return

    convs = [layer for layer in block.layers if isinstance(layer, ConvLayerSpec)]
    for conv, following in zip(convs, [*convs[1:], None], strict=True):
        if conv.role is LayerRole.SPATIAL3X3 and (following is None or following.role is not LayerRole.POINTWISE1X1):
            yield Violation(
                rule=Rule.PAIR,
                target="block",
                index=index,
                location=conv.name,
                message="every 3x3 grouped convolution must be followed by a 1x1 convolution",
            )


def _depth_violations(spec: NetworkSpec) -> Iterator[Violation]:
    if spec.family is not Family.WRN:
        return

    d = spec.depth or 0
    if d <= 4 or (d - 4) % 6:  # noqa: PLR2004
        yield Violation(
            rule=Rule.DEPTH,
            target="network",
            index=None,
            location=spec.name,
            message=f"(d - 4) / 6 must be a positive integer, got d={d}",
        )
        return

    r = (d - 4) // 6
    if any(stage.blocks != r for stage in spec.stages) or len(spec.blocks) != r * len(spec.stages):
        yield Violation(
            rule=Rule.DEPTH,
            target="network",
            index=None,
            location=spec.name,
            message=f"every stage must hold r={r} blocks",
        )


def validate(spec: NetworkSpec) -> list[Violation]:
    """Check every structural rule of a network spec.

    Args:
        spec (NetworkSpec): The spec to check, possibly hand-edited.

    Returns:
        list[Violation]: Every broken rule, empty for a valid spec.
    """
    violations: list[Violation] = list(_depth_violations(spec))

    width = spec.in_channels
    for index, layer in enumerate(spec.main_path()):
        if not isinstance(layer, ConvLayerSpec):
            continue
        violations.extend(_conv_violations(layer, "layer", index))
        if layer.in_channels != width:
            violations.append(
                Violation(
                    rule=Rule.CHANNEL,
                    target="layer",
                    index=index,
                    location=layer.name,
                    message=f"expects {layer.in_channels} input channels but receives {width}",
                )
            )
        width = layer.out_channels

    if spec.classifier.in_features != width:
        violations.append(
            Violation(
                rule=Rule.CHANNEL,
                target="network",
                index=None,
                location=spec.classifier.name,
                message=f"expects {spec.classifier.in_features} features but receives {width}",
            )
        )

    for index, block in enumerate(spec.blocks):
        violations.extend(_block_violations(spec, block, index))

    return violations
