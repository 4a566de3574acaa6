from __future__ import annotations

from enum import StrEnum
from typing import TYPE_CHECKING, Annotated, Literal, Self

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.arch.policy import GroupingPolicy  # noqa: TC001
from src.errors import SchemaError

if TYPE_CHECKING:
    from collections.abc import Iterator

ARCHSPEC_SCHEMA = "archspec/1"


class Family(StrEnum):
    WRN = "wrn"
    RESNET18 = "resnet18"
    MOBILENETV2 = "mobilenetv2"


class BlockFamily(StrEnum):
    WRN_BASIC = "wrn_basic"
    RESNET18_BASIC = "resnet18_basic"
    MV2_INVERTED = "mv2_inverted"


class LayerRole(StrEnum):
    SPATIAL3X3 = "spatial3x3"
    POINTWISE1X1 = "pointwise1x1"
    SHORTCUT1X1 = "shortcut1x1"
    STEM = "stem"
    CLASSIFIER_ADJACENT = "classifier_adjacent"


class ShortcutKind(StrEnum):
    PROJECTION1X1 = "projection1x1"
    IDENTITY = "identity"
    NONE = "none"


class PairMapping(StrEnum):
    """Which half of the [3x3 GConv -> 1x1] pair changes the channel count."""

    MIXER_EXPANDS = "mixer_expands"
    GCONV_EXPANDS = "gconv_expands"


class ShortcutStyle(StrEnum):
    """Where WRN/ResNet-18 blocks carry a 1x1 projection shortcut."""

    ON_SHAPE_CHANGE = "on_shape_change"
    ALWAYS_PROJECTION = "always_projection"


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True)


class ConvLayerSpec(_Frozen):
    """A convolution: `n` filters of `m / groups` channels and size `k x k`."""

    kind: Literal["conv"] = "conv"
    name: str
    in_channels: int = Field(ge=1)
    out_channels: int = Field(ge=1)
    kernel: int = Field(ge=1)
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)
    groups: int = Field(default=1, ge=1)
    role: LayerRole

    def output_size(self, f: int) -> int:
        return (f + 2 * self.padding - self.kernel) // self.stride + 1


class NormSpec(_Frozen):
    kind: Literal["norm"] = "norm"
    name: str
    channels: int = Field(ge=1)


class ActivationSpec(_Frozen):
    kind: Literal["relu"] = "relu"


class DropoutSpec(_Frozen):
    kind: Literal["dropout"] = "dropout"
    p: float = Field(ge=0.0, lt=1.0)


LayerSpec = Annotated[
    ConvLayerSpec | NormSpec | ActivationSpec | DropoutSpec,
    Field(discriminator="kind"),
]


class BlockSpec(_Frozen):
    """One residual (or formerly residual) block.

    `layers` is the main path. The shortcut path is `shortcut` plus, for projections, `shortcut_layers`; the two are
    merged by addition and followed by a ReLU when `activation_after_merge` is set.
    """

    name: str
    family: BlockFamily
    in_channels: int
    out_channels: int
    stride: int
    layers: tuple[LayerSpec, ...]
    shortcut: ShortcutKind
    shortcut_layers: tuple[LayerSpec, ...] = ()
    activation_after_merge: bool


class StageSpec(_Frozen):
    blocks: int = Field(ge=1)
    out_channels: int = Field(ge=1)
    stride: int = Field(ge=1)


class ClassifierSpec(_Frozen):
    name: str = "classifier"
    in_features: int = Field(ge=1)
    num_classes: int = Field(ge=1)


class NetworkSpec(_Frozen):
    """Declarative layer/block graph of one network variant."""

    model_config = ConfigDict(frozen=True, populate_by_name=True, serialize_by_alias=True)

    schema_version: Literal["archspec/1"] = Field(default=ARCHSPEC_SCHEMA, alias="schema")
    family: Family
    depth: int | None = None
    widen_factor: int | None = None
    policy: GroupingPolicy
    residual: bool
    stages: tuple[StageSpec, ...]
    num_classes: int = Field(ge=1)
    dropout_p: float = Field(default=0.0, ge=0.0, lt=1.0)
    in_channels: int = 3
    pair_mapping: PairMapping = PairMapping.MIXER_EXPANDS
    shortcut_style: ShortcutStyle = ShortcutStyle.ON_SHAPE_CHANGE
    stem: tuple[LayerSpec, ...]
    blocks: tuple[BlockSpec, ...]
    head: tuple[LayerSpec, ...] = ()
    classifier: ClassifierSpec

    @property
    def name(self) -> str:
        """Human-readable name such as `R-WRN-22x2-g2` or `NR-MobileNetV2-G4`."""
        prefix = "R" if self.residual else "NR"
        match self.family:
            case Family.WRN:
                base = f"WRN-{self.depth}x{self.widen_factor}"
            case Family.RESNET18:
                base = "ResNet18"
            case Family.MOBILENETV2:
                base = "MobileNetV2"
        return f"{prefix}-{base}-{self.policy.label}"

    def main_path(self) -> list[LayerSpec]:
        """Every layer outside the shortcut paths, in execution order."""
        layers: list[LayerSpec] = list(self.stem)
        for block in self.blocks:
            layers.extend(block.layers)
        layers.extend(self.head)
        return layers

    def conv_layers(self) -> Iterator[tuple[ConvLayerSpec, bool]]:
        """Yield every convolution with a flag telling whether it sits on a shortcut path."""
        for layer in self.main_path():
            if isinstance(layer, ConvLayerSpec):
                yield layer, False
        for block in self.blocks:
            for layer in block.shortcut_layers:
                if isinstance(layer, ConvLayerSpec):
                    yield layer, True

    def to_json(self) -> str:
        return self.model_dump_json(indent=2, by_alias=True)

    @classmethod
    def from_json(cls, text: str) -> Self:
        """Parse an `archspec/1` document.

        Raises:
            SchemaError: If the document carries another schema tag.
            ValidationError: If the document does not match the schema.
        """
        try:
            return cls.model_validate_json(text)
        except ValidationError as e:
            if any(error["loc"][:1] == ("schema",) for error in e.errors()):
                msg = f"Expected an {ARCHSPEC_SCHEMA} document: {e}"
                raise SchemaError(msg) from e
            raise
