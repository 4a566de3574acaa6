from __future__ import annotations

from collections.abc import Callable
from typing import Self

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.arch.policy import GroupingPolicy, resolve_groups
from src.arch.spec import (
    ActivationSpec,
    BlockFamily,
    BlockSpec,
    ClassifierSpec,
    ConvLayerSpec,
    DropoutSpec,
    Family,
    LayerRole,
    LayerSpec,
    NetworkSpec,
    NormSpec,
    PairMapping,
    ShortcutKind,
    ShortcutStyle,
    StageSpec,
)
from src.errors import InvalidDepthError

WRN_BASE_WIDTHS = (16, 32, 64)
WRN_STAGE_STRIDES = (1, 2, 2)
WRN_DEFAULT_DROPOUT = 0.3

RESNET18_STAGES = ((2, 64, 1), (2, 128, 2), (2, 256, 2), (2, 512, 2))

# (expansion t, out channels c, blocks n, first stride s). The 24-channel stage keeps stride 1 so that 32x32 inputs
# end on a 4x4 map.
MV2_STAGES = (
    (1, 16, 1, 1),
    (6, 24, 2, 1),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)
MV2_STEM_CHANNELS = 32
MV2_HEAD_CHANNELS = 1280


class ArchRequest(BaseModel):
    """Everything needed to build one network variant."""

    model_config = ConfigDict(frozen=True)

    family: Family
    depth: int | None = Field(default=None, description="WRN depth d.")
    widen: int | None = Field(default=None, ge=1, description="WRN widening factor.")
    policy: GroupingPolicy = Field(default_factory=GroupingPolicy.standard)
    residual: bool = True
    num_classes: int = Field(default=100, ge=1)
    dropout_p: float | None = Field(default=None, ge=0.0, lt=1.0, description="Defaults to 0.3 for WRN, else 0.")
    pair_mapping: PairMapping = PairMapping.MIXER_EXPANDS
    shortcut_style: ShortcutStyle = ShortcutStyle.ON_SHAPE_CHANGE

    @model_validator(mode="after")
    def check_wrn_fields(self) -> Self:
        if self.family is Family.WRN and (self.depth is None or self.widen is None):
            msg = "WRN needs both depth and widen"
            raise ValueError(msg)
        return self


type BuilderFn = Callable[[ArchRequest], NetworkSpec]

builders: dict[Family, BuilderFn] = {}


def register_builder(family: Family) -> Callable[[BuilderFn], BuilderFn]:
    """Decorator to register the builder of a network family.

    Args:
        family (Family): The family the builder constructs.

    Returns:
        Callable[[BuilderFn], BuilderFn]: The decorator function.
    """

    def decorator(func: BuilderFn) -> BuilderFn:
        builders[family] = func
        return func

    return decorator


def build(request: ArchRequest) -> NetworkSpec:
    """Build the network described by `request` with the registered builder of its family."""
    return builders[request.family](request)


# LAYER HELPERS
# =============
def _conv(name: str, m: int, n: int, k: int, *, role: LayerRole, stride: int = 1, groups: int = 1) -> ConvLayerSpec:
    return ConvLayerSpec(
        name=name,
        in_channels=m,
        out_channels=n,
        kernel=k,
        stride=stride,
        padding=k // 2,
        groups=groups,
        role=role,
    )


def _conv_bn(conv: ConvLayerSpec, *, relu: bool) -> list[LayerSpec]:
    """A convolution followed by its batch-norm and, optionally, a ReLU."""
    layers: list[LayerSpec] = [conv, NormSpec(name=f"{conv.name}_bn", channels=conv.out_channels)]
    if relu:
        layers.append(ActivationSpec())
    return layers


def _gconv_pair(
    prefix: str,
    *,
    m: int,
    n: int,
    stride: int,
    policy: GroupingPolicy,
    mapping: PairMapping,
    relu_after: bool,
) -> list[LayerSpec]:
    """The [3x3 grouped conv -> 1x1 conv] pair that replaces a standard 3x3 convolution.

    Raises:
        NonDivisibleError: If the policy cannot split the 3x3 convolution's input.
    """
    groups = resolve_groups(policy, m)
    gconv_out = m if mapping is PairMapping.MIXER_EXPANDS else n

    gconv = _conv(f"{prefix}.gconv", m, gconv_out, 3, role=LayerRole.SPATIAL3X3, stride=stride, groups=groups)
    layers = _conv_bn(gconv, relu=True)
    layers.extend(_conv_bn(_conv(f"{prefix}.mix", gconv_out, n, 1, role=LayerRole.POINTWISE1X1), relu=relu_after))
    return layers


def _stem(out_channels: int, in_channels: int) -> tuple[LayerSpec, ...]:
    return tuple(_conv_bn(_conv("stem.conv", in_channels, out_channels, 3, role=LayerRole.STEM), relu=True))


def _basic_block(
    name: str,
    *,
    family: BlockFamily,
    m: int,
    n: int,
    stride: int,
    request: ArchRequest,
    dropout_p: float,
) -> BlockSpec:
    """A WRN/ResNet-18 basic block with both 3x3 convolutions replaced by grouped pairs."""
    layers = _gconv_pair(
        f"{name}.a", m=m, n=n, stride=stride, policy=request.policy, mapping=request.pair_mapping, relu_after=True
    )
    if dropout_p > 0:
        layers.append(DropoutSpec(p=dropout_p))
    layers.extend(
        _gconv_pair(
            f"{name}.b", m=n, n=n, stride=1, policy=request.policy, mapping=request.pair_mapping, relu_after=False
        )
    )

    shortcut = ShortcutKind.NONE
    shortcut_layers: tuple[LayerSpec, ...] = ()
    if request.residual:
        shape_changes = m != n or stride != 1
        if shape_changes or request.shortcut_style is ShortcutStyle.ALWAYS_PROJECTION:
            shortcut = ShortcutKind.PROJECTION1X1
            shortcut_layers = tuple(
                _conv_bn(_conv(f"{name}.shortcut", m, n, 1, role=LayerRole.SHORTCUT1X1, stride=stride), relu=False)
            )
        else:
            shortcut = ShortcutKind.IDENTITY

    return BlockSpec(
        name=name,
        family=family,
        in_channels=m,
        out_channels=n,
        stride=stride,
        layers=tuple(layers),
        shortcut=shortcut,
        shortcut_layers=shortcut_layers,
        activation_after_merge=True,
    )


def _basic_network(
    request: ArchRequest,
    *,
    stages: tuple[StageSpec, ...],
    stem_channels: int,
    block_family: BlockFamily,
    dropout_p: float,
) -> NetworkSpec:
    blocks: list[BlockSpec] = []
    m = stem_channels
    for stage_index, stage in enumerate(stages, start=1):
        for block_index in range(stage.blocks):
            stride = stage.stride if block_index == 0 else 1
            blocks.append(
                _basic_block(
                    f"stage{stage_index}.block{block_index}",
                    family=block_family,
                    m=m,
                    n=stage.out_channels,
                    stride=stride,
                    request=request,
                    dropout_p=dropout_p,
                )
            )
            m = stage.out_channels

    return NetworkSpec(
        family=request.family,
        depth=request.depth,
        widen_factor=request.widen,
        policy=request.policy,
        residual=request.residual,
        stages=stages,
        num_classes=request.num_classes,
        dropout_p=dropout_p,
        pair_mapping=request.pair_mapping,
        shortcut_style=request.shortcut_style,
        stem=_stem(stem_channels, 3),
        blocks=tuple(blocks),
        classifier=ClassifierSpec(in_features=m, num_classes=request.num_classes),
    )


# FAMILY BUILDERS
# ===============
def build_wrn(
    d: int,
    widen: int,
    policy: GroupingPolicy,
    residual: bool,  # noqa: FBT001
    num_classes: int = 100,
    **options: object,
) -> NetworkSpec:
    """Build a WRN-d-k variant with `r = (d - 4) / 6` blocks per stage.

    Args:
        d (int): Depth of the network.
        widen (int): Widening factor applied to the 16/32/64 stage widths.
        policy (GroupingPolicy): Grouping policy for the 3x3 convolutions.
        residual (bool): Whether blocks keep their shortcut connections.
        num_classes (int): Width of the classifier.
        **options (object): Further `ArchRequest` fields (dropout_p, pair_mapping, shortcut_style).

    Raises:
        InvalidDepthError: If `d - 4` is not a positive multiple of 6.
        NonDivisibleError: If the policy does not divide a layer's width.
    """
    request = ArchRequest.model_validate({
        "family": Family.WRN,
        "depth": d,
        "widen": widen,
        "policy": policy,
        "residual": residual,
        "num_classes": num_classes,
        **options,
    })
    return build(request)


def build_resnet18(
    policy: GroupingPolicy,
    residual: bool,  # noqa: FBT001
    num_classes: int = 100,
    **options: object,
) -> NetworkSpec:
    """Build the small-input ResNet-18 variant (3x3 stem, four stages of two basic blocks)."""
    request = ArchRequest.model_validate({
        "family": Family.RESNET18,
        "policy": policy,
        "residual": residual,
        "num_classes": num_classes,
        **options,
    })
    return build(request)


def build_mobilenetv2(
    policy: GroupingPolicy,
    residual: bool,  # noqa: FBT001
    num_classes: int = 100,
    **options: object,
) -> NetworkSpec:
    """Build MobileNetV2 for 32x32 inputs with its depthwise 3x3 convolutions replaced by grouped ones."""
    request = ArchRequest.model_validate({
        "family": Family.MOBILENETV2,
        "policy": policy,
        "residual": residual,
        "num_classes": num_classes,
        **options,
    })
    return build(request)


@register_builder(Family.WRN)
def _build_wrn(request: ArchRequest) -> NetworkSpec:
    d = request.depth or 0
    widen = request.widen or 1
    if d <= 4 or (d - 4) % 6:  # noqa: PLR2004
        msg = f"WRN depth {d} does not give a whole number of blocks per stage: (d - 4) / 6 = {(d - 4) / 6:.3g}"
        raise InvalidDepthError(msg)

    r = (d - 4) // 6
    stages = tuple(
        StageSpec(blocks=r, out_channels=width * widen, stride=stride)
        for width, stride in zip(WRN_BASE_WIDTHS, WRN_STAGE_STRIDES, strict=True)
    )
    dropout_p = WRN_DEFAULT_DROPOUT if request.dropout_p is None else request.dropout_p
    request = request.model_copy(update={"policy": request.policy.canonical()})
    return _basic_network(
        request, stages=stages, stem_channels=16, block_family=BlockFamily.WRN_BASIC, dropout_p=dropout_p
    )


@register_builder(Family.RESNET18)
def _build_resnet18(request: ArchRequest) -> NetworkSpec:
    stages = tuple(StageSpec(blocks=n, out_channels=c, stride=s) for n, c, s in RESNET18_STAGES)
    request = request.model_copy(update={"policy": request.policy.canonical(), "depth": None, "widen": None})
    return _basic_network(
        request,
        stages=stages,
        stem_channels=64,
        block_family=BlockFamily.RESNET18_BASIC,
        dropout_p=request.dropout_p or 0.0,
    )


@register_builder(Family.MOBILENETV2)
def _build_mobilenetv2(request: ArchRequest) -> NetworkSpec:
    policy = request.policy.canonical()
    dropout_p = request.dropout_p or 0.0
    blocks: list[BlockSpec] = []
    m = MV2_STEM_CHANNELS

    for stage_index, (expansion, n, count, first_stride) in enumerate(MV2_STAGES, start=1):
        for block_index in range(count):
            stride = first_stride if block_index == 0 else 1
            name = f"stage{stage_index}.block{block_index}"
            hidden = m * expansion

            layers: list[LayerSpec] = []
            if expansion != 1:
                layers.extend(_conv_bn(_conv(f"{name}.expand", m, hidden, 1, role=LayerRole.POINTWISE1X1), relu=True))
            layers.extend(
                _conv_bn(
                    _conv(
                        f"{name}.gconv",
                        hidden,
                        hidden,
                        3,
                        role=LayerRole.SPATIAL3X3,
                        stride=stride,
                        groups=resolve_groups(policy, hidden),
                    ),
                    relu=True,
                )
            )
            layers.extend(_conv_bn(_conv(f"{name}.project", hidden, n, 1, role=LayerRole.POINTWISE1X1), relu=False))

            identity = request.residual and stride == 1 and m == n
            blocks.append(
                BlockSpec(
                    name=name,
                    family=BlockFamily.MV2_INVERTED,
                    in_channels=m,
                    out_channels=n,
                    stride=stride,
                    layers=tuple(layers),
                    shortcut=ShortcutKind.IDENTITY if identity else ShortcutKind.NONE,
                    activation_after_merge=False,
                )
            )
            m = n

    head: list[LayerSpec] = _conv_bn(
        _conv("head.conv", m, MV2_HEAD_CHANNELS, 1, role=LayerRole.CLASSIFIER_ADJACENT), relu=True
    )
    if dropout_p > 0:
        head.append(DropoutSpec(p=dropout_p))

    return NetworkSpec(
        family=Family.MOBILENETV2,
        policy=policy,
        residual=request.residual,
        stages=tuple(StageSpec(blocks=count, out_channels=n, stride=s) for _, n, count, s in MV2_STAGES),
        num_classes=request.num_classes,
        dropout_p=dropout_p,
        pair_mapping=request.pair_mapping,
        shortcut_style=request.shortcut_style,
        stem=_stem(MV2_STEM_CHANNELS, 3),
        blocks=tuple(blocks),
        head=tuple(head),
        classifier=ClassifierSpec(in_features=MV2_HEAD_CHANNELS, num_classes=request.num_classes),
    )
