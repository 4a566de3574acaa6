from __future__ import annotations

from decimal import ROUND_HALF_EVEN, Decimal
from typing import TYPE_CHECKING, Literal

import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from src.arch.builders import ArchRequest, build
from src.arch.policy import GroupingPolicy, PolicyKind
from src.arch.spec import ActivationSpec, ConvLayerSpec, LayerSpec, NetworkSpec, NormSpec
from src.errors import ShapeMismatchError

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

type LayerKind = Literal["conv", "norm", "relu", "pool", "linear"]
type InputShape = tuple[int, int, int]

FLOPS_SIGNIFICANT_DIGITS = 4
PARAMS_SIGNIFICANT_DIGITS = 3


class CountingConventions(BaseModel):
    """What `network_cost` counts besides convolutions. FLOPs are always multiply-accumulates."""

    model_config = ConfigDict(frozen=True)

    norm_params: bool = Field(default=True, description="Count the two affine parameters per normalized channel.")
    classifier: bool = Field(default=True, description="Count the classifier's weights, bias and MACs.")
    activation_flops: bool = Field(default=False, description="Count one operation per ReLU/pooled element.")
    norm_flops: bool = Field(default=False, description="Count one MAC per normalized element.")


class LayerCost(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    kind: LayerKind
    params: int
    flops: int
    fmap: int = Field(description="Side length f of the layer's output feature map.")
    shortcut: bool = False


class CostTotals(BaseModel):
    model_config = ConfigDict(frozen=True)

    params: int = 0
    flops: int = 0

    def __add__(self, other: CostTotals) -> CostTotals:
        return CostTotals(params=self.params + other.params, flops=self.flops + other.flops)

    def __sub__(self, other: CostTotals) -> CostTotals:
        return CostTotals(params=self.params - other.params, flops=self.flops - other.flops)


class CostReport(BaseModel):
    """Parameter and FLOP count of one network for one input size."""

    model_config = ConfigDict(frozen=True)

    network: str
    input: InputShape
    per_layer: tuple[LayerCost, ...]
    totals: CostTotals
    residual_overhead: CostTotals
    conventions: CountingConventions


def layer_cost(layer: ConvLayerSpec, f: int) -> CostTotals:
    """Closed-form cost of a convolution whose output map is `f x f`.

    A `t`-group convolution has `n * (m / t) * k^2` parameters, so standard (t=1), grouped and depthwise (t=m)
    convolutions all follow from the same formula. FLOPs are the parameters applied at every output position.

    Args:
        layer (ConvLayerSpec): The convolution.
        f (int): Output feature map size.

    Returns:
        CostTotals: Parameters and multiply-accumulates.

    Raises:
        ValueError: If `f` is not positive.
    """
    if f < 1:
        msg = f"Feature map size must be positive, got {f}"
        raise ValueError(msg)

    params = layer.out_channels * (layer.in_channels // layer.groups) * layer.kernel * layer.kernel
    return CostTotals(params=params, flops=params * f * f)


def _walk(
    layers: Iterable[LayerSpec],
    f: int,
    conventions: CountingConventions,
    *,
    shortcut: bool,
) -> tuple[list[LayerCost], int]:
    entries: list[LayerCost] = []
    last_id, channels = "input", 0

    for layer in layers:
        match layer:
            case ConvLayerSpec():
                f = layer.output_size(f)
                cost = layer_cost(layer, f)
                entries.append(
                    LayerCost(
                        id=layer.name, kind="conv", params=cost.params, flops=cost.flops, fmap=f, shortcut=shortcut
                    )
                )
                last_id, channels = layer.name, layer.out_channels
            case NormSpec() if conventions.norm_params or conventions.norm_flops:
                entries.append(
                    LayerCost(
                        id=layer.name,
                        kind="norm",
                        params=2 * layer.channels if conventions.norm_params else 0,
                        flops=layer.channels * f * f if conventions.norm_flops else 0,
                        fmap=f,
                        shortcut=shortcut,
                    )
                )
            case ActivationSpec() if conventions.activation_flops:
                entries.append(
                    LayerCost(
                        id=f"{last_id}.relu", kind="relu", params=0, flops=channels * f * f, fmap=f, shortcut=shortcut
                    )
                )
            case _:
                pass

    return entries, f


def network_cost(
    spec: NetworkSpec,
    input_shape: InputShape = (3, 32, 32),
    conventions: CountingConventions | None = None,
) -> CostReport:
    """Count the parameters and FLOPs of a network by threading the feature map size through every layer.

    Args:
        spec (NetworkSpec): The network.
        input_shape (InputShape): Input as (channels, height, width). Must be square.
        conventions (CountingConventions | None): What to count besides convolutions. Defaults to the calibrated set.

    Returns:
        CostReport: Per-layer costs, totals and the part attributable to shortcut layers.

    Raises:
        ShapeMismatchError: If the input is not square or its channels differ from the network's.
    """
    conventions = conventions or CountingConventions()
    c, h, w = input_shape
    if h != w:
        msg = f"Input must be square, got {h}x{w}"
        raise ShapeMismatchError(msg)
    if c != spec.in_channels:
        msg = f"{spec.name} expects {spec.in_channels} input channels, got {c}"
        raise ShapeMismatchError(msg)

    per_layer, f = _walk(spec.stem, h, conventions, shortcut=False)
    for block in spec.blocks:
        shortcut_entries, _ = _walk(block.shortcut_layers, f, conventions, shortcut=True)
        main_entries, f = _walk(block.layers, f, conventions, shortcut=False)
        per_layer.extend(main_entries)
        per_layer.extend(shortcut_entries)
    head_entries, f = _walk(spec.head, f, conventions, shortcut=False)
    per_layer.extend(head_entries)

    features = spec.classifier.in_features
    if conventions.activation_flops:
        per_layer.append(LayerCost(id="pool", kind="pool", params=0, flops=features * f * f, fmap=1))
    if conventions.classifier:
        weights = features * spec.classifier.num_classes
        per_layer.append(
            LayerCost(
                id=spec.classifier.name,
                kind="linear",
                params=weights + spec.classifier.num_classes,
                flops=weights,
                fmap=1,
            )
        )

    totals = CostTotals(params=sum(e.params for e in per_layer), flops=sum(e.flops for e in per_layer))
    overhead = CostTotals(
        params=sum(e.params for e in per_layer if e.shortcut),
        flops=sum(e.flops for e in per_layer if e.shortcut),
    )
    logger.debug(f"{spec.name} @ {c}x{h}x{w}: {totals.params} params, {totals.flops} MACs")
    return CostReport(
        network=spec.name,
        input=input_shape,
        per_layer=tuple(per_layer),
        totals=totals,
        residual_overhead=overhead,
        conventions=conventions,
    )


# TABLES
# ======
class CostCell(BaseModel):
    model_config = ConfigDict(frozen=True)

    policy: str
    residual: bool
    params: int
    flops: int


class MonotonicityFlag(BaseModel):
    """Whether a metric moves the expected way across the `g` (decreasing) or `G` (increasing) columns."""

    model_config = ConfigDict(frozen=True)

    metric: Literal["params", "flops"]
    kind: Literal["g", "G"]
    residual: bool
    holds: bool


class CostTable(BaseModel):
    model_config = ConfigDict(frozen=True)

    network: str
    input: InputShape
    policies: tuple[str, ...]
    cells: tuple[CostCell, ...]
    monotonicity: tuple[MonotonicityFlag, ...]

    def cell(self, policy: str, *, residual: bool) -> CostCell:
        return next(c for c in self.cells if c.policy == policy and c.residual == residual)

    def to_frame(self, metric: Literal["params", "flops"]) -> pd.DataFrame:
        """Sweep matrix of exact counts: rows `R`/`NR`, one column per policy."""
        rows = sorted({c.residual for c in self.cells}, reverse=True)
        frame = pd.DataFrame(
            [[getattr(self.cell(p, residual=r), metric) for p in self.policies] for r in rows],
            index=["R" if r else "NR" for r in rows],
            columns=list(self.policies),
        )
        frame.index.name = self.network
        return frame

    def render(self, metric: Literal["params", "flops"]) -> str:
        """The matrix in millions, rounded half-even to the precision of the published tables."""
        digits = FLOPS_SIGNIFICANT_DIGITS if metric == "flops" else PARAMS_SIGNIFICANT_DIGITS
        return self.to_frame(metric).map(lambda v: format_millions(v, digits)).to_string()


def format_millions(count: int, significant_digits: int) -> str:
    """Render an exact count in millions, rounded half-even to the given significant digits.

    >>> format_millions(93_654_000, 4)
    '93.65'
    """
    value = Decimal(count) / Decimal(1_000_000)
    if value == 0:
        return "0"
    exponent = value.adjusted() - significant_digits + 1
    return str(value.quantize(Decimal(1).scaleb(exponent), rounding=ROUND_HALF_EVEN))


def _is_strictly_monotone(values: Sequence[int], *, increasing: bool) -> bool:
    pairs = zip(values, values[1:], strict=False)
    return all(b > a for a, b in pairs) if increasing else all(b < a for a, b in pairs)


def cost_table(
    request: ArchRequest,
    policies: Sequence[GroupingPolicy],
    residual_modes: Sequence[bool] = (True, False),
    input_shape: InputShape = (3, 32, 32),
    conventions: CountingConventions | None = None,
) -> CostTable:
    """Cost every (policy, residual) combination of one architecture.

    Args:
        request (ArchRequest): The architecture; its policy and residual fields are overridden per cell.
        policies (Sequence[GroupingPolicy]): Table columns, in display order.
        residual_modes (Sequence[bool]): Table rows.
        input_shape (InputShape): Input as (channels, height, width).
        conventions (CountingConventions | None): What to count besides convolutions.

    Returns:
        CostTable: Every cell plus monotonicity flags over the `g` and `G` columns.

    Raises:
        NonDivisibleError: If a combination cannot be built.
    """
    cells: list[CostCell] = []
    network = ""
    for residual in residual_modes:
        for policy in policies:
            spec = build(request.model_copy(update={"policy": policy, "residual": residual}))
            totals = network_cost(spec, input_shape, conventions).totals
            cells.append(CostCell(policy=policy.label, residual=residual, params=totals.params, flops=totals.flops))
            network = spec.name.split("-", 1)[1].rsplit("-", 1)[0]

    flags: list[MonotonicityFlag] = []
    for kind, policy_kind in (("g", PolicyKind.CONSTANT_GROUPS), ("G", PolicyKind.CONSTANT_GROUP_SIZE)):
        ordered = sorted((p for p in policies if p.kind is policy_kind), key=lambda p: p.value or 0)
        if len(ordered) < 2:  # noqa: PLR2004
            continue
        for residual in residual_modes:
            column = [next(c for c in cells if c.policy == p.label and c.residual == residual) for p in ordered]
            for metric in ("params", "flops"):
                values = [getattr(c, metric) for c in column]
                holds = _is_strictly_monotone(values, increasing=kind == "G")
                if not holds:
                    logger.warning(f"{network}: {metric} not monotone over {kind} columns (residual={residual})")
                flags.append(MonotonicityFlag(metric=metric, kind=kind, residual=residual, holds=holds))

    return CostTable(
        network=network,
        input=input_shape,
        policies=tuple(p.label for p in policies),
        cells=tuple(cells),
        monotonicity=tuple(flags),
    )
