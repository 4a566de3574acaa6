from __future__ import annotations

from typing import TYPE_CHECKING, Any, final

import numpy as np
from loguru import logger

from src.arch.spec import (
    ActivationSpec,
    BlockSpec,
    ConvLayerSpec,
    DropoutSpec,
    LayerSpec,
    NetworkSpec,
    NormSpec,
    ShortcutKind,
)
from src.errors import CheckpointMismatchError
from src.tensorgrad.ops import RunningStats, add, batch_norm, conv2d, dropout, global_avg_pool, linear, relu
from src.tensorgrad.tensor import Parameter, Tensor, check_unique_names, parameter

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping

    from numpy.typing import DTypeLike, NDArray

# Sub-streams of one seed
INIT_STREAM = 0
SHUFFLE_STREAM = 1
DROPOUT_STREAM = 2


def _all_layers(spec: NetworkSpec) -> Iterable[LayerSpec]:
    yield from spec.stem
    for block in spec.blocks:
        yield from block.layers
        yield from block.shortcut_layers
    yield from spec.head


@final
class Network:
    """Trainable network instantiated from a `NetworkSpec`.

    Conv weights are drawn from a Gaussian with std `sqrt(2 / (k * k * n))` (fan-out), normalization scales and
    shifts start at one and zero, and the classifier is uniform in `+-1 / sqrt(in_features)`.

    Attributes:
        spec (NetworkSpec): The architecture.
        params (dict[str, Parameter]): Trainable tensors by name, in construction order.
        stats (dict[str, RunningStats]): Running normalization statistics by norm layer name.
        training (bool): Whether dropout and batch statistics are active.
        rng (np.random.Generator): Dropout masks, a stream of the seed apart from the initialization draws.
    """

    spec: NetworkSpec
    params: dict[str, Parameter]
    stats: dict[str, RunningStats]
    training: bool

    def __init__(self, spec: NetworkSpec, *, seed: int = 0, dtype: DTypeLike = np.float32) -> None:  # noqa: D107
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.stats = {}
        self.training = True
        self.rng = np.random.default_rng([seed, DROPOUT_STREAM])

        init_rng = np.random.default_rng([seed, INIT_STREAM])
        for layer in _all_layers(spec):
            match layer:
                case ConvLayerSpec():
                    shape = (layer.out_channels, layer.in_channels // layer.groups, layer.kernel, layer.kernel)
                    std = np.sqrt(2.0 / (layer.kernel * layer.kernel * layer.out_channels))
                    self._add(f"{layer.name}.weight", init_rng.normal(0.0, std, shape), decay=True)
                case NormSpec():
                    self._add(f"{layer.name}.gamma", np.ones(layer.channels), decay=False)
                    self._add(f"{layer.name}.beta", np.zeros(layer.channels), decay=False)
                    self.stats[layer.name] = RunningStats.fresh(layer.channels, self.dtype)
                case _:
                    pass

        classifier = spec.classifier
        bound = 1.0 / np.sqrt(classifier.in_features)
        self._add(
            f"{classifier.name}.weight",
            init_rng.uniform(-bound, bound, (classifier.num_classes, classifier.in_features)),
            decay=True,
        )
        self._add(f"{classifier.name}.bias", init_rng.uniform(-bound, bound, classifier.num_classes), decay=False)

        check_unique_names(list(self.params.values()))
        logger.debug(f"Built {spec.name} with {self.num_parameters()} parameters")

    def _add(self, name: str, values: NDArray[Any], *, decay: bool) -> None:
        self.params[name] = parameter(name, values.astype(self.dtype), decay=decay)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.tensor.data.size for p in self.params.values())

    def train(self) -> None:
        self.training = True

    def eval(self) -> None:
        self.training = False

    def reseed_dropout(self, seed: int) -> None:
        self.rng = np.random.default_rng([seed, DROPOUT_STREAM])

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.zero_grad()

    # FORWARD
    # =======
    def _weight(self, name: str) -> Tensor:
        return self.params[name].tensor

    def _apply(self, layers: Iterable[LayerSpec], x: Tensor) -> Tensor:
        for layer in layers:
            match layer:
                case ConvLayerSpec():
                    x = conv2d(
                        x,
                        self._weight(f"{layer.name}.weight"),
                        stride=layer.stride,
                        padding=layer.padding,
                        groups=layer.groups,
                    )
                case NormSpec():
                    x = batch_norm(
                        x,
                        self._weight(f"{layer.name}.gamma"),
                        self._weight(f"{layer.name}.beta"),
                        self.stats[layer.name],
                        training=self.training,
                    )
                case ActivationSpec():
                    x = relu(x)
                case DropoutSpec():
                    x = dropout(x, layer.p, self.rng, training=self.training)
        return x

    def _block(self, block: BlockSpec, x: Tensor) -> Tensor:
        out = self._apply(block.layers, x)
        match block.shortcut:
            case ShortcutKind.PROJECTION1X1:
                out = add(out, self._apply(block.shortcut_layers, x))
            case ShortcutKind.IDENTITY:
                out = add(out, x)
            case ShortcutKind.NONE:
                pass
        return relu(out) if block.activation_after_merge else out

    def forward(self, images: Tensor | NDArray[Any]) -> tuple[Tensor, Tensor]:
        """Run the network on an NCHW batch.

        Returns:
            tuple[Tensor, Tensor]: The logits and the penultimate features (the classifier's input).
        """
        x = images if isinstance(images, Tensor) else Tensor(images, dtype=self.dtype)
        x = self._apply(self.spec.stem, x)
        for block in self.spec.blocks:
            x = self._block(block, x)
        x = self._apply(self.spec.head, x)
        features = global_avg_pool(x)
        name = self.spec.classifier.name
        logits = linear(features, self._weight(f"{name}.weight"), self._weight(f"{name}.bias"))
        return logits, features

    __call__ = forward

    # STATE
    # =====
    def state_dict(self) -> dict[str, NDArray[Any]]:
        """Parameters followed by running statistics, in a fixed order."""
        state: dict[str, NDArray[Any]] = {name: p.tensor.data for name, p in self.params.items()}
        for name, stats in self.stats.items():
            state[f"{name}.running_mean"] = stats.mean
            state[f"{name}.running_var"] = stats.var
        return state

    def load_state_dict(self, state: Mapping[str, NDArray[Any]]) -> None:
        """Replace every tensor by the one of the same name in `state`.

        Raises:
            CheckpointMismatchError: If names or shapes differ from this network's.
        """
        expected = self.state_dict()
        missing = expected.keys() - state.keys()
        unexpected = state.keys() - expected.keys()
        if missing or unexpected:
            msg = (
                f"Checkpoint does not match {self.spec.name}: "
                f"missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}"
            )
            raise CheckpointMismatchError(msg)
        for name, array in expected.items():
            if state[name].shape != array.shape:
                msg = f"Checkpoint tensor {name} has shape {state[name].shape}, {self.spec.name} expects {array.shape}"
                raise CheckpointMismatchError(msg)

        for name, p in self.params.items():
            p.tensor.data = np.array(state[name], dtype=self.dtype)
        for name, stats in self.stats.items():
            stats.mean = np.array(state[f"{name}.running_mean"], dtype=self.dtype)
            stats.var = np.array(state[f"{name}.running_var"], dtype=self.dtype)
