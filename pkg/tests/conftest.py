from __future__ import annotations

import json
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
import pytest

from src.runtime import RuntimeSettings, get_runtime, set_runtime

if TYPE_CHECKING:
    from collections.abc import Iterator

    from numpy.typing import NDArray

FIXTURES_DIR = Path(__file__).parent / "fixtures"


# ORACLES
# =======
def direct_conv2d(
    x: NDArray[Any],
    weight: NDArray[Any],
    *,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> NDArray[np.float64]:
    """Grouped convolution by explicit summation over every output position."""
    n, _, h, w = x.shape
    out_channels, in_per_group, k, _ = weight.shape
    out_per_group = out_channels // groups
    padded = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1

    out = np.zeros((n, out_channels, oh, ow))
    for o in range(out_channels):
        first = (o // out_per_group) * in_per_group
        for i in range(oh):
            for j in range(ow):
                rows = slice(i * stride, i * stride + k)
                cols = slice(j * stride, j * stride + k)
                patch = padded[:, first : first + in_per_group, rows, cols]
                out[:, o, i, j] = (patch * weight[o]).sum(axis=(1, 2, 3))
    return out


def depthwise_oracle(x: NDArray[Any], weight: NDArray[Any], *, padding: int = 0) -> NDArray[np.float64]:
    """Each channel convolved on its own with its single filter."""
    channels = [direct_conv2d(x[:, c : c + 1], weight[c : c + 1], padding=padding) for c in range(x.shape[1])]
    return np.concatenate(channels, axis=1)


# FIXTURES
# ========
@pytest.fixture(autouse=True)
def runtime() -> Iterator[RuntimeSettings]:
    """Run every test in single-threaded deterministic mode and restore the previous settings afterwards."""
    previous = get_runtime()
    settings = RuntimeSettings(threads=1, deterministic=True)
    set_runtime(settings)
    yield settings
    set_runtime(previous)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def published_tables() -> dict[str, list[dict[str, Any]]]:
    """Published raw accuracies and derived rows, two tables (g students, G students) per network."""
    return json.loads((FIXTURES_DIR / "published_tables.json").read_text(encoding="utf-8"))
