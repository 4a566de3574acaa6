"""Central finite-difference checks of analytic gradients.

Probes whose perturbation flips any ReLU on or off are replaced by fresh probes, because the loss is not
differentiable across a kink and the difference quotient would compare two different linear pieces.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict

from src.tensorgrad.ops import record_relu_patterns
from src.tensorgrad.tensor import no_grad

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

    from numpy.typing import NDArray

    from src.tensorgrad.tensor import Tensor

STEP_SCALE = 1e-5
ERROR_FLOOR = 1e-6
MAX_ATTEMPTS_PER_PROBE = 20


class GradCheckResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    probes: int
    skipped_kinks: int
    max_rel_error: float
    worst_index: tuple[int, ...] | None


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ERROR_FLOOR)


def _same_patterns(a: Sequence[NDArray[np.bool_]], b: Sequence[NDArray[np.bool_]]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b, strict=True))


def _evaluate(loss_fn: Callable[[], Tensor]) -> tuple[float, list[NDArray[np.bool_]]]:
    with no_grad(), record_relu_patterns() as patterns:
        value = loss_fn().item()
    return value, patterns


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[tuple[str, Tensor]],
    *,
    probes_per_tensor: int | None = None,
    seed: int = 0,
) -> list[GradCheckResult]:
    """Compare the analytic gradient of `loss_fn` against central differences.

    The step for an element of value `v` is `h = 1e-5 * max(1, |v|)`. The relative error of a probe is
    `|a - n| / max(|a|, |n|, 1e-6)`. Any randomness inside `loss_fn` (dropout) must be reseeded on every call.

    Args:
        loss_fn (Callable[[], Tensor]): Recomputes the scalar loss from the current tensor values.
        tensors (Sequence[tuple[str, Tensor]]): Named leaves to check; their values are perturbed in place and restored.
        probes_per_tensor (int | None): Elements checked per tensor, all of them when None.
        seed (int): Seed for choosing probe elements.

    Returns:
        list[GradCheckResult]: One result per tensor.
    """
    for _, tensor in tensors:
        tensor.zero_grad()
    with record_relu_patterns() as reference:
        loss = loss_fn()
    loss.backward()

    rng = np.random.default_rng(seed)
    results: list[GradCheckResult] = []
    for name, tensor in tensors:
        analytic_grad: NDArray[Any] = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        size = tensor.data.size
        wanted = size if probes_per_tensor is None else min(probes_per_tensor, size)
        candidates = iter(rng.permutation(size))

        worst, worst_index, checked, skipped = 0.0, None, 0, 0
        for flat in candidates:
            if checked == wanted or skipped >= MAX_ATTEMPTS_PER_PROBE * wanted:
                break
            index = tuple(int(i) for i in np.unravel_index(flat, tensor.shape))
            value = float(tensor.data[index])
            h = STEP_SCALE * max(1.0, abs(value))

            tensor.data[index] = value + h
            plus, plus_patterns = _evaluate(loss_fn)
            tensor.data[index] = value - h
            minus, minus_patterns = _evaluate(loss_fn)
            tensor.data[index] = value

            if not (_same_patterns(plus_patterns, reference) and _same_patterns(minus_patterns, reference)):
                skipped += 1
                continue

            error = relative_error(float(analytic_grad[index]), (plus - minus) / (2 * h))
            checked += 1
            if error >= worst:
                worst, worst_index = error, index

        logger.debug(f"gradcheck {name}: {checked} probes, {skipped} kinks skipped, max rel error {worst:.3g}")
        results.append(
            GradCheckResult(
                name=name, probes=checked, skipped_kinks=skipped, max_rel_error=worst, worst_index=worst_index
            )
        )
    return results
