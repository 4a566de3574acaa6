from __future__ import annotations

from typing import TYPE_CHECKING, Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

if TYPE_CHECKING:
    from numpy.typing import NDArray


class Augmentation(BaseModel):
    """Reflection padding, random horizontal flip, then a random crop back to the input size."""

    model_config = ConfigDict(frozen=True)

    enabled: bool = True
    pad: int = Field(default=4, ge=0, description="Reflected edge pixels added on every side.")
    hflip_p: float = Field(default=0.5, ge=0.0, le=1.0)


def reflect_pad(images: NDArray[Any], pad: int) -> NDArray[Any]:
    """Mirror `pad` edge pixels on every side of an NCHW batch (the edge pixel itself is not repeated)."""
    if pad == 0:
        return images
    return np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")


def augment_batch(
    images: NDArray[Any],
    config: Augmentation,
    rng: np.random.Generator,
    *,
    offsets: NDArray[np.integer[Any]] | None = None,
    flips: NDArray[np.bool_] | None = None,
) -> NDArray[Any]:
    """Augment an NCHW batch, keeping its spatial size.

    Args:
        images (NDArray[Any]): The batch.
        config (Augmentation): Padding and flip settings.
        rng (np.random.Generator): Source of the random flips and crop offsets.
        offsets (NDArray[np.integer[Any]] | None): Fixed [N, 2] crop offsets into the padded image, drawn when None.
        flips (NDArray[np.bool_] | None): Fixed [N] flip decisions, drawn when None.

    Returns:
        NDArray[Any]: The augmented batch.
    """
    if not config.enabled:
        return images

    n, _, h, w = images.shape
    if flips is None:
        flips = rng.random(n) < config.hflip_p
    if offsets is None:
        offsets = rng.integers(0, 2 * config.pad + 1, size=(n, 2))

    flipped = np.where(flips[:, None, None, None], images[..., ::-1], images)
    padded = reflect_pad(flipped, config.pad)
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out
