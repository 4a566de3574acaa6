from __future__ import annotations

from typing import TYPE_CHECKING, Any

import numpy as np
import pandas as pd
from loguru import logger

from src.distill.trainer import per_class_accuracy, predict_features
from src.errors import DegenerateDataError, UnknownClassError

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import NDArray

    from src.data import Dataset
    from src.network import Network

ID_COLUMNS = ["sample_id", "class_id"]
MIN_PROJECTION_ROWS = 3


def feature_columns(width: int) -> list[str]:
    return [f"f{i}" for i in range(width)]


def export_activations(
    network: Network,
    data: Dataset,
    class_ids: Sequence[int],
    batch_size: int = 256,
) -> pd.DataFrame:
    """Eval-mode inputs of the final classifier for every sample of the chosen classes.

    Args:
        network (Network): The trained network.
        data (Dataset): Usually the test split.
        class_ids (Sequence[int]): Classes to export.
        batch_size (int): Forward batch size.

    Returns:
        pd.DataFrame: `sample_id` (index within `data`), `class_id`, then one `f<i>` column per feature.

    Raises:
        UnknownClassError: If a class has no sample in `data`.
    """
    present = set(np.unique(data.labels).tolist())
    if missing := [c for c in class_ids if c not in present]:
        msg = f"Classes {missing} have no samples in the data (present: {sorted(present)})"
        raise UnknownClassError(msg)

    sample_ids = np.flatnonzero(np.isin(data.labels, list(class_ids)))
    features = predict_features(network, data.images[sample_ids], batch_size).astype(np.float64)

    frame = pd.DataFrame(features, columns=feature_columns(features.shape[1]))
    frame.insert(0, "class_id", data.labels[sample_ids])
    frame.insert(0, "sample_id", sample_ids)
    logger.info(f"Exported {len(frame)} activation rows of width {features.shape[1]} for classes {list(class_ids)}")
    return frame


def worst_k_classes(network: Network, data: Dataset, k: int, batch_size: int = 256) -> list[int]:
    """The `k` classes with the lowest top-1 accuracy, lowest first (ties broken by class id).

    Raises:
        ValueError: If `k` is not positive or exceeds the number of classes present.
    """
    accuracy = per_class_accuracy(network, data, batch_size)
    if not 1 <= k <= len(accuracy):
        msg = f"k must be between 1 and {len(accuracy)}, got {k}"
        raise ValueError(msg)
    ranked = sorted(accuracy, key=lambda c: (accuracy[c], c))
    logger.debug(f"Per-class accuracy: {accuracy}")
    return ranked[:k]


def principal_components(matrix: NDArray[Any], n_components: int = 2) -> NDArray[np.float64]:
    """Project centered rows onto their leading principal axes.

    Each axis is oriented so its largest-magnitude loading is positive, which makes the result deterministic. Axes
    beyond the rank of the data project to zero.

    Raises:
        DegenerateDataError: If there are fewer than three rows or every row is identical.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or len(x) < MIN_PROJECTION_ROWS:
        msg = f"Projection needs at least {MIN_PROJECTION_ROWS} rows, got shape {x.shape}"
        raise DegenerateDataError(msg)

    centered = x - x.mean(axis=0)
    if not np.any(np.ptp(x, axis=0)):
        msg = "All rows are identical"
        raise DegenerateDataError(msg)

    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:n_components]
    signs = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(axis=1)])
    axes = axes * signs[:, None]

    projected = centered @ axes.T
    if projected.shape[1] < n_components:
        projected = np.pad(projected, ((0, 0), (0, n_components - projected.shape[1])))
    return projected


def project_2d(activations: pd.DataFrame) -> pd.DataFrame:
    """Two-component principal-component projection of an activation export.

    Returns:
        pd.DataFrame: `sample_id`, `class_id`, `x`, `y`.
    """
    features = activations.drop(columns=ID_COLUMNS).to_numpy(dtype=np.float64)
    xy = principal_components(features)
    frame = activations[ID_COLUMNS].copy()
    frame["x"] = xy[:, 0]
    frame["y"] = xy[:, 1]
    return frame.reset_index(drop=True)
