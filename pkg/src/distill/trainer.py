from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict

from src.arch.spec import NetworkSpec
from src.data import NormalizationStats
from src.distill.augment import Augmentation, augment_batch
from src.distill.losses import kd_loss
from src.distill.optim import SgdConfig, SgdState, sgd_step
from src.distill.schedule import ExponentialPerEpoch, StepDecay, lr_at
from src.errors import DataError
from src.fileio import atomic_write_text
from src.network import SHUFFLE_STREAM, Network
from src.tensorgrad.checkpoint import load_checkpoint, save_checkpoint
from src.tensorgrad.ops import cross_entropy
from src.tensorgrad.tensor import no_grad

if TYPE_CHECKING:
    from pathlib import Path

    from numpy.typing import DTypeLike, NDArray

    from src.data import Dataset
    from src.distill.losses import DistillConfig

ARCHSPEC_FILE = "archspec.json"
CHECKPOINT_FILE = "model.ckpt"
HISTORY_FILE = "history.csv"
STATS_FILE = "stats.json"
COUNTS_FILE = "dataset_counts.json"
HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "train_acc", "test_acc"]


class EpochRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float


@dataclass
class TrainResult:
    network: Network
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def final_test_acc(self) -> float:
        return self.history[-1].test_acc if self.history else 0.0

    @property
    def best_test_acc(self) -> float:
        return max((r.test_acc for r in self.history), default=0.0)

    @property
    def final_train_acc(self) -> float:
        return self.history[-1].train_acc if self.history else 0.0

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.history], columns=HISTORY_COLUMNS)


# EVALUATION
# ==========
def predict_logits(network: Network, images: NDArray[Any], batch_size: int = 256) -> NDArray[Any]:
    """Eval-mode logits of a whole array, batch by batch, without recording a graph."""
    return _predict(network, images, batch_size)[0]


def predict_features(network: Network, images: NDArray[Any], batch_size: int = 256) -> NDArray[Any]:
    """Eval-mode inputs of the final classifier."""
    return _predict(network, images, batch_size)[1]


def _predict(network: Network, images: NDArray[Any], batch_size: int) -> tuple[NDArray[Any], NDArray[Any]]:
    was_training = network.training
    network.eval()
    logits, features = [], []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                batch_logits, batch_features = network.forward(images[start : start + batch_size])
                logits.append(batch_logits.data)
                features.append(batch_features.data)
    finally:
        network.training = was_training
    if not logits:
        return np.zeros((0, network.spec.num_classes)), np.zeros((0, network.spec.classifier.in_features))
    return np.concatenate(logits), np.concatenate(features)


def evaluate(network: Network, data: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy (a fraction) of an eval-mode forward: no dropout, running normalization statistics."""
    if not len(data):
        return 0.0
    predictions = predict_logits(network, data.images, batch_size).argmax(axis=1)
    return float((predictions == data.labels).mean())


def per_class_accuracy(network: Network, data: Dataset, batch_size: int = 256) -> dict[int, float]:
    predictions = predict_logits(network, data.images, batch_size).argmax(axis=1)
    accuracy: dict[int, float] = {}
    for c in range(data.num_classes):
        mask = data.labels == c
        if mask.any():
            accuracy[c] = float((predictions[mask] == c).mean())
    return accuracy


# TRAINING
# ========
def train(
    spec: NetworkSpec,
    train_data: Dataset,
    test_data: Dataset,
    sgd: SgdConfig,
    schedule: StepDecay | ExponentialPerEpoch,
    *,
    distill: DistillConfig | None = None,
    teacher: Network | None = None,
    augmentation: Augmentation | None = None,
    dtype: DTypeLike = np.float32,
    eval_batch_size: int = 256,
) -> TrainResult:
    """Train a network with momentum SGD, optionally distilling from a frozen teacher.

    Every random choice (initialization, shuffling, augmentation, dropout) derives from `sgd.seed`, so two runs with
    the same seed in deterministic mode produce identical checkpoints.

    Args:
        spec (NetworkSpec): The student architecture.
        train_data (Dataset): Training split.
        test_data (Dataset): Test split, evaluated after every epoch.
        sgd (SgdConfig): Optimizer settings, epoch count and seed.
        schedule (StepDecay | ExponentialPerEpoch): Learning-rate schedule.
        distill (DistillConfig | None): Distillation objective; hard-target cross-entropy when None.
        teacher (Network | None): Trained teacher, required when `distill` has a positive alpha.
        augmentation (Augmentation | None): Training-time augmentation, none when None.
        dtype (DTypeLike): Precision of the student's parameters and activations.
        eval_batch_size (int): Batch size of the per-epoch evaluation.

    Returns:
        TrainResult: The trained network and one history record per epoch.

    Raises:
        ValueError: If distillation is requested without a teacher.
    """
    soft = distill is not None and distill.alpha > 0
    if soft and teacher is None:
        msg = "Distillation with alpha > 0 needs a teacher network"
        raise ValueError(msg)
    if teacher is not None:
        teacher.eval()

    network = Network(spec, seed=sgd.seed, dtype=dtype)
    state = SgdState()
    rng = np.random.default_rng([sgd.seed, SHUFFLE_STREAM])
    augmentation = augmentation or Augmentation(enabled=False)
    result = TrainResult(network=network)
    n = len(train_data)

    logger.info(f"Training {spec.name} for {sgd.epochs} epochs on {n} samples{' (distilled)' if soft else ''}")
    for epoch in range(sgd.epochs):
        lr = lr_at(schedule, sgd.lr0, epoch)
        network.train()
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0

        for start in range(0, n, sgd.batch_size):
            index = order[start : start + sgd.batch_size]
            images = augment_batch(train_data.images[index], augmentation, rng).astype(network.dtype, copy=False)
            labels = train_data.labels[index]

            logits, _ = network.forward(images)
            if soft and distill is not None and teacher is not None:
                teacher_logits = predict_logits(teacher, images, eval_batch_size)
                loss = kd_loss(
                    logits,
                    teacher_logits.astype(network.dtype, copy=False),
                    labels,
                    temperature=distill.temperature,
                    alpha=distill.alpha,
                    t2_scale=distill.t2_scale,
                )
            else:
                loss = cross_entropy(logits, labels)

            network.zero_grad()
            loss.backward()
            sgd_step(network.parameters(), state, lr=lr, momentum=sgd.momentum, weight_decay=sgd.weight_decay)

            loss_sum += loss.item() * len(index)
            correct += int((logits.data.argmax(axis=1) == labels).sum())

        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            train_loss=loss_sum / n,
            train_acc=correct / n,
            test_acc=evaluate(network, test_data, eval_batch_size),
        )
        result.history.append(record)
        logger.info(
            f"epoch {epoch:>3} | lr {lr:.5g} | loss {record.train_loss:.4f} | "
            f"train {record.train_acc:.4f} | test {record.test_acc:.4f}"
        )

    return result


# RUN DIRECTORIES
# ===============
def save_run(
    run_dir: Path,
    result: TrainResult,
    *,
    normalization: NormalizationStats,
    class_counts: dict[int, int],
    extra_stats: dict[str, Any] | None = None,
) -> None:
    """Write the architecture, checkpoint, history, statistics and class counts of a finished run."""
    network = result.network
    atomic_write_text(run_dir / ARCHSPEC_FILE, network.spec.to_json())
    save_checkpoint(run_dir / CHECKPOINT_FILE, network.state_dict())
    atomic_write_text(run_dir / HISTORY_FILE, result.history_frame().to_csv(index=False))

    stats = {
        "network": network.spec.name,
        "normalization": normalization.model_dump(),
        "final_test_acc": result.final_test_acc,
        "best_test_acc": result.best_test_acc,
        "final_train_acc": result.final_train_acc,
        "epochs": len(result.history),
        **(extra_stats or {}),
    }
    atomic_write_text(run_dir / STATS_FILE, json.dumps(stats, indent=2))
    atomic_write_text(run_dir / COUNTS_FILE, json.dumps({str(k): v for k, v in class_counts.items()}, indent=2))
    logger.info(f"Saved run of {network.spec.name} to {run_dir}")


def load_run(run_dir: Path, dtype: DTypeLike = np.float32) -> tuple[Network, NormalizationStats | None]:
    """Rebuild a trained network from its run directory.

    Raises:
        FileNotFoundError: If the run directory lacks its spec or checkpoint.
        CheckpointMismatchError: If the checkpoint does not fit the declared spec.
    """
    spec_path = run_dir / ARCHSPEC_FILE
    if not spec_path.exists():
        msg = f"Run directory {run_dir} has no {ARCHSPEC_FILE}."
        raise FileNotFoundError(msg)

    spec = NetworkSpec.from_json(spec_path.read_text(encoding="utf-8"))
    network = Network(spec, dtype=dtype)
    network.load_state_dict(load_checkpoint(run_dir / CHECKPOINT_FILE))
    network.eval()

    normalization = None
    if (stats_path := run_dir / STATS_FILE).exists():
        stats = json.loads(stats_path.read_text(encoding="utf-8"))
        normalization = NormalizationStats.model_validate(stats["normalization"])
    return network, normalization


def load_teacher(run_dir: Path, normalization: NormalizationStats, dtype: DTypeLike = np.float32) -> Network:
    """Load a teacher run for distillation on data normalized with `normalization`.

    The teacher only sees the student's batches, so both must share the same normalization constants. A run without
    stored constants is accepted with a warning.

    Raises:
        FileNotFoundError: If the run directory lacks its spec or checkpoint.
        CheckpointMismatchError: If the checkpoint does not fit the declared spec.
        DataError: If the teacher was trained on differently normalized data.
    """
    teacher, stored = load_run(run_dir, dtype)
    if stored is None:
        logger.warning(f"Teacher run {run_dir} stores no normalization; assuming it matches the student data")
    elif not (np.allclose(stored.mean, normalization.mean) and np.allclose(stored.std, normalization.std)):
        msg = (
            f"Teacher run {run_dir} was normalized with mean={stored.mean} std={stored.std}, "
            f"but the student data has mean={normalization.mean} std={normalization.std}"
        )
        raise DataError(msg)
    return teacher


def load_history(run_dir: Path) -> list[EpochRecord]:
    frame = pd.read_csv(run_dir / HISTORY_FILE)
    return [EpochRecord.model_validate(row) for row in frame.to_dict(orient="records")]

