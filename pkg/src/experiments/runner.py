from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path  # noqa: TC003
from typing import TYPE_CHECKING, Literal

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict

from src.arch.builders import ArchRequest, build
from src.arch.policy import GroupingPolicy  # noqa: TC001
from src.arch.spec import Family
from src.config import TrainConfig  # noqa: TC001
from src.costmodel import network_cost
from src.data import CifarSource, DatasetSource, load_splits
from src.distill.trainer import load_teacher, save_run, train
from src.experiments.metrics import MetricTable, tables_from_results
from src.fileio import atomic_write_text
from src.log import configure_logger, run_log
from src.runtime import RuntimeSettings, get_runtime, set_runtime

if TYPE_CHECKING:
    from src.arch.spec import NetworkSpec
    from src.config import MatrixConfig
    from src.data import Dataset, SyntheticSource
    from src.distill.trainer import TrainResult
    from src.network import Network

RESULTS_FILE = "results.csv"
FAILURES_FILE = "failures.csv"
METRIC_TABLE_FILE = "metric_table.csv"
METRIC_STD_FILE = "metric_table_std.csv"
RUNS_DIR = "runs"
RESULT_COLUMNS = [
    "family",
    "depth",
    "widen",
    "policy",
    "residual",
    "mode",
    "teacher",
    "seed",
    "top1_test",
    "top1_train",
    "params",
    "flops",
    "epochs",
]
FAILURE_COLUMNS = ["cell", "error", "message"]


class ExperimentResult(BaseModel):
    """One trained cell of a matrix. Accuracies are percentages."""

    model_config = ConfigDict(frozen=True)

    family: Family
    depth: int | None
    widen: int | None
    policy: str
    residual: bool
    mode: Literal["hard", "distilled"]
    teacher: str
    seed: int
    top1_test: float
    top1_train: float
    params: int
    flops: int
    epochs: int


class Cell(BaseModel):
    """One network to train: a policy, residual or not, optionally distilled from a residual teacher policy."""

    model_config = ConfigDict(frozen=True)

    policy: GroupingPolicy
    residual: bool
    seed: int
    teacher: GroupingPolicy | None = None

    @property
    def mode(self) -> Literal["hard", "distilled"]:
        return "hard" if self.teacher is None else "distilled"

    @property
    def id(self) -> str:
        name = f"{'R' if self.residual else 'NR'}-{self.policy.label}"
        if self.teacher is not None:
            name += f"-from-R-{self.teacher.label}"
        return f"{name}-s{self.seed}"

    def teacher_cell(self) -> Cell | None:
        if self.teacher is None:
            return None
        return Cell(policy=self.teacher, residual=True, seed=self.seed)


class CellJob(BaseModel):
    """Everything a worker process needs to train one cell."""

    model_config = ConfigDict(frozen=True)

    cell: Cell
    request: ArchRequest
    dataset: DatasetSource
    train: TrainConfig
    run_dir: Path
    teacher_dir: Path | None = None


@dataclass
class MatrixOutcome:
    results: list[ExperimentResult] = field(default_factory=list)
    failures: list[dict[str, str]] = field(default_factory=list)
    table: MetricTable | None = None
    std_table: MetricTable | None = None


def _unique(policies: list[GroupingPolicy]) -> list[GroupingPolicy]:
    return list({p.label: p for p in policies}.values())


def plan_cells(config: MatrixConfig) -> list[list[Cell]]:
    """Order the cells of a matrix into waves that respect the teacher-before-student dependency.

    The first wave holds the residual hard-target runs (student baselines and teachers, shared when a teacher policy
    is also a student policy) followed by the non-residual baselines; the second wave holds the distilled cells.
    """
    residual_policies = _unique([*config.students, *config.teachers])
    students = _unique(list(config.students))
    teachers = _unique(list(config.teachers))

    hard = [Cell(policy=p, residual=True, seed=s) for p in residual_policies for s in config.seeds]
    hard += [Cell(policy=p, residual=False, seed=s) for p in students for s in config.seeds]
    distilled = [
        Cell(policy=p, residual=False, seed=s, teacher=t) for t in teachers for p in students for s in config.seeds
    ]
    return [wave for wave in (hard, distilled) if wave]


def num_classes_of(source: CifarSource | SyntheticSource) -> int:
    return source.variant if isinstance(source, CifarSource) else source.classes


# TRAINING
# ========
def train_and_save(
    spec: NetworkSpec,
    train_data: Dataset,
    test_data: Dataset,
    config: TrainConfig,
    *,
    run_dir: Path,
    seed: int | None = None,
    epochs: int | None = None,
    teacher: Network | None = None,
    extra_stats: dict[str, object] | None = None,
) -> TrainResult:
    """Train one network with the settings of a `traincfg/1` document and write its run directory.

    Args:
        spec (NetworkSpec): The network to train.
        train_data (Dataset): Training split.
        test_data (Dataset): Test split.
        config (TrainConfig): Training settings.
        run_dir (Path): Run directory to write.
        seed (int | None): Overrides the configured seed.
        epochs (int | None): Overrides the configured (or family preset) epoch count.
        teacher (Network | None): If given, the student is distilled from it with the configured objective.
        extra_stats (dict[str, object] | None): Further entries for `stats.json`.

    Returns:
        TrainResult: The trained network and its history.
    """
    distilled = teacher is not None
    sgd = config.sgd.model_copy(
        update={
            "seed": config.sgd.seed if seed is None else seed,
            "epochs": epochs or config.epochs_for(spec.family, distilled=distilled),
        }
    )
    result = train(
        spec,
        train_data,
        test_data,
        sgd,
        config.schedule_for(spec.family),
        distill=config.distill if distilled else None,
        teacher=teacher,
        augmentation=config.augmentation,
        dtype=np.dtype(config.dtype),
        eval_batch_size=config.eval_batch_size,
    )
    save_run(
        run_dir,
        result,
        normalization=train_data.normalization,
        class_counts=train_data.class_counts(),
        extra_stats={"seed": sgd.seed, "distilled": distilled, **(extra_stats or {})},
    )
    return result


def run_cell(job: CellJob) -> ExperimentResult:
    """Train one cell of a matrix and summarize it.

    Raises:
        FileNotFoundError: If the cell is distilled and its teacher run is missing.
        DataError: If the teacher run was normalized differently from the cell data.
    """
    cell = job.cell
    dtype = np.dtype(job.train.dtype)
    with run_log(job.run_dir):
        logger.info(f"Starting cell {cell.id}")
        train_data, test_data = load_splits(job.dataset, dtype)
        spec = build(job.request)

        teacher = None
        if job.teacher_dir is not None:
            teacher = load_teacher(job.teacher_dir, train_data.normalization, dtype)

        result = train_and_save(
            spec,
            train_data,
            test_data,
            job.train,
            run_dir=job.run_dir,
            seed=cell.seed,
            teacher=teacher,
            extra_stats={"cell": cell.id},
        )
        cost = network_cost(spec, train_data.image_shape).totals
        logger.info(f"Finished cell {cell.id}: test {result.final_test_acc:.4f}")

    return ExperimentResult(
        family=spec.family,
        depth=spec.depth,
        widen=spec.widen_factor,
        policy=cell.policy.label,
        residual=cell.residual,
        mode=cell.mode,
        teacher="" if cell.teacher is None else cell.teacher.label,
        seed=cell.seed,
        top1_test=100.0 * result.final_test_acc,
        top1_train=100.0 * result.final_train_acc,
        params=cost.params,
        flops=cost.flops,
        epochs=len(result.history),
    )


def _init_worker(debug: bool, settings: RuntimeSettings) -> None:  # noqa: FBT001
    # Worker processes start with a fresh logger and fresh runtime settings
    configure_logger(debug=debug)
    set_runtime(settings)


# MATRIX
# ======
def results_frame(results: list[ExperimentResult]) -> pd.DataFrame:
    frame = pd.DataFrame([r.model_dump(mode="json") for r in results], columns=RESULT_COLUMNS)
    return frame.astype({"depth": "Int64", "widen": "Int64"})


def _write_results(out_dir: Path, outcome: MatrixOutcome, order: dict[str, int]) -> None:
    def key(result: ExperimentResult) -> int:
        teacher = GroupingPolicy.parse(result.teacher) if result.teacher else None
        policy = GroupingPolicy.parse(result.policy)
        return order[Cell(policy=policy, residual=result.residual, seed=result.seed, teacher=teacher).id]

    outcome.results.sort(key=key)
    atomic_write_text(out_dir / RESULTS_FILE, results_frame(outcome.results).to_csv(index=False))
    failures = pd.DataFrame(sorted(outcome.failures, key=lambda f: order[f["cell"]]), columns=FAILURE_COLUMNS)
    atomic_write_text(out_dir / FAILURES_FILE, failures.to_csv(index=False))


def _record_failure(outcome: MatrixOutcome, cell: Cell, error: BaseException) -> None:
    logger.error(f"Cell {cell.id} failed: {type(error).__name__}: {error}")
    outcome.failures.append({"cell": cell.id, "error": type(error).__name__, "message": str(error)})


def run_matrix(config: MatrixConfig, out_dir: Path, *, debug: bool = False) -> MatrixOutcome:
    """Train every cell of a matrix and derive its metric tables.

    Every network of the matrix is built before any training starts, so an unbuildable combination aborts the run
    up front. During training a failing cell is recorded in `failures.csv` and the remaining cells continue; a
    distilled cell whose teacher failed fails too. `results.csv` is rewritten atomically after every finished cell.

    Args:
        config (MatrixConfig): The matrix.
        out_dir (Path): Output directory for run directories, results and metric tables.
        debug (bool): Debug logging in worker processes.

    Returns:
        MatrixOutcome: Results in plan order, failures and the mean/std metric tables.

    Raises:
        NonDivisibleError: If a policy does not fit a layer of the configured network.
        InvalidDepthError: If the configured WRN depth is invalid.
    """
    train_config = config.train_config()
    waves = plan_cells(config)
    num_classes = num_classes_of(config.dataset)
    cells = [cell for wave in waves for cell in wave]
    order = {cell.id: i for i, cell in enumerate(cells)}

    jobs: dict[str, CellJob] = {}
    for cell in cells:
        request = config.request(cell.policy, residual=cell.residual, num_classes=num_classes)
        _ = build(request)
        teacher = cell.teacher_cell()
        jobs[cell.id] = CellJob(
            cell=cell,
            request=request,
            dataset=config.dataset,
            train=train_config,
            run_dir=out_dir / RUNS_DIR / cell.id,
            teacher_dir=None if teacher is None else out_dir / RUNS_DIR / teacher.id,
        )

    out_dir.mkdir(parents=True, exist_ok=True)
    outcome = MatrixOutcome()
    _write_results(out_dir, outcome, order)
    settings = get_runtime()
    logger.info(f"Matrix of {len(cells)} cells in {len(waves)} waves")

    failed: set[str] = set()
    for wave in waves:
        runnable: list[Cell] = []
        for cell in wave:
            teacher = cell.teacher_cell()
            if teacher is not None and teacher.id in failed:
                failed.add(cell.id)
                _record_failure(outcome, cell, RuntimeError(f"Teacher run {teacher.id} failed"))
            else:
                runnable.append(cell)

        workers = min(config.parallelism or settings.threads, len(runnable))
        if workers <= 1:
            for cell in runnable:
                try:
                    outcome.results.append(run_cell(jobs[cell.id]))
                except Exception as e:  # noqa: BLE001
                    failed.add(cell.id)
                    _record_failure(outcome, cell, e)
                _write_results(out_dir, outcome, order)
            continue

        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(debug, settings)) as pool:
            futures = {pool.submit(run_cell, jobs[cell.id]): cell for cell in runnable}
            for future in as_completed(futures):
                cell = futures[future]
                if (error := future.exception()) is not None:
                    failed.add(cell.id)
                    _record_failure(outcome, cell, error)
                else:
                    outcome.results.append(future.result())
                _write_results(out_dir, outcome, order)

    frame = results_frame(outcome.results)
    outcome.table, outcome.std_table = tables_from_results(
        frame,
        students=[p.label for p in _unique(list(config.students))],
        teachers=[p.label for p in _unique(list(config.teachers))],
    )
    atomic_write_text(out_dir / METRIC_TABLE_FILE, outcome.table.to_frame().to_csv())
    atomic_write_text(out_dir / METRIC_STD_FILE, outcome.std_table.to_frame(derived=False).to_csv())
    logger.info(f"Matrix finished: {len(outcome.results)} results, {len(outcome.failures)} failures")
    return outcome
