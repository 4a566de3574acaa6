from __future__ import annotations

import json
import sys
from typing import TYPE_CHECKING

import pandas as pd
from loguru import logger

from src.arch.builders import build
from src.arch.policy import SWEEP_POLICIES
from src.config import MatrixConfig, TrainConfig, dataset_from_args, request_from_args
from src.costmodel import cost_table, network_cost
from src.data import DatasetHandle, load_dataset, load_splits
from src.distill.losses import DistillConfig
from src.distill.trainer import load_run, load_teacher
from src.experiments.activations import export_activations, project_2d, worst_k_classes
from src.experiments.report import load_results, render_report
from src.experiments.runner import num_classes_of, results_frame, run_matrix, train_and_save
from src.fileio import atomic_write_text
from src.log import run_log

if TYPE_CHECKING:
    import argparse
    from collections.abc import Callable

type CommandFn = Callable[[argparse.Namespace], None]

LAYER_COLUMNS = ["id", "kind", "params", "flops", "fmap", "shortcut"]

commands: dict[str, CommandFn] = {}


def register_command(name: str) -> Callable[[CommandFn], CommandFn]:
    """Decorator to register the handler of a sub-command.

    Args:
        name (str): The sub-command name.

    Returns:
        Callable[[CommandFn], CommandFn]: The decorator function.
    """

    def decorator(func: CommandFn) -> CommandFn:
        commands[name] = func
        return func

    return decorator


def run_command(args: argparse.Namespace) -> None:
    commands[args.command](args)


def _emit(text: str) -> None:
    _ = sys.stdout.write(text if text.endswith("\n") else f"{text}\n")


# ANALYZE
# =======
@register_command("analyze")
def analyze(args: argparse.Namespace) -> None:
    request = request_from_args(args)

    if args.sweep:
        table = cost_table(request, SWEEP_POLICIES, input_shape=args.input)
        match args.format:
            case "json":
                _emit(table.model_dump_json(indent=2))
            case "csv":
                _emit(table.to_frame("flops").to_csv() + table.to_frame("params").to_csv())
            case _:
                _emit(f"FLOPs (M)\n{table.render('flops')}\n\nParams (M)\n{table.render('params')}")
        return

    cost = network_cost(build(request), args.input)
    match args.format:
        case "json":
            _emit(cost.model_dump_json(indent=2))
        case "csv":
            _emit(pd.DataFrame(cost.model_dump()["per_layer"], columns=LAYER_COLUMNS).to_csv(index=False))
        case _:
            _emit(
                f"{cost.network} @ {'x'.join(map(str, cost.input))}\n"
                f"params {cost.totals.params:,}  flops {cost.totals.flops:,}  "
                f"(shortcuts: {cost.residual_overhead.params:,} params, {cost.residual_overhead.flops:,} flops)"
            )


# TRAIN / DISTILL
# ===============
def _train_command(args: argparse.Namespace, *, distilled: bool) -> None:
    config = TrainConfig.from_file(args.config)
    source = dataset_from_args(args)
    request = request_from_args(args, num_classes=num_classes_of(source))
    spec = build(request)

    if distilled:
        updates = {
            "temperature": args.temperature,
            "alpha": args.alpha,
            "t2_scale": None if args.kd_t2 is None else args.kd_t2 == "on",
            "teacher": args.teacher_run,
        }
        distill = DistillConfig.model_validate({
            **config.distill.model_dump(),
            **{k: v for k, v in updates.items() if v is not None},
        })
        config = config.model_copy(update={"distill": distill})

    with run_log(args.out):
        train_data, test_data = load_splits(source, config.dtype)
        teacher = None
        if distilled:
            teacher = load_teacher(args.teacher_run, train_data.normalization, config.dtype)
        result = train_and_save(
            spec,
            train_data,
            test_data,
            config,
            run_dir=args.out,
            seed=args.seed,
            epochs=args.epochs,
            teacher=teacher,
            extra_stats={"teacher_run": str(args.teacher_run)} if distilled else None,
        )
    _emit(
        f"{spec.name}: final test {100 * result.final_test_acc:.2f}% "
        f"(best {100 * result.best_test_acc:.2f}%), train {100 * result.final_train_acc:.2f}%"
    )


@register_command("train")
def train_command(args: argparse.Namespace) -> None:
    _train_command(args, distilled=False)


@register_command("distill")
def distill_command(args: argparse.Namespace) -> None:
    _train_command(args, distilled=True)


# MATRIX / REPORT
# ===============
@register_command("matrix")
def matrix(args: argparse.Namespace) -> None:
    config = MatrixConfig.from_file(args.config)
    outcome = run_matrix(config, args.out, debug=args.debug)
    _emit(results_frame(outcome.results).to_csv(index=False))
    if outcome.failures:
        logger.warning(f"{len(outcome.failures)} cells failed; see {args.out / 'failures.csv'}")


@register_command("report")
def report(args: argparse.Namespace) -> None:
    _emit(render_report(load_results(args.results)))


# VIZ
# ===
@register_command("viz")
def viz(args: argparse.Namespace) -> None:
    network, normalization = load_run(args.run)
    test_data = load_dataset(DatasetHandle(source=dataset_from_args(args), split="test"), normalization)

    class_ids = args.classes or worst_k_classes(network, test_data, args.worst_k)
    activations = export_activations(network, test_data, class_ids)
    frame = project_2d(activations) if args.project else activations
    atomic_write_text(args.out, frame.to_csv(index=False))
    _emit(json.dumps({"rows": len(frame), "classes": [int(c) for c in class_ids], "out": str(args.out)}))
