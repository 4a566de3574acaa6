from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import TYPE_CHECKING, Literal, NoReturn, Self

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.arch.builders import ArchRequest
from src.arch.policy import GroupingPolicy
from src.arch.spec import ARCHSPEC_SCHEMA, Family, PairMapping, ShortcutStyle
from src.data import CifarSource, DatasetSource, SyntheticSource
from src.distill.augment import Augmentation
from src.distill.losses import DistillConfig
from src.distill.optim import SgdConfig
from src.distill.schedule import LrSchedule, epochs_for, schedule_for_family

if TYPE_CHECKING:
    from collections.abc import Sequence

    from src.distill.schedule import ExponentialPerEpoch, StepDecay

TRAIN_SCHEMA = "traincfg/1"
MATRIX_SCHEMA = "matrix/1"
CHECKPOINT_SCHEMA = "ckpt/1"
SCHEMAS = (ARCHSPEC_SCHEMA, TRAIN_SCHEMA, MATRIX_SCHEMA, CHECKPOINT_SCHEMA)

USAGE_ERROR_EXIT = 2

DEFAULT_CONFIG_PATH = Path("./config.json")
DEFAULT_MATRIX_PATH = Path("./matrix.json")


class _Document(BaseModel):
    """A versioned JSON document, loaded with the same contract for every schema."""

    model_config = ConfigDict(frozen=True, populate_by_name=True, serialize_by_alias=True)

    @classmethod
    def from_file(cls, json_filepath: Path) -> Self:
        """Load and validate a JSON document.

        Args:
            json_filepath (Path): Path to the JSON file.

        Returns:
            Self: The validated document.

        Raises:
            FileNotFoundError: If the file does not exist.
            ValidationError: If the file does not conform to the schema.
        """
        if not json_filepath.exists():
            msg = f"Configuration file {json_filepath} not found."
            raise FileNotFoundError(msg)

        try:
            logger.debug(f"Loading {cls.__name__} from {json_filepath}")
            document = cls.model_validate_json(json_filepath.read_text(encoding="utf-8"))
            logger.debug(f"Loaded: {document}")
        except ValidationError as e:
            logger.error(f"Failed to validate {json_filepath}: {e}")
            raise
        return document


class TrainConfig(_Document):
    """Settings of one training or distillation run."""

    schema_version: Literal["traincfg/1"] = Field(default=TRAIN_SCHEMA, alias="schema")
    sgd: SgdConfig = Field(default_factory=SgdConfig)
    schedule: LrSchedule | None = Field(
        default=None,
        description="Learning-rate schedule. If None, the preset of the network family is used.",
    )
    distill: DistillConfig = Field(default_factory=DistillConfig)
    augmentation: Augmentation = Field(default_factory=Augmentation)
    dtype: Literal["float32", "float64"] = "float32"
    eval_batch_size: int = Field(default=256, ge=1)

    def schedule_for(self, family: Family) -> StepDecay | ExponentialPerEpoch:
        return self.schedule or schedule_for_family(family)

    def epochs_for(self, family: Family, *, distilled: bool) -> int:
        """The configured epoch count, or the family preset when the document leaves it unset."""
        if "epochs" in self.sgd.model_fields_set:
            return self.sgd.epochs
        return epochs_for(family, distilled=distilled)


class MatrixConfig(_Document):
    """An experiment matrix: residual teachers by non-residual students of one network family.

    Every field has a default, so `{}` is a valid (empty) matrix.
    """

    schema_version: Literal["matrix/1"] = Field(default=MATRIX_SCHEMA, alias="schema")
    family: Family = Family.WRN
    depth: int | None = Field(default=10, description="WRN depth; ignored by other families.")
    widen: int | None = Field(default=1, ge=1, description="WRN widening factor; ignored by other families.")
    students: tuple[GroupingPolicy, ...] = Field(default=(), description="Student policies (table columns).")
    teachers: tuple[GroupingPolicy, ...] = Field(default=(), description="Teacher policies (table rows).")
    seeds: tuple[int, ...] = (0,)
    dataset: DatasetSource = Field(default_factory=SyntheticSource)
    train: TrainConfig | Path = Field(
        default_factory=TrainConfig,
        description="Inline training settings, or the path of a traincfg/1 document.",
    )
    parallelism: int | None = Field(
        default=None,
        ge=1,
        description="Maximum concurrent cells. If None, RDL_THREADS bounds it.",
    )

    @model_validator(mode="before")
    @classmethod
    def parse_policy_notation(cls, data: object) -> object:
        if isinstance(data, dict):
            data = dict(data)
            for key in ("students", "teachers"):
                if key in data:
                    data[key] = [GroupingPolicy.parse(p) if isinstance(p, str) else p for p in data[key]]
        return data

    @model_validator(mode="after")
    def check_seeds(self) -> Self:
        if len(set(self.seeds)) != len(self.seeds):
            msg = f"Seeds must be unique, got {self.seeds}"
            raise ValueError(msg)
        return self

    def train_config(self) -> TrainConfig:
        """The inline training settings, or the document the `train` path points at."""
        return self.train if isinstance(self.train, TrainConfig) else TrainConfig.from_file(self.train)

    def request(self, policy: GroupingPolicy, *, residual: bool, num_classes: int) -> ArchRequest:
        is_wrn = self.family is Family.WRN
        return ArchRequest(
            family=self.family,
            depth=self.depth if is_wrn else None,
            widen=self.widen if is_wrn else None,
            policy=policy,
            residual=residual,
            num_classes=num_classes,
        )


# COMMAND LINE
# ============
class _Parser(argparse.ArgumentParser):
    """Argument parser reporting usage errors as a single machine-parsable line."""

    def error(self, message: str) -> NoReturn:
        flag = "-"
        if message.startswith("argument "):
            flag = message.removeprefix("argument ").split(":", 1)[0]
        elif "required" in message:
            flag = message.rsplit(":", 1)[-1].strip()
        print(  # noqa: T201
            f"usage-error flag={flag} expected={','.join(SCHEMAS)} message={json.dumps(message)}",
            file=sys.stderr,
        )
        raise SystemExit(USAGE_ERROR_EXIT)


def _bool(text: str) -> bool:
    match text.strip().lower():
        case "true" | "1" | "yes" | "on":
            return True
        case "false" | "0" | "no" | "off":
            return False
    msg = f"expected true/false, got {text!r}"
    raise argparse.ArgumentTypeError(msg)


def _policy(text: str) -> GroupingPolicy:
    try:
        return GroupingPolicy.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _input_shape(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3 or not all(p.isdigit() and int(p) > 0 for p in parts):  # noqa: PLR2004
        msg = f"expected CxHxW, got {text!r}"
        raise argparse.ArgumentTypeError(msg)
    c, h, w = (int(p) for p in parts)
    return c, h, w


def _class_list(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError as e:
        msg = f"expected comma-separated class ids, got {text!r}"
        raise argparse.ArgumentTypeError(msg) from e


def _add_arch_arguments(parser: argparse.ArgumentParser) -> None:
    _ = parser.add_argument("--arch", type=Family, choices=list(Family), required=True, help="Network family.")
    _ = parser.add_argument("--depth", type=int, help="WRN depth d, with (d - 4) divisible by 6.")
    _ = parser.add_argument("--widen", type=int, help="WRN widening factor.")
    _ = parser.add_argument(
        "--policy",
        type=_policy,
        default=GroupingPolicy.standard(),
        help="Grouping policy of the 3x3 convolutions: std, dw, g=N or G=N.",
    )
    _ = parser.add_argument("--residual", type=_bool, default=True, help="Keep the shortcut connections.")
    _ = parser.add_argument("--num-classes", type=int, default=None, help="Classifier width.")
    _ = parser.add_argument("--pair-mapping", type=PairMapping, choices=list(PairMapping), default=None)
    _ = parser.add_argument("--shortcut-style", type=ShortcutStyle, choices=list(ShortcutStyle), default=None)


def _add_data_arguments(parser: argparse.ArgumentParser) -> None:
    _ = parser.add_argument(
        "--data-dir",
        type=Path,
        default=None,
        help="Directory of CIFAR binary files. If omitted, the seeded synthetic dataset is used.",
    )
    _ = parser.add_argument("--variant", type=int, choices=[10, 100], default=100, help="CIFAR variant.")
    _ = parser.add_argument("--subset", type=int, default=None, help="Keep the first N samples of each class.")
    _ = parser.add_argument("--data-seed", type=int, default=None, help="Seed of the synthetic dataset.")


def _add_train_arguments(parser: argparse.ArgumentParser) -> None:
    _add_arch_arguments(parser)
    _add_data_arguments(parser)
    _ = parser.add_argument(
        "-c",
        "--config",
        type=Path,
        default=DEFAULT_CONFIG_PATH,
        help="Path to a traincfg/1 JSON document.",
    )
    _ = parser.add_argument("--out", type=Path, required=True, help="Run directory to write.")
    _ = parser.add_argument("--seed", type=int, default=None, help="Override the configured seed.")
    _ = parser.add_argument("--epochs", type=int, default=None, help="Override the configured epoch count.")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(description="Residual connections, grouped convolutions and knowledge distillation lab")
    _ = parser.add_argument(
        "-d",
        "--debug",
        action="store_true",
        help="Enable debug logging.",
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    analyze = commands.add_parser("analyze", help="Count the parameters and FLOPs of a network.")
    _add_arch_arguments(analyze)
    _ = analyze.add_argument("--input", type=_input_shape, default=(3, 32, 32), help="Input shape as CxHxW.")
    _ = analyze.add_argument("--format", choices=["json", "csv", "table"], default="table")
    _ = analyze.add_argument(
        "--sweep",
        action="store_true",
        help="Cost the nine g/G policy columns in residual and non-residual form instead of one network.",
    )

    train = commands.add_parser("train", help="Train a network on hard targets.")
    _add_train_arguments(train)

    distill = commands.add_parser("distill", help="Train a student distilled from a trained teacher run.")
    _add_train_arguments(distill)
    _ = distill.add_argument("--teacher-run", type=Path, required=True, help="Run directory of the teacher.")
    _ = distill.add_argument("--temperature", type=float, default=None, help="Override the softmax temperature.")
    _ = distill.add_argument("--alpha", type=float, default=None, help="Override the soft-target weight.")
    _ = distill.add_argument(
        "--kd-t2",
        choices=["on", "off"],
        default=None,
        help="Scale the soft-target term by T^2.",
    )

    matrix = commands.add_parser("matrix", help="Run an experiment matrix of teachers and students.")
    _ = matrix.add_argument("-c", "--config", type=Path, default=DEFAULT_MATRIX_PATH, help="A matrix/1 document.")
    _ = matrix.add_argument("--out", type=Path, required=True, help="Output directory.")

    report = commands.add_parser("report", help="Print accuracy drop and distillation gain tables.")
    _ = report.add_argument("--results", type=Path, required=True, help="A results CSV written by `matrix`.")

    viz = commands.add_parser("viz", help="Export classifier-input activations of chosen classes.")
    _add_data_arguments(viz)
    _ = viz.add_argument("--run", type=Path, required=True, help="Run directory of the trained network.")
    classes = viz.add_mutually_exclusive_group(required=True)
    _ = classes.add_argument("--classes", type=_class_list, help="Comma-separated class ids.")
    _ = classes.add_argument("--worst-k", type=int, help="Pick the k classes with the lowest top-1 accuracy.")
    _ = viz.add_argument("--project", action="store_true", help="Write the 2-D principal-component projection.")
    _ = viz.add_argument("--out", type=Path, required=True, help="CSV file to write.")

    return parser


def read_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def dataset_from_args(args: argparse.Namespace) -> CifarSource | SyntheticSource:
    """The dataset source described by the data flags."""
    if args.data_dir is not None:
        return CifarSource(path=args.data_dir, variant=args.variant, subset=args.subset)
    if args.data_seed is not None:
        return SyntheticSource(seed=args.data_seed)
    return SyntheticSource()


def request_from_args(args: argparse.Namespace, *, num_classes: int | None = None) -> ArchRequest:
    """The architecture described by the architecture flags.

    Raises:
        ValidationError: If the flags do not describe a buildable request.
    """
    options = {
        "pair_mapping": args.pair_mapping,
        "shortcut_style": args.shortcut_style,
        "num_classes": args.num_classes or num_classes,
    }
    return ArchRequest.model_validate({
        "family": args.arch,
        "depth": args.depth,
        "widen": args.widen,
        "policy": args.policy,
        "residual": args.residual,
        **{k: v for k, v in options.items() if v is not None},
    })
