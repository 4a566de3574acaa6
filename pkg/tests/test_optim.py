import numpy as np
import pytest
from pydantic import TypeAdapter, ValidationError

from src.arch.spec import Family
from src.distill.optim import SgdConfig, SgdState, sgd_step
from src.distill.schedule import (
    ExponentialPerEpoch,
    LrSchedule,
    StepDecay,
    epochs_for,
    lr_at,
    schedule_for_family,
)
from src.tensorgrad.tensor import parameter


# SGD TESTS
# =========
def test_momentum_accumulates() -> None:
    p = parameter("w", np.zeros(3))
    state = SgdState()
    g = np.array([1.0, -2.0, 0.5])

    for _ in range(2):
        p.tensor.grad = g.copy()
        sgd_step([p], state, lr=0.1, momentum=0.9, weight_decay=0.0)

    np.testing.assert_allclose(p.tensor.data, -0.1 * g * 2.9)
    np.testing.assert_allclose(state.velocity["w"], 1.9 * g)


def test_weight_decay_is_coupled_and_selective() -> None:
    weight = parameter("conv.weight", np.ones(2))
    gamma = parameter("bn.gamma", np.ones(2), decay=False)
    for p in (weight, gamma):
        p.tensor.grad = np.zeros(2)

    sgd_step([weight, gamma], SgdState(), lr=0.5, momentum=0.9, weight_decay=0.1)

    np.testing.assert_allclose(weight.tensor.data, 1.0 - 0.5 * 0.1)
    np.testing.assert_allclose(gamma.tensor.data, 1.0)


def test_parameters_without_gradient_are_skipped() -> None:
    p = parameter("w", np.ones(2))
    state = SgdState()

    sgd_step([p], state, lr=0.1, momentum=0.9, weight_decay=0.1)

    np.testing.assert_array_equal(p.tensor.data, np.ones(2))
    assert state.velocity == {}


def test_dtype_is_preserved() -> None:
    p = parameter("w", np.ones(2, dtype=np.float32))
    p.tensor.grad = np.ones(2, dtype=np.float32)

    sgd_step([p], SgdState(), lr=0.1, momentum=0.9, weight_decay=4e-4)

    assert p.tensor.data.dtype == np.float32


def test_sgd_config_defaults() -> None:
    config = SgdConfig()

    assert (config.lr0, config.momentum, config.weight_decay, config.batch_size) == (0.1, 0.9, 4e-4, 128)


# SCHEDULE TESTS
# ==============
@pytest.mark.parametrize(
    ("epoch", "expected"),
    [(0, 0.1), (29, 0.1), (30, 0.01), (59, 0.01), (65, 1e-3), (95, 1e-4), (119, 1e-4)],
)
def test_resnet18_schedule(epoch: int, expected: float) -> None:
    assert lr_at(schedule_for_family(Family.RESNET18), 0.1, epoch) == pytest.approx(expected)


@pytest.mark.parametrize(("epoch", "expected"), [(0, 0.1), (30, 0.02), (60, 0.004), (95, 8e-4)])
def test_wrn_schedule(epoch: int, expected: float) -> None:
    assert lr_at(schedule_for_family(Family.WRN), 0.1, epoch) == pytest.approx(expected)


def test_mobilenetv2_schedule() -> None:
    schedule = schedule_for_family(Family.MOBILENETV2)

    assert lr_at(schedule, 0.1, 0) == pytest.approx(0.1)
    assert lr_at(schedule, 0.1, 1) == pytest.approx(0.098)
    assert lr_at(schedule, 0.1, 10) == pytest.approx(0.1 * 0.98**10)


def test_schedule_rejects_negative_epoch() -> None:
    with pytest.raises(ValueError, match="non-negative"):
        _ = lr_at(StepDecay(), 0.1, -1)


def test_milestones_must_increase() -> None:
    with pytest.raises(ValidationError):
        _ = StepDecay(milestones=(30, 30, 90))


def test_schedule_from_json() -> None:
    adapter = TypeAdapter(LrSchedule)

    assert adapter.validate_python({"kind": "step", "factor": 5.0}) == StepDecay(factor=5.0)
    assert adapter.validate_python({"kind": "exponential"}) == ExponentialPerEpoch()


def test_epoch_presets() -> None:
    assert epochs_for(Family.MOBILENETV2, distilled=True) == 300
    assert epochs_for(Family.MOBILENETV2, distilled=False) == 120
    assert epochs_for(Family.WRN, distilled=True) == 120
