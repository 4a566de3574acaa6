from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
import pytest

from src.arch.builders import build_wrn
from src.arch.policy import GroupingPolicy
from src.distill.losses import kd_loss
from src.network import Network
from src.tensorgrad.gradcheck import check_gradients, relative_error
from src.tensorgrad.ops import (
    RunningStats,
    batch_norm,
    conv2d,
    cross_entropy,
    dropout,
    global_avg_pool,
    kl_div,
    kl_div_logits,
    linear,
    log_softmax,
    mul,
    relu,
    softmax_t,
    sum_all,
)
from src.tensorgrad.tensor import Tensor

if TYPE_CHECKING:
    from collections.abc import Callable

    from numpy.typing import NDArray

    from src.tensorgrad.gradcheck import GradCheckResult

TOLERANCE = 1e-4


def _leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _projected(out: Callable[[], Tensor], weights: NDArray[np.float64]) -> Callable[[], Tensor]:
    """Reduce a tensor-valued op to a scalar with fixed random weights so every output element matters."""
    return lambda: sum_all(mul(out(), Tensor(weights)))


def _assert_close(results: list[GradCheckResult]) -> None:
    for result in results:
        assert result.probes > 0, result.name
        assert result.max_rel_error <= TOLERANCE, result


# OPERATOR TESTS
# ==============
@pytest.mark.parametrize(("stride", "padding", "groups"), [(1, 1, 1), (2, 1, 2), (1, 0, 4)])
def test_conv2d(rng: np.random.Generator, stride: int, padding: int, groups: int) -> None:
    x = _leaf(rng, 2, 4, 5, 5)
    weight = _leaf(rng, 8, 4 // groups, 3, 3)
    out_shape = conv2d(x, weight, stride=stride, padding=padding, groups=groups).shape

    loss = _projected(
        lambda: conv2d(x, weight, stride=stride, padding=padding, groups=groups), rng.standard_normal(out_shape)
    )

    _assert_close(check_gradients(loss, [("x", x), ("weight", weight)]))


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm(rng: np.random.Generator, training: bool) -> None:  # noqa: FBT001
    x = _leaf(rng, 4, 3, 3, 3)
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = _leaf(rng, 3)
    stats = RunningStats(mean=rng.standard_normal(3), var=rng.uniform(0.5, 2.0, 3))
    weights = rng.standard_normal(x.shape)

    def loss() -> Tensor:
        # A fresh copy keeps the running statistics fixed across probes
        fixed = RunningStats(mean=stats.mean.copy(), var=stats.var.copy())
        return sum_all(mul(batch_norm(x, gamma, beta, fixed, training=training), Tensor(weights)))

    _assert_close(check_gradients(loss, [("x", x), ("gamma", gamma), ("beta", beta)]))


def test_relu_away_from_kink(rng: np.random.Generator) -> None:
    values = rng.uniform(0.1, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    x = Tensor(values, requires_grad=True)

    _assert_close(check_gradients(_projected(lambda: relu(x), rng.standard_normal(x.shape)), [("x", x)]))


def test_dropout_with_fixed_mask(rng: np.random.Generator) -> None:
    x = _leaf(rng, 4, 5)
    weights = rng.standard_normal(x.shape)

    def loss() -> Tensor:
        return sum_all(mul(dropout(x, 0.4, np.random.default_rng(3), training=True), Tensor(weights)))

    _assert_close(check_gradients(loss, [("x", x)]))


def test_pool_and_linear(rng: np.random.Generator) -> None:
    x = _leaf(rng, 2, 3, 4, 4)
    weight = _leaf(rng, 5, 3)
    bias = _leaf(rng, 5)

    loss = _projected(lambda: linear(global_avg_pool(x), weight, bias), rng.standard_normal((2, 5)))

    _assert_close(check_gradients(loss, [("x", x), ("weight", weight), ("bias", bias)]))


@pytest.mark.parametrize("temperature", [1.0, 4.0])
def test_softmax_family(rng: np.random.Generator, temperature: float) -> None:
    logits = _leaf(rng, 3, 6)
    weights = rng.standard_normal((3, 6))

    _assert_close(
        check_gradients(_projected(lambda: softmax_t(logits, temperature), weights), [("logits", logits)])
    )
    _assert_close(
        check_gradients(_projected(lambda: log_softmax(logits, temperature), weights), [("logits", logits)])
    )


def test_cross_entropy(rng: np.random.Generator) -> None:
    logits = _leaf(rng, 4, 5)
    labels = np.array([0, 4, 2, 2])

    _assert_close(check_gradients(lambda: cross_entropy(logits, labels), [("logits", logits)]))


def test_kl_divergence(rng: np.random.Generator) -> None:
    p = Tensor(rng.dirichlet(np.ones(5), size=3), requires_grad=True)
    q = Tensor(rng.dirichlet(np.ones(5), size=3), requires_grad=True)

    _assert_close(check_gradients(lambda: kl_div(p, q), [("p", p), ("q", q)]))


def test_kl_divergence_from_logits(rng: np.random.Generator) -> None:
    p = Tensor(rng.dirichlet(np.ones(5), size=3))
    logits = _leaf(rng, 3, 5)

    _assert_close(check_gradients(lambda: kl_div_logits(p, logits, 4.0), [("logits", logits)]))


@pytest.mark.parametrize("alpha", [0.0, 0.5, 0.9, 1.0])
def test_kd_loss(rng: np.random.Generator, alpha: float) -> None:
    student = _leaf(rng, 4, 6)
    teacher = rng.standard_normal((4, 6))
    labels = np.array([1, 0, 5, 3])

    def loss() -> Tensor:
        return kd_loss(student, teacher, labels, temperature=4.0, alpha=alpha)

    _assert_close(check_gradients(loss, [("student", student)]))


# NETWORK TESTS
# =============
def test_wrn_with_distillation_loss(rng: np.random.Generator) -> None:
    spec = build_wrn(10, 1, GroupingPolicy.groups(2), residual=True, num_classes=10)
    net = Network(spec, seed=11, dtype=np.float64)
    images = rng.standard_normal((4, 3, 8, 8))
    teacher = rng.standard_normal((4, 10))
    labels = np.array([0, 3, 7, 9])

    def loss() -> Tensor:
        net.reseed_dropout(5)
        logits, _ = net.forward(images)
        return kd_loss(logits, teacher, labels, temperature=4.0, alpha=0.9)

    names = [
        "stem.conv.weight",
        "stage1.block0.a.gconv.weight",
        "stage2.block0.shortcut.weight",
        "stage3.block0.b.mix_bn.gamma",
        "classifier.weight",
    ]
    checked = [(name, net.params[name].tensor) for name in names]

    _assert_close(check_gradients(loss, checked, probes_per_tensor=8, seed=2))


# CHECKER TESTS
# =============
def test_checker_detects_wrong_gradient(rng: np.random.Generator) -> None:
    x = _leaf(rng, 3)

    def loss() -> Tensor:
        # Claims d/dx sum(x^2) = x instead of 2x
        return Tensor.from_op(np.asarray((x.data**2).sum()), (x,), lambda g: (g * x.data,), "bad")

    results = check_gradients(loss, [("x", x)])

    assert results[0].max_rel_error == pytest.approx(0.5, abs=1e-3)


def test_relative_error_floor() -> None:
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)
