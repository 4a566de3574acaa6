from __future__ import annotations

import struct
from typing import TYPE_CHECKING

import numpy as np
import pytest

from src.arch.builders import build_wrn
from src.arch.policy import GroupingPolicy
from src.errors import CheckpointMismatchError
from src.fileio import file_digest
from src.network import DROPOUT_STREAM, INIT_STREAM, Network
from src.tensorgrad.checkpoint import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)

if TYPE_CHECKING:
    from pathlib import Path


@pytest.fixture
def tensors(rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "conv.weight": rng.standard_normal((4, 2, 3, 3)).astype(np.float32),
        "bn.running_var": rng.uniform(0.5, 2.0, 4),
        "step": np.array(17, dtype=np.int64),
    }


# FORMAT TESTS
# ============
def test_header_layout() -> None:
    assert encode_checkpoint({}) == MAGIC + struct.pack("<II", 1, 0)


def test_decode_preserves_names_order_and_values(tensors: dict[str, np.ndarray]) -> None:
    decoded = decode_checkpoint(encode_checkpoint(tensors))

    assert list(decoded) == list(tensors)
    for name, array in tensors.items():
        assert decoded[name].dtype == array.dtype
        assert decoded[name].shape == array.shape
        np.testing.assert_array_equal(decoded[name], array)


def test_unicode_names() -> None:
    decoded = decode_checkpoint(encode_checkpoint({"größe": np.ones(2)}))

    assert list(decoded) == ["größe"]


def test_bad_magic(tensors: dict[str, np.ndarray]) -> None:
    data = b"XXXX" + encode_checkpoint(tensors)[4:]

    with pytest.raises(CheckpointMismatchError, match="magic"):
        _ = decode_checkpoint(data)


def test_unsupported_version() -> None:
    with pytest.raises(CheckpointMismatchError, match="version"):
        _ = decode_checkpoint(MAGIC + struct.pack("<II", 2, 0))


@pytest.mark.parametrize("cut", [6, 14, 40, -1])
def test_truncated(tensors: dict[str, np.ndarray], cut: int) -> None:
    data = encode_checkpoint(tensors)

    with pytest.raises(CheckpointMismatchError):
        _ = decode_checkpoint(data[:cut])


def test_trailing_bytes(tensors: dict[str, np.ndarray]) -> None:
    with pytest.raises(CheckpointMismatchError, match="trailing"):
        _ = decode_checkpoint(encode_checkpoint(tensors) + b"\x00")


def test_unsupported_dtype() -> None:
    with pytest.raises(CheckpointMismatchError, match="dtype"):
        _ = encode_checkpoint({"x": np.ones(2, dtype=np.int32)})


# FILE TESTS
# ==========
def test_save_and_load(tmp_path: Path, tensors: dict[str, np.ndarray]) -> None:
    path = tmp_path / "run" / "model.ckpt"

    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)

    assert list(loaded) == list(tensors)
    assert not list(path.parent.glob("*.tmp"))


def test_save_is_deterministic(tmp_path: Path, tensors: dict[str, np.ndarray]) -> None:
    save_checkpoint(tmp_path / "a.ckpt", tensors)
    save_checkpoint(tmp_path / "b.ckpt", tensors)

    assert file_digest(tmp_path / "a.ckpt") == file_digest(tmp_path / "b.ckpt")


def test_load_missing(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        _ = load_checkpoint(tmp_path / "missing.ckpt")


# NETWORK STATE TESTS
# ===================
def test_network_state_round_trip(tmp_path: Path, rng: np.random.Generator) -> None:
    spec = build_wrn(10, 1, GroupingPolicy.groups(2), residual=True, num_classes=10)
    source = Network(spec, seed=1)
    images = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    _ = source.forward(images)  # moves the running statistics away from their initial values
    source.eval()

    save_checkpoint(tmp_path / "model.ckpt", source.state_dict())
    target = Network(spec, seed=2)
    target.load_state_dict(load_checkpoint(tmp_path / "model.ckpt"))
    target.eval()

    np.testing.assert_array_equal(target.forward(images)[0].data, source.forward(images)[0].data)


def test_network_state_mismatch() -> None:
    state = Network(build_wrn(10, 1, GroupingPolicy.groups(2), residual=True)).state_dict()

    deeper = Network(build_wrn(16, 1, GroupingPolicy.groups(2), residual=True))
    with pytest.raises(CheckpointMismatchError, match="missing"):
        deeper.load_state_dict(state)

    regrouped = Network(build_wrn(10, 1, GroupingPolicy.groups(4), residual=True))
    with pytest.raises(CheckpointMismatchError, match="shape"):
        regrouped.load_state_dict(state)


def test_dropout_and_initialization_use_separate_streams() -> None:
    net = Network(build_wrn(10, 1, GroupingPolicy.groups(2), residual=True, dropout_p=0.3), seed=3)
    weight = net.params["stem.conv.weight"].tensor.data
    out_channels, _, k, _ = weight.shape

    init_rng = np.random.default_rng([3, INIT_STREAM])
    expected = init_rng.normal(0.0, np.sqrt(2.0 / (k * k * out_channels)), weight.shape).astype(np.float32)
    np.testing.assert_array_equal(weight, expected)

    masks = net.rng.random(16)
    assert not np.allclose(masks, np.random.default_rng([3, INIT_STREAM]).random(16))
    np.testing.assert_array_equal(masks, np.random.default_rng([3, DROPOUT_STREAM]).random(16))

    net.reseed_dropout(3)
    np.testing.assert_array_equal(net.rng.random(16), masks)
