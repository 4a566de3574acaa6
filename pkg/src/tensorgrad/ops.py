"""Differentiable operators over `Tensor`.

Every operator computes its result with numpy and registers a closure mapping the upstream gradient to one gradient
per input (None where an input needs none).
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import cache
from typing import TYPE_CHECKING, Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.errors import DomainError, ShapeMismatchError
from src.runtime import get_runtime
from src.tensorgrad.tensor import Array, Tensor

if TYPE_CHECKING:
    from collections.abc import Iterator

    from numpy.typing import NDArray

# Below this batch size the thread pool costs more than it saves.
MIN_PARALLEL_BATCH = 8


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ELEMENTWISE AND REDUCTIONS
# ==========================
def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor.from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor.from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(x: Tensor, factor: float) -> Tensor:
    return Tensor.from_op(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def sum_all(x: Tensor) -> Tensor:
    return Tensor.from_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    return Tensor.from_op(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / size, x.shape).copy(),), "mean"
    )


_relu_recorder = threading.local()


@contextmanager
def record_relu_patterns() -> Iterator[list[NDArray[np.bool_]]]:
    """Collect the on/off pattern of every ReLU evaluated in this thread while the context is open."""
    patterns: list[NDArray[np.bool_]] = []
    previous = getattr(_relu_recorder, "patterns", None)
    _relu_recorder.patterns = patterns
    try:
        yield patterns
    finally:
        _relu_recorder.patterns = previous


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if (patterns := getattr(_relu_recorder, "patterns", None)) is not None:
        patterns.append(mask.copy())
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def dropout(x: Tensor, p: float, rng: np.random.Generator, *, training: bool) -> Tensor:
    """Zero each element with probability `p` and scale the survivors by `1 / (1 - p)`.

    Identity in eval mode and for `p = 0`.

    Raises:
        DomainError: If `p` is outside [0, 1).
    """
    if not 0.0 <= p < 1.0:
        msg = f"Dropout probability must be in [0, 1), got {p}"
        raise DomainError(msg)
    if not training or p == 0.0:
        return x

    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of an NCHW tensor, giving NC."""
    if x.ndim != 4:  # noqa: PLR2004
        msg = f"global_avg_pool expects NCHW input, got shape {x.shape}"
        raise ShapeMismatchError(msg)
    _, _, h, w = x.shape
    area = h * w
    return Tensor.from_op(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),),
        "global_avg_pool",
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map `x @ weight.T + bias` with `weight` of shape [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:  # noqa: PLR2004
        msg = f"linear: input {x.shape} does not match weight {weight.shape} (expected [N, in] and [out, in])"
        raise ShapeMismatchError(msg)
    if bias is not None and bias.shape != (weight.shape[0],):
        msg = f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs"
        raise ShapeMismatchError(msg)

    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g: Array) -> tuple[Array, Array, Array | None]:
        return g @ weight.data, g.T @ x.data, None if bias is None else g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, lambda g: backward(g)[: len(parents)], "linear")


# CONVOLUTION
# ===========
@cache
def _executor(threads: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=threads, thread_name_prefix="conv2d")


@dataclass(frozen=True, slots=True)
class _ConvGeometry:
    n: int
    c: int
    h: int
    w: int
    out_channels: int
    groups: int
    k: int
    stride: int
    padding: int
    ho: int = field(init=False)
    wo: int = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "ho", (self.h + 2 * self.padding - self.k) // self.stride + 1)
        object.__setattr__(self, "wo", (self.w + 2 * self.padding - self.k) // self.stride + 1)

    @property
    def in_per_group(self) -> int:
        return self.c // self.groups

    @property
    def out_per_group(self) -> int:
        return self.out_channels // self.groups


def _check_conv(x: Tensor, weight: Tensor, stride: int, padding: int, groups: int) -> _ConvGeometry:
    if x.ndim != 4 or weight.ndim != 4:  # noqa: PLR2004
        msg = f"conv2d expects NCHW input and [n, m/t, k, k] weight, got {x.shape} and {weight.shape}"
        raise ShapeMismatchError(msg)
    if stride < 1 or padding < 0 or groups < 1:
        msg = f"conv2d needs stride >= 1, padding >= 0 and groups >= 1, got {stride}, {padding}, {groups}"
        raise ShapeMismatchError(msg)

    n, c, h, w = x.shape
    out_channels, in_per_group, k, k2 = weight.shape
    if k != k2:
        msg = f"conv2d kernels must be square, got {k}x{k2}"
        raise ShapeMismatchError(msg)
    if c % groups or out_channels % groups:
        msg = f"conv2d groups t={groups} must divide input channels m={c} and output channels n={out_channels}"
        raise ShapeMismatchError(msg)
    if in_per_group * groups != c:
        msg = f"conv2d weight expects m/t={in_per_group} channels per group but input has m={c}, t={groups}"
        raise ShapeMismatchError(msg)

    geometry = _ConvGeometry(n, c, h, w, out_channels, groups, k, stride, padding)
    if geometry.ho < 1 or geometry.wo < 1:
        msg = f"conv2d kernel k={k} does not fit input {h}x{w} with padding {padding}"
        raise ShapeMismatchError(msg)
    return geometry


def _im2col(x: Array, geo: _ConvGeometry) -> Array:
    """Patch matrix of shape [t, N*Ho*Wo, (m/t)*k*k]."""
    p, s, k = geo.padding, geo.stride, geo.k
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n = x.shape[0]
    cols = windows.reshape(n, geo.groups, geo.in_per_group, geo.ho, geo.wo, k, k)
    return cols.transpose(1, 0, 3, 4, 2, 5, 6).reshape(geo.groups, n * geo.ho * geo.wo, geo.in_per_group * k * k)


def _col2im(dcols: Array, geo: _ConvGeometry, n: int) -> Array:
    p, s, k = geo.padding, geo.stride, geo.k
    patches = dcols.reshape(geo.groups, n, geo.ho, geo.wo, geo.in_per_group, k, k)
    patches = patches.transpose(1, 0, 4, 2, 3, 5, 6).reshape(n, geo.c, geo.ho, geo.wo, k, k)

    dxp = np.zeros((n, geo.c, geo.h + 2 * p, geo.w + 2 * p), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + s * geo.ho : s, j : j + s * geo.wo : s] += patches[..., i, j]
    return dxp[:, :, p : p + geo.h, p : p + geo.w]


def _conv_chunk(x: Array, wmat: Array, geo: _ConvGeometry) -> tuple[Array, Array]:
    n = x.shape[0]
    cols = _im2col(x, geo)
    out = np.matmul(cols, wmat)
    out = out.reshape(geo.groups, n, geo.ho, geo.wo, geo.out_per_group).transpose(1, 0, 4, 2, 3)
    return out.reshape(n, geo.out_channels, geo.ho, geo.wo), cols


def _conv_chunk_backward(g: Array, cols: Array, wmat: Array, geo: _ConvGeometry) -> tuple[Array, Array]:
    n = g.shape[0]
    gmat = g.reshape(n, geo.groups, geo.out_per_group, geo.ho, geo.wo).transpose(1, 0, 3, 4, 2)
    gmat = gmat.reshape(geo.groups, n * geo.ho * geo.wo, geo.out_per_group)
    dwmat = np.matmul(cols.transpose(0, 2, 1), gmat)
    dcols = np.matmul(gmat, wmat.transpose(0, 2, 1))
    return _col2im(dcols, geo, n), dwmat


def _batch_chunks(n: int) -> list[slice]:
    runtime = get_runtime()
    if runtime.deterministic or runtime.threads < 2 or n < MIN_PARALLEL_BATCH:  # noqa: PLR2004
        return [slice(0, n)]
    bounds = np.linspace(0, n, min(runtime.threads, n) + 1).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:], strict=True) if b > a]


def conv2d(x: Tensor, weight: Tensor, *, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D convolution without bias through a patch matrix and one batched matrix product per group.

    Output channel group `b` only reads input channel group `b`.

    Args:
        x (Tensor): Input of shape [N, m, H, W].
        weight (Tensor): Filters of shape [n, m/t, k, k].
        stride (int): Step between windows.
        padding (int): Zero padding on every side.
        groups (int): Number of groups `t`.

    Returns:
        Tensor: Output of shape [N, n, (H + 2p - k) / s + 1, (W + 2p - k) / s + 1].

    Raises:
        ShapeMismatchError: If the shapes are inconsistent; the message names the offending dimensions.
    """
    geo = _check_conv(x, weight, stride, padding, groups)
    wmat = weight.data.reshape(geo.groups, geo.out_per_group, geo.in_per_group * geo.k * geo.k).transpose(0, 2, 1)

    chunks = _batch_chunks(geo.n)
    if len(chunks) == 1:
        out, cols = _conv_chunk(x.data, wmat, geo)
        chunk_cols = [cols]
    else:
        results = list(_executor(get_runtime().threads).map(lambda c: _conv_chunk(x.data[c], wmat, geo), chunks))
        out = np.concatenate([r[0] for r in results])
        chunk_cols = [r[1] for r in results]

    def backward(g: Array) -> tuple[Array, Array]:
        if len(chunks) == 1:
            dx, dwmat = _conv_chunk_backward(g, chunk_cols[0], wmat, geo)
        else:
            parts = list(
                _executor(get_runtime().threads).map(
                    lambda pair: _conv_chunk_backward(g[pair[0]], pair[1], wmat, geo),
                    zip(chunks, chunk_cols, strict=True),
                )
            )
            dx = np.concatenate([part[0] for part in parts])
            dwmat = sum((part[1] for part in parts[1:]), start=parts[0][1])
        dw = dwmat.transpose(0, 2, 1).reshape(weight.shape)
        return dx, dw

    return Tensor.from_op(out, (x, weight), backward, "conv2d")


# NORMALIZATION
# =============
@dataclass
class RunningStats:
    """Per-channel running mean and unbiased variance used in eval mode."""

    mean: Array
    var: Array

    @classmethod
    def fresh(cls, channels: int, dtype: Any = np.float64) -> RunningStats:  # noqa: ANN401
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of an NCHW tensor followed by the affine `gamma * x_hat + beta`.

    In training mode the batch statistics are used and folded into `stats`; in eval mode `stats` is used as is.

    Raises:
        ShapeMismatchError: If `gamma`, `beta` or `stats` do not have one entry per channel.
    """
    if x.ndim != 4:  # noqa: PLR2004
        msg = f"batch_norm expects NCHW input, got shape {x.shape}"
        raise ShapeMismatchError(msg)
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,) or stats.mean.shape != (channels,):
        msg = f"batch_norm: gamma {gamma.shape}, beta {beta.shape} and stats must all have {channels} entries"
        raise ShapeMismatchError(msg)

    axes = (0, 2, 3)
    count = x.data.size // channels
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / max(count - 1, 1)
        stats.mean = ((1 - momentum) * stats.mean + momentum * mean).astype(stats.mean.dtype)
        stats.var = ((1 - momentum) * stats.var + momentum * unbiased).astype(stats.var.dtype)
    else:
        mean, var = stats.mean.astype(x.dtype), stats.var.astype(x.dtype)

    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g: Array) -> tuple[Array, Array, Array]:
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data[None, :, None, None]
        if not training:
            return dxhat * invstd[None, :, None, None], dgamma, dbeta
        dx = (invstd / count)[None, :, None, None] * (
            count * dxhat
            - dxhat.sum(axis=axes)[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
        )
        return dx, dgamma, dbeta

    return Tensor.from_op(out, (x, gamma, beta), backward, "batch_norm")


# PROBABILITIES AND LOSSES
# ========================
def _check_logits(logits: Tensor, temperature: float) -> None:
    if temperature <= 0:
        msg = f"Temperature must be positive, got {temperature}"
        raise DomainError(msg)
    if not np.all(np.isfinite(logits.data)):
        msg = "Logits contain non-finite values"
        raise DomainError(msg)


def _softmax(z: Array) -> Array:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: Array) -> Array:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _batch_size(x: Tensor) -> int:
    return x.shape[0] if x.ndim > 1 else 1


def softmax_t(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature-softened softmax over the last axis, in the max-subtracted stable form.

    Raises:
        DomainError: If the temperature is not positive or the logits are not finite.
    """
    _check_logits(logits, temperature)
    probs = _softmax(logits.data / temperature)

    def backward(g: Array) -> tuple[Array]:
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)) / temperature,)

    return Tensor.from_op(probs, (logits,), backward, "softmax_t")


def log_softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    _check_logits(logits, temperature)
    log_probs = _log_softmax(logits.data / temperature)

    def backward(g: Array) -> tuple[Array]:
        return ((g - np.exp(log_probs) * g.sum(axis=-1, keepdims=True)) / temperature,)

    return Tensor.from_op(log_probs, (logits,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels: NDArray[np.integer[Any]]) -> Tensor:
    """Mean over the batch of `-log softmax(logits)[label]`.

    Raises:
        ShapeMismatchError: If there is not one label per row.
        DomainError: If a label is out of range or the logits are not finite.
    """
    _check_logits(logits, 1.0)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):  # noqa: PLR2004
        msg = f"cross_entropy expects [N, K] logits and N labels, got {logits.shape} and {labels.shape}"
        raise ShapeMismatchError(msg)
    n, num_classes = logits.shape
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        msg = f"Labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]"
        raise DomainError(msg)

    log_probs = _log_softmax(logits.data)
    rows = np.arange(n)
    loss = np.asarray(-log_probs[rows, labels].mean())

    def backward(g: Array) -> tuple[Array]:
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return Tensor.from_op(loss.astype(logits.dtype), (logits,), backward, "cross_entropy")


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """`sum p * ln(p / q)` with `0 * ln 0 = 0`, averaged over the batch for 2-D inputs.

    Raises:
        ShapeMismatchError: If `p` and `q` differ in shape.
        DomainError: If `q` is zero where `p` is positive.
    """
    if p.shape != q.shape:
        msg = f"kl_div: p {p.shape} and q {q.shape} differ"
        raise ShapeMismatchError(msg)
    support = p.data > 0
    if np.any(support & (q.data <= 0)):
        msg = "kl_div: q has a zero where p is positive"
        raise DomainError(msg)

    n = _batch_size(p)
    safe_p = np.where(support, p.data, 1)
    safe_q = np.where(support, q.data, 1)
    log_ratio = np.log(safe_p) - np.log(safe_q)
    loss = np.asarray((np.where(support, p.data * log_ratio, 0)).sum() / n)

    def backward(g: Array) -> tuple[Array, Array]:
        dp = np.where(support, log_ratio + 1, 0) * (g / n)
        dq = np.where(support, -p.data / safe_q, 0) * (g / n)
        return dp, dq

    return Tensor.from_op(loss.astype(q.dtype), (p, q), backward, "kl_div")


def kl_div_logits(p: Tensor, logits: Tensor, temperature: float = 1.0) -> Tensor:
    """`kl_div(p, softmax_t(logits, T))` computed from log-probabilities, differentiable w.r.t. `logits` only.

    Raises:
        ShapeMismatchError: If `p` and `logits` differ in shape.
        DomainError: If the temperature is not positive or the logits are not finite.
    """
    _check_logits(logits, temperature)
    if p.shape != logits.shape:
        msg = f"kl_div_logits: p {p.shape} and logits {logits.shape} differ"
        raise ShapeMismatchError(msg)

    n = _batch_size(logits)
    log_q = _log_softmax(logits.data / temperature)
    support = p.data > 0
    log_p = np.log(np.where(support, p.data, 1))
    loss = np.asarray(np.where(support, p.data * (log_p - log_q), 0).sum() / n)

    def backward(g: Array) -> tuple[Array]:
        return ((np.exp(log_q) * p.data.sum(axis=-1, keepdims=True) - p.data) * (g / (n * temperature)),)

    return Tensor.from_op(loss.astype(logits.dtype), (logits,), backward, "kl_div_logits")
