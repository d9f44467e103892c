"""
Differentiable kernels over ``Tensor``.

Broadcasting is limited to the patterns the model needs: the second operand of
an elementwise op may match a trailing suffix of the first operand's shape
(row-wise bias add, per-row affine), or be a Python scalar.
"""
from __future__ import annotations

import logging
import math
from typing import Any, Optional, Sequence, Tuple, Union

import numpy as np

from graphformers.core.tensor import Tensor, record_flops
from graphformers.errors import DegenerateRowError, DimensionError

logger = logging.getLogger(__name__)

MASK_FILL = -1e9
Scalar = Union[int, float]


def _suffix_reduce(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back onto a trailing-suffix shape."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"{op}: shape {b.shape} does not broadcast onto {a.shape}")


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return Tensor._from_op(a.data + b, (a,), "add_scalar", lambda g: (g,))
    if a.ndim < b.ndim:
        a, b = b, a
    _check_suffix(a, b, "add")
    shape_b = b.shape
    record_flops("add", a.size)
    return Tensor._from_op(
        a.data + b.data, (a, b), "add", lambda g: (g, _suffix_reduce(g, shape_b))
    )


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_suffix(a, b, "sub")
    shape_b = b.shape
    record_flops("sub", a.size)
    return Tensor._from_op(
        a.data - b.data, (a, b), "sub", lambda g: (g, -_suffix_reduce(g, shape_b))
    )


def scale(x: Tensor, factor: Scalar) -> Tensor:
    factor = float(factor)
    record_flops("scale", x.size)
    return Tensor._from_op(x.data * factor, (x,), "scale", lambda g: (g * factor,))


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    if a.ndim < b.ndim:
        a, b = b, a
    _check_suffix(a, b, "mul")
    a_data, b_data, shape_b = a.data, b.data, b.shape
    record_flops("mul", a.size)

    def backward_fn(g: np.ndarray):
        return g * b_data, _suffix_reduce(g * a_data, shape_b)

    return Tensor._from_op(a_data * b_data, (a, b), "mul", backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    c[..., i, j] = sum_t a[..., i, t] * b[..., t, j].

    ``b`` is either a plain matrix shared by every leading index, or carries the
    same leading extents as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul leading extents differ: {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data
    shared_b = b.ndim == 2
    out = np.matmul(a_data, b_data)
    record_flops("matmul", 2 * out.size * a.shape[-1])

    def backward_fn(g: np.ndarray):
        grad_a = np.matmul(g, np.swapaxes(b_data, -1, -2))
        if shared_b:
            k, n = b_data.shape
            grad_b = np.matmul(a_data.reshape(-1, k).T, g.reshape(-1, n))
        else:
            grad_b = np.matmul(np.swapaxes(a_data, -1, -2), g)
        return grad_a, grad_b

    return Tensor._from_op(out, (a, b), "matmul", backward_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inverse),)
    )


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return Tensor._from_op(
        x.data.reshape(tuple(shape)), (x,), "reshape", lambda g: (g.reshape(original),)
    )


def _is_basic_index(index: Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(x: Tensor, index: Any) -> Tensor:
    """Indexing and gathering; repeated gather indices accumulate gradient."""
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)
    out = np.array(x.data[index], copy=True)

    def backward_fn(g: np.ndarray):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(out, (x,), "getitem", backward_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward_fn
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % (tensors[0].ndim + 1)

    def backward_fn(g: np.ndarray):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(
        np.stack([t.data for t in tensors], axis=axis), tensors, "stack", backward_fn
    )


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward_fn(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    record_flops("sum", x.size)
    return Tensor._from_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum", backward_fn)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def _mask_array(mask: Any, shape: Tuple[int, ...]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    try:
        return np.broadcast_to(mask, shape)
    except ValueError as exc:
        raise DimensionError(f"mask shape {mask.shape} does not broadcast onto {shape}") from exc


def softmax_masked(x: Tensor, mask: Any = None) -> Tensor:
    """
    Row softmax over the last axis. Masked entries (``mask`` False) get an
    additive ``MASK_FILL`` before normalisation, so their weight is exactly 0.
    """
    scores = x.data
    if mask is not None:
        keep = _mask_array(mask, x.shape)
        if not keep.any(axis=-1).all():
            raise DegenerateRowError("softmax row has every entry masked")
        scores = scores + np.where(keep, 0.0, MASK_FILL)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    weights /= weights.sum(axis=-1, keepdims=True)
    record_flops("softmax", 4 * x.size)

    def backward_fn(g: np.ndarray):
        return (weights * (g - np.sum(g * weights, axis=-1, keepdims=True)),)

    return Tensor._from_op(weights, (x,), "softmax_masked", backward_fn)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_z
    probs = np.exp(out)
    record_flops("log_softmax", 4 * x.size)

    def backward_fn(g: np.ndarray):
        return (g - probs * np.sum(g, axis=-1, keepdims=True),)

    return Tensor._from_op(out, (x,), "log_softmax", backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * rstd
    gamma_data = gamma.data
    record_flops("layer_norm", 8 * x.size)

    def backward_fn(g: np.ndarray):
        d_hat = g * gamma_data
        grad_x = rstd * (
            d_hat
            - d_hat.mean(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return grad_x, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(x_hat * gamma_data + beta.data, (x, gamma, beta), "layer_norm", backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    record_flops("gelu", 8 * x.size)

    def backward_fn(g: np.ndarray):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * d_inner),)

    return Tensor._from_op(0.5 * v * (1.0 + t), (x,), "gelu", backward_fn)


def masked_max(x: Tensor, mask: Any) -> Tensor:
    """
    Elementwise max over axis -2 of ``x[..., n, d]`` restricted to rows with
    ``mask[..., n]`` True. Groups with no valid row yield the zero vector.
    """
    keep = _mask_array(mask, x.shape[:-1])[..., None]
    filled = np.where(keep, x.data, -np.inf)
    has_any = keep.any(axis=-2)
    arg = np.argmax(filled, axis=-2)
    out = np.where(has_any, np.take_along_axis(x.data, arg[..., None, :], axis=-2)[..., 0, :], 0.0)
    shape = x.shape

    def backward_fn(g: np.ndarray):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, arg[..., None, :], np.where(has_any, g, 0.0)[..., None, :], axis=-2)
        return (full,)

    return Tensor._from_op(out, (x,), "masked_max", backward_fn)


def masked_mean(x: Tensor, mask: Any) -> Tensor:
    """Mean over axis -2 of the valid rows; empty groups yield the zero vector."""
    keep = _mask_array(mask, x.shape[:-1]).astype(x.dtype)[..., None]
    count = keep.sum(axis=-2)
    inv = np.where(count > 0, 1.0 / np.maximum(count, 1.0), 0.0)
    out = (x.data * keep).sum(axis=-2) * inv
    record_flops("masked_mean", x.size)

    def backward_fn(g: np.ndarray):
        return (keep * (g * inv)[..., None, :],)

    return Tensor._from_op(out, (x,), "masked_mean", backward_fn)
