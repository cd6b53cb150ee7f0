"""Deterministic dense float kernels.

Tensors are plain contiguous numpy arrays (float32 by default; float64 is
accepted so gradient checks can run at higher precision). Every matmul
accumulates in the input dtype in ascending contraction order, with no fused
multiply-add, so results are bit-reproducible and match a naive triple loop.
"""

from __future__ import annotations

import operator
from typing import Iterable

import numba
import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Return ``x`` as a C-contiguous float array (copying only if needed)."""
    return np.ascontiguousarray(x, dtype=dtype)


def transpose(t: np.ndarray) -> np.ndarray:
    """Swap the last two axes into a fresh row-major copy."""
    return np.ascontiguousarray(np.swapaxes(t, -1, -2))


@numba.njit(cache=True)
def _mm_float(a, b, c):
    # c[i, j] accumulates over k in ascending order; the j loop is innermost
    # so it vectorizes without reordering any single element's sum.
    B, M, K = a.shape
    N = b.shape[2]
    for p in range(B):
        for i in range(M):
            for k in range(K):
                aik = a[p, i, k]
                for j in range(N):
                    c[p, i, j] += aik * b[p, k, j]
    return c


@numba.njit(cache=True)
def _mm_int(a, b, c):
    B, M, K = a.shape
    N = b.shape[2]
    for p in range(B):
        for i in range(M):
            for k in range(K):
                aik = np.int32(a[p, i, k])
                for j in range(N):
                    c[p, i, j] += aik * np.int32(b[p, k, j])
    return c


def _batched_operands(a: np.ndarray, b: np.ndarray):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim == 2:
        # x @ W with any number of leading axes on x
        lead = a.shape[:-1]
        a3 = a.reshape(1, -1, a.shape[-1])
        b3 = b.reshape(1, *b.shape)
        return a3, b3, lead + (b.shape[-1],)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    batch = a.shape[:-2]
    a3 = a.reshape(-1, *a.shape[-2:])
    b3 = b.reshape(-1, *b.shape[-2:])
    return a3, b3, batch + (a.shape[-2], b.shape[-1])


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Deterministic float matmul.

    ``a`` is ``[..., M, K]``; ``b`` is either ``[K, N]`` (applied to every
    leading index of ``a``) or ``[..., K, N]`` with the same batch axes.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.dtype != b.dtype or a.dtype not in FLOAT_DTYPES:
        raise TypeError(f"matmul expects matching float32/float64 operands, got {a.dtype} and {b.dtype}")
    a3, b3, out_shape = _batched_operands(a, b)
    c = np.zeros((a3.shape[0], a3.shape[1], b3.shape[2]), dtype=a.dtype)
    _mm_float(np.ascontiguousarray(a3), np.ascontiguousarray(b3), c)
    return c.reshape(out_shape)


def int_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Integer matmul of int8 code arrays with int32 accumulation."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.dtype != np.int8 or b.dtype != np.int8:
        raise TypeError(f"int_matmul expects int8 codes, got {a.dtype} and {b.dtype}")
    a3, b3, out_shape = _batched_operands(a, b)
    c = np.zeros((a3.shape[0], a3.shape[1], b3.shape[2]), dtype=np.int32)
    _mm_int(np.ascontiguousarray(a3), np.ascontiguousarray(b3), c)
    return c.reshape(out_shape)


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank-{ndim} tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce_abs_max(t: np.ndarray, axis: int | Iterable[int] | None = None, keepdims: bool = False) -> np.ndarray:
    """Max of ``|t|`` over ``axis`` (``None`` = all axes, ``()`` = no reduction)."""
    t = np.asarray(t)
    axes = _normalize_axes(axis, t.ndim)
    mag = np.abs(t)
    if not axes:
        return mag
    return np.max(mag, axis=axes, keepdims=keepdims)


_OPS = {
    "add": operator.add,
    "sub": operator.sub,
    "mul": operator.mul,
    "div": operator.truediv,
}


def elementwise(op: str, a: np.ndarray, b, axis: int = -1) -> np.ndarray:
    """Apply ``op`` (add/sub/mul/div) to ``a`` and ``b``.

    ``b`` may be a scalar, a tensor of ``a``'s shape, or a vector whose length
    matches ``a.shape[axis]``; the vector is broadcast along that axis only.
    """
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    a = np.asarray(a)
    if np.isscalar(b) or np.ndim(b) == 0:
        return fn(a, np.asarray(b, dtype=a.dtype)).astype(a.dtype, copy=False)
    b = np.asarray(b, dtype=a.dtype)
    if b.shape == a.shape:
        return fn(a, b)
    if b.ndim == 1 and a.ndim >= 1:
        ax = _normalize_axes(axis, a.ndim)[0]
        if a.shape[ax] == b.shape[0]:
            shape = [1] * a.ndim
            shape[ax] = b.shape[0]
            return fn(a, b.reshape(shape))
    raise ShapeError(f"cannot broadcast {b.shape} onto {a.shape} along axis {axis}")
