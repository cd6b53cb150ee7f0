"""Tape-based reverse-mode autodiff over numpy arrays.

Only the operations the encoder needs are provided. Quantizers use the
straight-through estimator: their Jacobian is the identity, and quantization
scales are treated as constants.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import quant as Q
from .tensor import matmul as _mm
from .tensor import transpose as _t


class TapeError(RuntimeError):
    pass


class Var:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.value.shape}, dtype={self.value.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Parameter(Var):
    """Trainable tensor with a unique name and the precision applied at forward time."""

    __slots__ = ("name", "quant")

    def __init__(self, value, name: str, quant: Optional[Q.QuantSpec] = None):
        super().__init__(np.asarray(value, dtype=np.float32).copy(), requires_grad=True)
        self.name = name
        self.quant = quant or Q.FLOAT

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations.

    Use as a context manager around the forward pass, then call
    :meth:`backward` on the scalar loss.
    """

    def __init__(self):
        self.entries: list[tuple[Var, tuple[Var, ...], Callable]] = []
        self._consumed = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out: Var, inputs: tuple[Var, ...], backward: Callable):
        self.entries.append((out, inputs, backward))

    def backward(self, loss: Var):
        if self._consumed:
            raise TapeError("tape already used for a backward pass")
        if not self.entries or loss.value.size != 1:
            raise TapeError("backward needs a scalar loss produced by a taped forward pass")
        if not any(out is loss for out, _, _ in self.entries):
            raise TapeError("loss was not produced on this tape")
        loss.grad = np.ones_like(loss.value)
        for out, inputs, fn in reversed(self.entries):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=inp.value.dtype)
                else:
                    inp.grad = inp.grad + g
        self._consumed = True


def _var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _emit(value, inputs: Sequence[Var], backward: Callable) -> Var:
    out = Var(value)
    tape = _active_tape()
    if tape is not None and any(v.requires_grad for v in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _promote(a: np.ndarray, b: np.ndarray):
    dt = np.result_type(a.dtype, b.dtype)
    return a.astype(dt, copy=False), b.astype(dt, copy=False)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Var:
    a, b = _var(a), _var(b)
    return _emit(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = _var(a), _var(b)
    return _emit(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a, b = _var(a), _var(b)
    return _emit(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def scale(a, c: float) -> Var:
    a = _var(a)
    c = np.asarray(c, dtype=a.value.dtype)
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def swish(x) -> Var:
    x = _var(x)
    sig = 1.0 / (1.0 + np.exp(-x.value))
    sig = sig.astype(x.value.dtype, copy=False)
    return _emit(x.value * sig, (x,), lambda g: (g * (sig + x.value * sig * (1 - sig)),))


def relu(x) -> Var:
    x = _var(x)
    mask = x.value > 0
    return _emit(x.value * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- shape ops


def reshape(x, shape) -> Var:
    x = _var(x)
    old = x.shape
    return _emit(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a1: int, a2: int) -> Var:
    x = _var(x)
    out = np.ascontiguousarray(np.swapaxes(x.value, a1, a2))
    return _emit(out, (x,), lambda g: (np.ascontiguousarray(np.swapaxes(g, a1, a2)),))


def total(x) -> Var:
    """Sum of all elements."""
    x = _var(x)
    return _emit(x.value.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x, axis: int) -> Var:
    x = _var(x)
    n = x.shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).astype(x.value.dtype),)

    return _emit(x.value.mean(axis=axis), (x,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Var:
    """Float matmul; ``b`` may be 2-D (shared) or batched like ``a``."""
    a, b = _var(a), _var(b)
    av, bv = _promote(a.value, b.value)

    def backward(g):
        ga = _mm(g, _t(bv)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bv.ndim == 2:
                a2 = av.reshape(-1, av.shape[-1])
                gb = _mm(_t(a2), g.reshape(-1, g.shape[-1]))
            else:
                gb = _mm(_t(av), g)
        return ga, gb

    return _emit(_mm(av, bv), (a, b), backward)


def quantized_linear(x, w, spec: Q.QuantSpec) -> Var:
    """``x @ w`` under ``spec``.

    ``w`` is ``[K, N]`` (a :class:`Var` or a frozen
    :class:`~qatforge.quant.QuantizedTensor` with per-column scales). Weights
    are quantized per output column; activations per tensor or per row as the
    spec says. The backward pass is straight-through: gradients are those of
    a float matmul evaluated at the dequantized operands.
    """
    x = _var(x)
    frozen = isinstance(w, Q.QuantizedTensor)
    if not frozen:
        w = _var(w)
    K = x.shape[-1]
    lead = x.shape[:-1]
    x2 = x.value.reshape(-1, K)

    if spec.is_float:
        if frozen:
            raise Q.QuantError("float layer given a quantized weight")
        xv, wv = _promote(x2, w.value)
        y = _mm(xv, wv)
        xd, wd = xv, wv
    else:
        if frozen:
            qw = w
            if qw.bits != spec.weight_bits:
                raise Q.QuantError(f"stored int{qw.bits} weight used with int{spec.weight_bits} spec")
        else:
            qw = Q.quantize_dynamic(w.value, 1, spec.weight_bits, spec.rounding)
        wd = Q.dequantize(qw)
        x2 = x2.astype(np.float32, copy=False)
        act_axis = None if spec.activation_granularity == "tensor" else 0
        if spec.path == "fake":
            xd = x2 if spec.activation_bits is None else Q.fake_quant(x2, act_axis, spec.activation_bits, spec.rounding)
            y = _mm(xd, wd)
        elif spec.activation_bits is None:
            # weight-only: integer codes in the GEMM, weight scale applied on the output
            xd = x2
            y = _mm(x2, qw.codes.astype(np.float32)) * qw.scales
        else:
            qx = Q.quantize_dynamic(x2, act_axis, spec.activation_bits, spec.rounding)
            y = Q.quantized_matmul_native(qx, qw)
            xd = Q.dequantize(qx)

    inputs = (x,) if frozen else (x, w)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = _mm(g2, _t(wd)).reshape(x.shape) if x.requires_grad else None
        if frozen:
            return (gx,)
        gw = _mm(_t(xd), g2) if w.requires_grad else None
        return gx, gw

    return _emit(y.reshape(lead + (y.shape[-1],)), inputs, backward)


def fake_quant(x, axis: Optional[int], bits: int, rounding: str = "nearest") -> Var:
    """Quantize-dequantize with a straight-through (identity) backward."""
    x = _var(x)
    return _emit(Q.fake_quant(x.value, axis, bits, rounding), (x,), lambda g: (g,))


# ---------------------------------------------------------------- normalization / attention


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Var:
    x, gamma, beta = _var(x), _var(gamma), _var(beta)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = (1.0 / np.sqrt(var + eps)).astype(xv.dtype, copy=False)
    xhat = xc * rstd
    n = xv.shape[-1]

    def backward(g):
        dxhat = g * gamma.value
        dx = rstd / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return (dx.astype(xv.dtype, copy=False),
                _unbroadcast(g * xhat, gamma.shape),
                _unbroadcast(g, beta.shape))

    return _emit(xhat * gamma.value + beta.value, (x, gamma, beta), backward)


def softmax(x, mask: Optional[np.ndarray] = None) -> Var:
    """Softmax over the last axis; ``mask`` marks allowed positions."""
    x = _var(x)
    xv = x.value
    if mask is not None:
        xv = np.where(mask, xv, -np.inf)
    m = xv.max(axis=-1, keepdims=True)
    e = np.exp(xv - m)
    p = (e / e.sum(axis=-1, keepdims=True)).astype(x.value.dtype, copy=False)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (x,), backward)


def cross_entropy(logits, labels: np.ndarray) -> Var:
    """Mean cross-entropy of ``[B, C]`` logits against integer labels."""
    logits = _var(logits)
    z = logits.value
    labels = np.asarray(labels)
    B = z.shape[0]
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    logp = z - m - np.log(s)
    loss = -logp[np.arange(B), labels].mean()

    def backward(g):
        p = e / s
        p[np.arange(B), labels] -= 1
        return ((p * (g / B)).astype(z.dtype, copy=False),)

    return _emit(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def embedding(table, ids: np.ndarray) -> Var:
    table = _var(table)
    ids = np.asarray(ids)

    def backward(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, gt.shape[-1]))
        return (gt,)

    return _emit(table.value[ids], (table,), backward)


def depthwise_conv1d(x, kernel, causal: bool) -> Var:
    """Per-channel 1-D convolution over time of ``[B, T, C]`` with ``[k, C]`` taps.

    Causal mode pads on the left only; otherwise ``k`` must be odd and the
    padding is symmetric.
    """
    x, kernel = _var(x), _var(kernel)
    xv, kv = _promote(x.value, kernel.value)
    k = kv.shape[0]
    T = xv.shape[1]
    if causal:
        left, right = k - 1, 0
    else:
        if k % 2 == 0:
            raise ValueError("non-causal depthwise conv needs an odd kernel")
        left = right = k // 2
    xp = np.pad(xv, ((0, 0), (left, right), (0, 0)))
    y = np.zeros_like(xv)
    for j in range(k):
        y += xp[:, j:j + T, :] * kv[j]

    def backward(g):
        gk = np.stack([(g * xp[:, j:j + T, :]).sum(axis=(0, 1)) for j in range(k)])
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j:j + T, :] += g * kv[j]
        return gxp[:, left:left + T, :], gk

    return _emit(y, (x, kernel), backward)


# ---------------------------------------------------------------- training utilities


def zero_grad(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


class SGDMomentum:
    """``v <- momentum*v + g``; ``w <- w - lr*v``."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = np.float32(lr)
        self.momentum = np.float32(momentum)
        self.velocity = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self):
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            v = self.momentum * self.velocity[p.name] + g.astype(np.float32, copy=False)
            self.velocity[p.name] = v
            p.value = (p.value - self.lr * v).astype(np.float32, copy=False)


def sgd_momentum_step(params: Sequence[Parameter], velocity: dict, lr: float, momentum: float):
    """Functional single step; ``velocity`` is updated in place."""
    opt = SGDMomentum(params, lr, momentum)
    opt.velocity.update({k: v for k, v in velocity.items() if k in opt.velocity})
    opt.step()
    velocity.update(opt.velocity)


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-3

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def grad_check(
    loss_fn: Callable[[], Var],
    params: Sequence[Parameter],
    tolerance: float = 1e-3,
    h: float = 1e-3,
    max_elems: Optional[int] = None,
    seed: int = 0,
    dtype=np.float64,
    floor: float = 1e-7,
) -> GradCheckReport:
    """Compare taped gradients with central differences.

    Parameters are temporarily cast to ``dtype`` (float64 by default, so the
    finite differences are not swamped by float32 rounding). The error for a
    parameter is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``;
    the floor keeps gradients that are zero by symmetry (attention key biases,
    say) from turning rounding noise into a large relative error.
    ``max_elems`` samples that many entries per parameter instead of all.
    """
    originals = {p.name: p.value for p in params}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    try:
        for p in params:
            p.value = originals[p.name].astype(dtype)
            p.grad = None
        with Tape() as tape:
            loss = loss_fn()
        tape.backward(loss)
        analytic = {p.name: (p.grad if p.grad is not None else np.zeros_like(p.value)) for p in params}

        for p in params:
            flat = p.value.reshape(-1)
            idx = np.arange(flat.size)
            if max_elems is not None and flat.size > max_elems:
                idx = np.sort(rng.choice(flat.size, max_elems, replace=False))
            a = analytic[p.name].reshape(-1)[idx]
            n = np.empty_like(a)
            for out_i, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                up = float(loss_fn().value)
                flat[i] = orig - h
                down = float(loss_fn().value)
                flat[i] = orig
                n[out_i] = (up - down) / (2 * h)
            denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
            report.errors[p.name] = float(np.abs(a - n).max(initial=0.0) / denom)
    finally:
        for p in params:
            p.value = originals[p.name]
            p.grad = None
    return report
