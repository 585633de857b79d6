"""Reverse-mode tape over the kernels in :mod:`volres.kernels`.

A :class:`Var` wraps an array. Every differentiable call records an
:class:`OpNode` holding exactly what the backward kernel needs; calling
:func:`backward` on a scalar result walks the recorded graph once, in reverse
topological order. A node's saved context is released after its backward
runs, so replaying a graph without a fresh forward raises :class:`TapeError`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import kernels as K
from .errors import DimensionError, TapeError
from .tensor import check_dtypes

_recording = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


class Var:
    __slots__ = ("data", "grad", "node", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[OpNode] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.data.shape}, dtype={self.data.dtype})"


class OpNode:
    __slots__ = ("kind", "inputs", "saved", "backward_fn", "consumed")

    def __init__(self, kind: str, inputs: Sequence[Var], saved, backward_fn: Callable):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.saved = saved
        self.backward_fn = backward_fn
        self.consumed = False

    def backward(self, gout):
        if self.consumed:
            raise TapeError(f"{self.kind}: backward already applied; run a new forward first")
        grads = self.backward_fn(self.saved, gout)
        self.saved = None
        self.consumed = True
        return grads


def _tracks(v: Var) -> bool:
    return v.requires_grad or v.node is not None


def _record(kind, inputs, out_data, saved, backward_fn) -> Var:
    out = Var(out_data)
    if _recording and any(_tracks(v) for v in inputs):
        out.node = OpNode(kind, inputs, saved, backward_fn)
    return out


def backward(root: Var, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if grad is None:
        if root.data.size != 1:
            raise DimensionError(f"backward from non-scalar {root.shape} needs an explicit grad")
        grad = np.ones_like(root.data)
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        v, expanded = stack.pop()
        if expanded:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        if v.node is not None:
            for u in v.node.inputs:
                if id(u) not in seen:
                    stack.append((u, False))
    grads = {id(root): grad}
    for v in reversed(order):
        g = grads.pop(id(v), None)
        if g is None:
            continue
        if v.node is None:
            if v.requires_grad:
                v.grad = g.copy() if v.grad is None else v.grad + g
            continue
        in_grads = v.node.backward(g)
        for u, gu in zip(v.node.inputs, in_grads):
            if gu is None or not _tracks(u):
                continue
            prev = grads.get(id(u))
            grads[id(u)] = gu if prev is None else prev + gu


# -- differentiable ops -------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    check_dtypes(a.data, b.data)
    return _record("add", (a, b), a.data + b.data, None, lambda _, g: (g, g))


def conv3d(x: Var, w: Var, b: Optional[Var], stride=1, pad=0, method="direct") -> Var:
    y, ctx = K.conv3d_forward(x.data, w.data, None if b is None else b.data, stride, pad, method)
    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv3d", inputs, y, ctx, K.conv3d_backward)


class BNState:
    """Per-channel affine parameters plus running statistics."""

    def __init__(self, channels, dtype=np.float32, momentum=0.99, eps=1e-5, prefix=""):
        self.gamma = Var(np.ones(channels, dtype), requires_grad=True, name=prefix + "gamma")
        self.beta = Var(np.zeros(channels, dtype), requires_grad=True, name=prefix + "beta")
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm3d(x: Var, state: BNState, train: bool) -> Var:
    y, ctx, rm, rv = K.batchnorm3d_forward(
        x.data,
        state.gamma.data,
        state.beta.data,
        state.running_mean,
        state.running_var,
        train=train,
        momentum=state.momentum,
        eps=state.eps,
    )
    if train:
        state.running_mean = rm.astype(state.running_mean.dtype)
        state.running_var = np.maximum(rv, 0).astype(state.running_var.dtype)
    return _record("batchnorm3d", (x, state.gamma, state.beta), y, ctx, K.batchnorm3d_backward)


def relu(x: Var) -> Var:
    y, mask = K.relu_forward(x.data)
    return _record("relu", (x,), y, mask, K.relu_backward)


def maxpool3d(x: Var, window: int, stride=None, ceil_pad=False) -> Var:
    y, ctx = K.maxpool3d_forward(x.data, window, stride, ceil_pad)
    return _record("maxpool3d", (x,), y, ctx, K.maxpool3d_backward)


def avgpool3d_global(x: Var) -> Var:
    y, ctx = K.avgpool3d_global_forward(x.data)
    return _record("avgpool3d_global", (x,), y, ctx, K.avgpool3d_global_backward)


def dense(x: Var, w: Var, b: Var) -> Var:
    y, ctx = K.dense_forward(x.data, w.data, b.data)
    return _record("dense", (x, w, b), y, ctx, K.dense_backward)


def dropout(x: Var, rate: float, train: bool, rng=None) -> Var:
    y, mask = K.dropout_forward(x.data, rate, train=train, rng=rng)
    return _record("dropout", (x,), y, mask, K.dropout_backward)


def softmax_xent(logits: Var, labels) -> tuple[Var, np.ndarray]:
    loss, probs, ctx = K.softmax_xent_forward(logits.data, labels)
    loss = np.asarray(loss, dtype=logits.dtype)
    return _record("softmax_xent", (logits,), loss, ctx, K.softmax_xent_backward), probs
