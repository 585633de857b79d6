"""Finite-difference verification of every differentiable primitive (float64)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import kernels as K
from .network import NetworkSpec, build

OP_TOL = 1e-5
NETWORK_TOL = 1e-4
STEP = 1e-5
# Gradients that are exactly zero (conv biases feeding batch norm) come back
# from finite differences as rounding noise of order eps * loss / STEP.
NETWORK_FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place).

    With ``coords`` (flat indices) only those entries are filled.
    """
    g = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = g.reshape(-1)
    for i in range(flat_x.size) if coords is None else coords:
        old = flat_x[i]
        flat_x[i] = old + h
        fp = f()
        flat_x[i] = old - h
        fm = f()
        flat_x[i] = old
        flat_g[i] = (fp - fm) / (2 * h)
    return g


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def _check(op, forward, backward, inputs, rng, tol=OP_TOL) -> CheckResult:
    """``forward(*inputs) -> y``; ``backward(gy) -> grads`` aligned with ``inputs``.

    The scalar under test is ``sum(y * r)`` for a fixed random ``r``.
    """
    y = forward(*inputs)
    r = rng.standard_normal(np.shape(y))
    grads = backward(r)
    err = 0.0
    for x, g in zip(inputs, grads):
        num = numeric_grad(lambda: float(np.sum(forward(*inputs) * r)), x)
        err = max(err, rel_error(g, num))
    return CheckResult(op, err, tol)


def check_conv3d(rng) -> CheckResult:
    x = rng.standard_normal((2, 2, 5, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    b = rng.standard_normal(2)
    ctx = {}

    def fwd(x, w, b):
        y, ctx["c"] = K.conv3d_forward(x, w, b, stride=1, pad=1)
        return y

    def bwd(gy):
        fwd(x, w, b)
        return K.conv3d_backward(ctx["c"], gy)

    return _check("conv3d", fwd, bwd, [x, w, b], rng)


def check_batchnorm3d(rng) -> CheckResult:
    x = rng.standard_normal((3, 2, 4, 4, 4))
    gamma = rng.standard_normal(2)
    beta = rng.standard_normal(2)
    rm, rv = np.zeros(2), np.ones(2)
    ctx = {}

    def fwd(x, gamma, beta):
        y, ctx["c"], _, _ = K.batchnorm3d_forward(x, gamma, beta, rm, rv, train=True)
        return y

    def bwd(gy):
        fwd(x, gamma, beta)
        return K.batchnorm3d_backward(ctx["c"], gy)

    return _check("batchnorm3d", fwd, bwd, [x, gamma, beta], rng)


def check_relu(rng) -> CheckResult:
    x = rng.standard_normal((2, 3, 4, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink

    def bwd(gy):
        return K.relu_backward(K.relu_forward(x)[1], gy)

    return _check("relu", lambda x: K.relu_forward(x)[0], bwd, [x], rng)


def check_maxpool3d(rng) -> CheckResult:
    # distinct, well-separated values so no perturbation changes an argmax
    x = (rng.permutation(2 * 2 * 8 * 8 * 8).astype(np.float64) * 0.01).reshape(2, 2, 8, 8, 8)
    z = (rng.permutation(2 * 6 * 6 * 6).astype(np.float64) * 0.01 + 0.1).reshape(1, 2, 6, 6, 6)
    out = []
    for inp, window, stride, ceil in ((x, 2, 2, False), (z, 4, 4, True)):
        def fwd(v, window=window, stride=stride, ceil=ceil):
            return K.maxpool3d_forward(v, window, stride, ceil)[0]

        def bwd(gy, inp=inp, window=window, stride=stride, ceil=ceil):
            return K.maxpool3d_backward(K.maxpool3d_forward(inp, window, stride, ceil)[1], gy)

        out.append(_check("maxpool3d", fwd, bwd, [inp], rng))
    return CheckResult("maxpool3d", max(r.max_rel_error for r in out), OP_TOL)


def check_avgpool3d_global(rng) -> CheckResult:
    x = rng.standard_normal((2, 3, 3, 4, 2))

    def bwd(gy):
        return K.avgpool3d_global_backward(x.shape, gy)

    return _check("avgpool3d_global", lambda x: K.avgpool3d_global_forward(x)[0], bwd, [x], rng)


def check_dense(rng) -> CheckResult:
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 5))
    b = rng.standard_normal(5)

    def bwd(gy):
        return K.dense_backward(K.dense_forward(x, w, b)[1], gy)

    return _check("dense", lambda x, w, b: K.dense_forward(x, w, b)[0], bwd, [x, w, b], rng)


def check_dropout(rng) -> CheckResult:
    x = rng.standard_normal((2, 2, 4, 4, 4))
    seed = int(rng.integers(1 << 30))

    def fwd(x):
        return K.dropout_forward(x, 0.3, train=True, rng=np.random.default_rng(seed))[0]

    def bwd(gy):
        mask = K.dropout_forward(x, 0.3, train=True, rng=np.random.default_rng(seed))[1]
        return K.dropout_backward(mask, gy)

    return _check("dropout", fwd, bwd, [x], rng)


def check_softmax_xent(rng) -> CheckResult:
    logits = rng.standard_normal((5, 7)) * 2
    labels = rng.integers(0, 7, 5)
    g = K.softmax_xent_backward(K.softmax_xent_forward(logits, labels)[2], 1.0)[0]
    num = numeric_grad(lambda: float(K.softmax_xent_forward(logits, labels)[0]), logits)
    return CheckResult("softmax_xent", rel_error(g, num), OP_TOL)


class _ReluSignature:
    """Records relu activation patterns so kink-crossing perturbations can be
    recognized and skipped."""

    def __init__(self):
        self.masks = None

    def __enter__(self):
        self._orig = K.relu_forward
        self.masks = []

        def wrapped(x):
            y, m = self._orig(x)
            self.masks.append(m)
            return y, m

        K.relu_forward = wrapped
        return self

    def __exit__(self, *exc):
        K.relu_forward = self._orig


def check_network(rng, samples_per_tensor: int = 3, h: float = STEP) -> CheckResult:
    """End-to-end k=1 network on an 8^3 input with the stem pool disabled.

    Dropout is off and BN runs in train mode. A few coordinates of every
    parameter tensor (and of the input) are checked; a coordinate whose
    +/-h perturbation flips any relu is a kink crossing and is replaced.
    """
    spec = NetworkSpec(k=1, num_classes=5, input_dims=(8, 8, 8), stem_pool=False, dropout_rate=0.0)
    net = build(spec, dtype=np.float64, seed=int(rng.integers(1 << 30)))
    # larger classifier weights and non-trivial BN affine terms exercise every path
    net.dense_w.data = rng.standard_normal(net.dense_w.data.shape) * 0.5
    for name, p in net.parameters().items():
        if name.endswith(".gamma") or name.endswith(".beta") or name.endswith(".bias"):
            p.data = p.data + rng.standard_normal(p.data.shape) * 0.1
    x = rng.standard_normal((2, 1, 8, 8, 8))
    labels = rng.integers(0, 5, 2)

    def loss_and_pattern():
        with ad.no_grad(), _ReluSignature() as sig:
            loss = float(K.softmax_xent_forward(net.forward(x, train=True).data, labels)[0])
        return loss, np.concatenate([m.ravel() for m in sig.masks])

    xv = ad.Var(x, requires_grad=True)
    loss, _ = ad.softmax_xent(net.forward(xv, train=True), labels)
    ad.backward(loss)
    _, base = loss_and_pattern()
    err = 0.0
    targets = [(xv.data, xv.grad)] + [(p.data, p.grad) for p in net.parameters().values()]
    for data, grad in targets:
        flat, gflat = data.reshape(-1), grad.reshape(-1)
        checked = 0
        for i in rng.permutation(data.size):
            if checked == samples_per_tensor:
                break
            old = flat[i]
            flat[i] = old + h
            fp, sp = loss_and_pattern()
            flat[i] = old - h
            fm, sm = loss_and_pattern()
            flat[i] = old
            if not (np.array_equal(sp, base) and np.array_equal(sm, base)):
                continue
            err = max(err, rel_error(gflat[i], (fp - fm) / (2 * h), floor=NETWORK_FLOOR))
            checked += 1
    return CheckResult("network", err, NETWORK_TOL)


CHECKS = {
    "conv3d": check_conv3d,
    "batchnorm3d": check_batchnorm3d,
    "relu": check_relu,
    "maxpool3d": check_maxpool3d,
    "avgpool3d_global": check_avgpool3d_global,
    "dense": check_dense,
    "dropout": check_dropout,
    "softmax_xent": check_softmax_xent,
    "network": check_network,
}


def run_suite(seed: int = 0, ops=None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        if ops is not None and name not in ops:
            continue
        rng = np.random.default_rng([seed, list(CHECKS).index(name)])
        results.append(fn(rng))
    return results
