"""Wide volumetric residual network.

Layer sequence (widening factor ``k``)::

    conv3d 1 -> 8k, 3x3x3, same padding          30^3
    maxpool 4x4x4, stride 4, high-side pad        8^3
    ConvBlock3D(8k)  IdentityBlock3D(8k) x2       8^3
    ConvBlock3D(16k) IdentityBlock3D(16k) x2      8^3
    global average pool, dense -> num_classes

Residual blocks are pre-activation: the branch is
BN -> relu -> conv -> dropout -> BN -> relu -> conv, the shortcut is the
identity (IdentityBlock3D) or a 1x1x1 conv + BN projection (ConvBlock3D), and
the block output is relu(shortcut + branch).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BNState, Var
from .errors import ConfigError, DimensionError

IDENTITY = "IdentityBlock3D"
CONV = "ConvBlock3D"

CLASSIFIER_INIT_SCALE = 0.01


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    width: int
    kernel: tuple = (3, 3, 3)
    dropout_rate: float = 0.3

    def __post_init__(self):
        if self.kind not in (IDENTITY, CONV):
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.kind == IDENTITY and self.in_channels != self.width:
            raise ConfigError(
                f"{IDENTITY} needs in_channels == width, got {self.in_channels} -> {self.width}"
            )


@dataclass(frozen=True)
class NetworkSpec:
    k: int = 1
    num_classes: int = 40
    input_dims: tuple = (30, 30, 30)
    stem_pool: bool = True
    pool_window: int = 4
    pool_stride: int = 4
    dropout_rate: float = 0.3
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5

    def __post_init__(self):
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise ConfigError(f"widening factor k must be a positive integer, got {self.k!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))

    @property
    def widths(self) -> list[int]:
        return [b.width for b in self.blocks()]

    def blocks(self) -> list[BlockSpec]:
        a, b = 8 * self.k, 16 * self.k
        plan = [(CONV, a, a), (IDENTITY, a, a), (IDENTITY, a, a), (CONV, a, b), (IDENTITY, b, b), (IDENTITY, b, b)]
        return [BlockSpec(kind, i, w, dropout_rate=self.dropout_rate) for kind, i, w in plan]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{**d, "input_dims": tuple(d.get("input_dims", (30, 30, 30)))})

    def fingerprint(self) -> int:
        """64-bit hash of every field that shapes the parameters or the eval-mode
        function. Dropout rate is excluded: it only acts during training."""
        d = self.to_dict()
        d.pop("dropout_rate")
        blob = json.dumps(d, sort_keys=True).encode()
        return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


class ParamCount(NamedTuple):
    trainable: int
    with_running_stats: int


class _Conv:
    def __init__(self, name, cin, cout, ksize, dtype):
        self.weight = Var(np.zeros((cout, cin) + (ksize,) * 3, dtype), True, f"{name}.weight")
        self.bias = Var(np.zeros(cout, dtype), True, f"{name}.bias")
        self.pad = ksize // 2

    def __call__(self, x, method):
        return ad.conv3d(x, self.weight, self.bias, stride=1, pad=self.pad, method=method)


class _Block:
    def __init__(self, name, spec: BlockSpec, net: NetworkSpec, dtype):
        self.spec = spec
        bn = dict(dtype=dtype, momentum=net.bn_momentum, eps=net.bn_eps)
        self.bn1 = BNState(spec.in_channels, prefix=f"{name}.bn1.", **bn)
        self.conv1 = _Conv(f"{name}.conv1", spec.in_channels, spec.width, 3, dtype)
        self.bn2 = BNState(spec.width, prefix=f"{name}.bn2.", **bn)
        self.conv2 = _Conv(f"{name}.conv2", spec.width, spec.width, 3, dtype)
        if spec.kind == CONV:
            self.proj = _Conv(f"{name}.proj.conv", spec.in_channels, spec.width, 1, dtype)
            self.proj_bn = BNState(spec.width, prefix=f"{name}.proj.bn.", **bn)
        else:
            self.proj = None

    def __call__(self, x, train, rng, method):
        h = ad.relu(ad.batchnorm3d(x, self.bn1, train))
        h = self.conv1(h, method)
        h = ad.dropout(h, self.spec.dropout_rate, train, rng)
        h = ad.relu(ad.batchnorm3d(h, self.bn2, train))
        h = self.conv2(h, method)
        shortcut = x if self.proj is None else ad.batchnorm3d(self.proj(x, method), self.proj_bn, train)
        return ad.relu(shortcut + h)


class Network:
    def __init__(self, spec: NetworkSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.stem = _Conv("stem.conv", 1, 8 * spec.k, 3, self.dtype)
        self.blocks = [_Block(f"block{i}", b, spec, self.dtype) for i, b in enumerate(spec.blocks())]
        feat = 16 * spec.k
        self.dense_w = Var(np.zeros((feat, spec.num_classes), self.dtype), True, "head.dense.weight")
        self.dense_b = Var(np.zeros(spec.num_classes, self.dtype), True, "head.dense.bias")
        self.conv_method = "direct"

    # -- parameter access --------------------------------------------------
    def _bn_states(self):
        for i, blk in enumerate(self.blocks):
            yield f"block{i}.bn1.", blk.bn1
            yield f"block{i}.bn2.", blk.bn2
            if blk.proj is not None:
                yield f"block{i}.proj.bn.", blk.proj_bn

    def parameters(self) -> dict[str, Var]:
        """Trainable parameters in a fixed order."""
        vs = [self.stem.weight, self.stem.bias]
        for blk in self.blocks:
            vs += [blk.bn1.gamma, blk.bn1.beta, blk.conv1.weight, blk.conv1.bias]
            vs += [blk.bn2.gamma, blk.bn2.beta, blk.conv2.weight, blk.conv2.bias]
            if blk.proj is not None:
                vs += [blk.proj.weight, blk.proj.bias, blk.proj_bn.gamma, blk.proj_bn.beta]
        vs += [self.dense_w, self.dense_b]
        return {v.name: v for v in vs}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, st in self._bn_states():
            out[prefix + "running_mean"] = st.running_mean
            out[prefix + "running_var"] = st.running_var
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        sd = {k: v.data for k, v in self.parameters().items()}
        sd.update(self.buffers())
        return sd

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        bufs = self.buffers()
        expected = set(params) | set(bufs)
        missing = expected - set(sd)
        extra = set(sd) - expected
        if missing or extra:
            raise DimensionError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, v in params.items():
            arr = np.asarray(sd[name])
            if arr.shape != v.data.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {v.data.shape}")
            v.data = np.array(arr, dtype=self.dtype)
        for prefix, st in self._bn_states():
            for field in ("running_mean", "running_var"):
                arr = np.asarray(sd[prefix + field])
                if arr.shape != getattr(st, field).shape:
                    raise DimensionError(f"{prefix}{field}: shape mismatch")
                setattr(st, field, np.array(arr, dtype=self.dtype))

    def zero_grad(self):
        for v in self.parameters().values():
            v.grad = None

    # -- execution ----------------------------------------------------------
    def forward(self, x, train=False, rng=None) -> Var:
        """Logits for a (n, 1, d, h, w) batch."""
        if not isinstance(x, Var):
            x = Var(np.ascontiguousarray(x, dtype=self.dtype))
        if x.data.ndim != 5 or x.data.shape[1] != 1 or x.data.shape[2:] != self.spec.input_dims:
            raise DimensionError(
                f"expected input (n, 1, {', '.join(map(str, self.spec.input_dims))}), got {x.data.shape}"
            )
        if train and rng is None and self.spec.dropout_rate > 0:
            raise ValueError("train-mode forward with dropout needs an rng")
        m = self.conv_method
        h = self.stem(x, m)
        if self.spec.stem_pool:
            h = ad.maxpool3d(h, self.spec.pool_window, self.spec.pool_stride, ceil_pad=True)
        for blk in self.blocks:
            h = blk(h, train, rng, m)
        h = ad.avgpool3d_global(h)
        return ad.dense(h, self.dense_w, self.dense_b)

    __call__ = forward

    def predict_proba(self, x, batch_size=64) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                logits = self.forward(x[i : i + batch_size], train=False).data
                z = logits - logits.max(axis=1, keepdims=True)
                e = np.exp(z)
                out.append(e / e.sum(axis=1, keepdims=True))
        return np.concatenate(out, axis=0)


def build(spec: NetworkSpec, dtype=np.float32, seed: Optional[int] = 0) -> Network:
    """Construct the network; ``seed=None`` leaves all weights at zero."""
    net = Network(spec, dtype)
    if seed is not None:
        init_weights(net, np.random.default_rng(seed))
    return net


def _fan_in(w: np.ndarray) -> int:
    return int(np.prod(w.shape[1:])) if w.ndim == 5 else w.shape[0]


def init_weights(net: Network, rng: np.random.Generator) -> Network:
    """He-normal weights, zero biases, unit BN scale.

    The classifier weights are drawn at 1/100 of the He scale so the initial
    logits are close to uniform.
    """
    for name, v in net.parameters().items():
        if name.endswith(".weight"):
            std = np.sqrt(2.0 / _fan_in(v.data))
            if name == "head.dense.weight":
                std *= CLASSIFIER_INIT_SCALE
            v.data = (rng.standard_normal(v.data.shape) * std).astype(net.dtype)
        elif name.endswith(".gamma"):
            v.data = np.ones_like(v.data)
        else:
            v.data = np.zeros_like(v.data)
    for _, st in net._bn_states():
        st.running_mean = np.zeros_like(st.running_mean)
        st.running_var = np.ones_like(st.running_var)
    return net


def count_parameters(net: Network) -> ParamCount:
    trainable = sum(v.data.size for v in net.parameters().values())
    running = sum(a.size for a in net.buffers().values())
    return ParamCount(trainable, trainable + running)


def count_parameters_for(k: int, num_classes: int = 40) -> ParamCount:
    return count_parameters(build(NetworkSpec(k=k, num_classes=num_classes), seed=None))
