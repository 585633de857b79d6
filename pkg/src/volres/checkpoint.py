"""Versioned little-endian checkpoint container.

Layout::

    b"VRCK" | u32 version | u64 spec fingerprint | u32 tensor count
    per tensor: u32 name length | name (UTF-8) | u8 dtype | u8 rank
                | u32 extent * rank | raw little-endian payload

The network spec itself travels as the reserved uint8 tensor ``__spec__``
(UTF-8 JSON), so a checkpoint is loadable without outside context. Optimizer
accumulators live under ``__opt__/...`` and the step counter under
``__step__``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, SpecMismatchError
from .network import Network, NetworkSpec, build

MAGIC = b"VRCK"
VERSION = 1
SPEC_KEY = "__spec__"
STEP_KEY = "__step__"
OPT_PREFIX = "__opt__/"

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("u1"): 2,
    np.dtype("<i8"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(fingerprint: int, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<IQI", VERSION, fingerprint, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _DTYPE_CODES:
            raise TypeError(f"{name}: unsupported checkpoint dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> tuple[int, dict[str, np.ndarray]]:
    """Parse a container; raises :class:`FormatError` carrying the byte offset."""
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a VRCK checkpoint", 0)
    version, fingerprint, count = struct.unpack("<IQI", take(16, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    tensors = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"tensor name is not UTF-8: {e}", start) from None
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}", pos - 2)
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        payload = take(nbytes, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    return fingerprint, tensors


def save_checkpoint(net: Network, path, step: int = 0, optimizer_state: Optional[dict] = None) -> Path:
    spec_blob = json.dumps(net.spec.to_dict(), sort_keys=True).encode()
    tensors = {SPEC_KEY: np.frombuffer(spec_blob, dtype=np.uint8), STEP_KEY: np.array([step], dtype=np.int64)}
    tensors.update(net.state_dict())
    for name, arr in (optimizer_state or {}).items():
        tensors[OPT_PREFIX + name] = arr
    path = Path(path)
    atomic_write(path, encode(net.spec.fingerprint(), tensors))
    return path


def read_checkpoint(path) -> tuple[NetworkSpec, dict[str, np.ndarray], int, dict[str, np.ndarray]]:
    """Returns ``(spec, state_dict, step, optimizer_state)`` after verifying the fingerprint."""
    fingerprint, tensors = decode(Path(path).read_bytes())
    if SPEC_KEY not in tensors:
        raise FormatError(f"{path}: missing {SPEC_KEY} record")
    spec = NetworkSpec.from_dict(json.loads(tensors.pop(SPEC_KEY).tobytes().decode()))
    if spec.fingerprint() != fingerprint:
        raise FormatError(f"{path}: header fingerprint does not match embedded spec")
    step = int(tensors.pop(STEP_KEY, np.zeros(1, np.int64))[0])
    opt = {k[len(OPT_PREFIX) :]: tensors.pop(k) for k in list(tensors) if k.startswith(OPT_PREFIX)}
    return spec, tensors, step, opt


def load_checkpoint(path, spec: Optional[NetworkSpec] = None, dtype=None) -> Network:
    """Rebuild a network from ``path``.

    When ``spec`` is given the stored fingerprint must match it, otherwise
    :class:`SpecMismatchError` is raised.
    """
    stored, state, _, _ = read_checkpoint(path)
    if spec is not None and spec.fingerprint() != stored.fingerprint():
        raise SpecMismatchError(
            f"{path}: checkpoint spec (k={stored.k}, classes={stored.num_classes}) "
            f"does not match requested spec (k={spec.k}, classes={spec.num_classes})"
        )
    use = spec if spec is not None else stored
    if dtype is None:
        dtype = next(iter(state.values())).dtype
    net = build(use, dtype=dtype, seed=None)
    net.load_state_dict(state)
    return net


def checkpoint_fingerprint(path) -> int:
    buf = Path(path).read_bytes()[:24]
    if len(buf) < 24 or buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a VRCK checkpoint", 0)
    return struct.unpack("<Q", buf[8:16])[0]
