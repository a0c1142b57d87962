"""Named parameters with gradient buffers, Adam, and the binary checkpoint format.

Checkpoint layout (little-endian)::

    magic   8 bytes  b"CGCLCKPT"
    version u32
    meta    u32 length + UTF-8 JSON (sorted keys)
    count   u32
    per entry:
        name    u16 length + UTF-8
        rows    u32, cols u32, step u64
        value   rows*cols float32, row-major
        adam_m  rows*cols float32
        adam_v  rows*cols float32
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CGCLCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


@dataclass
class Entry:
    value: np.ndarray
    grad: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step: int = 0


class ParameterStore:
    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, Entry] = {}

    def add(self, name: str, value: np.ndarray) -> Entry:
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=self.dtype, copy=True, order="C")
        if value.ndim != 2:
            raise ValueError("parameters are matrices")
        entry = Entry(value, np.zeros_like(value), np.zeros_like(value), np.zeros_like(value))
        self._entries[name] = entry
        return entry

    def __getitem__(self, name: str) -> Entry:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def value(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.grad.fill(0)

    def copy(self, dtype=None) -> "ParameterStore":
        out = ParameterStore(self.dtype if dtype is None else dtype)
        for name, e in self._entries.items():
            new = out.add(name, e.value)
            new.adam_m[...] = e.adam_m
            new.adam_v[...] = e.adam_v
            new.step = e.step
        return out

    def load_values(self, other: "ParameterStore") -> None:
        """Copy values and optimizer state from another store with equal shapes."""
        for name, e in self._entries.items():
            src = other[name]
            e.value[...] = src.value
            e.adam_m[...] = src.adam_m
            e.adam_v[...] = src.adam_v
            e.step = src.step


def adam_step(store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update of every entry (L2 penalty folded into
    the gradient); gradients are zeroed afterwards."""
    for name, e in store.items():
        if not np.all(np.isfinite(e.grad)):
            raise NonFiniteGradientError(name)
    for e in store._entries.values():
        g = e.grad
        if weight_decay:
            g = g + e.value.dtype.type(weight_decay) * e.value
        e.step += 1
        e.adam_m *= beta1
        e.adam_m += (1.0 - beta1) * g
        e.adam_v *= beta2
        e.adam_v += (1.0 - beta2) * (g * g)
        m_hat = e.adam_m / (1.0 - beta1 ** e.step)
        v_hat = e.adam_v / (1.0 - beta2 ** e.step)
        e.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(e.value.dtype)
        e.grad.fill(0)


def save_checkpoint(store: ParameterStore, path, meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(store.names()))]
    for name, e in store.items():
        raw = name.encode()
        rows, cols = e.value.shape
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<IIQ", rows, cols, e.step)]
        for arr in (e.value, e.adam_m, e.adam_v):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path, dtype=np.float32) -> tuple[ParameterStore, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = 8

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, buf, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (mlen,) = take("<I")
    meta = json.loads(buf[off:off + mlen].decode())
    off += mlen
    (count,) = take("<I")
    store = ParameterStore(dtype)
    for _ in range(count):
        (nlen,) = take("<H")
        name = buf[off:off + nlen].decode()
        off += nlen
        rows, cols, step = take("<IIQ")
        arrays = []
        for _ in range(3):
            n = rows * cols * 4
            if off + n > len(buf):
                raise CheckpointError(f"{path}: truncated")
            arrays.append(np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols))
            off += n
        e = store.add(name, arrays[0])
        e.adam_m[...] = arrays[1]
        e.adam_v[...] = arrays[2]
        e.step = step
    if off != len(buf):
        raise CheckpointError(f"{path}: trailing bytes")
    return store, meta
