"""Named parameter store, Adam optimizer, and a finite-difference gradient verifier.

The store file format is versioned and flat: an 8-byte magic, a uint32 format
version, a uint32 parameter count, then per parameter a uint16 name length,
the UTF-8 name, a uint8 rank, uint32 dimensions, and the raw little-endian
float64 values in row-major order.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .engine import Tensor, no_grad

STORE_MAGIC = b"TSRPSTOR"
STORE_VERSION = 1


class NonFiniteGradient(RuntimeError):
    pass


def glorot_uniform(shape: tuple, rng: np.random.Generator,
                   fan_in: int | None = None, fan_out: int | None = None) -> np.ndarray:
    """Uniform init in +/- sqrt(6 / (fan_in + fan_out))."""
    if fan_in is None or fan_out is None:
        if len(shape) == 1:
            fan_in = fan_out = shape[0]
        else:
            fan_in = int(np.prod(shape[1:]))
            fan_out = shape[0]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class ParameterStore:
    """Named learnable tensors plus per-parameter Adam moments."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def get(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def clone(self) -> "ParameterStore":
        """Deep copy of the weights (optimizer moments reset)."""
        other = ParameterStore()
        for name, t in self._params.items():
            other.add(name, t.data.copy())
        return other

    def copy_values_from(self, other: "ParameterStore"):
        for name, t in self._params.items():
            t.data[...] = other.get(name).data

    # -- serialization ------------------------------------------------------
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(STORE_MAGIC)
        buf.write(struct.pack("<II", STORE_VERSION, len(self._params)))
        for name, t in self._params.items():
            enc = name.encode("utf-8")
            buf.write(struct.pack("<H", len(enc)))
            buf.write(enc)
            buf.write(struct.pack("<B", t.ndim))
            buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
            buf.write(t.data.astype("<f8").tobytes(order="C"))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ParameterStore":
        buf = io.BytesIO(raw)
        magic = buf.read(len(STORE_MAGIC))
        if magic != STORE_MAGIC:
            raise ValueError("not a parameter store file (bad magic)")
        version, count = struct.unpack("<II", buf.read(8))
        if version != STORE_VERSION:
            raise ValueError(f"unsupported parameter store version {version}")
        store = cls()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", buf.read(2))
            name = buf.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", buf.read(1))
            shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape)
            store.add(name, data.copy())
        return store

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def adam_step(store: ParameterStore, lr: float = 0.001, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update over every parameter; zeroes gradients after."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    store.zero_grad()


@dataclass
class FDReport:
    max_rel_error: float
    per_param: dict[str, float]
    coords_checked: int


def finite_difference_check(loss_fn, store: ParameterStore, h: float = 1e-5,
                            max_coords_per_param: int = 8,
                            rng: np.random.Generator | None = None) -> FDReport:
    """Compare analytic gradients with central differences on sampled coordinates.

    Per coordinate the error is |analytic - (f(x+h) - f(x-h)) / 2h| / max(1, |analytic|),
    maximized over the sampled subset.  loss_fn must rebuild the loss from the
    store's current values and be deterministic.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in store.items()}
    store.zero_grad()

    per_param: dict[str, float] = {}
    checked = 0
    with no_grad():
        for name, t in store.items():
            flat = t.data.reshape(-1)
            n = flat.size
            idx = np.arange(n) if n <= max_coords_per_param else rng.choice(
                n, size=max_coords_per_param, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn().data)
                flat[i] = orig - h
                fm = float(loss_fn().data)
                flat[i] = orig
                fd = (fp - fm) / (2.0 * h)
                a = analytic[name].reshape(-1)[i]
                err = abs(a - fd) / max(1.0, abs(a))
                worst = max(worst, err)
                checked += 1
            per_param[name] = worst
    return FDReport(max(per_param.values(), default=0.0), per_param, checked)
