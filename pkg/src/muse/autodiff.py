"""Dense float64 tensors with reverse-mode automatic differentiation.

A small define-by-run engine: each operation returns a new `Tensor` holding
its numpy value plus a closure that routes incoming gradients to its parents.
Enough machinery for dense encoder/decoder networks, the Gaussian algebra
and the RL critics in this package; no GPU, no fusion, no dynamic shapes
beyond the leading batch axis.

Every forward op validates that its output is finite and raises
`NumericError` naming the op otherwise; silent NaN propagation is treated
as a bug, not a value.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "ShapeError",
    "NumericError",
    "ContractError",
    "constant",
    "matmul",
    "concat",
    "slice_last",
    "exp",
    "log",
    "square",
    "sum_",
    "mean_",
    "sigmoid",
    "relu",
    "swish",
    "softplus",
    "tanh",
    "log_softmax",
    "logsumexp",
    "stop_gradient",
    "gradcheck",
    "GradcheckReport",
]


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the op signature."""


class NumericError(ArithmeticError):
    """A forward op produced a NaN or Inf."""


class ContractError(ValueError):
    """An API precondition was violated."""


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _check_finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite output of op '{op}'")
    return value


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation tape: a float64 ndarray plus backward plumbing."""

    __slots__ = ("value", "parents", "grad_fn", "requires_grad", "grad", "name")

    def __init__(self, value, parents=(), grad_fn=None, requires_grad=False, name=None):
        self.value = _as_array(value)
        self.parents: tuple = tuple(parents)
        self.grad_fn: Callable | None = grad_fn
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in self.parents)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def _accum(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self) -> None:
        """Backpropagate from this node; requires a scalar output."""
        if self.value.size != 1:
            raise ContractError(
                f"backward() requires a scalar output, got shape {self.value.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self._accum(np.ones_like(self.value))
        for node in reversed(topo):
            if node.grad_fn is not None and node.grad is not None:
                node.grad_fn(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"


def constant(value, name=None) -> Tensor:
    return Tensor(value, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(_check_finite(a.value + b.value, "add"), (a, b))

    def grad_fn(g):
        a._accum(_unbroadcast(g, a.value.shape))
        b._accum(_unbroadcast(g, b.value.shape))

    out.grad_fn = grad_fn
    return out


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(_check_finite(a.value - b.value, "subtract"), (a, b))

    def grad_fn(g):
        a._accum(_unbroadcast(g, a.value.shape))
        b._accum(_unbroadcast(-g, b.value.shape))

    out.grad_fn = grad_fn
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(_check_finite(a.value * b.value, "multiply"), (a, b))

    def grad_fn(g):
        a._accum(_unbroadcast(g * b.value, a.value.shape))
        b._accum(_unbroadcast(g * a.value, b.value.shape))

    out.grad_fn = grad_fn
    return out


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(_check_finite(a.value / b.value, "divide"), (a, b))

    def grad_fn(g):
        a._accum(_unbroadcast(g / b.value, a.value.shape))
        b._accum(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    out.grad_fn = grad_fn
    return out


def neg(a) -> Tensor:
    a = _lift(a)
    out = Tensor(-a.value, (a,))
    out.grad_fn = lambda g: a._accum(-g)
    return out


def exp(a) -> Tensor:
    a = _lift(a)
    val = _check_finite(np.exp(a.value), "exp")
    out = Tensor(val, (a,))
    out.grad_fn = lambda g: a._accum(g * val)
    return out


def log(a) -> Tensor:
    a = _lift(a)
    out = Tensor(_check_finite(np.log(a.value), "log"), (a,))
    out.grad_fn = lambda g: a._accum(g / a.value)
    return out


def square(a) -> Tensor:
    a = _lift(a)
    out = Tensor(_check_finite(a.value * a.value, "square"), (a,))
    out.grad_fn = lambda g: a._accum(g * 2.0 * a.value)
    return out


def sigmoid(a) -> Tensor:
    a = _lift(a)
    # numerically symmetric logistic
    val = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-a.value)),
                   np.exp(a.value) / (1.0 + np.exp(a.value)))
    out = Tensor(_check_finite(val, "sigmoid"), (a,))
    out.grad_fn = lambda g: a._accum(g * val * (1.0 - val))
    return out


def relu(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.maximum(a.value, 0.0), (a,))
    out.grad_fn = lambda g: a._accum(g * (a.value > 0))
    return out


def swish(a) -> Tensor:
    a = _lift(a)
    s = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-a.value)),
                 np.exp(a.value) / (1.0 + np.exp(a.value)))
    val = a.value * s
    out = Tensor(_check_finite(val, "swish"), (a,))
    out.grad_fn = lambda g: a._accum(g * (s + a.value * s * (1.0 - s)))
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed in the overflow-free form."""
    a = _lift(a)
    val = np.maximum(a.value, 0.0) + np.log1p(np.exp(-np.abs(a.value)))
    s = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-a.value)),
                 np.exp(a.value) / (1.0 + np.exp(a.value)))
    out = Tensor(_check_finite(val, "softplus"), (a,))
    out.grad_fn = lambda g: a._accum(g * s)
    return out


def tanh(a) -> Tensor:
    a = _lift(a)
    val = np.tanh(a.value)
    out = Tensor(val, (a,))
    out.grad_fn = lambda g: a._accum(g * (1.0 - val * val))
    return out


# -- linear algebra and structure ---------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul shapes incompatible: {a.value.shape} @ {b.value.shape}"
        )
    out = Tensor(_check_finite(a.value @ b.value, "matmul"), (a, b))

    def grad_fn(g):
        a._accum(g @ b.value.T)
        b._accum(a.value.T @ g)

    out.grad_fn = grad_fn
    return out


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    ts = [_lift(p) for p in parts]
    out = Tensor(np.concatenate([t.value for t in ts], axis=axis), tuple(ts))
    sizes = [t.value.shape[axis] for t in ts]

    def grad_fn(g):
        offset = 0
        for t, size in zip(ts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(offset, offset + size)
            t._accum(g[tuple(idx)])
            offset += size

    out.grad_fn = grad_fn
    return out


def slice_last(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    out = Tensor(a.value[..., start:stop], (a,))

    def grad_fn(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        a._accum(full)

    out.grad_fn = grad_fn
    return out


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,))

    def grad_fn(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.value.shape))
        elif keepdims:
            a._accum(np.broadcast_to(g, a.value.shape))
        else:
            a._accum(np.broadcast_to(np.expand_dims(g, axis), a.value.shape))

    out.grad_fn = grad_fn
    return out


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def logsumexp(a, keepdims=False) -> Tensor:
    """log sum exp over the last axis, shift-stabilized."""
    a = _lift(a)
    hi = np.max(a.value, axis=-1, keepdims=True)
    shifted = np.exp(a.value - hi)
    total = shifted.sum(axis=-1, keepdims=True)
    val = hi + np.log(total)
    soft = shifted / total
    if not keepdims:
        val = val[..., 0]
    out = Tensor(_check_finite(val, "logsumexp"), (a,))

    def grad_fn(g):
        g_exp = g if keepdims else g[..., None]
        a._accum(g_exp * soft)

    out.grad_fn = grad_fn
    return out


def log_softmax(a) -> Tensor:
    """log softmax over the last axis."""
    a = _lift(a)
    hi = np.max(a.value, axis=-1, keepdims=True)
    shifted = a.value - hi
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    val = shifted - lse
    soft = np.exp(val)
    out = Tensor(_check_finite(val, "log_softmax"), (a,))

    def grad_fn(g):
        a._accum(g - soft * g.sum(axis=-1, keepdims=True))

    out.grad_fn = grad_fn
    return out


def stop_gradient(a) -> Tensor:
    """Detach: forwards the value, contributes exactly zero upstream gradient."""
    a = _lift(a)
    return Tensor(a.value.copy())


# -- parameters and Adam -------------------------------------------------

_MAGIC = b"MUSEPST1"


class ParamStore:
    """Named parameter arrays with Adam moment slots and a step counter each.

    Call `bind()` once per forward pass to obtain fresh gradient-tracking
    Tensors over the stored arrays; collect `.grad` from those after
    `backward()` and feed them to `adam_step`.
    """

    def __init__(self):
        self._value: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._step: dict[str, int] = {}

    def create(self, name: str, value) -> None:
        if name in self._value:
            raise ContractError(f"parameter '{name}' already exists")
        arr = _as_array(value).copy()
        self._value[name] = arr
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        self._step[name] = 0

    def names(self) -> list[str]:
        return list(self._value)

    def __contains__(self, name: str) -> bool:
        return name in self._value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._value[name]

    def __setitem__(self, name: str, value) -> None:
        arr = _as_array(value)
        if name in self._value and arr.shape != self._value[name].shape:
            raise ContractError(
                f"shape mismatch for '{name}': {arr.shape} vs {self._value[name].shape}"
            )
        if name not in self._value:
            self.create(name, arr)
        else:
            self._value[name] = arr.copy()

    def bind(self) -> dict[str, Tensor]:
        return {
            name: Tensor(val, requires_grad=True, name=name)
            for name, val in self._value.items()
        }

    @staticmethod
    def collect_grads(bound: dict[str, Tensor]) -> dict[str, np.ndarray]:
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.value))
            for name, t in bound.items()
        }

    def adam_step(self, grads: dict[str, np.ndarray], lr=1e-3,
                  beta1=0.9, beta2=0.999, eps=1e-8) -> None:
        for name, g in grads.items():
            if name not in self._value:
                raise ContractError(f"unknown parameter '{name}'")
            g = _as_array(g)
            if g.shape != self._value[name].shape:
                raise ContractError(
                    f"gradient shape mismatch for '{name}': "
                    f"{g.shape} vs {self._value[name].shape}"
                )
            self._step[name] += 1
            t = self._step[name]
            self._m[name] = beta1 * self._m[name] + (1.0 - beta1) * g
            self._v[name] = beta2 * self._v[name] + (1.0 - beta2) * g * g
            m_hat = self._m[name] / (1.0 - beta1 ** t)
            v_hat = self._v[name] / (1.0 - beta2 ** t)
            self._value[name] = self._value[name] - lr * m_hat / (np.sqrt(v_hat) + eps)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, val in self._value.items():
            other.create(name, val)
            other._m[name] = self._m[name].copy()
            other._v[name] = self._v[name].copy()
            other._step[name] = self._step[name]
        return other

    def checksum(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self._value):
            h.update(name.encode())
            h.update(self._value[name].tobytes())
        return h.digest()

    # flat binary container; see save format below
    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            for name in self._value:
                arr = self._value[name]
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", arr.ndim))
                for dim in arr.shape:
                    fh.write(struct.pack("<I", dim))
                fh.write(arr.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != _MAGIC:
                raise ContractError(f"bad checkpoint magic {magic!r}")
            while True:
                head = fh.read(4)
                if not head:
                    break
                (name_len,) = struct.unpack("<I", head)
                name = fh.read(name_len).decode("utf-8")
                (rank,) = struct.unpack("<I", fh.read(4))
                dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
                count = int(np.prod(dims)) if rank else 1
                payload = fh.read(8 * count)
                if len(payload) != 8 * count:
                    raise ContractError(f"truncated payload for '{name}'")
                arr = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
                store.create(name, arr)
        return store


# -- finite-difference checking ------------------------------------------


class GradcheckReport:
    """Result of comparing analytic gradients against central differences."""

    def __init__(self):
        self.records: list[tuple[str, int, float, float, float]] = []

    def add(self, name: str, flat_index: int, analytic: float, numeric: float) -> None:
        rel = abs(analytic - numeric) / max(1.0, abs(analytic))
        self.records.append((name, flat_index, analytic, numeric, rel))

    @property
    def max_rel_error(self) -> float:
        return max((r[4] for r in self.records), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance

    def worst(self, k: int = 5):
        return sorted(self.records, key=lambda r: -r[4])[:k]

    def summary(self) -> str:
        lines = [f"gradcheck: {len(self.records)} coordinates, "
                 f"max rel error {self.max_rel_error:.3e}"]
        for name, idx, ana, num, rel in self.worst():
            lines.append(f"  {name}[{idx}]: analytic={ana:.6e} fd={num:.6e} rel={rel:.3e}")
        return "\n".join(lines)


def gradcheck(fn: Callable[[dict[str, Tensor]], Tensor], store: ParamStore,
              rng: np.random.Generator | None = None, h: float = 1e-5,
              max_coords: int = 20) -> GradcheckReport:
    """Check d fn / d params against central finite differences.

    `fn` maps bound parameter tensors to a scalar Tensor. Up to `max_coords`
    coordinates per parameter are sampled (all of them when small).
    """
    bound = store.bind()
    out = fn(bound)
    out.backward()
    grads = ParamStore.collect_grads(bound)

    report = GradcheckReport()
    for name in store.names():
        arr = store[name]
        size = arr.size
        if rng is None or size <= max_coords:
            coords = np.arange(size)[:max_coords] if rng is None else np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        flat = arr.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            hi = float(fn(store.bind()).value)
            flat[idx] = orig - h
            lo = float(fn(store.bind()).value)
            flat[idx] = orig
            numeric = (hi - lo) / (2.0 * h)
            report.add(name, int(idx), float(grads[name].reshape(-1)[idx]), numeric)
    return report
