"""Dense tensors with tape-based reverse-mode automatic differentiation.

Everything downstream (encoder, decoder, training) is built from the handful
of primitives here. Each operation records its parents and a vector-Jacobian
callback on the output tensor; ``Tensor.backward`` replays them in reverse
topological order. Arrays are numpy, float32 or float64 per run.
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradError(RuntimeError):
    """Raised on autodiff contract violations (non-scalar backward, etc.)."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf is detected where finiteness is required."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling tape recording (used by finite differences)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional row-major array, optionally participating in gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _vjp: Optional[Callable] = None,
                 _op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in {what}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # -- tape plumbing -------------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate .grad of every requires_grad tensor reachable from self.

        Only valid on a scalar (single-element) tensor. The recorded tape is
        released afterwards so tensors can be reused.
        """
        if self.size != 1:
            raise GradError(
                f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # release the tape entry
            node._parents = ()
            node._vjp = None

    # -- op construction -----------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"],
              vjp: Callable, op: str) -> "Tensor":
        req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if req:
            return Tensor(data, requires_grad=True, _parents=tuple(parents),
                          _vjp=vjp, _op=op)
        return Tensor(data, _op=op)

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        out = self.data + other.data
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            out, (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        out = self.data * other.data
        a, b = self, other
        return Tensor._make(
            out, (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape),
                       _unbroadcast(g * a.data, b.shape)),
            "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out = self.data / other.data
        a, b = self, other
        return Tensor._make(
            out, (a, b),
            lambda g: (_unbroadcast(g / b.data, a.shape),
                       _unbroadcast(-g * a.data / (b.data ** 2), b.shape)),
            "div")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        out = self.data[key]
        src = self

        def vjp(g):
            full = np.zeros_like(src.data)
            np.add.at(full, key, g)
            return (full,)

        return Tensor._make(np.ascontiguousarray(out), (self,), vjp, "slice")

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,),
                            lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._make(np.ascontiguousarray(self.data.transpose(axes)),
                            (self,),
                            lambda g: (g.transpose(inv),), "transpose")

    def swap_last2(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(*axes)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)
        src_shape = self.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, src_shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, src_shape).copy(),)

        return Tensor._make(np.asarray(out), (self,), vjp, "sum")

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


# -- free-function primitives ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return (ga, gb)

    return Tensor._make(out, (a, b), vjp, "matmul")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis (max-subtracted)."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return Tensor._make(y, (x,), vjp, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def vjp(g):
        gh = g * gain.data
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return (dx, dgain, dbias)

    return Tensor._make(out, (x, gain, bias), vjp, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du
        return (g * d,)

    return Tensor._make(out, (x,), vjp, "gelu")


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    out = np.stack([t.data for t in tensors])

    def vjp(g):
        return tuple(g[i] for i in range(len(tensors)))

    return Tensor._make(out, tuple(tensors), vjp, "stack")


# -- deterministic random numbers --------------------------------------------

def _seed_ints(seed) -> tuple:
    """Normalize a seed (int, str, or tuple of those) to ints for SeedSequence;
    strings hash via blake2s so streams are stable across platforms."""
    import hashlib
    parts = seed if isinstance(seed, (tuple, list)) else (seed,)
    out = []
    for part in parts:
        if isinstance(part, str):
            digest = hashlib.blake2s(part.encode(), digest_size=8).digest()
            out.append(int.from_bytes(digest, "little"))
        else:
            out.append(int(part) & 0xFFFFFFFFFFFFFFFF)
    return tuple(out)


class Rng:
    """Seeded deterministic generator (PCG64); identical seed, identical stream."""

    def __init__(self, seed):
        self._seed = seed
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(_seed_ints(seed))))

    @property
    def seed(self):
        return self._seed

    def child(self, *key: int) -> "Rng":
        """Independent stream derived from (seed, key); disjoint across keys."""
        base = self._seed if isinstance(self._seed, (list, tuple)) else (self._seed,)
        return Rng(tuple(base) + tuple(key))

    def normal(self, shape, std=1.0, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * std).astype(dtype)

    def trunc_normal(self, shape, std=0.02, dtype=np.float64) -> np.ndarray:
        """Normal(0, std) resampled until within two standard deviations."""
        out = self._gen.standard_normal(size=shape)
        bad = np.abs(out) > 2.0
        while bad.any():
            out[bad] = self._gen.standard_normal(size=int(bad.sum()))
            bad = np.abs(out) > 2.0
        return (out * std).astype(dtype)

    def uniform(self, shape, lo=0.0, hi=1.0, dtype=np.float64) -> np.ndarray:
        return self._gen.uniform(lo, hi, size=shape).astype(dtype)

    def integers(self, lo, hi, size=None):
        return self._gen.integers(lo, hi, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)


# -- finite-difference oracle -------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor],
               eps: float = 1e-4) -> float:
    """Compare analytic gradients of scalar f() against central differences.

    Returns the max relative error |a - n| / max(|a|, |n|, 1e-8) over every
    element of every parameter. Requires 64-bit parameters.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 parameters ({name})")
        p.zero_grad()
    loss = f()
    if not math.isfinite(loss.item()):
        raise NonFiniteError("non-finite loss at the unperturbed point")
    loss.backward()
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            analytic[name] = np.zeros_like(p.data)
        else:
            analytic[name] = p.grad.copy()
    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            aflat = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError(
                        f"non-finite loss while perturbing parameter {name}[{i}]")
                num = (fp - fm) / (2.0 * eps)
                a = aflat[i]
                rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, rel)
    return worst


def parameters_finite(params: dict[str, Tensor]) -> None:
    """Raise NonFiniteError naming the first offending parameter."""
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"non-finite values in parameter {name}")
