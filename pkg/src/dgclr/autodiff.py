"""Reverse-mode automatic differentiation on dense numpy arrays.

A small tape: each `Tensor` remembers the tensors it was computed from and a
closure that routes the output gradient back to them.  `Tensor.backward()`
topologically sorts the tape and runs the closures in reverse.  Only the
operations the rating model needs are provided; everything is float64 by
default so gradients can be checked against central finite differences.

Alongside the tensor type live `Parameter` / `ParameterStore` (named trainable
tensors with Adam state, Xavier initialisation) and `adam_step`.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp

from .validation import check_positive

DEFAULT_DTYPE = np.float64

# When True, every operation asserts its output is finite.  Costs one pass
# over each result; enabled by the test suite, off in production runs.
FINITE_CHECKS = False

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (prediction/eval paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(target_shape: tuple, g: np.ndarray) -> np.ndarray:
    """Sum gradient `g` down to `target_shape` (undo numpy broadcasting)."""
    while g.ndim > len(target_shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(target_shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """Dense numeric array with an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # ---- plumbing -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def backward(self) -> None:
        """Accumulate d(self)/d(ancestor) into every reachable `.grad`.

        `self` must be a finite scalar.  Grads add up across repeated calls;
        callers reset them via ParameterStore.zero_grads / adam_step.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise FloatingPointError("backward() called on a non-finite loss")

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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self._ensure_grad()
        self.grad += np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = _make(self.data + other.data, (self, other))
        if out._parents:
            def backward(g):
                if self.requires_grad:
                    self._ensure_grad()
                    self.grad += _unbroadcast(self.data.shape, g)
                if other.requires_grad:
                    other._ensure_grad()
                    other.grad += _unbroadcast(other.data.shape, g)
            out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _make(-self.data, (self,))
        if out._parents:
            def backward(g):
                self._ensure_grad()
                self.grad += -g
            out._backward = backward
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = as_tensor(other)
        out = _make(self.data * other.data, (self, other))
        if out._parents:
            def backward(g):
                if self.requires_grad:
                    self._ensure_grad()
                    self.grad += _unbroadcast(self.data.shape, g * other.data)
                if other.requires_grad:
                    other._ensure_grad()
                    other.grad += _unbroadcast(other.data.shape, g * self.data)
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = _make(self.data / other.data, (self, other))
        if out._parents:
            def backward(g):
                if self.requires_grad:
                    self._ensure_grad()
                    self.grad += _unbroadcast(self.data.shape, g / other.data)
                if other.requires_grad:
                    other._ensure_grad()
                    other.grad += _unbroadcast(
                        other.data.shape, -g * self.data / other.data**2
                    )
            out._backward = backward
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        out = _make(self.data**exponent, (self,))
        if out._parents:
            def backward(g):
                self._ensure_grad()
                self.grad += g * exponent * self.data ** (exponent - 1)
            out._backward = backward
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        out = _make(self.data[index], (self,))
        if out._parents:
            def backward(g):
                self._ensure_grad()
                np.add.at(self.grad, index, g)
            out._backward = backward
        return out

    # ---- shape ops -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,))
        if out._parents:
            def backward(g):
                self._ensure_grad()
                self.grad += g.reshape(self.data.shape)
            out._backward = backward
        return out

    def sum(self, axis=None, keepdims: bool = False):
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out._parents:
            def backward(g):
                self._ensure_grad()
                if axis is None:
                    self.grad += g
                elif keepdims:
                    self.grad += np.broadcast_to(g, self.data.shape)
                else:
                    self.grad += np.broadcast_to(
                        np.expand_dims(g, axis), self.data.shape
                    )
            out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple) -> Tensor:
    if FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("operation produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    else:
        out.requires_grad = False
        out._parents = ()
    out._backward = None
    return out


# ---- elementwise functions ------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = _make(np.maximum(x.data, 0.0), (x,))
    if out._parents:
        def backward(g):
            x._ensure_grad()
            x.grad += g * (x.data > 0)
        out._backward = backward
    return out


def exp(x: Tensor) -> Tensor:
    out = _make(np.exp(x.data), (x,))
    if out._parents:
        def backward(g):
            x._ensure_grad()
            x.grad += g * out.data
        out._backward = backward
    return out


def log(x: Tensor) -> Tensor:
    out = _make(np.log(x.data), (x,))
    if out._parents:
        def backward(g):
            x._ensure_grad()
            x.grad += g / x.data
        out._backward = backward
    return out


def sqrt(x: Tensor) -> Tensor:
    out = _make(np.sqrt(x.data), (x,))
    if out._parents:
        def backward(g):
            x._ensure_grad()
            x.grad += g * 0.5 / out.data
        out._backward = backward
    return out


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        val = 1.0 / (1.0 + np.exp(-x.data))
    out = _make(val, (x,))
    if out._parents:
        def backward(g):
            x._ensure_grad()
            x.grad += g * out.data * (1.0 - out.data)
        out._backward = backward
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero outside the open interval."""
    out = _make(np.clip(x.data, lo, hi), (x,))
    if out._parents:
        inside = (x.data > lo) & (x.data < hi)

        def backward(g):
            x._ensure_grad()
            x.grad += g * inside
        out._backward = backward
    return out


# ---- linear algebra ---------------------------------------------------------


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """`x @ w` where w is 2-D and x is 2-D or any (..., m) stack.

    Higher-rank x is flattened to one 2-D product, so results do not depend
    on how leading axes are factored (a (n, 1, m) stack multiplies bit-for-bit
    like the (n, m) matrix it reshapes to).
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2:
        raise ValueError("matmul expects a 2-D right operand")
    m = x.data.shape[-1]
    out_shape = x.data.shape[:-1] + (w.data.shape[1],)
    out = _make((x.data.reshape(-1, m) @ w.data).reshape(out_shape), (x, w))
    if out._parents:
        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            if x.requires_grad:
                x._ensure_grad()
                x.grad += (g2 @ w.data.T).reshape(x.data.shape)
            if w.requires_grad:
                w._ensure_grad()
                w.grad += x.data.reshape(-1, m).T @ g2
        out._backward = backward
    return out


def batched_matmul(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel product: x (n, K, a) with w (K, a, b) -> (n, K, b)."""
    xt = x.data.transpose(1, 0, 2)
    out_data = np.matmul(xt, w.data).transpose(1, 0, 2)
    out = _make(out_data, (x, w))
    if out._parents:
        def backward(g):
            gt = g.transpose(1, 0, 2)
            if x.requires_grad:
                x._ensure_grad()
                x.grad += np.matmul(gt, w.data.transpose(0, 2, 1)).transpose(1, 0, 2)
            if w.requires_grad:
                w._ensure_grad()
                w.grad += np.matmul(x.data.transpose(1, 2, 0), gt)
        out._backward = backward
    return out


def sparse_matmul(mat: sp.csr_matrix, mat_t: sp.csr_matrix, x: Tensor) -> Tensor:
    """`mat @ x` for a constant sparse matrix with precomputed transpose.

    Used for the gather/scatter structure of a graph: `mat` rows select or
    sum rows of `x`, and the backward pass applies `mat_t`.
    """
    out = _make(mat @ x.data, (x,))
    if out._parents:
        def backward(g):
            x._ensure_grad()
            x.grad += mat_t @ g
        out._backward = backward
    return out


def gather_rows(x: Tensor, idx: np.ndarray, scatter: sp.csr_matrix | None = None) -> Tensor:
    """Select rows `x[idx]` along axis 0.

    Backward scatter-adds into `x`; pass the precomputed (n_rows x len(idx))
    CSR `scatter` matrix when idx is large and reused (graph edges), otherwise
    an `np.add.at` fallback is used.
    """
    out = _make(x.data[idx], (x,))
    if out._parents:
        def backward(g):
            x._ensure_grad()
            if scatter is not None:
                flat = scatter @ g.reshape(g.shape[0], -1)
                x.grad += flat.reshape(x.data.shape)
            else:
                np.add.at(x.grad, idx, g)
        out._backward = backward
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), (*tensors,))
    if out._parents:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    t._ensure_grad()
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(a, b)
                    t.grad += g[tuple(sl)]
        out._backward = backward
    return out


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _make(np.stack([t.data for t in tensors], axis=axis), (*tensors,))
    if out._parents:
        def backward(g):
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t._ensure_grad()
                    t.grad += np.take(g, i, axis=axis)
        out._backward = backward
    return out


# ---- model-specific kernels -------------------------------------------------


def softmax_t(logits: Tensor, tau: float, axis: int = -1) -> Tensor:
    """Temperature softmax along `axis`, computed with max-subtraction."""
    check_positive("tau", tau)
    z = logits.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = _make(p, (logits,))
    if out._parents:
        def backward(g):
            logits._ensure_grad()
            inner = (g * p).sum(axis=axis, keepdims=True)
            logits.grad += p * (g - inner) / tau
        out._backward = backward
    return out


def cosine_rows(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity along the last axis with broadcasting leading dims.

    Rows where either norm falls below `eps` yield 0 with zero gradient.
    """
    na2 = (a.data**2).sum(axis=-1)
    nb2 = (b.data**2).sum(axis=-1)
    na = np.sqrt(na2)
    nb = np.sqrt(nb2)
    valid = (na >= eps) & (nb >= eps)
    denom = np.where(valid, na * nb, 1.0)
    dot = (a.data * b.data).sum(axis=-1)
    cos = np.where(valid, dot / denom, 0.0)
    out = _make(cos, (a, b))
    if out._parents:
        def backward(g):
            gv = np.where(valid, g, 0.0)[..., None]
            if a.requires_grad:
                a._ensure_grad()
                da = gv * (b.data / denom[..., None]
                           - cos[..., None] * a.data / np.where(valid, na2, 1.0)[..., None])
                a.grad += _unbroadcast(a.data.shape, da)
            if b.requires_grad:
                b._ensure_grad()
                db = gv * (a.data / denom[..., None]
                           - cos[..., None] * b.data / np.where(valid, nb2, 1.0)[..., None])
                b.grad += _unbroadcast(b.data.shape, db)
        out._backward = backward
    return out


def masked_rsqrt(x: Tensor, eps: float = 1e-12) -> Tensor:
    """1/sqrt(x) where x >= eps, else 0 (degree guard for isolated nodes)."""
    mask = x.data >= eps
    safe = np.where(mask, x.data, 1.0)
    out = _make(np.where(mask, 1.0 / np.sqrt(safe), 0.0), (x,))
    if out._parents:
        def backward(g):
            x._ensure_grad()
            x.grad += np.where(mask, -0.5 * g * safe**-1.5, 0.0)
        out._backward = backward
    return out


# ---- parameters -------------------------------------------------------------


class Parameter:
    """A trainable tensor plus its gradient accumulator and Adam moments."""

    __slots__ = ("tensor", "adam_m", "adam_v", "step_count")

    def __init__(self, values: np.ndarray):
        values = np.asarray(values)
        self.tensor = Tensor(values, requires_grad=True, dtype=values.dtype)
        self.tensor.grad = np.zeros_like(self.tensor.data)
        self.adam_m = np.zeros_like(self.tensor.data)
        self.adam_v = np.zeros_like(self.tensor.data)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.data.shape


class DuplicateParameterError(ValueError):
    pass


class ParameterStore:
    """Named parameters with deterministic initialisation.

    Draws come from a single generator seeded once, so the same seed and the
    same registration order reproduce every tensor bit for bit.  Iteration is
    always sorted by name.
    """

    def __init__(self, seed: int, dtype=None):
        self.rng_seed = int(seed)
        self.dtype = dtype or DEFAULT_DTYPE
        self._rng = np.random.default_rng(self.rng_seed)
        self._params: dict[str, Parameter] = {}

    def register_xavier(self, name: str, shape) -> Parameter:
        """Register a new parameter drawn uniformly from the Xavier range."""
        shape = tuple(int(s) for s in shape)
        if name in self._params:
            raise DuplicateParameterError(f"parameter {name!r} already registered")
        if len(shape) not in (1, 2):
            raise ValueError(f"xavier init supports 1-D/2-D shapes, got {shape}")
        fan_in = shape[0]
        fan_out = shape[1] if len(shape) == 2 else 1
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        values = self._rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        param = Parameter(values)
        self._params[name] = param
        return param

    def register_values(self, name: str, values: np.ndarray) -> Parameter:
        if name in self._params:
            raise DuplicateParameterError(f"parameter {name!r} already registered")
        param = Parameter(np.asarray(values, dtype=self.dtype))
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def tensor(self, name: str) -> Tensor:
        return self._params[name].tensor

    def zero_grads(self) -> None:
        for _, p in self.items():
            p.tensor.grad[...] = 0.0

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            self._params[name].tensor.data[...] = arr


def adam_step(store: ParameterStore, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update over every parameter; grads are zeroed."""
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    for _, p in store.items():
        g = p.tensor.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        g[...] = 0.0
