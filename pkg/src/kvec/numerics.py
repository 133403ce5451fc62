"""Minimal dense 2-D differentiable kernel layer.

Tensors wrap contiguous 2-D numpy arrays. Operations build a reverse-mode
tape when gradients are enabled; `backward` on a scalar loss accumulates
exact analytic gradients. Scope is deliberately tiny: just the ops the
encoder, fusion cell, heads, and losses need, each one verifiable by the
finite-difference harness at the bottom.

Shape conventions: scalars are (1,1), column vectors (n,1). Broadcasting is
limited to adding/multiplying a (r,1), (1,c), or (1,1) operand against an
(r,c) one.
"""

from __future__ import annotations

import contextlib
import json
from collections import OrderedDict

import numpy as np


class NumericalError(Exception):
    """A numeric invariant broke: non-finite values, degenerate softmax rows."""


_grad_on = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / numeric evals)."""
    global _grad_on
    prev = _grad_on
    _grad_on = False
    try:
        yield
    finally:
        _grad_on = prev


class Tensor:
    """A 2-D array plus an optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backprop = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data[0, 0])

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        if not self.requires_grad:
            raise ValueError("loss is not connected to any parameter")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backprop is not None:
                node._backprop(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _reduce_to(g, shape):
    """Sum a gradient over broadcast axes so it matches `shape`."""
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _wire(out, parents, backprop):
    """Attach tape linkage when grads are on and some parent needs them."""
    if _grad_on:
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backprop = backprop
    return out


def _t(x, like=None):
    """Coerce plain arrays/floats into constant Tensors."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------- arithmetic

def matmul(a, b):
    a, b = _t(a), _t(b)
    out = Tensor(a.data @ b.data)

    def backprop(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _wire(out, (a, b), backprop)


def add(a, b):
    a, b = _t(a), _t(b)
    out = Tensor(a.data + b.data)

    def backprop(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g, b.shape))

    return _wire(out, (a, b), backprop)


def sub(a, b):
    a, b = _t(a), _t(b)
    out = Tensor(a.data - b.data)

    def backprop(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(-g, b.shape))

    return _wire(out, (a, b), backprop)


def mul(a, b):
    a, b = _t(a), _t(b)
    out = Tensor(a.data * b.data)

    def backprop(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g * a.data, b.shape))

    return _wire(out, (a, b), backprop)


def scale(a, c):
    a = _t(a)
    c = float(c)
    out = Tensor(a.data * c)

    def backprop(g):
        _accumulate(a, g * c)

    return _wire(out, (a,), backprop)


def neg(a):
    return scale(a, -1.0)


def transpose(a):
    a = _t(a)
    out = Tensor(a.data.T)

    def backprop(g):
        _accumulate(a, g.T)

    return _wire(out, (a,), backprop)


def affine(x, weight, bias):
    """y = weight @ x + bias, bias broadcasting over columns."""
    return add(matmul(weight, x), bias)


# ------------------------------------------------------------ stack / gather

def concat_rows(parts):
    parts = [_t(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.shape[0] for p in parts]

    def backprop(g):
        lo = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                _accumulate(p, g[lo:lo + n, :])
            lo += n

    return _wire(out, tuple(parts), backprop)


def concat_cols(parts):
    parts = [_t(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    sizes = [p.shape[1] for p in parts]

    def backprop(g):
        lo = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                _accumulate(p, g[:, lo:lo + n])
            lo += n

    return _wire(out, tuple(parts), backprop)


def gather_cols(a, idx):
    """Select columns by an integer index array (repeats allowed)."""
    a = _t(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[:, idx])

    def backprop(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (slice(None), idx), g)

    return _wire(out, (a,), backprop)


def slice_cols(a, lo, hi):
    """Columns lo:hi as a contiguous slice (cheaper than gather_cols)."""
    a = _t(a)
    out = Tensor(a.data[:, lo:hi])

    def backprop(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[:, lo:hi] += g

    return _wire(out, (a,), backprop)


# ------------------------------------------------------------- element-wise

def sigmoid(a):
    a = _t(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def backprop(g):
        _accumulate(a, g * y * (1.0 - y))

    return _wire(out, (a,), backprop)


def tanh(a):
    a = _t(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def backprop(g):
        _accumulate(a, g * (1.0 - y * y))

    return _wire(out, (a,), backprop)


def relu(a):
    a = _t(a)
    y = np.maximum(a.data, 0.0)
    out = Tensor(y)

    def backprop(g):
        _accumulate(a, g * (a.data > 0))

    return _wire(out, (a,), backprop)


def exp(a):
    a = _t(a)
    y = np.exp(a.data)
    out = Tensor(y)

    def backprop(g):
        _accumulate(a, g * y)

    return _wire(out, (a,), backprop)


def log(a):
    a = _t(a)
    y = np.log(a.data)
    out = Tensor(y)

    def backprop(g):
        _accumulate(a, g / a.data)

    return _wire(out, (a,), backprop)


def clamp(a, lo, hi):
    """Clip values; gradient passes only through the unclipped interior."""
    a = _t(a)
    y = np.clip(a.data, lo, hi)
    out = Tensor(y)
    inside = (a.data > lo) & (a.data < hi)

    def backprop(g):
        _accumulate(a, g * inside)

    return _wire(out, (a,), backprop)


def elementwise(kind, x):
    """Dispatch by name: 'sigmoid', 'tanh', or 'relu'."""
    table = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](x)


def sum_all(a):
    a = _t(a)
    out = Tensor(np.array([[a.data.sum()]], dtype=a.dtype))

    def backprop(g):
        _accumulate(a, np.full_like(a.data, g[0, 0]))

    return _wire(out, (a,), backprop)


def dropout(a, p, rng):
    """Inverted dropout; identity when p == 0."""
    a = _t(a)
    if p <= 0.0:
        return a
    if p >= 1.0:
        raise ValueError("dropout probability must be < 1")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    out = Tensor(a.data * keep)

    def backprop(g):
        _accumulate(a, g * keep)

    return _wire(out, (a,), backprop)


# ------------------------------------------------------------ masked softmax

def sentinel(dtype=np.float64):
    """Additive-mask stand-in for -inf that never yields NaN in matmul."""
    return -float(np.finfo(np.dtype(dtype)).max) / 4.0


def masked_softmax(logits, mask=None):
    """Row-wise softmax with an optional additive {0, sentinel} mask.

    Masked positions come out exactly 0; rows are max-subtracted for
    stability. A fully masked row is a NumericalError (valid visibility
    masks always keep the diagonal).
    """
    logits = _t(logits)
    z = logits.data
    masked = None
    if mask is not None:
        mask = np.asarray(mask, dtype=z.dtype)
        if mask.shape != z.shape:
            raise ValueError(f"mask shape {mask.shape} != logits {z.shape}")
        masked = mask < sentinel(z.dtype) / 2.0
        z = z + mask
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    if masked is not None:
        e[masked] = 0.0
    denom = e.sum(axis=1, keepdims=True)
    if np.any(denom == 0.0) or not np.all(np.isfinite(denom)):
        raise NumericalError("softmax row fully masked or non-finite")
    y = e / denom
    out = Tensor(y)

    def backprop(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        _accumulate(logits, y * (g - inner))

    return _wire(out, (logits,), backprop)


# ------------------------------------------------------------ parameter store

class ParameterStore:
    """Named parameter tensors with Adam moments and a step counter."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params = OrderedDict()
        self._m = {}
        self._v = {}
        self.step = 0

    def add(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def param_count(self):
        return sum(t.data.size for t in self._params.values())

    def state_dict(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays):
        for name, t in self._params.items():
            if name not in arrays:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {arr.shape} vs {t.data.shape}"
                )
            t.data = np.ascontiguousarray(arr)


def adam_step(store, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over every parameter; zero grads after.

    Parameters that saw no gradient this round are treated as zero-gradient.
    A non-finite gradient rejects the whole step and names the parameter.
    """
    grads = {}
    for name, t in store.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        elif not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    store.step += 1
    k = store.step
    c1 = 1.0 - beta1 ** k
    c2 = 1.0 - beta2 ** k
    for name, t in store.items():
        g = grads[name]
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        t.data -= learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)
        t.grad = None


# ------------------------------------------------------- gradient verification

def finite_diff_check(fn, store, step=1e-5, floor=1e-8):
    """Max relative error of analytic vs central-difference gradients.

    `fn` rebuilds a scalar loss from the store's current parameter values and
    must be deterministic. Returns {parameter name: max relative error} with
    relative error |a - n| / max(|a|, |n|, floor) taken entrywise. `floor`
    caps the precision demanded of near-zero entries: central differences of
    a loss of size L carry ~eps*L/step absolute noise, so for entries below
    that the comparison is against `floor` in absolute terms, not relative.
    """
    store.zero_grads()
    loss = fn()
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in store.items()
    }
    store.zero_grads()
    errors = {}
    for name, t in store.items():
        numeric = np.zeros_like(t.data)
        flat = t.data.ravel()
        num_flat = numeric.ravel()
        for pos in range(flat.size):
            orig = flat[pos]
            flat[pos] = orig + step
            with no_grad():
                up = fn().item()
            flat[pos] = orig - step
            with no_grad():
                down = fn().item()
            flat[pos] = orig
            num_flat[pos] = (up - down) / (2.0 * step)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        errors[name] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
    return errors


# ------------------------------------------------------------- checkpoint io

_CHECKPOINT_FORMAT = "kvec.checkpoint/1"


def save_checkpoint(path, arrays, extra=None):
    """Write a one-line JSON header then raw little-endian float32 data.

    The header lists parameter names, shapes, dtype, and byte offsets into
    the data section, in storage order; `extra` carries model hyperparameters.
    """
    tensors = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        tensors.append({
            "name": name,
            "shape": list(data.shape),
            "dtype": "float32",
            "offset": offset,
        })
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format": _CHECKPOINT_FORMAT,
        "extra": extra or {},
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (extra header dict, {name: float32 array})."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise ValueError(f"malformed checkpoint header: {err}") from err
        if header.get("format") != _CHECKPOINT_FORMAT:
            raise ValueError(f"unknown checkpoint format {header.get('format')!r}")
        raw = fh.read()
    arrays = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = spec["offset"]
        stop = start + 4 * count
        if stop > len(raw):
            raise ValueError(f"checkpoint truncated at tensor {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(
            raw[start:stop], dtype="<f4"
        ).reshape(shape).copy()
    return header.get("extra", {}), arrays
