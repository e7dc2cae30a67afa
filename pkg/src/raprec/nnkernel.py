"""Small reverse-mode autodiff kernel over dense float64 numpy arrays.

Every op works on row batches: a rank-2 input of shape ``(B, n)`` is ``B``
independent samples.  Weight matrices follow the ``(out, in)`` convention,
so ``affine(x, W, b)`` computes ``W x + b`` per row.

Gradients accumulate on leaf tensors (parameters) across ``backward`` calls
until they are zeroed explicitly; intermediate nodes hold no state between
calls.
"""

from __future__ import annotations

import hashlib
import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; their ``grad``
    accumulates.  Non-leaf nodes carry a closure that maps the upstream
    gradient to gradients for each parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward: Callable | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the heavy ops are module-level functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Back-propagate from a scalar ``loss`` into every reachable leaf."""
    if not loss.requires_grad:
        raise UsageError("backward() called on a tensor that is not attached to any parameter")
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")

    # iterative post-order DFS; recursion would overflow on long unrolls
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    active = x.data > 0
    return _node(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),))


def neg_log_sigmoid(x: Tensor) -> Tensor:
    """Pairwise logistic loss ``-ln sigmoid(x)``, elementwise and overflow-free."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, -x.data)
    s_neg = _sigmoid(np.atleast_1d(-x.data)).reshape(x.shape)
    return _node(out, (x,), lambda g: (-g * s_neg,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (rank-1 vector or rows of a matrix)."""
    x = as_tensor(x)
    if x.data.size == 0 or x.shape[-1] == 0:
        raise ValueError("softmax of an empty input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (x,), bw)


# --------------------------------------------------------------- structural

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        if b.requires_grad:
            gb = np.outer(a.data, g) if a.data.ndim == 1 else a.data.T @ g
        else:
            gb = None
        return ga, gb

    return _node(out, (a, b), bw)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``W x + b`` for a vector ``x`` or every row of a matrix ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"affine shape mismatch: x{x.shape}, W{W.shape}, b{b.shape}")
    out = x.data @ W.data.T + b.data

    def bw(g):
        gx = g @ W.data if x.requires_grad else None
        if W.requires_grad:
            gW = np.outer(g, x.data) if x.data.ndim == 1 else g.T @ x.data
        else:
            gW = None
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gW, gb

    return _node(out, (x, W, b), bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, parts, bw)


def gather(table: Tensor, index) -> Tensor:
    """Rows of ``table`` selected by an integer index array of any shape."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"gather index out of range for table with {table.shape[0]} rows")
    out = table.data[index]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _node(out, (table,), bw)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node(out, (x,), bw)


def mean(x: Tensor) -> Tensor:
    return mul(reduce_sum(x), 1.0 / x.data.size)


def sum_of_squares(tensors: Iterable[Tensor]) -> Tensor:
    """``sum_i ||t_i||^2`` as one node."""
    ts = list(tensors)
    total = float(sum(np.vdot(t.data, t.data) for t in ts))
    return _node(np.array(total), ts, lambda g: tuple(2.0 * g * t.data for t in ts))


# ---------------------------------------------------------------- losses

def cross_entropy(probs: Tensor, label) -> Tensor:
    """``-ln probs[label]`` with the probability clamped at ``PROB_FLOOR``.

    For a matrix of probabilities and an integer label vector, returns the
    per-row losses.
    """
    probs = as_tensor(probs)
    label = np.asarray(label, dtype=np.int64)
    n_classes = probs.shape[-1]
    if label.size and (label.min() < 0 or label.max() >= n_classes):
        raise IndexError(f"label out of range for {n_classes} classes")
    if probs.data.ndim == 1:
        if label.ndim != 0:
            raise ShapeError("a single probability vector takes a scalar label")
        picked = probs.data[label]
    else:
        if label.shape != (probs.shape[0],):
            raise ShapeError(f"labels {label.shape} do not match probs {probs.shape}")
        picked = probs.data[np.arange(probs.shape[0]), label]
    clamped = np.maximum(picked, PROB_FLOOR)
    out = -np.log(clamped)

    def bw(g):
        full = np.zeros_like(probs.data)
        local = np.where(picked > PROB_FLOOR, -1.0 / clamped, 0.0) * g
        if probs.data.ndim == 1:
            full[label] = local
        else:
            full[np.arange(probs.shape[0]), label] = local
        return (full,)

    return _node(out, (probs,), bw)


# ---------------------------------------------------------------- recurrent

def rnn_step(x: Tensor, h_prev: Tensor, W_in: Tensor, W_hh: Tensor, b_h: Tensor,
             mask=None) -> Tensor:
    """Elman cell ``tanh(W_in x + W_hh h_prev + b_h)``.

    Rows where ``mask`` is False carry ``h_prev`` through unchanged, which is
    how left padding in a batch of ragged sequences is handled.
    """
    x, h_prev = as_tensor(x), as_tensor(h_prev)
    H = W_hh.shape[0]
    if W_in.shape[0] != H or W_in.shape[1] != x.shape[-1] or h_prev.shape[-1] != H:
        raise ShapeError(f"rnn_step shape mismatch: x{x.shape}, h{h_prev.shape}, "
                         f"W_in{W_in.shape}, W_hh{W_hh.shape}")
    pre = x.data @ W_in.data.T + h_prev.data @ W_hh.data.T + b_h.data
    t = np.tanh(pre)
    if mask is None:
        m = None
        out = t
    else:
        m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
        out = m * t + (1.0 - m) * h_prev.data

    def bw(g):
        gpre = g * (1.0 - t * t)
        if m is not None:
            gpre = gpre * m
        gx = gpre @ W_in.data
        gh = gpre @ W_hh.data
        if m is not None:
            gh = gh + g * (1.0 - m)
        if x.data.ndim == 1:
            gWin, gWhh, gb = np.outer(gpre, x.data), np.outer(gpre, h_prev.data), gpre
        else:
            gWin, gWhh, gb = gpre.T @ x.data, gpre.T @ h_prev.data, gpre.sum(axis=0)
        return gx, gh, gWin, gWhh, gb

    return _node(out, (x, h_prev, W_in, W_hh, b_h), bw)


def rnn_sequence(xs: Tensor, W_in: Tensor, W_hh: Tensor, b_h: Tensor, mask) -> Tensor:
    """Final hidden state of an Elman RNN unrolled over ``xs`` of shape (B, T, d).

    Numerically identical to chaining ``rnn_step`` from a zero state, but
    recorded as a single node with hand-written back-propagation through
    time.  ``mask`` (B, T) marks real steps; padding must be on the left.
    """
    B, T, _ = xs.shape
    H = W_hh.shape[0]
    mask = np.asarray(mask, dtype=np.float64).reshape(B, T)
    Wi, Wh, b = W_in.data, W_hh.data, b_h.data
    # input projection for all steps at once
    proj = xs.data @ Wi.T + b
    hs = np.zeros((T + 1, B, H))
    ts = np.zeros((T, B, H))
    for step in range(T):
        t = np.tanh(proj[:, step, :] + hs[step] @ Wh.T)
        ts[step] = t
        m = mask[:, step:step + 1]
        hs[step + 1] = m * t + (1.0 - m) * hs[step]

    def bw(g):
        gproj = np.zeros((B, T, H))
        gWh = np.zeros_like(Wh)
        gh = g
        for step in range(T - 1, -1, -1):
            m = mask[:, step:step + 1]
            t = ts[step]
            gpre = gh * m * (1.0 - t * t)
            gproj[:, step, :] = gpre
            gWh += gpre.T @ hs[step]
            gh = gpre @ Wh + gh * (1.0 - m)
        flat_g = gproj.reshape(B * T, H)
        gxs = (flat_g @ Wi).reshape(xs.shape) if xs.requires_grad else None
        gWi = flat_g.T @ xs.data.reshape(B * T, -1)
        gb = flat_g.sum(axis=0)
        return gxs, gWi, gWh, gb

    return _node(hs[T], (xs, W_in, W_hh, b_h), bw)


# ---------------------------------------------------------------- parameters

class ParameterSet:
    """Named parameter tensors iterated in lexicographic name order."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(array, dtype=np.float64), requires_grad=True, name=name)
        self._params = dict(sorted({**self._params, name: t}.items()))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self, prefix: str = "") -> list[Tensor]:
        return [t for n, t in self._params.items() if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.arrays())

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    @contextmanager
    def frozen(self):
        """Temporarily treat every parameter as a constant."""
        saved = {n: t.requires_grad for n, t in self._params.items()}
        for t in self._params.values():
            t.requires_grad = False
        try:
            yield self
        finally:
            for n, t in self._params.items():
                t.requires_grad = saved[n]

    # checkpoint: magic, u64 header length, JSON header, then <f8 payload
    _MAGIC = b"RAPPSET1"

    def save(self, path: str | Path) -> None:
        header = json.dumps([{"name": n, "shape": list(t.shape)}
                             for n, t in self._params.items()]).encode()
        with open(path, "wb") as fh:
            fh.write(self._MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for t in self._params.values():
                fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "ParameterSet":
        raw = Path(path).read_bytes()
        if raw[:8] != cls._MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + hlen])
        offset = 16 + hlen
        arrays = {}
        for entry in header:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape, dtype=np.int64))
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n,
                                                  offset=offset).reshape(shape).copy()
            offset += 8 * n
        if offset != len(raw):
            raise ValueError(f"{path}: trailing bytes after payload")
        return cls(arrays)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterSet, state: AdamState, names: Iterable[str] | None = None) -> None:
    """One bias-corrected Adam update, in place, on ``names`` (default: all)."""
    names = params.names() if names is None else list(names)
    for n in names:
        if params[n].grad is None:
            raise UsageError(f"parameter {n!r} has no gradient; call backward() first")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for n in names:
        p = params[n]
        g = p.grad
        m = state.m.get(n)
        if m is None:
            m = state.m[n] = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
        v = state.v[n]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def sgd_step(params: ParameterSet, lr: float, names: Iterable[str] | None = None) -> None:
    for n in (params.names() if names is None else names):
        params[n].data -= lr * params[n].grad


# ---------------------------------------------------------------- gradcheck

def finite_difference_check(f: Callable[[], Tensor], params: ParameterSet, eps: float = 1e-5,
                            max_coords: int | None = 40, rng=None,
                            names: Iterable[str] | None = None) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values.  At most
    ``max_coords`` coordinates per parameter are probed (all when None).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    names = params.names() if names is None else list(names)
    params.zero_grad()
    f().backward()
    worst = 0.0
    for n in names:
        p = params[n]
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = f().item()
            flat[c] = orig - eps
            down = f().item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    params.zero_grad()
    return worst
