"""Reverse-mode automatic differentiation on float64 numpy arrays.

Operations executed inside an active :class:`Tape` are recorded together with
their local gradient rules; :meth:`Tape.backward` replays them in reverse.
Outside a tape every operation is a plain numpy computation, which is how
inference and finite-difference probes run.

Gradient contract: leaf tensors (those not produced on the tape) accumulate
into ``.grad`` with ``+=`` until :func:`zero_grad` is called.  A tape may be
backpropagated exactly once; a second call raises :class:`TapeError`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64
# additive logit for masked positions; exp(-1e30 - max) underflows to exactly 0
MASK_VALUE = -1e30


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations whose inputs require gradients are
    appended in execution order, so inputs always precede the node consuming
    them.
    """

    def __init__(self):
        self.nodes: list = []
        self._produced: set = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("tape already consumed by backward(); build a new one")
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def record(self, out: Tensor, inputs: Sequence[Tensor], rule: Callable) -> None:
        self.nodes.append((out, tuple(inputs), rule))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward() already ran on this tape")
        if loss.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss was not produced on this tape")
        self._consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, rule in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = rule(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in self._produced:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=DTYPE)
                else:
                    t.grad += gi
        self.nodes = []


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


@contextlib.contextmanager
def no_grad():
    """Suspend recording on every enclosing tape."""
    stack = getattr(_state, "tapes", None)
    saved = list(stack) if stack else []
    _state.tapes = []
    try:
        yield
    finally:
        _state.tapes = saved


def _result(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, rule)
    return out


# ---------------------------------------------------------------------------
# Discrete branch recording
# ---------------------------------------------------------------------------


class BranchRecorder:
    """Records every discrete decision of a forward pass for exact replay.

    Finite-difference probes replay the recorded argmax/top-k/sample choices
    so the probed function is the smooth piece whose derivative backprop
    computed, instead of hopping across maxout or argmax kinks.
    """

    def __init__(self):
        self.log: list = []
        self.replaying = False
        self._cursor = 0

    def replay(self) -> "BranchRecorder":
        self.replaying = True
        self._cursor = 0
        return self

    def choose(self, compute: Callable[[], np.ndarray]) -> np.ndarray:
        if self.replaying:
            if self._cursor >= len(self.log):
                raise RuntimeError("replay requested more branch decisions than were recorded")
            value = self.log[self._cursor]
            self._cursor += 1
            return value
        value = compute()
        self.log.append(value)
        return value


@contextlib.contextmanager
def branches(recorder: BranchRecorder):
    prev = getattr(_state, "recorder", None)
    _state.recorder = recorder
    try:
        yield recorder
    finally:
        _state.recorder = prev


def choose(compute: Callable[[], np.ndarray]) -> np.ndarray:
    """Route a discrete decision through the active recorder, if any."""
    rec = getattr(_state, "recorder", None)
    if rec is None:
        return compute()
    return rec.choose(compute)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def rule(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), rule)


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a @ b`` over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), rule)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), rule)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _result(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def _is_basic(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(None), type(Ellipsis))) for k in keys)


def getitem(x: Tensor, key) -> Tensor:
    shape = x.shape
    basic = _is_basic(key)

    def rule(g):
        gx = np.zeros(shape, dtype=DTYPE)
        if basic:
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _result(x.data[key], (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch row gather: ``out[b, k] = x[b, idx[b, k]]`` for ``x`` of shape (B, T, ...)."""
    idx = np.asarray(idx, dtype=np.int64)
    b = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def rule(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.add.at(gx, (np.broadcast_to(b, idx.shape), idx), g)
        return (gx,)

    return _result(x.data[b, idx], (x,), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def rule(g):
        gt = np.zeros(shape, dtype=DTYPE)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(table.data[ids], (table,), rule)


def max(x: Tensor, axis: int = -1) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient goes to the lowest-index maximiser."""
    axis = axis % x.ndim
    arg = choose(lambda: np.argmax(x.data, axis=axis))
    arg_k = np.expand_dims(arg, axis)
    shape = x.shape

    def rule(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(gx, arg_k, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(np.take_along_axis(x.data, arg_k, axis=axis).squeeze(axis), (x,), rule)


def _masked_logits(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    return np.where(np.asarray(mask) > 0, x, MASK_VALUE)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask == 0`` get exactly zero weight."""
    z = _masked_logits(x.data, mask)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    z = _masked_logits(x.data, mask)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def rule(g):
        gx = g - p * g.sum(axis=axis, keepdims=True)
        if mask is not None:
            gx = np.where(np.asarray(mask) > 0, gx, 0.0)
        return (gx,)

    return _result(y, (x,), rule)


def softmax_columns(x: Tensor, mask=None) -> Tensor:
    """Normalise each column of a (..., p, q) matrix."""
    if x.ndim < 2:
        raise DimensionError(f"softmax_columns needs a matrix, got shape {x.shape}")
    return softmax(x, axis=-2, mask=mask)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor):
    """One LSTM step built from primitive ops; gate order is (input, forget, cell, output)."""
    z = x @ w_ih.T + h @ w_hh.T + b
    n = h.shape[-1]
    i = sigmoid(z[..., :n])
    f = sigmoid(z[..., n : 2 * n])
    g = tanh(z[..., 2 * n : 3 * n])
    o = sigmoid(z[..., 3 * n :])
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new


def lstm_sequence(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> Tensor:
    """Unidirectional LSTM over (B, T, d) from a zero state, returning all hidden states (B, T, h).

    Fused into one tape node with hand-written backpropagation through time;
    it computes exactly what chaining :func:`lstm_cell` would.
    """
    xd = x.data
    if xd.ndim != 3:
        raise DimensionError(f"lstm_sequence expects (B, T, d) input, got {xd.shape}")
    B, T, d = xd.shape
    if T < 1:
        raise ValueError("lstm_sequence needs a non-empty sequence")
    Wi, Wh, bd = w_ih.data, w_hh.data, b.data
    n = Wh.shape[1]
    if Wi.shape != (4 * n, d) or Wh.shape != (4 * n, n) or bd.shape != (4 * n,):
        raise DimensionError(
            f"lstm weights {Wi.shape}, {Wh.shape}, {bd.shape} do not fit input width {d}"
        )
    xw = xd @ Wi.T + bd
    hs = np.zeros((B, T + 1, n), dtype=DTYPE)
    cs = np.zeros((B, T + 1, n), dtype=DTYPE)
    gates = np.empty((B, T, 4 * n), dtype=DTYPE)
    tc = np.empty((B, T, n), dtype=DTYPE)
    for t in range(T):
        z = xw[:, t] + hs[:, t] @ Wh.T
        a = gates[:, t]
        a[:, : 2 * n] = _sigmoid(z[:, : 2 * n])
        a[:, 2 * n : 3 * n] = np.tanh(z[:, 2 * n : 3 * n])
        a[:, 3 * n :] = _sigmoid(z[:, 3 * n :])
        cs[:, t + 1] = a[:, n : 2 * n] * cs[:, t] + a[:, :n] * a[:, 2 * n : 3 * n]
        tc[:, t] = np.tanh(cs[:, t + 1])
        hs[:, t + 1] = a[:, 3 * n :] * tc[:, t]

    def rule(gout):
        dz = np.empty((B, T, 4 * n), dtype=DTYPE)
        dh_next = np.zeros((B, n), dtype=DTYPE)
        dc_next = np.zeros((B, n), dtype=DTYPE)
        for t in range(T - 1, -1, -1):
            a = gates[:, t]
            i, f, g, o = a[:, :n], a[:, n : 2 * n], a[:, 2 * n : 3 * n], a[:, 3 * n :]
            dh = gout[:, t] + dh_next
            dc = dh * o * (1.0 - tc[:, t] ** 2) + dc_next
            dzt = dz[:, t]
            dzt[:, :n] = dc * g * i * (1.0 - i)
            dzt[:, n : 2 * n] = dc * cs[:, t] * f * (1.0 - f)
            dzt[:, 2 * n : 3 * n] = dc * i * (1.0 - g * g)
            dzt[:, 3 * n :] = dh * tc[:, t] * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dzt @ Wh
        flat = dz.reshape(B * T, 4 * n)
        gx = (dz @ Wi) if x.requires_grad else None
        gwi = flat.T @ xd.reshape(B * T, d)
        gwh = flat.T @ hs[:, :T].reshape(B * T, n)
        gb = flat.sum(axis=0)
        return gx, gwi, gwh, gb

    return _result(hs[:, 1:].copy(), (x, w_ih, w_hh, b), rule)


def reverse_within_length(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Reverse the first ``lengths[b]`` positions of each sequence; padding stays in place."""
    B, T = x.shape[0], x.shape[1]
    pos = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    idx = np.where(pos < L, L - 1 - pos, pos)
    return take_rows(x, idx)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def numerical_grad(f: Callable[[], float], t: Tensor, index=None, step: float = 1e-5) -> np.ndarray:
    """Central-difference derivative of ``f()`` w.r.t. ``t`` (all entries, or one flat ``index``)."""
    flat = t.data.reshape(-1)
    indices = range(flat.size) if index is None else [index]
    out = np.zeros(len(indices))
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[k] = (fp - fm) / (2 * step)
    return out.reshape(t.shape) if index is None else out


def relative_error(analytic, numeric, floor: float = 1e-5) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
