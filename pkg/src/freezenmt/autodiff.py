"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and with at least one
input that requires a gradient, are recorded.  ``backward`` replays the tape
in reverse.  Outside a tape every op is a plain numpy evaluation, which is how
decoding and evaluation run.

The recurrent primitives (``lstm_cell``, ``lstm_layer``, ``attention``) and the
loss (``label_smoothed_ce``) are fused ops with hand-written adjoints; the
finite-difference checks in the test-suite cover each of them.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
_MASKED_SCORE = -1e30


class NumericalError(ArithmeticError):
    """A value or gradient became NaN or infinite."""


class Tensor:
    """Immutable array value plus an optional gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "param", "_tape")

    def __init__(self, value, requires_grad: bool = False):
        arr = np.asarray(value, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.param = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records ops for one backward pass; use as a context manager."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.entries: list[tuple[tuple[Tensor, ...], Callable]] = []
        self.leaves: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @staticmethod
    def current() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("backward already ran on this tape; build a new graph")
        if loss.value.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value)
        for outputs, fn in reversed(self.entries):
            grads = [o.grad for o in outputs]
            if all(g is None for g in grads):
                continue
            fn(*[np.zeros_like(o.value) if g is None else g for o, g in zip(outputs, grads)])
        for leaf in self.leaves:
            if leaf.grad is not None:
                if not np.all(np.isfinite(leaf.grad)):
                    raise NumericalError(f"non-finite gradient for {leaf.param.name}")
                leaf.param.grad += leaf.grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(theta) into every trainable Parameter on the graph."""
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            raise RuntimeError("loss was not produced under a Tape")
        return
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op} produced non-finite values")
    return arr


def _record(inputs: Sequence[Tensor], outputs: Sequence[Tensor], fn: Callable) -> None:
    tape = Tape.current()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    for out in outputs:
        out.requires_grad = True
        out._tape = tape
    tape.entries.append((tuple(outputs), fn))


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _new(value: np.ndarray, op: str) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.value = value
    t.grad = None
    t.requires_grad = False
    t.param = None
    t._tape = None
    return t


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _new(a.value + b.value, "add")

    def fn(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    _record((a, b), (out,), fn)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _new(a.value - b.value, "sub")

    def fn(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    _record((a, b), (out,), fn)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _new(a.value * b.value, "mul")

    def fn(g):
        _acc(a, _unbroadcast(g * b.value, a.shape))
        _acc(b, _unbroadcast(g * a.value, b.shape))

    _record((a, b), (out,), fn)
    return out


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if b.value.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _new(a.value @ b.value, "matmul")

    def fn(g):
        _acc(a, g @ b.value.T)
        if b.requires_grad:
            _acc(b, a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

    _record((a, b), (out,), fn)
    return out


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` with x of shape [..., i], W [i, o], b [o]."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.value.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    out = _new(x.value @ W.value + b.value, "affine")

    def fn(g):
        _acc(x, g @ W.value.T)
        g2 = g.reshape(-1, g.shape[-1])
        if W.requires_grad:
            _acc(W, x.value.reshape(-1, x.shape[-1]).T @ g2)
        if b.requires_grad:
            _acc(b, g2.sum(axis=0))

    _record((x, W, b), (out,), fn)
    return out


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    out = _new(y, "tanh")
    _record((x,), (out,), lambda g: _acc(x, g * (1.0 - y * y)))
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.value)
    out = _new(y, "sigmoid")
    _record((x,), (out,), lambda g: _acc(x, g * y * (1.0 - y)))
    return out


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.value)
    out = _new(_check(y, "exp"), "exp")
    _record((x,), (out,), lambda g: _acc(x, g * y))
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    out = _new(_check(np.log(x.value), "log"), "log")
    _record((x,), (out,), lambda g: _acc(x, g / x.value))
    return out


def total(x) -> Tensor:
    """Sum of all entries, as a scalar."""
    x = as_tensor(x)
    out = _new(np.array(x.value.sum()), "sum")
    _record((x,), (out,), lambda g: _acc(x, np.broadcast_to(g, x.shape)))
    return out


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.value.size
    out = _new(np.array(x.value.mean()), "mean")
    _record((x,), (out,), lambda g: _acc(x, np.broadcast_to(g / n, x.shape)))
    return out


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = _new(np.concatenate([x.value for x in xs], axis=axis), "concat")
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def fn(g):
        for x, piece in zip(xs, np.split(g, bounds, axis=axis)):
            _acc(x, piece)

    _record(xs, (out,), fn)
    return out


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = _new(np.stack([x.value for x in xs], axis=axis), "stack")

    def fn(g):
        for i, x in enumerate(xs):
            _acc(x, np.take(g, i, axis=axis))

    _record(xs, (out,), fn)
    return out


def take(x, index: int, axis: int = 0) -> Tensor:
    """Select one position along ``axis`` (the axis is dropped)."""
    x = as_tensor(x)
    out = _new(np.take(x.value, index, axis=axis), "take")

    def fn(g):
        full = np.zeros_like(x.value)
        sl = [slice(None)] * x.value.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        _acc(x, full)

    _record((x,), (out,), fn)
    return out


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = _new(x.value.reshape(shape), "reshape")
    _record((x,), (out,), lambda g: _acc(x, g.reshape(x.shape)))
    return out


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table of {table.shape[0]} rows")
    out = _new(table.value[ids], "embedding")

    def fn(g):
        if table.requires_grad:
            full = np.zeros_like(table.value)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _acc(table, full)

    _record((table,), (out,), fn)
    return out


def dropout(x, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or no generator is given."""
    x = as_tensor(x)
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = _new(x.value * keep, "dropout")
    _record((x,), (out,), lambda g: _acc(x, g * keep))
    return out


# ---------------------------------------------------------------------------
# softmax family


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_rows(logits) -> Tensor:
    """Row-wise softmax over the last axis (max-subtracted)."""
    x = as_tensor(logits)
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    y = _softmax(x.value)
    out = _new(y, "softmax")

    def fn(g):
        _acc(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    _record((x,), (out,), fn)
    return out


def log_softmax_rows(logits) -> Tensor:
    x = as_tensor(logits)
    y = _log_softmax(x.value)
    out = _new(y, "log_softmax")

    def fn(g):
        _acc(x, g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    _record((x,), (out,), fn)
    return out


def label_smoothed_ce(logits, targets, epsilon: float, ignore_index: int | None = 0) -> Tensor:
    """Mean label-smoothed cross-entropy over rows whose target is not ``ignore_index``.

    The smoothed target puts ``1 - epsilon`` on the gold class and spreads
    ``epsilon`` evenly over the other ``V - 1`` classes.
    """
    x = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {epsilon}")
    z = x.value.reshape(-1, x.shape[-1])
    n, V = z.shape
    if targets.shape[0] != n:
        raise ValueError("one target per logit row required")
    valid = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("no non-padding target tokens")
    q = np.zeros_like(z)
    if V > 1:
        q[:] = epsilon / (V - 1)
    q[np.arange(n), targets] = 1.0 - epsilon if V > 1 else 1.0
    q[~valid] = 0.0
    logp = _log_softmax(z)
    out = _new(_check(np.array(-(q * logp).sum() / count), "label_smoothed_ce"), "label_smoothed_ce")

    def fn(g):
        p = np.exp(logp)
        p[~valid] = 0.0
        _acc(x, (g * (p - q) / count).reshape(x.shape))

    _record((x,), (out,), fn)
    return out


# ---------------------------------------------------------------------------
# recurrent primitives
#
# Gate blocks are laid out [input, forget, output, candidate] along the 4d axis.


def _gates(z: np.ndarray, d: int):
    s = _sigmoid(z[:, : 3 * d])
    return s[:, :d], s[:, d : 2 * d], s[:, 2 * d :], np.tanh(z[:, 3 * d :])


def lstm_cell(x, h, c, W_x, W_h, b, mask=None) -> tuple[Tensor, Tensor]:
    """One LSTM step.

    ``x`` and ``W_x`` may be parallel sequences, in which case the input
    projection is ``sum(x_k @ W_k)``; this avoids concatenating inputs.
    Rows with ``mask == 0`` pass ``h`` and ``c`` through unchanged.
    """
    xs = [as_tensor(t) for t in (x if isinstance(x, (list, tuple)) else [x])]
    Ws = [as_tensor(t) for t in (W_x if isinstance(W_x, (list, tuple)) else [W_x])]
    h, c, W_h, b = as_tensor(h), as_tensor(c), as_tensor(W_h), as_tensor(b)
    d = h.shape[-1]
    if len(xs) != len(Ws) or c.shape != h.shape or W_h.shape != (d, 4 * d) or b.shape != (4 * d,):
        raise ValueError("lstm_cell shape mismatch")
    for xk, Wk in zip(xs, Ws):
        if xk.shape[-1] != Wk.shape[0] or Wk.shape[1] != 4 * d or xk.shape[0] != h.shape[0]:
            raise ValueError(f"lstm_cell input {xk.shape} does not fit weight {Wk.shape}")

    z = h.value @ W_h.value + b.value
    for xk, Wk in zip(xs, Ws):
        z = z + xk.value @ Wk.value
    i, f, o, g_ = _gates(z, d)
    c_new = f * c.value + i * g_
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is not None:
        m = np.asarray(mask, dtype=DTYPE).reshape(-1, 1)
        h_out = m * h_new + (1.0 - m) * h.value
        c_out = m * c_new + (1.0 - m) * c.value
    else:
        m = None
        h_out, c_out = h_new, c_new
    hout, cout = _new(h_out, "lstm_cell"), _new(c_out, "lstm_cell")

    def fn(dh_out, dc_out):
        if m is None:
            dh, dc, dh_pass, dc_pass = dh_out, dc_out, 0.0, 0.0
        else:
            dh, dc = m * dh_out, m * dc_out
            dh_pass, dc_pass = (1.0 - m) * dh_out, (1.0 - m) * dc_out
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [dc * g_ * i * (1.0 - i), dc * c.value * f * (1.0 - f), dh * tc * o * (1.0 - o),
             dc * i * (1.0 - g_ * g_)],
            axis=1,
        )
        for xk, Wk in zip(xs, Ws):
            _acc(xk, dz @ Wk.value.T)
            if Wk.requires_grad:
                _acc(Wk, xk.value.T @ dz)
        _acc(h, dz @ W_h.value.T + dh_pass)
        _acc(c, dc * f + dc_pass)
        if W_h.requires_grad:
            _acc(W_h, h.value.T @ dz)
        if b.requires_grad:
            _acc(b, dz.sum(axis=0))

    _record((*xs, h, c, *Ws, W_h, b), (hout, cout), fn)
    return hout, cout


def lstm_layer(X, W_x, W_h, b, mask=None, reverse: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """Run an LSTM over ``X`` [n, T, i] from zero state.

    Returns ``(outputs [n, T, d], h_last [n, d], c_last [n, d])``.  Masked
    positions emit zeros and leave the state untouched, so ``h_last`` is the
    state after each row's final real token (in processing order).
    """
    X, W_x, W_h, b = as_tensor(X), as_tensor(W_x), as_tensor(W_h), as_tensor(b)
    n, T, _ = X.shape
    d = W_h.shape[0]
    if W_x.shape != (X.shape[2], 4 * d) or W_h.shape != (d, 4 * d) or b.shape != (4 * d,):
        raise ValueError("lstm_layer shape mismatch")
    M = np.ones((n, T), dtype=DTYPE) if mask is None else np.asarray(mask, dtype=DTYPE)
    order = range(T - 1, -1, -1) if reverse else range(T)

    Zx = X.value @ W_x.value + b.value
    Wh = W_h.value
    steps = list(order)
    cache: list = [None] * T
    H = np.zeros((n, T, d))
    h = np.zeros((n, d))
    c = np.zeros((n, d))
    for t in steps:
        i, f, o, g_ = _gates(Zx[:, t] + h @ Wh, d)
        c_new = f * c + i * g_
        tc = np.tanh(c_new)
        m = M[:, t : t + 1]
        cache[t] = (h, c, i, f, o, g_, tc, m)
        h = m * (o * tc) + (1.0 - m) * h
        c = m * c_new + (1.0 - m) * c
        H[:, t] = m * h
    outs = (_new(H, "lstm_layer"), _new(h, "lstm_layer"), _new(c, "lstm_layer"))

    def fn(dH, dh_last, dc_last):
        dZ = np.empty((n, T, 4 * d))
        Hprev = np.empty((n, T, d))
        dh = dh_last
        dc = dc_last
        for t in reversed(steps):
            h_prev, c_prev, i, f, o, g_, tc, m = cache[t]
            # state after step t is m*new + (1-m)*prev; the emitted output is m*h
            dh_t = dh + m * dH[:, t]
            dhn = m * dh_t
            dcn = m * dc + dhn * o * (1.0 - tc * tc)
            dci = dcn * i
            dz = np.concatenate(
                [dcn * g_ * i * (1.0 - i), dcn * c_prev * f * (1.0 - f),
                 dhn * tc * o * (1.0 - o), dci * (1.0 - g_ * g_)],
                axis=1,
            )
            dZ[:, t] = dz
            Hprev[:, t] = h_prev
            dh = dz @ Wh.T + (1.0 - m) * dh_t
            dc = dcn * f + (1.0 - m) * dc
        flat = dZ.reshape(n * T, 4 * d)
        _acc(X, dZ @ W_x.value.T)
        if W_x.requires_grad:
            _acc(W_x, X.value.reshape(n * T, -1).T @ flat)
        if W_h.requires_grad:
            _acc(W_h, Hprev.reshape(n * T, d).T @ flat)
        if b.requires_grad:
            _acc(b, flat.sum(axis=0))

    _record((X, W_x, W_h, b), outs, fn)
    return outs


def attention(query, keys, mask=None) -> tuple[Tensor, Tensor]:
    """Batched dot-product attention.

    ``query`` [n, H], ``keys`` [n, T, H]; returns ``(context [n, H],
    weights [n, T])``.  Masked positions get zero weight.
    """
    q, K = as_tensor(query), as_tensor(keys)
    if K.value.ndim != 3 or q.shape != (K.shape[0], K.shape[2]):
        raise ValueError(f"attention shape mismatch: query {q.shape}, keys {K.shape}")
    scores = np.einsum("nth,nh->nt", K.value, q.value)
    if mask is not None:
        scores = np.where(np.asarray(mask, dtype=bool), scores, _MASKED_SCORE)
    a = _softmax(scores)
    ctx = np.einsum("nt,nth->nh", a, K.value)
    c_out, a_out = _new(ctx, "attention"), _new(a, "attention")

    def fn(dctx, da):
        da = da + np.einsum("nth,nh->nt", K.value, dctx)
        ds = a * (da - (a * da).sum(axis=1, keepdims=True))
        _acc(q, np.einsum("nt,nth->nh", ds, K.value))
        if K.requires_grad:
            _acc(K, a[:, :, None] * dctx[:, None, :] + ds[:, :, None] * q.value[:, None, :])

    _record((q, K), (c_out, a_out), fn)
    return c_out, a_out


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[], Tensor], param, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` rebuilds the scalar graph from the current parameter values;
    ``param`` is a :class:`freezenmt.params.Parameter`.
    """
    saved = param.grad.copy()
    param.grad[...] = 0.0
    with Tape():
        loss = f()
        _finite_scalar(loss)
        backward(loss)
    analytic = param.grad.copy()
    param.grad[...] = saved

    numeric = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = _finite_scalar(f())
        flat[k] = orig - eps
        down = _finite_scalar(f())
        flat[k] = orig
        numeric.reshape(-1)[k] = (up - down) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


def _finite_scalar(t: Tensor) -> float:
    v = float(np.asarray(t.value).reshape(()))
    if not np.isfinite(v):
        raise NumericalError("objective is not finite")
    return v


def seeded_rng(seed: int) -> np.random.Generator:
    """The project-wide generator: numpy PCG64 seeded with a 64-bit integer."""
    return np.random.Generator(np.random.PCG64(seed & 0xFFFFFFFFFFFFFFFF))
