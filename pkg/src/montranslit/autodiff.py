"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tape` records every operation whose inputs are on it; calling
:func:`backward` on a scalar result walks the recording in reverse exactly
once and accumulates gradients into the :class:`Parameter` objects that
were watched on that tape.  Tensors without a tape compute eagerly with no
recording, which is how inference runs.

Scalars are shape ``(1,)``; rank-0 arrays are promoted on construction.
numpy provides the raw array arithmetic, all differentiation bookkeeping
lives here.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonScalarBackward(ValueError):
    """backward() called on a tensor that is not a scalar."""


class EmptyLossError(ValueError):
    """A masked loss with no unmasked positions."""


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        taped = "" if self.tape is None else f" node={self.node}"
        return f"Tensor(shape={self.shape}{taped})"

    # operator sugar; scalars and arrays are wrapped as constants
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

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


class Parameter:
    """A named trainable array with a same-shape gradient accumulator."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        if self.value.ndim == 0:
            self.value = self.value.reshape(1)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tape:
    """Ordered operation record; recording order is topological order."""

    def __init__(self):
        self._parents: list[list[tuple[int, Callable[[np.ndarray], np.ndarray]]]] = []
        self._params: dict[int, Parameter] = {}
        self._grads: list[np.ndarray | None] | None = None
        self._used = False

    def _record(self, out_data: np.ndarray, parents) -> Tensor:
        node = len(self._parents)
        self._parents.append(parents)
        return Tensor(out_data, self, node)

    def leaf(self, data) -> Tensor:
        """Register an input tensor whose gradient can be queried later."""
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        return self._record(arr, [])

    def watch(self, param: Parameter) -> Tensor:
        """Bind a parameter's value to this tape; backward() fills its grad."""
        t = self.leaf(param.value)
        self._params[t.node] = param
        return t

    def grad_of(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward() result w.r.t. a tensor on this tape."""
        if self._grads is None:
            raise RuntimeError("grad_of() before backward()")
        if tensor.tape is not self or tensor.node is None:
            raise ValueError("tensor is not recorded on this tape")
        g = self._grads[tensor.node]
        return np.zeros_like(tensor.data) if g is None else g


def backward(loss: Tensor, params: list[Parameter] | None = None) -> None:
    """Reverse-topological gradient accumulation from a scalar loss.

    Populates ``param.grad`` for every parameter watched on the loss's tape
    (parameters unreachable from the loss receive zero).  A tape can be
    walked once; a second call raises.
    """
    if loss.size != 1:
        raise NonScalarBackward(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or loss.node is None:
        raise ValueError("loss is not recorded on a tape")
    if tape._used:
        raise RuntimeError("tape already consumed by a previous backward()")
    tape._used = True
    grads: list[np.ndarray | None] = [None] * len(tape._parents)
    grads[loss.node] = np.ones_like(loss.data)
    for node in range(loss.node, -1, -1):
        g = grads[node]
        if g is None:
            continue
        for parent, pull in tape._parents[node]:
            contrib = pull(g)
            if grads[parent] is None:
                grads[parent] = contrib.copy()
            else:
                grads[parent] += contrib
    tape._grads = grads
    for node, param in tape._params.items():
        g = grads[node]
        if g is not None:
            param.grad += g


# ---------------------------------------------------------------------------
# operation plumbing


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _emit(tape: Tape | None, out: np.ndarray, parents) -> Tensor:
    """parents: (tensor, pull) pairs; off-tape operands are dropped."""
    if tape is None:
        return Tensor(out)
    live = [(t.node, pull) for t, pull in parents if t.tape is not None]
    return tape._record(out, live)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _emit(
        _tape_of(a, b),
        out,
        [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ],
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _emit(
        _tape_of(a, b),
        out,
        [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ],
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _emit(
        _tape_of(a, b),
        out,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ],
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 1:
        k = a.shape[0]
        return reshape(matmul(reshape(a, (1, k)), b), _matmul_out_shape_1d(a, b))
    if b.ndim == 1:
        k = b.shape[0]
        out2 = matmul(a, reshape(b, (k, 1)))
        return reshape(out2, out2.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} vs {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul broadcast failure: {a.shape} vs {b.shape}") from exc

    def pull_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)

    def pull_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return _emit(_tape_of(a, b), out, [(a, pull_a), (b, pull_b)])


def _matmul_out_shape_1d(a: Tensor, b: Tensor) -> tuple[int, ...]:
    return b.shape[:-2] + (b.shape[-1],) if b.ndim > 1 else (1,)


# ---------------------------------------------------------------------------
# activations and normalizers


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _emit(_tape_of(x), out, [(x, lambda g: g * (1.0 - out * out))])


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return _emit(_tape_of(x), out, [(x, lambda g: g * out * (1.0 - out))])


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)
    mask = (x.data > 0.0).astype(np.float64)
    return _emit(_tape_of(x), out, [(x, lambda g: g * mask)])


def softmax(x) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def pull(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return _emit(_tape_of(x), out, [(x, pull)])


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    """Stable log-softmax on a plain array (inference helper, not taped)."""
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Per-row standardization over the last axis, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = gain.data * xn + bias.data

    def pull_x(g):
        gxn = g * gain.data
        term = gxn - gxn.mean(axis=-1, keepdims=True) - xn * (gxn * xn).mean(axis=-1, keepdims=True)
        return term * inv

    def pull_gain(g):
        return _unbroadcast(g * xn, gain.shape)

    def pull_bias(g):
        return _unbroadcast(g, bias.shape)

    if d < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    return _emit(
        _tape_of(x, gain, bias), out, [(x, pull_x), (gain, pull_gain), (bias, pull_bias)]
    )


# ---------------------------------------------------------------------------
# lookups and losses


def embedding_lookup(table, ids) -> Tensor:
    """Row gather; the backward pass scatter-adds into the table gradient."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"id out of range for table with {table.shape[0]} rows: "
            f"{int(idx.min())}..{int(idx.max())}"
        )
    out = table.data[idx]

    def pull(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return acc

    return _emit(_tape_of(table), out, [(table, pull)])


def cross_entropy(logits, targets, pad_mask=None, label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood over unmasked positions.

    ``logits`` may be ``[T, V]`` or ``[B, T, V]``; trailing axis is the
    class axis.  Log-sum-exp stabilized; optional label smoothing mixes the
    one-hot target with the uniform distribution.
    """
    logits = _as_tensor(logits)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ShapeError(
            f"targets length {tgt.shape[0]} != logit rows {flat.shape[0]}"
        )
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError(f"target id out of range for {v} classes")
    if pad_mask is None:
        mask = np.ones(flat.shape[0], dtype=np.float64)
    else:
        mask = np.asarray(pad_mask, dtype=np.float64).reshape(-1)
    live = mask.sum()
    if live <= 0:
        raise EmptyLossError("all positions masked out of the loss")

    m = flat.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(flat - m).sum(axis=-1, keepdims=True))).reshape(-1)
    picked = flat[np.arange(flat.shape[0]), tgt]
    eps = label_smoothing
    expected = (1.0 - eps) * picked + (eps / v) * flat.sum(axis=-1)
    per_pos = lse - expected
    out = np.array([(per_pos * mask).sum() / live])

    def pull(g):
        soft = np.exp(flat - lse[:, None])
        q = np.full_like(flat, eps / v)
        q[np.arange(flat.shape[0]), tgt] += 1.0 - eps
        d = (soft - q) * (mask / live)[:, None] * g.reshape(-1)[0]
        return d.reshape(logits.shape)

    return _emit(_tape_of(logits), out, [(logits, pull)])


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    return _emit(_tape_of(x), out, [(x, lambda g: g.reshape(x.shape))])


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _emit(_tape_of(x), out, [(x, lambda g: g.transpose(inverse))])


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    parents = []
    offset = 0
    for t in ts:
        start, length = offset, t.shape[axis]
        offset += length

        def pull(g, start=start, length=length):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + length)
            return g[tuple(sl)]

        parents.append((t, pull))
    return _emit(_tape_of(*ts), out, parents)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    x = _as_tensor(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = x.data[sl]

    def pull(g):
        acc = np.zeros_like(x.data)
        acc[sl] = g
        return acc

    return _emit(_tape_of(x), out, [(x, pull)])


def stack(tensors, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = _as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else t.ndim + 1 + axis, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    if out.ndim == 0:
        out = out.reshape(1)

    def pull(g):
        if axis is None:
            return np.full(x.shape, g.reshape(-1)[0])
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis=axis)
        return np.broadcast_to(gg, x.shape).copy()

    return _emit(_tape_of(x), out, [(x, pull)])


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return _as_tensor(x)
    x = _as_tensor(x)
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(f, x, h: float = 1e-5) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f`` takes one Tensor and returns a scalar Tensor; it must be pure in
    its argument.  Relative error per coordinate is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(base)
    out = f(xt)
    if out.size != 1:
        raise NonScalarBackward("finite_difference_check needs a scalar-valued f")
    backward(out)
    analytic = tape.grad_of(xt)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f(Tensor(base)).item()
        flat[i] = keep - h
        lo = f(Tensor(base)).item()
        flat[i] = keep
        num_flat[i] = (hi - lo) / (2.0 * h)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0


def finite_difference_check_params(
    loss_fn, params: list[Parameter], h: float = 1e-5
) -> float:
    """Gradient check for every coordinate of every parameter.

    ``loss_fn(tape)`` must rebuild the forward pass, watching parameters on
    the given tape (or computing tape-free when called with ``None``).
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    backward(loss_fn(tape))
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            hi = loss_fn(None).item()
            flat[i] = keep - h
            lo = loss_fn(None).item()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * h)
            analytic = gflat[i]
            err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
