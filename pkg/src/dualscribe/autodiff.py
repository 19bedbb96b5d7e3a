"""Dense float64 tensors with tape-based reverse-mode differentiation.

The design is deliberately small: row-major numpy storage, no views (ops
copy), gradients accumulate with ``+=`` and are cleared explicitly.  A
``Tape`` records every differentiable op in execution order; ``backward``
walks it once in reverse.  Everything a single forward/backward pass needs
lives here and nothing else does.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import InvariantError, ShapeError

# Flipped on via checked_mode(); every op then validates that its output is
# finite, which turns silent NaN/Inf propagation into a loud failure.
_CHECK_FINITE = False


@contextmanager
def checked_mode(enabled: bool = True):
    """Context manager enabling finite-value validation on every op output."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def _validate_finite(arr: np.ndarray, where: str) -> None:
    if _CHECK_FINITE and not np.isfinite(arr).all():
        raise InvariantError(f"non-finite values produced by {where}")


class Tensor:
    """A dense float64 array, optionally carrying a gradient buffer.

    ``data`` is always C-contiguous (row-major).  ``grad`` is either None
    or an array of the same shape; ops never touch it, only ``backward``
    and ``zero_grad`` do.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _validate_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _TapeRecord:
    __slots__ = ("name", "inputs", "out", "backward_fn")

    def __init__(self, name, inputs, out, backward_fn):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed differentiable ops.

    Ops append themselves in execution order, so the list is topologically
    sorted by construction: an op's inputs always appear before the op.
    Used as a context manager; ops executed outside any active tape are
    pure forward computations.
    """

    def __init__(self):
        self.records: list[_TapeRecord] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self.records)


_TAPE_STACK: list[Tape | None] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def no_grad():
    """Suspend recording; forwards inside run without building a tape."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def _record(name, inputs, out_data, backward_fn) -> Tensor:
    """Wrap an op result, registering it on the active tape if any."""
    _validate_finite(out_data, name)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out.tape = None
    tape = _active_tape()
    if tape is not None and (
        any(t.requires_grad or t.tape is not None for t in inputs)
    ):
        out.tape = tape
        tape.records.append(_TapeRecord(name, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from loss.

    Walks the recording tape once, in reverse execution order.  Gradients
    of tensors not on the path to ``loss`` are left untouched.  The walk is
    fully deterministic: same tape, same accumulation order, bitwise-equal
    grads.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        # Loss does not depend on any differentiable input: nothing to do.
        return
    # id -> [tensor, accumulated gradient]; leaves survive the walk.
    pending: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    for rec in reversed(tape.records):
        slot = pending.pop(id(rec.out), None)
        if slot is None:
            continue  # op not an ancestor of the loss
        upstream = slot[1]
        _validate_finite(upstream, f"backward of {rec.name}")
        input_grads = rec.backward_fn(upstream)
        for tensor, grad in zip(rec.inputs, input_grads):
            if grad is None:
                continue
            held = pending.get(id(tensor))
            if held is None:
                pending[id(tensor)] = [tensor, grad]
            else:
                held[1] = held[1] + grad
    for tensor, grad in pending.values():
        if tensor.requires_grad:
            tensor.accumulate_grad(grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape`` (leading batch dims)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; batch dims broadcast, inner dims must agree."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims incompatible: {a.shape} x {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", (a, b), out, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def bw(g):
        return g * b.data, g * a.data

    return _record("mul", (a, b), out, bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    x = _as_tensor(x)
    c = float(c)
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def concat(parts, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(
            f"concat shapes incompatible on axis {axis}: "
            f"{[p.shape for p in parts]}"
        ) from exc
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return _record("concat", tuple(parts), out, bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = np.ascontiguousarray(x.data.reshape(shape))
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _record("transpose", (x,), out, lambda g: (g.transpose(inv),))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())
    return _record("sum_all", (x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out = d * cdf

    def bw(g):
        pdf = np.exp(-0.5 * d * d) * _INV_SQRT_2PI
        return (g * (cdf + d * pdf),)

    return _record("gelu", (x,), out, bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), "
            f"got gain {gain.shape}, bias {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _record("layer_norm", (x, gain, bias), out, bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last axis; houses every learned projection."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
    out = np.matmul(x.data, w.data) + b.data

    def bw(g):
        gx = np.matmul(g, w.data.T)
        g2 = g.reshape(-1, w.shape[1])
        gw = np.matmul(x.data.reshape(-1, w.shape[0]).T, g2)
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return _record("linear", (x, w, b), out, bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer ids (any id-array shape)."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise ShapeError(
            f"embedding id out of range [0, {n_rows}): min={ids.min()}, max={ids.max()}"
        )
    out = np.ascontiguousarray(table.data[ids])

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _record("embedding_lookup", (table,), out, bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; rows sum to 1."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (x,), out, bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout.  With rng=None (eval) or rate 0 it is the identity."""
    x = _as_tensor(x)
    if rng is None or rate <= 0.0:
        return x
    if not 0.0 < rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def nll_loss(logits: Tensor, targets, pad_mask=None) -> Tensor:
    """Mean cross-entropy over non-padded positions.

    ``logits`` is [..., V]; ``targets`` holds token ids with the leading
    shape of ``logits``; ``pad_mask`` (same shape as targets, True at
    padding) zeroes a position's contribution and removes it from the mean.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits {logits.shape}"
        )
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(
            f"target id out of range [0, {v}): min={targets.min()}, max={targets.max()}"
        )
    if pad_mask is None:
        pad_mask = np.zeros(targets.shape, dtype=bool)
    else:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if pad_mask.shape != targets.shape:
            raise ShapeError(
                f"pad_mask shape {pad_mask.shape} does not match targets {targets.shape}"
            )
    keep = ~pad_mask
    count = int(keep.sum())
    if count == 0:
        raise ShapeError("nll_loss: every position is padding")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    out = np.asarray(-(picked * keep).sum() / count)

    def bw(g):
        probs = np.exp(log_probs)
        grad = probs.copy()
        np.subtract.at(
            grad.reshape(-1, v), (np.arange(targets.size), targets.reshape(-1)), 1.0
        )
        grad *= (float(g) / count) * keep[..., None]
        return (grad,)

    return _record("nll_loss", (logits,), out, bw)
