"""A small reverse-mode autodiff tape over 2-D float64 arrays.

Operations record onto the active :class:`Tape` (entered with ``with``) when
at least one input takes part in gradient computation.  Without an active
tape every op is a plain numpy computation.

    with Tape() as tape:
        loss = nll_loss(log_softmax_rows(matmul(x, w)), y, idx)
    backward(tape, loss)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .binio import Reader, Writer
from .errors import NumericalError, ShapeError, ValidationError

CHECKPOINT_MAGIC = b"GCNW"
CHECKPOINT_VERSION = 1

_tapes: list = []
_check_finite = False


def set_check_finite(flag: bool) -> bool:
    """Toggle the NaN/Inf assertion run after every op; returns the old value."""
    global _check_finite
    old, _check_finite = _check_finite, bool(flag)
    return old


def _as2d(data) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got shape {a.shape}")
    return a


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as2d(data)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._from_op = False

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data[0, 0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Parameter(Tensor):
    """Learnable tensor with a gradient accumulator and Adam moments."""

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: set[int] = set()

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def contains(self, t: Tensor) -> bool:
        return id(t) in self._outputs


class no_grad:
    """Suspend recording for the enclosed block."""

    def __enter__(self):
        self._saved = _tapes[:]
        _tapes.clear()

    def __exit__(self, *exc):
        _tapes.extend(self._saved)
        return False


def _finish(data, inputs, backward_fn) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value produced")
    out = Tensor(data)
    if _tapes and any(t.requires_grad for t in inputs):
        tape = _tapes[-1]
        out.requires_grad = True
        out._from_op = True
        tape.records.append(_Record(out, inputs, backward_fn))
        tape._outputs.add(id(out))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    ar, ac = a.shape
    br, bc = b.shape
    if (br, bc) == (ar, ac):
        return
    if br in (1, ar) and bc in (1, ac):
        return
    raise ShapeError(f"{op}: cannot combine {a.shape} with {b.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _finish(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; ``b`` may be a row vector or a 1x1 scalar broadcast over ``a``."""
    _check_broadcast(a, b, "add")
    return _finish(
        a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, b.shape))
    )


def add_scaled(a: Tensor, b: Tensor, alpha: float) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add_scaled: {a.shape} vs {b.shape}")
    alpha = float(alpha)
    return _finish(a.data + alpha * b.data, (a, b), lambda g: (g, alpha * g))


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    return _finish(alpha * a.data, (a,), lambda g: (alpha * g,))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "elementwise_mul")
    return _finish(
        a.data * b.data,
        (a, b),
        lambda g: (g * b.data, _unbroadcast(g * a.data, b.shape)),
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _finish(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sum_all(a: Tensor) -> Tensor:
    return _finish(
        np.array([[a.data.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),)
    )


def take_row(a: Tensor, k: int) -> Tensor:
    def bw(g):
        out = np.zeros(a.shape)
        out[k] = g[0]
        return (out,)

    return _finish(a.data[k : k + 1].copy(), (a,), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def spmm(adj, x: Tensor) -> Tensor:
    """Sparse (CSR) times dense; gradient flows through the transpose."""
    if adj.num_nodes != x.shape[0]:
        raise ShapeError(f"spmm: adjacency over {adj.num_nodes} nodes, x has {x.shape[0]} rows")
    m = adj.matrix
    return _finish(np.asarray(m @ x.data), (x,), lambda g: (np.asarray(m.T @ g),))


# ------------------------------------------------------------- normalization


class NormParams:
    """Scale/shift and running statistics for batch or layer normalization."""

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.9, name: str = "norm"):
        if eps <= 0:
            raise ValidationError("eps must be positive")
        self.gamma = Parameter(np.ones((1, dim)), name=f"{name}.gamma")
        self.theta = Parameter(np.zeros((1, dim)), name=f"{name}.theta")
        self.running_mean = np.zeros((1, dim))
        self.running_var = np.ones((1, dim))
        self.eps = eps
        self.momentum = momentum
        # when set, training-mode calls leave the running statistics alone
        self.frozen = False

    def parameters(self):
        return [self.gamma, self.theta]


def _normalize(x: Tensor, p: NormParams, mean, var, axis, batch_stats: bool) -> Tensor:
    sigma = np.sqrt(var + p.eps)
    xhat = (x.data - mean) / sigma
    out = xhat * p.gamma.data + p.theta.data
    n = x.shape[axis]

    def bw(g):
        dgamma = (g * xhat).sum(axis=0, keepdims=True)
        dtheta = g.sum(axis=0, keepdims=True)
        dxhat = g * p.gamma.data
        if batch_stats:
            dx = (
                n * dxhat
                - dxhat.sum(axis=axis, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axis, keepdims=True)
            ) / (n * sigma)
        else:
            dx = dxhat / sigma
        return dx, dgamma, dtheta

    return _finish(out, (x, p.gamma, p.theta), bw)


def batch_norm(x: Tensor, p: NormParams, training: bool) -> Tensor:
    """Column-wise normalization with biased batch variance in training mode."""
    if x.shape[0] == 0:
        raise ShapeError("batch_norm on an empty batch")
    if x.shape[1] != p.gamma.shape[1]:
        raise ShapeError(f"batch_norm: {x.shape[1]} columns vs {p.gamma.shape[1]} parameters")
    if training:
        mean = x.data.mean(axis=0, keepdims=True)
        var = x.data.var(axis=0, keepdims=True)
        if not p.frozen:
            p.running_mean = p.momentum * p.running_mean + (1 - p.momentum) * mean
            p.running_var = p.momentum * p.running_var + (1 - p.momentum) * var
        return _normalize(x, p, mean, var, 0, True)
    return _normalize(x, p, p.running_mean, p.running_var, 0, False)


def layer_norm(x: Tensor, p: NormParams, training: bool = True) -> Tensor:
    """Row-wise variant of :func:`batch_norm`; ``training`` is ignored."""
    if x.shape[1] != p.gamma.shape[1]:
        raise ShapeError(f"layer_norm: {x.shape[1]} columns vs {p.gamma.shape[1]} parameters")
    mean = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    return _normalize(x, p, mean, var, 1, True)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValidationError("dropout rate must lie in [0, 1)")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _finish(x.data * mask, (x,), lambda g: (g * mask,))


# ----------------------------------------------------------- softmax & loss


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _finish(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def softmax_vec(v: Tensor) -> Tensor:
    if v.shape[0] != 1:
        raise ShapeError("softmax_vec expects a single row")
    return softmax(v, axis=1)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _finish(out, (x,), lambda g: (g - s * g.sum(axis=1, keepdims=True),))


def nll_loss(logp: Tensor, labels, mask) -> Tensor:
    """Mean of ``-logp[i, labels[i]]`` over the node indices in ``mask``."""
    mask = np.asarray(mask, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if mask.size == 0:
        raise ValidationError("nll_loss over an empty mask")
    y = labels[mask]
    if np.any(y < 0) or np.any(y >= logp.shape[1]):
        raise ValidationError("nll_loss mask contains unlabeled nodes")
    loss = -logp.data[mask, y].mean()

    def bw(g):
        out = np.zeros(logp.shape)
        np.add.at(out, (mask, y), -g[0, 0] / mask.size)
        return (out,)

    return _finish(np.array([[loss]]), (logp,), bw)


# ------------------------------------------------------------------ backward


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.contains(loss):
        raise ValidationError("loss was not recorded on this tape")
    adj = {id(loss): np.ones((1, 1))}
    for rec in reversed(tape.records):
        g = adj.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._from_op:
                key = id(inp)
                adj[key] = adj[key] + gi if key in adj else gi
            else:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0) -> None:
    """Bias-corrected Adam with decoupled weight decay, in place."""
    for p in params:
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.step += 1
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        with np.errstate(over="ignore"):
            p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        # an overflowed second moment would silently zero the update
        if not (np.isfinite(p.m).all() and np.isfinite(p.v).all()):
            raise NumericalError("optimizer moments are no longer finite")
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Holds the parameter list and hyper-parameters for :func:`adam_step`."""

    def __init__(self, params, lr=0.01, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


# ----------------------------------------------------------------- gradcheck


@dataclass
class GradcheckResult:
    ok: bool
    max_abs_err: float
    max_rel_err: float


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``fn()`` with respect to the entries of ``t``."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return out


def gradcheck(fn, tensors, h=1e-6, rtol=1e-5, atol=1e-8) -> GradcheckResult:
    """Compare tape gradients of ``fn()`` against central differences.

    An entry passes when ``|a - n| <= atol`` or ``|a - n| <= rtol * max(|a|, |n|)``.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    ok, max_abs, max_rel = True, 0.0, 0.0
    for t in tensors:
        a = t.grad.copy()
        n = numeric_grad(fn, t, h)
        err = np.abs(a - n)
        scale_ = np.maximum(np.abs(a), np.abs(n))
        rel = np.where(err > atol, err / np.maximum(scale_, 1e-300), 0.0)
        max_abs = max(max_abs, float(err.max(initial=0.0)))
        max_rel = max(max_rel, float(rel.max(initial=0.0)))
        if np.any((err > atol) & (err > rtol * scale_)):
            ok = False
    return GradcheckResult(ok, max_abs, max_rel)


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(path, arrays) -> None:
    """Write ordered ``(name, 2-D array)`` records to a ``GCNW`` file."""
    items = list(arrays.items()) if isinstance(arrays, dict) else list(arrays)
    with open(path, "wb") as fh:
        w = Writer(fh)
        w.magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        w.u64(len(items))
        for name, arr in items:
            arr = _as2d(arr)
            w.string(name)
            w.u64(arr.shape[0])
            w.u64(arr.shape[1])
            w.array(arr, "<f8")


def load_checkpoint(path) -> dict:
    out = {}
    with open(path, "rb") as fh:
        r = Reader(fh)
        r.magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        for _ in range(r.u64()):
            name = r.string()
            rows, cols = r.u64(), r.u64()
            out[name] = r.array(rows * cols, "<f8", (rows, cols))
        r.expect_eof()
    return out
