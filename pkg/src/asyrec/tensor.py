"""Dense float64 tensors with a reverse-mode differentiation tape.

Every differentiable op appends one node to the active :class:`Tape`; the
node keeps the input tensors and a closure that maps the output gradient to
input gradients.  ``backward`` walks the tape once in reverse append order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "tensor", "constant", "no_grad", "backward",
    "matmul", "softmax", "masked_softmax", "unary_map", "relu", "leaky_relu",
    "sin", "cos", "exp", "log", "concat", "reduce_mean", "reduce_sum",
    "reshape", "transpose", "clamp_min", "cross_entropy", "grad_check",
]


class Tape:
    """Append-only record of differentiable ops.

    ``nodes[k]`` is ``(op, inputs, backward_fn)``; inputs of node ``k`` are
    leaves or outputs of nodes with a smaller index.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[str, tuple["Tensor", ...], Callable]] = []
        self.consumed = False

    def record(self, op: str, inputs: tuple["Tensor", ...], fn: Callable) -> int:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward(); start a new Tape")
        self.nodes.append((op, inputs, fn))
        return len(self.nodes) - 1

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack.remove(self)


_stack: list[Tape] = []
_default: list[Tape] = [Tape()]
_grad_enabled = [True]


def _active_tape() -> Tape:
    return _stack[-1] if _stack else _default[0]


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (evaluation)."""
    prev = _grad_enabled[0]
    _grad_enabled[0] = False
    try:
        yield
    finally:
        _grad_enabled[0] = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.tape_id = None
    out._tape = None
    out.requires_grad = False
    if _grad_enabled[0] and any(t.requires_grad for t in inputs):
        tape = _active_tape()
        out.requires_grad = True
        out._tape = tape
        out.tape_id = tape.record(op, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)``; gradient flows only where ``x > floor``."""
    keep = x.data > floor
    return _make("clamp_min", np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


def unary_map(kind: str, x: Tensor, alpha: float = 0.01) -> Tensor:
    """Apply ``relu``, ``leaky_relu``, ``sin``, ``cos``, ``exp`` or ``log`` elementwise.

    The subgradient at the ReLU / LeakyReLU kink is 0 (no slope term either).
    """
    d = x.data
    if kind == "relu":
        pos = d > 0
        return _make(kind, np.where(pos, d, 0.0), (x,), lambda g: (g * pos,))
    if kind == "leaky_relu":
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
        slope = np.where(d > 0, 1.0, np.where(d < 0, alpha, 0.0))
        return _make(kind, np.where(d > 0, d, alpha * d), (x,), lambda g: (g * slope,))
    if kind == "sin":
        return _make(kind, np.sin(d), (x,), lambda g: (g * np.cos(d),))
    if kind == "cos":
        return _make(kind, np.cos(d), (x,), lambda g: (-g * np.sin(d),))
    if kind == "exp":
        out = np.exp(d)
        return _make(kind, out, (x,), lambda g: (g * out,))
    if kind == "log":
        return _make(kind, np.log(d), (x,), lambda g: (g / d,))
    raise ValueError(f"unknown unary kind {kind!r}")


def relu(x: Tensor) -> Tensor:
    return unary_map("relu", x)


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    return unary_map("leaky_relu", x, alpha)


def sin(x: Tensor) -> Tensor:
    return unary_map("sin", x)


def cos(x: Tensor) -> Tensor:
    return unary_map("cos", x)


def exp(x: Tensor) -> Tensor:
    return unary_map("exp", x)


def log(x: Tensor) -> Tensor:
    return unary_map("log", x)


# ---------------------------------------------------------------- structural

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast like ``numpy.matmul``."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", a.data @ b.data, (a, b), fn)


def reshape(x: Tensor, shape) -> Tensor:
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make("getitem", x.data[idx], (x,), fn)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_wrap(x) for x in xs]
    if not xs:
        raise ValueError("concat of an empty sequence")
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(s != r for k, (s, r) in enumerate(zip(x.shape, ref)) if k != ax):
            raise ValueError(f"concat shape mismatch on axis {axis}: {[x.shape for x in xs]}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _make("concat", np.concatenate([x.data for x in xs], axis=ax), tuple(xs),
                 lambda g: tuple(np.split(g, bounds, axis=ax)))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), fn)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for rank {x.ndim}")
    n = x.size if axis is None else x.shape[axis]

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make("mean", x.data.mean(axis=axis, keepdims=keepdims), (x,), fn)


# ---------------------------------------------------------------- normalisers

def _softmax_np(d: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for rank {x.ndim}")
    s = _softmax_np(x.data, axis)
    return _make("softmax", s, (x,),
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to entries where ``mask`` is true.

    Masked entries are exactly 0. A slice with no admissible entry is all 0.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    d = np.where(mask, x.data, -np.inf)
    top = d.max(axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(d - top), 0.0)
    z = e.sum(axis=axis, keepdims=True)
    s = e / np.where(z > 0, z, 1.0)
    return _make("masked_softmax", s, (x,),
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def cross_entropy(logits: Tensor, label, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``label`` under ``softmax(logits)``.

    ``logits`` is ``(C,)`` with an integer label, or ``(B, C)`` with ``B``
    labels; ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` for batches.
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z.reshape(1, -1) if single else z
    y = np.atleast_1d(np.asarray(label)).astype(np.int64)
    n_classes = z2.shape[-1]
    if y.shape[0] != z2.shape[0]:
        raise ValueError(f"{y.shape[0]} labels for {z2.shape[0]} rows of logits")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes: {y.tolist()}")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(z2.shape[0])
    losses = -logp[rows, y]
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    onehot[rows, y] = 1.0
    if single or reduction == "sum":
        out, scale = losses.sum(), 1.0
    elif reduction == "mean":
        out, scale = losses.mean(), 1.0 / z2.shape[0]
    elif reduction == "none":
        return _make("cross_entropy", losses, (logits,),
                     lambda g: ((p - onehot) * g[:, None],))
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return _make("cross_entropy", np.asarray(out), (logits,),
                 lambda g: (((p - onehot) * (g * scale)).reshape(z.shape),))


# ---------------------------------------------------------------- reverse pass

def backward(loss: Tensor, params: Iterable[Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Returns the gradients of ``params`` (zeros for params the loss does not
    touch) when ``params`` is given.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss is not on a tape (no input requires grad)")
    if tape.consumed:
        raise RuntimeError("backward() already ran on this tape; reset it first")
    grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    for k in range(loss.tape_id, -1, -1):
        g = grads.pop(k, None)
        if g is None:
            continue
        _, inputs, fn = tape.nodes[k]
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is tape and inp.tape_id is not None:
                prev = grads.get(inp.tape_id)
                grads[inp.tape_id] = gi if prev is None else prev + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    tape.consumed = True
    if tape is _default[0]:
        _default[0] = Tape()
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is called with no arguments and must read the current values of
    ``params``; the error per coordinate is ``|ad - fd| / max(1, |ad|, |fd|)``.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step {step} outside [1e-7, 1e-3]")
    for p in params:
        p.grad = None
    with Tape():
        out = f()
        if out._tape is None:
            analytic = [np.zeros_like(p.data) for p in params]
        else:
            analytic = backward(out, params)
    worst = 0.0
    with no_grad():
        for p, ad in zip(params, analytic):
            flat = p.data.reshape(-1)
            adf = ad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f().data)
                flat[i] = orig - step
                fm = float(f().data)
                flat[i] = orig
                fd = (fp - fm) / (2.0 * step)
                err = abs(adf[i] - fd) / max(1.0, abs(adf[i]), abs(fd))
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst

