"""Dense-tensor math with tape-based reverse-mode automatic differentiation.

Everything is float64. Operations record their backward closures on the
currently active :class:`Tape`; with no active tape they run untracked,
which is how inference-mode code avoids the recording cost.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

CHECKPOINT_FORMAT = 1


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


class Tensor:
    """A dense float64 array plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """A leaf tensor with a stable identifier and persistent gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


_ACTIVE_TAPE: Optional["Tape"] = None


class Tape:
    """Ordered record of primitive applications.

    Entries are output tensors appended in creation order, which is
    automatically a topological order of the computation graph.
    """

    def __init__(self):
        self.entries: list[Tensor] = []
        self.consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False


def _record(out: Tensor):
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.entries.append(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor, tape: Optional[Tape] = None):
    """Accumulate d(loss)/d(t) into .grad for every tensor reachable from loss.

    The tape is marked consumed afterwards; reusing it raises.
    """
    tape = tape if tape is not None else _ACTIVE_TAPE
    if tape is None:
        raise RuntimeError("backward() requires an active tape")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward()")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for out in reversed(tape.entries):
        if out.grad is None or out._backward is None:
            continue
        out._backward(out.grad)
    tape.consumed = True
    tape.entries.clear()


# ---------------------------------------------------------------------------
# Primitives


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, (a, b))

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    out._backward = bwd
    return _record(out)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data + b.data, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = bwd
    return _record(out)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data - b.data, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out._backward = bwd
    return _record(out)


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product."""
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"elementwise-mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    out = Tensor(data, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = bwd
    return _record(out)


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data * c, (a,))
    out._backward = lambda g: _accum(a, g * c)
    return _record(out)


def add_const(a, c) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data + c, (a,))
    out._backward = lambda g: _accum(a, g)
    return _record(out)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[p.data.shape for p in parts]} do not align on axis {axis}")
    out = Tensor(data, tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accum(p, piece)

    out._backward = bwd
    return _record(out)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _lift(a)
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"slice: [{start}:{start + length}] out of range for shape {a.data.shape} axis {axis}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx], (a,))

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    out._backward = bwd
    return _record(out)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):  # exp overflow saturates to 0/1
        s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s, (a,))
    out._backward = lambda g: _accum(a, g * s * (1.0 - s))
    return _record(out)


def tanh(a) -> Tensor:
    a = _lift(a)
    t = np.tanh(a.data)
    out = Tensor(t, (a,))
    out._backward = lambda g: _accum(a, g * (1.0 - t * t))
    return _record(out)


def relu(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.maximum(a.data, 0.0), (a,))
    out._backward = lambda g: _accum(a, g * (a.data > 0.0))
    return _record(out)


def exp(a) -> Tensor:
    a = _lift(a)
    e = np.exp(a.data)
    out = Tensor(e, (a,))
    out._backward = lambda g: _accum(a, g * e)
    return _record(out)


def log(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.log(a.data), (a,))
    out._backward = lambda g: _accum(a, g / a.data)
    return _record(out)


def square(a) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data * a.data, (a,))
    out._backward = lambda g: _accum(a, 2.0 * g * a.data)
    return _record(out)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; gradient is zero outside [lo, hi]."""
    a = _lift(a)
    out = Tensor(np.clip(a.data, lo, hi), (a,))
    mask = (a.data >= lo) & (a.data <= hi)
    out._backward = lambda g: _accum(a, g * mask)
    return _record(out)


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, (a,))

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(a, s * (g - dot))

    out._backward = bwd
    return _record(out)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    ls = shifted - lse
    out = Tensor(ls, (a,))

    def bwd(g):
        _accum(a, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

    out._backward = bwd
    return _record(out)


def sum_(a, axis=None) -> Tensor:
    a = _lift(a)
    out = Tensor(np.sum(a.data, axis=axis), (a,))

    def bwd(g):
        if axis is None:
            _accum(a, np.full_like(a.data, float(g)))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    out._backward = bwd
    return _record(out)


def mean(a, axis=None) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def pick(a, indices: np.ndarray) -> Tensor:
    """Row-wise gather: out[b] = a[b, indices[b]]. Indices are constants."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx], (a,))

    def bwd(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        _accum(a, full)

    out._backward = bwd
    return _record(out)


def where_const(mask: np.ndarray, a, b) -> Tensor:
    """Select a where mask else b; the mask is a constant."""
    a, b = _lift(a), _lift(b)
    m = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(m, a.data, b.data), (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(np.where(m, g, 0.0), a.data.shape))
        _accum(b, _unbroadcast(np.where(m, 0.0, g), b.data.shape))

    out._backward = bwd
    return _record(out)


def bce_with_logits(logits, targets: np.ndarray) -> Tensor:
    """Elementwise -[t*log sigmoid(l) + (1-t)*log(1-sigmoid(l))], targets constant."""
    a = _lift(logits)
    t = np.asarray(targets, dtype=np.float64)
    x = a.data
    # log(1+exp(-|x|)) + max(x,0) - t*x is the stable form
    loss = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0) - t * x
    out = Tensor(loss, (a,))
    with np.errstate(over="ignore"):  # exp overflow saturates to 0/1
        s = 1.0 / (1.0 + np.exp(-x))
    out._backward = lambda g: _accum(a, g * (s - t))
    return _record(out)


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "elementwise-mul": mul,
    "concat": concat,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "softmax": softmax,
    "log-softmax": log_softmax,
    "sum": sum_,
    "mean": mean,
    "slice": narrow,
}


def forward_primitive(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a named primitive; raises ShapeError with a diagnostic on misuse."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown op-kind {op_kind!r}; known: {sorted(_PRIMITIVES)}")
    if op_kind == "concat":
        return fn(inputs[0] if len(inputs) == 1 else list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    ok: bool
    nonfinite: bool
    worst: tuple[str, int] = ("", -1)  # parameter name, flat coordinate

    def __str__(self):
        status = "PASS" if self.ok else ("NONFINITE" if self.nonfinite else "FAIL")
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} at {self.worst[0]}[{self.worst[1]}]"


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar f() against central differences.

    f must be deterministic and re-runnable; it is evaluated 2*n_coords + 1
    times. Non-finite values are reported rather than silently passed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        if not np.isfinite(loss.data).all():
            return GradCheckReport(math.inf, False, True)
        backward(loss, tape)
    analytic = {p.name: p.grad.copy() for p in params}

    worst = ("", -1)
    max_err = 0.0
    nonfinite = False
    for p in params:
        flat = p.data.reshape(-1)
        aflat = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                up = float(f().data)
            flat[i] = orig - step
            with no_grad():
                down = float(f().data)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                nonfinite = True
                continue
            num = (up - down) / (2.0 * step)
            err = _rel_err(float(aflat[i]), num)
            if err > max_err:
                max_err = err
                worst = (p.name, i)
    ok = (not nonfinite) and max_err < tolerance
    return GradCheckReport(max_err, ok, nonfinite, worst)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    @classmethod
    def from_state_dict(cls, d: dict, params: Sequence[Parameter]) -> "AdamState":
        shapes = {p.name: p.data.shape for p in params}
        return cls(
            lr=d["lr"],
            beta1=d["beta1"],
            beta2=d["beta2"],
            eps=d["eps"],
            step=d["step"],
            m={k: np.asarray(v, dtype=np.float64).reshape(shapes[k]) for k, v in d["m"].items()},
            v={k: np.asarray(v, dtype=np.float64).reshape(shapes[k]) for k, v in d["v"].items()},
        )


def adam_step(state: AdamState, params: Iterable[Parameter]):
    """Standard bias-corrected Adam update; zeroes gradients afterwards."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p in params:
        g = p.grad
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != value shape {p.data.shape} for {p.name}")
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
        v = state.v.get(p.name)
        if v is None:
            v = state.v[p.name] = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
        p.zero_grad()


# ---------------------------------------------------------------------------
# Checkpoints


def checkpoint_payload(params: Sequence[Parameter], extra: Optional[dict] = None) -> dict:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "params": {
            p.name: {"shape": list(p.data.shape), "values": p.data.reshape(-1).tolist()}
            for p in params
        },
    }
    if extra:
        doc["extra"] = extra
    return doc


def save_checkpoint(path, params: Sequence[Parameter], extra: Optional[dict] = None):
    """Write a byte-stable JSON document mapping identifiers to arrays."""
    with open(path, "w") as fh:
        json.dump(checkpoint_payload(params, extra), fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    return doc


def restore_params(doc: dict, params: Sequence[Parameter]):
    """Load checkpoint values into an existing parameter set, matching by name."""
    stored = doc["params"]
    for p in params:
        if p.name not in stored:
            raise KeyError(f"checkpoint is missing parameter {p.name!r}")
        entry = stored[p.name]
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != p.data.shape:
            raise ShapeError(f"checkpoint shape {arr.shape} != expected {p.data.shape} for {p.name}")
        p.data = arr
        p.zero_grad()
