"""Minimal dense-tensor engine with a define-by-run reverse-mode tape.

Everything is a 2-D float64 array: vectors are (1, d) or (N, 1), scalars
are (1, 1). The tape is rebuilt on every forward pass; calling
``backward`` twice without zeroing accumulates gradients additively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for a primitive."""


class AutodiffError(RuntimeError):
    """Tape contract violation (e.g. backward from a non-scalar)."""


class TrainingError(RuntimeError):
    """Optimization failure, e.g. NaN gradients or divergence."""


def _as_array(data) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got shape {a.shape}")
    return a


class Tensor:
    """A node on the tape: value, accumulated gradient, and parent links."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), vjp=None,
                 name=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self._vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise AutodiffError(
                f"gradient shape {g.shape} != value shape {self.data.shape}"
                + (f" for {self.name}" if self.name else ""))
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self):
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.data.shape})"


def tensor(data) -> Tensor:
    return Tensor(data)


def param(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _node(data, op, parents, vjp) -> Tensor:
    track = any(p.requires_grad or p.parents for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, op=op, parents=parents, vjp=vjp)


def _check(cond, kind, *shapes):
    if not cond:
        raise ShapeError(f"{kind}: incompatible shapes {[tuple(s) for s in shapes]}")


# ---------------------------------------------------------------------------
# primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape[1] == b.shape[0], "matmul", a.shape, b.shape)
    out = a.data @ b.data

    def vjp(g):
        if a.requires_grad or a.parents:
            a.accumulate(g @ b.data.T)
        if b.requires_grad or b.parents:
            b.accumulate(a.data.T @ g)

    return _node(out, "matmul", (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "add", a.shape, b.shape)

    def vjp(g):
        if a.requires_grad or a.parents:
            a.accumulate(g)
        if b.requires_grad or b.parents:
            b.accumulate(g)

    return _node(a.data + b.data, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "sub", a.shape, b.shape)

    def vjp(g):
        if a.requires_grad or a.parents:
            a.accumulate(g)
        if b.requires_grad or b.parents:
            b.accumulate(-g)

    return _node(a.data - b.data, "sub", (a, b), vjp)


def scalar_mul(s, x: Tensor) -> Tensor:
    """Multiply by a python float or a learnable (1,1) tensor."""
    if isinstance(s, Tensor):
        _check(s.data.size == 1, "scalar-mul", s.shape, x.shape)
        out = s.data[0, 0] * x.data

        def vjp(g):
            if s.requires_grad or s.parents:
                s.accumulate(np.array([[np.sum(g * x.data)]]))
            if x.requires_grad or x.parents:
                x.accumulate(s.data[0, 0] * g)

        return _node(out, "scalar-mul", (s, x), vjp)

    c = float(s)

    def vjp(g):
        if x.requires_grad or x.parents:
            x.accumulate(c * g)

    return _node(c * x.data, "scalar-mul", (x,), vjp)


def row_softmax(x: Tensor) -> Tensor:
    """Softmax along each row, stabilized by max subtraction."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        if x.requires_grad or x.parents:
            dot = np.sum(g * p, axis=1, keepdims=True)
            x.accumulate(p * (g - dot))

    return _node(p, "row-softmax", (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def vjp(g):
        if x.requires_grad or x.parents:
            x.accumulate(g * (1.0 - t * t))

    return _node(t, "tanh", (x,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def vjp(g):
        if x.requires_grad or x.parents:
            x.accumulate(g * mask)

    return _node(x.data * mask, "relu", (x,), vjp)


def concat_cols(*xs: Tensor) -> Tensor:
    if not xs:
        raise ShapeError("concat-cols: no inputs")
    rows = xs[0].shape[0]
    _check(all(x.shape[0] == rows for x in xs), "concat-cols", *[x.shape for x in xs])
    widths = [x.shape[1] for x in xs]
    offs = np.cumsum([0] + widths)

    def vjp(g):
        for x, lo, hi in zip(xs, offs[:-1], offs[1:]):
            if x.requires_grad or x.parents:
                x.accumulate(g[:, lo:hi])

    return _node(np.concatenate([x.data for x in xs], axis=1), "concat-cols", xs, vjp)


def mean_rows(x: Tensor) -> Tensor:
    """Row-wise mean pooling: (N, d) -> (1, d)."""
    n = x.shape[0]

    def vjp(g):
        if x.requires_grad or x.parents:
            x.accumulate(np.repeat(g / n, n, axis=0))

    return _node(x.data.mean(axis=0, keepdims=True), "mean-rows", (x,), vjp)


def max_cols(x: Tensor) -> Tensor:
    """Column-wise max over rows: (N, d) -> (1, d); ties route to the first row."""
    arg = x.data.argmax(axis=0)
    out = x.data[arg, np.arange(x.shape[1])].reshape(1, -1)

    def vjp(g):
        if x.requires_grad or x.parents:
            gx = np.zeros_like(x.data)
            gx[arg, np.arange(x.shape[1])] = g[0]
            x.accumulate(gx)

    return _node(out, "max-cols", (x,), vjp)


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    _check(idx.ndim == 1 and (len(idx) == 0 or idx.max() < x.shape[0]),
           "gather-rows", x.shape, (len(idx),))

    def vjp(g):
        if x.requires_grad or x.parents:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x.accumulate(gx)

    return _node(x.data[idx], "gather-rows", (x,), vjp)


def broadcast_add_col(x: Tensor, z: Tensor) -> Tensor:
    """x (N, d) plus a column z (N, 1) broadcast across the d columns."""
    _check(z.shape == (x.shape[0], 1), "broadcast-add-col", x.shape, z.shape)

    def vjp(g):
        if x.requires_grad or x.parents:
            x.accumulate(g)
        if z.requires_grad or z.parents:
            z.accumulate(g.sum(axis=1, keepdims=True))

    return _node(x.data + z.data, "broadcast-add-col", (x, z), vjp)


def broadcast_add_row(x: Tensor, r: Tensor) -> Tensor:
    """x (N, d) plus a row r (1, d) broadcast across the N rows."""
    _check(r.shape == (1, x.shape[1]), "broadcast-add-row", x.shape, r.shape)

    def vjp(g):
        if x.requires_grad or x.parents:
            x.accumulate(g)
        if r.requires_grad or r.parents:
            r.accumulate(g.sum(axis=0, keepdims=True))

    return _node(x.data + r.data, "broadcast-add-row", (x, r), vjp)


def transpose(x: Tensor) -> Tensor:
    def vjp(g):
        if x.requires_grad or x.parents:
            x.accumulate(g.T)

    return _node(x.data.T, "transpose", (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    def vjp(g):
        if x.requires_grad or x.parents:
            x.accumulate(np.full_like(x.data, g[0, 0]))

    return _node(np.array([[x.data.sum()]]), "sum-all", (x,), vjp)


def scale(s: Tensor, x: Tensor) -> Tensor:
    """Multiply x by a learnable (1,1) scalar tensor."""
    _check(s.shape == (1, 1), "scale", s.shape, x.shape)
    out = s.data[0, 0] * x.data

    def vjp(g):
        if s.requires_grad or s.parents:
            s.accumulate(np.array([[(g * x.data).sum()]]))
        if x.requires_grad or x.parents:
            x.accumulate(s.data[0, 0] * g)

    return _node(out, "scale", (s, x), vjp)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "scalar-mul": scalar_mul,
    "row-softmax": row_softmax,
    "tanh": tanh,
    "relu": relu,
    "concat-cols": concat_cols,
    "mean-rows": mean_rows,
    "max-cols": max_cols,
    "gather-rows": gather_rows,
    "broadcast-add-col": broadcast_add_col,
    "broadcast-add-row": broadcast_add_row,
    "transpose": transpose,
    "sum-all": sum_all,
    "scale": scale,
}


def forward_primitive(kind: str, *inputs) -> Tensor:
    """Dispatch a primitive by kind name; registers the tape node."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ShapeError(f"unknown primitive kind {kind!r}") from None
    return fn(*inputs)


def fused(data, parents, vjp, op="fused") -> Tensor:
    """Register an op with a hand-derived vjp as a single tape node."""
    return _node(_as_array(data), op, tuple(parents), vjp)


# ---------------------------------------------------------------------------
# reverse pass

def backward(loss: Tensor) -> None:
    """Reverse-sweep the tape from a scalar loss, accumulating into .grad."""
    if loss.data.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients per named parameter; parameters the loss never reached get zeros."""
    return {k: p.grad_or_zeros() for k, p in params.items()}


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """Bias-corrected Adam with L2-in-gradient weight decay."""

    lr: float = 1e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, Tensor]:
    """One Adam update in place; weight decay enters the gradient before moments."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params


# ---------------------------------------------------------------------------
# finite differences

def grad_check(f, point: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps one Tensor to a scalar Tensor. The denominator is
    max(1e-8, |analytic| + |numeric|) per coordinate.
    """
    point = _as_array(point)
    x = Tensor(point.copy(), requires_grad=True)
    out = f(x)
    backward(out)
    analytic = x.grad_or_zeros()
    worst = 0.0
    it = np.nditer(point, flags=["multi_index"])
    while not it.finished:
        ij = it.multi_index
        saved = point[ij]
        x.data[ij] = saved + h
        hi = f(Tensor(x.data)).data[0, 0]
        x.data[ij] = saved - h
        lo = f(Tensor(x.data)).data[0, 0]
        x.data[ij] = saved
        num = (hi - lo) / (2.0 * h)
        a = analytic[ij]
        err = abs(a - num) / max(1e-8, abs(a) + abs(num))
        worst = max(worst, err)
        it.iternext()
    return worst


def grad_check_params(build_loss, params: dict[str, Tensor], h: float = 1e-5,
                      max_coords: int = None, seed: int = 0) -> float:
    """Same check, but over the coordinates of a named parameter dict.

    ``build_loss()`` must rebuild the tape from the current parameter values
    and return a scalar Tensor. With ``max_coords`` set, at most that many
    coordinates per parameter are probed (chosen by a seeded rng), keeping
    the check affordable for full networks.
    """
    zero_grads(params)
    backward(build_loss())
    analytic = collect_grads(params)
    pick = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        a_full = analytic[name]
        coords = [tuple(ij) for ij in np.ndindex(*p.data.shape)]
        if max_coords is not None and len(coords) > max_coords:
            sel = pick.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(sel)]
        for ij in coords:
            saved = p.data[ij]
            p.data[ij] = saved + h
            hi = build_loss().data[0, 0]
            p.data[ij] = saved - h
            lo = build_loss().data[0, 0]
            p.data[ij] = saved
            num = (hi - lo) / (2.0 * h)
            a = a_full[ij]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    zero_grads(params)
    return worst
