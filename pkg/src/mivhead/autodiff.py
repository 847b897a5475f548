"""Dense float64 tensors on a reverse-mode tape.

The operator set is deliberately closed: it covers exactly what the head and
its baselines need (elementwise arithmetic, matmul, shape ops, softmax,
l2-normalize, layer-norm, reductions, adaptive max-pooling, cross-entropy).
Every op checks its output for NaN/Inf and raises instead of propagating.

Reductions along an axis (sum, mean, softmax denominators, logsumexp) sort the
reduced values before accumulating. All additions therefore happen in a
canonical order, which makes reduction results invariant to permutations of
the reduced axis and bit-reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes do not conform."""


def _asarray(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite output of op '{op}'")


def ordered_sum(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along `axis` in canonical order: ascending absolute value, ties by
    signed value. The reduction is therefore invariant to permutations of the
    summed axis and exactly negation-symmetric (sum(-x) == -sum(x) bitwise
    whenever the absolute values are distinct)."""
    axis = axis % x.ndim if x.ndim else 0
    xm = np.moveaxis(x, axis, -1)
    order = np.lexsort((xm, np.abs(xm)))
    out = np.take_along_axis(xm, order, axis=-1).sum(axis=-1)
    if keepdims:
        out = np.expand_dims(out, axis)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce gradient `g` back to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Node:
    """One tape entry: a value plus the VJP closure that produced it."""

    __slots__ = ("tape", "value", "parents", "vjp", "needs_grad", "grad")

    def __init__(self, tape, value, parents=(), vjp=None, needs_grad=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.needs_grad = needs_grad
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Tape:
    """Append-only record of operations; single-owner during build/backward.

    Leaves are created with `constant` (no gradient) or `parameter` (named,
    trainable). `backward` walks the record once, in reverse creation order,
    and leaves gradients on every parameter node (exact zeros for parameters
    the loss never touched).
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _record(self, value, parents=(), vjp=None, op="?") -> Node:
        value = np.asarray(value, dtype=np.float64)
        if not value.flags.c_contiguous:
            value = np.copy(value, order="C")
        _check_finite(value, op)
        needs = any(p.needs_grad for p in parents)
        node = Node(self, value, tuple(parents), vjp if needs else None, needs)
        self._nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._record(_asarray(value), op="constant")

    def parameter(self, name: str, value) -> Node:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = self._record(_asarray(value), op="parameter")
        node.needs_grad = True
        self.params[name] = node
        return node

    def backward(self, loss: Node) -> None:
        if loss.tape is not self:
            raise ValueError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise ShapeError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.value)
        start = self._nodes.index(loss) if self._nodes[-1] is not loss else len(self._nodes) - 1
        for node in reversed(self._nodes[: start + 1]):
            if node.grad is None or node.vjp is None:
                continue
            for parent, g in zip(node.parents, node.vjp(node.grad)):
                if g is None or not parent.needs_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad += g
        for name, p in self.params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.value)

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: p.grad for name, p in self.params.items()}


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("operands belong to different tapes")
    return tape


# ---------------------------------------------------------------------------
# elementwise arithmetic (with numpy broadcasting)
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    out = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return tape._record(out, (a, b), vjp, "add")


def sub(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    out = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return tape._record(out, (a, b), vjp, "sub")


def mul(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    out = a.value * b.value

    def vjp(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return tape._record(out, (a, b), vjp, "mul")


def scale(a: Node, k: float) -> Node:
    out = a.value * k

    def vjp(g):
        return (g * k,)

    return a.tape._record(out, (a,), vjp, "scale")


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def _mT(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    tape = _tape_of(a, b)
    out = a.value @ b.value

    def vjp(g):
        ga = _unbroadcast(g @ _mT(b.value), a.shape)
        gb = _unbroadcast(_mT(a.value) @ g, b.shape)
        return ga, gb

    return tape._record(out, (a, b), vjp, "matmul")


def transpose(a: Node, axes: Sequence[int] | None = None) -> Node:
    out = np.transpose(a.value, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return a.tape._record(out, (a,), vjp, "transpose")


def reshape(a: Node, shape: Sequence[int]) -> Node:
    out = a.value.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return a.tape._record(out, (a,), vjp, "reshape")


def broadcast_to(a: Node, shape: Sequence[int]) -> Node:
    out = np.broadcast_to(a.value, shape)

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return a.tape._record(out, (a,), vjp, "broadcast")


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    tape = _tape_of(*nodes)
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._record(out, tuple(nodes), vjp, "concat")


def stack(nodes: Sequence[Node], axis: int = 0) -> Node:
    tape = _tape_of(*nodes)
    out = np.stack([n.value for n in nodes], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(nodes)))

    return tape._record(out, tuple(nodes), vjp, "stack")


def slice_(a: Node, key) -> Node:
    """Basic (non-fancy) indexing; gradient scatters back into a zero array."""
    out = a.value[key]

    def vjp(g):
        ga = np.zeros_like(a.value)
        ga[key] = g
        return (ga,)

    return a.tape._record(out, (a,), vjp, "slice")


def take(a: Node, indices, axis: int = 0) -> Node:
    """Row gather (duplicate indices allowed; gradient accumulates)."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.value, idx, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, (slice(None),) * axis + (idx,), g)
        return (ga,)

    return a.tape._record(out, (a,), vjp, "take")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def abs_(a: Node) -> Node:
    out = np.abs(a.value)
    sign = np.sign(a.value)

    def vjp(g):
        return (g * sign,)

    return a.tape._record(out, (a,), vjp, "abs")


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)

    def vjp(g):
        return (g * out,)

    return a.tape._record(out, (a,), vjp, "exp")


def log(a: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)

    def vjp(g):
        return (g / a.value,)

    return a.tape._record(out, (a,), vjp, "log")


def sigmoid(a: Node) -> Node:
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return a.tape._record(out, (a,), vjp, "sigmoid")


def softmax(a: Node, axis: int = -1) -> Node:
    x = a.value
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / ordered_sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return a.tape._record(y, (a,), vjp, "softmax")


def l2_normalize(a: Node, axis: int = -1, eps: float = 1e-6) -> Node:
    x = a.value
    n = np.sqrt(ordered_sum(x * x, axis=axis, keepdims=True))
    y = x / (n + eps)

    def vjp(g):
        s = (g * x).sum(axis=axis, keepdims=True)
        n_safe = np.where(n > 0, n, 1.0)
        return (g / (n + eps) - x * s / (n_safe * (n + eps) ** 2),)

    return a.tape._record(y, (a,), vjp, "l2_normalize")


def layer_norm(a: Node, gain: Node, bias: Node, axis: int = -1,
               eps: float = 1e-6) -> Node:
    tape = _tape_of(a, gain, bias)
    x = a.value
    m = x.mean(axis=axis, keepdims=True)
    centered = x - m
    var = (centered * centered).mean(axis=axis, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = centered / std
    out = xhat * gain.value + bias.value

    def vjp(g):
        gxhat = g * gain.value
        gx = (gxhat - gxhat.mean(axis=axis, keepdims=True)
              - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True)) / std
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return tape._record(out, (a, gain, bias), vjp, "layer_norm")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(a: Node, axis: int, keepdims: bool = False) -> Node:
    out = ordered_sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return a.tape._record(out, (a,), vjp, "sum")


def mean(a: Node, axis: int, keepdims: bool = False) -> Node:
    n = a.value.shape[axis]
    out = ordered_sum(a.value, axis=axis, keepdims=keepdims) / n

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return a.tape._record(out, (a,), vjp, "mean")


def logsumexp(a: Node, axis: int, keepdims: bool = False) -> Node:
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    z = ordered_sum(e, axis=axis, keepdims=True)
    out = m + np.log(z)
    soft = e / z
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return a.tape._record(out, (a,), vjp, "logsumexp")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def adaptive_max_pool_2d_value(x: np.ndarray, out_h: int, out_w: int):
    """Forward adaptive max-pool on an (H, W, C) array.

    Output cell (i, j) covers input rows [floor(i*H/oh), ceil((i+1)*H/oh)) and
    the analogous column range. Returns (pooled, argmax) where argmax holds,
    per cell and channel, the flat row-major index within the region of the
    first maximal element (the declared tie rule).
    """
    if x.ndim != 3:
        raise ShapeError("adaptive_max_pool_2d expects an (H, W, C) array")
    h, w, c = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(f"target ({out_h}, {out_w}) out of range for ({h}, {w})")
    out = np.empty((out_h, out_w, c), dtype=np.float64)
    arg = np.empty((out_h, out_w, c), dtype=np.intp)
    for i in range(out_h):
        r0, r1 = (i * h) // out_h, -((-(i + 1) * h) // out_h)
        for j in range(out_w):
            c0, c1 = (j * w) // out_w, -((-(j + 1) * w) // out_w)
            region = x[r0:r1, c0:c1, :].reshape(-1, c)
            idx = np.argmax(region, axis=0)
            out[i, j, :] = region[idx, np.arange(c)]
            arg[i, j, :] = idx
    return out, arg


def adaptive_max_pool_2d(a: Node, out_h: int, out_w: int) -> Node:
    out, arg = adaptive_max_pool_2d_value(a.value, out_h, out_w)
    h, w, c = a.shape

    def vjp(g):
        ga = np.zeros_like(a.value)
        for i in range(out_h):
            r0, r1 = (i * h) // out_h, -((-(i + 1) * h) // out_h)
            for j in range(out_w):
                c0, c1 = (j * w) // out_w, -((-(j + 1) * w) // out_w)
                width = c1 - c0
                idx = arg[i, j, :]
                rows = r0 + idx // width
                cols = c0 + idx % width
                np.add.at(ga, (rows, cols, np.arange(c)), g[i, j, :])
        return (ga,)

    return a.tape._record(out, (a,), vjp, "adaptive_max_pool_2d")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits: Node, labels) -> Node:
    """Mean cross-entropy: scalar for (L,) logits, batch mean for (B, L)."""
    x = logits.value
    if x.ndim == 1:
        x2 = x[None, :]
        lab = np.asarray([labels], dtype=np.intp)
    elif x.ndim == 2:
        x2 = x
        lab = np.asarray(labels, dtype=np.intp)
        if lab.shape != (x2.shape[0],):
            raise ShapeError("labels must have one entry per logits row")
    else:
        raise ShapeError("cross_entropy expects (L,) or (B, L) logits")
    if np.any(lab < 0) or np.any(lab >= x2.shape[1]):
        raise ShapeError("label out of range")
    b = x2.shape[0]
    m = x2.max(axis=1, keepdims=True)
    e = np.exp(x2 - m)
    z = ordered_sum(e, axis=1, keepdims=True)
    lse = (m + np.log(z))[:, 0]
    picked = x2[np.arange(b), lab]
    out = np.asarray(ordered_sum(lse - picked, axis=0) / b)
    soft = e / z

    def vjp(g):
        glogits = soft.copy()
        glogits[np.arange(b), lab] -= 1.0
        glogits *= float(g) / b
        if x.ndim == 1:
            glogits = glogits[0]
        return (glogits,)

    return logits.tape._record(out, (logits,), vjp, "cross_entropy")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(build_loss: Callable[[Tape, dict[str, Node]], Node],
               params: dict[str, np.ndarray],
               eps: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    `build_loss` must construct the scalar loss on the given tape from the
    supplied parameter nodes; it is re-run from scratch for every perturbed
    evaluation, so it has to be a pure function of the parameter values.
    Relative error is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    params = {k: _asarray(v).copy() for k, v in params.items()}

    def forward(values: dict[str, np.ndarray]) -> float:
        tape = Tape()
        nodes = {k: tape.parameter(k, v) for k, v in values.items()}
        return float(build_loss(tape, nodes).value)

    tape = Tape()
    nodes = {k: tape.parameter(k, v) for k, v in params.items()}
    loss = build_loss(tape, nodes)
    tape.backward(loss)
    grads = {k: nodes[k].grad for k in params}

    report = GradCheckReport(max_rel_err=0.0, n_checked=0)
    for name, value in params.items():
        flat = value.reshape(-1)
        g_ad = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = forward(params)
            flat[i] = orig - eps
            f_minus = forward(params)
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(g_ad[i] - g_fd) / max(1e-8, abs(g_ad[i]) + abs(g_fd))
            report.n_checked += 1
            report.max_rel_err = max(report.max_rel_err, rel)
            if rel > tol:
                report.failures.append((name, i, float(g_ad[i]), g_fd, rel))
    return report
