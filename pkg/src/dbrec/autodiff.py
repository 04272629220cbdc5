"""Reverse-mode differentiation over dense float64 arrays, plus Adam.

The graph is define-by-run: every op computes its value eagerly and records
a closure that routes the output gradient to its parents. Calling
``backward`` on a scalar root walks the graph once in reverse topological
order and accumulates gradients into the ``Parameter`` leaves.

Everything is double precision and deterministic: the same graph built from
the same inputs yields bitwise-equal values and gradients.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphError, NumericError, UsageError

__all__ = [
    "Parameter",
    "Node",
    "constant",
    "param",
    "rows",
    "add",
    "sub",
    "hadamard",
    "scale",
    "shift",
    "matmul",
    "transpose",
    "linear",
    "concat",
    "rowwise_dot",
    "bilinear",
    "sigmoid",
    "relu",
    "softmax",
    "log",
    "l2_normalize",
    "take_per_row",
    "sum_all",
    "bce_sum",
    "backward",
    "zero_grads",
    "adam_step",
    "finite_diff_check",
    "FiniteDiffReport",
]


class Parameter:
    """Named learnable dense array with gradient and Adam moment buffers."""

    __slots__ = ("name", "values", "grad", "m", "v", "step_count")

    def __init__(self, name: str, values) -> None:
        self.name = name
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.m = np.zeros_like(self.values)
        self.v = np.zeros_like(self.values)
        self.step_count = 0
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"parameter '{name}' initialized with non-finite values")

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.values.shape})"


class Node:
    """One value in the graph: an op output, a constant, or a parameter view.

    ``_backward`` receives this node's accumulated output gradient and adds
    each parent's share onto that parent (or onto ``Parameter.grad`` for
    leaves). Constants have no backward.
    """

    __slots__ = ("value", "op", "_parents", "_backward", "grad")

    def __init__(self, value, op: str, parents=(), backward=None) -> None:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite output at op '{op}'")
        self.value = value
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward
        self.grad = None

    def _add_grad(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Node({self.op}, shape={self.value.shape})"


def _require_2d(op: str, *arrays) -> None:
    for a in arrays:
        if a.ndim != 2:
            raise GraphError(f"op '{op}' expects 2-D inputs, got shape {a.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# leaves


def constant(value) -> Node:
    """Wrap an array that should receive no gradient."""
    return Node(value, "constant")


def param(p: Parameter) -> Node:
    """Use a whole parameter array in the graph."""

    def bw(g):
        p.grad += g

    return Node(p.values, "param", backward=bw)


def rows(p: Parameter, indices) -> Node:
    """Gather rows of a parameter matrix; backward scatters into those rows only."""
    idx = np.asarray(indices, dtype=np.intp)
    if p.values.ndim != 2:
        raise GraphError(f"rows: parameter '{p.name}' is not a matrix")
    if idx.ndim != 1:
        raise GraphError("rows: indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= p.values.shape[0]):
        raise GraphError(f"rows: index out of range for parameter '{p.name}'")

    def bw(g):
        np.add.at(p.grad, idx, g)

    return Node(p.values[idx], "rows", backward=bw)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Node, b: Node) -> Node:
    try:
        value = a.value + b.value
    except ValueError:
        raise GraphError(f"add: incompatible shapes {a.value.shape} and {b.value.shape}")

    def bw(g):
        a._add_grad(_unbroadcast(g, a.value.shape))
        b._add_grad(_unbroadcast(g, b.value.shape))

    return Node(value, "add", (a, b), bw)


def sub(a: Node, b: Node) -> Node:
    try:
        value = a.value - b.value
    except ValueError:
        raise GraphError(f"sub: incompatible shapes {a.value.shape} and {b.value.shape}")

    def bw(g):
        a._add_grad(_unbroadcast(g, a.value.shape))
        b._add_grad(-_unbroadcast(g, b.value.shape))

    return Node(value, "sub", (a, b), bw)


def hadamard(a: Node, b: Node) -> Node:
    """Elementwise product (with numpy broadcasting)."""
    try:
        value = a.value * b.value
    except ValueError:
        raise GraphError(f"hadamard: incompatible shapes {a.value.shape} and {b.value.shape}")

    def bw(g):
        a._add_grad(_unbroadcast(g * b.value, a.value.shape))
        b._add_grad(_unbroadcast(g * a.value, b.value.shape))

    return Node(value, "hadamard", (a, b), bw)


def scale(a: Node, c: float) -> Node:
    """Multiply by a python scalar constant."""
    c = float(c)

    def bw(g):
        a._add_grad(c * g)

    return Node(c * a.value, "scale", (a,), bw)


def shift(a: Node, c: float) -> Node:
    """Add a python scalar constant."""
    c = float(c)

    def bw(g):
        a._add_grad(g)

    return Node(a.value + c, "shift", (a,), bw)


def matmul(a: Node, b: Node) -> Node:
    _require_2d("matmul", a.value, b.value)
    if a.value.shape[1] != b.value.shape[0]:
        raise GraphError(f"matmul: inner dims differ, {a.value.shape} @ {b.value.shape}")
    value = a.value @ b.value

    def bw(g):
        a._add_grad(g @ b.value.T)
        b._add_grad(a.value.T @ g)

    return Node(value, "matmul", (a, b), bw)


def transpose(a: Node) -> Node:
    _require_2d("transpose", a.value)

    def bw(g):
        a._add_grad(g.T)

    return Node(a.value.T, "transpose", (a,), bw)


def linear(x: Node, w: Node, b: Node | None = None) -> Node:
    """Dense layer ``x @ w.T (+ b)`` with ``w`` stored as (out, in)."""
    _require_2d("linear", x.value, w.value)
    if x.value.shape[1] != w.value.shape[1]:
        raise GraphError(
            f"linear: input dim {x.value.shape[1]} does not match weight {w.value.shape}"
        )
    value = x.value @ w.value.T
    if b is not None:
        if b.value.shape != (w.value.shape[0],):
            raise GraphError(f"linear: bias shape {b.value.shape} does not match weight")
        value = value + b.value

    def bw(g):
        x._add_grad(g @ w.value)
        w._add_grad(g.T @ x.value)
        if b is not None:
            b._add_grad(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return Node(value, "linear", parents, bw)


def concat(parts: list[Node]) -> Node:
    """Concatenate 2-D blocks along columns."""
    if not parts:
        raise GraphError("concat: no inputs")
    _require_2d("concat", *[p.value for p in parts])
    nrows = parts[0].value.shape[0]
    if any(p.value.shape[0] != nrows for p in parts):
        raise GraphError("concat: row counts differ")
    value = np.concatenate([p.value for p in parts], axis=1)
    widths = [p.value.shape[1] for p in parts]

    def bw(g):
        offset = 0
        for p, w in zip(parts, widths):
            p._add_grad(g[:, offset : offset + w])
            offset += w

    return Node(value, "concat", tuple(parts), bw)


def rowwise_dot(a: Node, b: Node) -> Node:
    """Per-row inner product of two (batch, d) blocks -> (batch, 1)."""
    _require_2d("rowwise_dot", a.value, b.value)
    if a.value.shape != b.value.shape:
        raise GraphError(f"rowwise_dot: shapes differ, {a.value.shape} vs {b.value.shape}")
    value = np.sum(a.value * b.value, axis=1, keepdims=True)

    def bw(g):
        a._add_grad(g * b.value)
        b._add_grad(g * a.value)

    return Node(value, "rowwise_dot", (a, b), bw)


def bilinear(x: Node, m: Node, y: Node) -> Node:
    """Per-row bilinear form ``x_i^T M y_i`` -> (batch, 1)."""
    _require_2d("bilinear", x.value, m.value, y.value)
    if x.value.shape[1] != m.value.shape[0] or y.value.shape[1] != m.value.shape[1]:
        raise GraphError(
            f"bilinear: shapes {x.value.shape} x {m.value.shape} x {y.value.shape} do not chain"
        )
    if x.value.shape[0] != y.value.shape[0]:
        raise GraphError("bilinear: batch sizes differ")
    xm = x.value @ m.value
    value = np.sum(xm * y.value, axis=1, keepdims=True)

    def bw(g):
        x._add_grad(g * (y.value @ m.value.T))
        m._add_grad(x.value.T @ (g * y.value))
        y._add_grad(g * xm)

    return Node(value, "bilinear", (x, m, y), bw)


def sigmoid(a: Node) -> Node:
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        a._add_grad(g * out * (1.0 - out))

    return Node(out, "sigmoid", (a,), bw)


def relu(a: Node) -> Node:
    """max(0, x); also serves as the hinge clamp."""
    value = np.maximum(0.0, a.value)

    def bw(g):
        a._add_grad(g * (a.value > 0.0))

    return Node(value, "relu", (a,), bw)


def softmax(a: Node) -> Node:
    """Row-wise softmax, stabilized by subtracting the row max."""
    _require_2d("softmax", a.value)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = np.sum(g * s, axis=1, keepdims=True)
        a._add_grad(s * (g - inner))

    return Node(s, "softmax", (a,), bw)


def log(a: Node) -> Node:
    if np.any(a.value <= 0.0):
        raise NumericError("log: non-positive input")
    value = np.log(a.value)

    def bw(g):
        a._add_grad(g / a.value)

    return Node(value, "log", (a,), bw)


def l2_normalize(a: Node, eps: float = 1e-12) -> Node:
    """Row-wise x / (||x|| + eps); the eps guards zero-norm rows."""
    _require_2d("l2_normalize", a.value)
    root = np.sqrt(np.sum(a.value * a.value, axis=1, keepdims=True))
    norm = root + eps
    value = a.value / norm

    def bw(g):
        safe_root = np.where(root > 0.0, root, 1.0)
        inner = np.sum(g * a.value, axis=1, keepdims=True)
        correction = np.where(root > 0.0, a.value * inner / (norm * norm * safe_root), 0.0)
        a._add_grad(g / norm - correction)

    return Node(value, "l2_normalize", (a,), bw)


def take_per_row(a: Node, cols) -> Node:
    """Select one entry per row, ``a[i, cols[i]]`` -> (batch, 1)."""
    _require_2d("take_per_row", a.value)
    cols = np.asarray(cols, dtype=np.intp)
    if cols.shape != (a.value.shape[0],):
        raise GraphError("take_per_row: need one column index per row")
    if cols.size and (cols.min() < 0 or cols.max() >= a.value.shape[1]):
        raise GraphError("take_per_row: column index out of range")
    arange = np.arange(a.value.shape[0])
    value = a.value[arange, cols][:, None]

    def bw(g):
        acc = np.zeros_like(a.value)
        np.add.at(acc, (arange, cols), g[:, 0])
        a._add_grad(acc)

    return Node(value, "take_per_row", (a,), bw)


def sum_all(a: Node) -> Node:
    """Full reduction to a scalar."""

    def bw(g):
        a._add_grad(np.broadcast_to(g, a.value.shape).copy())

    return Node(a.value.sum(), "sum_all", (a,), bw)


def bce_sum(p: Node, labels, clamp: float = 1e-12) -> Node:
    """Summed binary cross-entropy of probabilities against 0/1 labels.

    Probabilities are clamped to [clamp, 1-clamp] before the logs; clamped
    entries contribute zero gradient.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != p.value.shape:
        raise GraphError(f"bce_sum: labels shape {y.shape} does not match scores {p.value.shape}")
    q = np.clip(p.value, clamp, 1.0 - clamp)
    value = -np.sum(y * np.log(q) + (1.0 - y) * np.log(1.0 - q))
    inside = (p.value > clamp) & (p.value < 1.0 - clamp)

    def bw(g):
        p._add_grad(g * inside * (-(y / q) + (1.0 - y) / (1.0 - q)))

    return Node(value, "bce_sum", (p,), bw)


# ---------------------------------------------------------------------------
# backward pass and optimizer


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(parameter) into every reachable Parameter.grad.

    The root must be scalar-valued. Gradients add onto existing contents;
    call ``zero_grads`` first when starting a fresh step. Forward values
    are computed at graph construction time, so the graph is always ready.
    """
    if root.value.size != 1:
        raise UsageError(f"backward: root must be scalar, got shape {root.value.shape}")
    root.grad = np.ones_like(root.value)
    for node in reversed(_topo_order(root)):
        if node._backward is None:
            continue
        if node.grad is None:
            continue
        node._backward(node.grad)


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def adam_step(
    params,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction; zeroes grads and bumps step counts."""
    if lr <= 0.0:
        raise UsageError("adam_step: lr must be positive")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise UsageError("adam_step: betas must lie in [0, 1)")
    if eps <= 0.0:
        raise UsageError("adam_step: eps must be positive")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"adam_step: non-finite gradient in '{p.name}'")
        t = p.step_count + 1
        p.m *= beta1
        p.m += (1.0 - beta1) * p.grad
        p.v *= beta2
        p.v += (1.0 - beta2) * (p.grad * p.grad)
        m_hat = p.m / (1.0 - beta1**t)
        v_hat = p.v / (1.0 - beta2**t)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.all(np.isfinite(p.values)):
            raise NumericError(f"adam_step: non-finite values in '{p.name}' after update")
        p.step_count = t
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking


class FiniteDiffReport:
    """Per-tensor worst relative error between analytic and numeric gradients."""

    def __init__(self, h: float, tol: float) -> None:
        self.h = h
        self.tol = tol
        self.per_tensor: dict[str, float] = {}

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.per_tensor.values())

    @property
    def max_rel_error(self) -> float:
        return max(self.per_tensor.values()) if self.per_tensor else 0.0

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.per_tensor.items() if v > self.tol}

    def __repr__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"FiniteDiffReport({status}, max_rel_error={self.max_rel_error:.3e})"


def finite_diff_check(
    loss_fn,
    params,
    h: float = 1e-4,
    tol: float = 1e-4,
    coords_per_tensor: int = 20,
    seed: int = 0,
) -> FiniteDiffReport:
    """Compare analytic gradients to central differences on sampled coordinates.

    ``loss_fn`` must build and return a fresh scalar Node from the current
    parameter values, with no other state. At least ``coords_per_tensor``
    seeded-random coordinates per tensor are probed (all of them for small
    tensors). The relative error uses a unit floor, |a - n| / max(1, |a|, |n|),
    so near-zero gradients are compared absolutely at the same tolerance.

    Kinked ops (relu, the hinge clamp) and hard-label switches make central
    differences unreliable whenever a breakpoint falls inside the probe
    interval, so a coordinate that misses at ``h`` is re-probed at smaller
    steps (down to 1e-6) and scored by its best step. A wrong backward rule
    mismatches at every step size and still fails.
    """
    if not (1e-6 <= h <= 1e-3):
        raise UsageError(f"finite_diff_check: h={h} outside [1e-6, 1e-3]")
    params = list(params)

    first = float(loss_fn().value)
    second = float(loss_fn().value)
    if first != second:
        raise UsageError(
            "finite_diff_check: loss is not deterministic "
            f"({first!r} vs {second!r}); the oracle is invalid"
        )

    zero_grads(params)
    backward(loss_fn())
    analytic = {p.name: p.grad.copy() for p in params}
    zero_grads(params)

    steps = [h]
    while steps[-1] / 8.0 >= 1e-6:
        steps.append(steps[-1] / 8.0)
    steps = steps[:3]

    def probe(flat, c, step):
        saved = flat[c]
        flat[c] = saved + step
        plus = float(loss_fn().value)
        flat[c] = saved - step
        minus = float(loss_fn().value)
        flat[c] = saved
        return (plus - minus) / (2.0 * step)

    report = FiniteDiffReport(h=h, tol=tol)
    for t_index, p in enumerate(params):
        rng = np.random.default_rng([seed, t_index])
        size = p.values.size
        n_coords = min(coords_per_tensor, size)
        coords = rng.choice(size, size=n_coords, replace=False)
        flat = p.values.reshape(-1)
        worst = 0.0
        for c in coords:
            a = analytic[p.name].reshape(-1)[c]
            best = np.inf
            for step in steps:
                numeric = probe(flat, c, step)
                rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                best = min(best, rel)
                if best <= tol:
                    break
            if best > worst:
                worst = best
        report.per_tensor[p.name] = worst
    return report
