"""Reverse-mode automatic differentiation over dense image-grid fields.

Values are float64 numpy arrays, either 2-d ``(H, W)`` fields or 0-d
scalars. A :class:`Tape` records every primitive applied to its nodes in
creation order (which is automatically a topological order) and replays
them in reverse to accumulate gradients for the leaf parameters.

Broadcasting is deliberately limited to field-with-scalar; anything wider
is out of scope for this kit. Reductions use numpy's fixed summation
order, so re-running a graph with identical leaf values is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Numerical guards shared by the primitives. abs_smooth(x) = sqrt(x^2 + EPS_ABS^2);
# div floors |denominator| at EPS_DENOM; sqrt clamps its argument at 0 and floors
# the backward denominator at EPS_DENOM.
EPS_ABS = 1e-6
EPS_DENOM = 1e-12


class EngineError(Exception):
    """Base class for tape/graph errors."""


class ShapeError(EngineError):
    """Operands have incompatible or unsupported shapes."""


class NumericError(EngineError):
    """A primitive produced a non-finite value."""


class ContractError(EngineError):
    """An operation was used outside its contract."""


def _as_value(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 1:
        arr = arr.reshape(())
    if arr.ndim not in (0, 2):
        raise ShapeError(f"values must be scalars or 2-d fields, got shape {arr.shape}")
    if arr.ndim == 2 and (arr.shape[0] < 2 or arr.shape[1] < 2):
        raise ShapeError(f"fields must be at least 2x2, got {arr.shape}")
    return arr


class Node:
    """One value in the computation graph: a scalar or an (H, W) field."""

    __slots__ = ("tape", "value", "parents", "vjps", "name")

    def __init__(self, tape, value, parents=(), vjps=(), name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_scalar(self):
        return self.value.ndim == 0

    def item(self) -> float:
        if not self.is_scalar:
            raise ContractError("item() requires a scalar node")
        return float(self.value)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self.tape.constant(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self.tape.constant(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(self.tape.constant(other), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        kind = "leaf " if self.name in self.tape._leaves else ""
        return f"<Node {kind}shape={self.value.shape}>"


class Tape:
    """Ordered record of primitive operations plus the set of leaf parameters.

    Nodes are appended in creation order, so the list is always a valid
    topological order for the reverse sweep. A tape and its nodes belong
    to a single thread of execution; independent tapes are independent.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._leaves: dict[str, Node] = {}

    def leaf(self, name: str, value) -> Node:
        """Register a named trainable parameter (scalar or field)."""
        if name in self._leaves:
            raise ContractError(f"duplicate leaf name {name!r}")
        node = self._record(_as_value(value).copy(), (), (), name=name)
        self._check_finite(node.value, f"leaf {name!r}")
        self._leaves[name] = node
        return node

    def constant(self, value) -> Node:
        """Wrap a value that takes part in the graph but receives no gradient."""
        if isinstance(value, Node):
            if value.tape is not self:
                raise ContractError("node belongs to a different tape")
            return value
        node = self._record(_as_value(value), (), ())
        self._check_finite(node.value, "constant")
        return node

    @property
    def leaves(self) -> dict[str, Node]:
        return dict(self._leaves)

    def _record(self, value, parents, vjps, name=None) -> Node:
        node = Node(self, value, parents, vjps, name)
        self._nodes.append(node)
        return node

    @staticmethod
    def _check_finite(value, what):
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value in {what}")

    def op(self, opname, value, parents, vjps) -> Node:
        """Record a primitive: forward value plus one vjp per parent."""
        self._check_finite(value, f"op {opname!r}")
        return self._record(value, tuple(parents), tuple(vjps))

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Returns one gradient buffer per leaf, shaped like the leaf; leaves
        the loss does not depend on get zeros. Accumulation order is the
        fixed reverse creation order, so results are deterministic.
        """
        if loss.tape is not self:
            raise ContractError("loss node belongs to a different tape")
        if not loss.is_scalar:
            raise ContractError("backward requires a scalar loss node")
        leaf_names = {id(n): name for name, n in self._leaves.items()}
        out = {name: np.zeros_like(n.value) for name, n in self._leaves.items()}
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            name = leaf_names.get(id(node))
            if name is not None:
                # reverse topological order: g is final once the node is reached
                out[name] = np.asarray(g, dtype=np.float64)
            for parent, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                if contrib is None:
                    continue
                # field (x) scalar ops produce field-shaped contributions
                # for the scalar side; reduce them here.
                if contrib.ndim == 2 and parent.value.ndim == 0:
                    contrib = np.sum(contrib).reshape(())
                key = id(parent)
                if key in grads:
                    grads[key] += contrib
                else:
                    grads[key] = np.array(contrib, dtype=np.float64, copy=True)
        return out


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def _coerce_pair(a, b):
    """Lift python scalars to constants and check broadcast compatibility."""
    if not isinstance(a, Node) and not isinstance(b, Node):
        raise ContractError("at least one operand must be a Node")
    tape = a.tape if isinstance(a, Node) else b.tape
    a = tape.constant(a)
    b = tape.constant(b)
    if a.tape is not b.tape:
        raise ContractError("operands belong to different tapes")
    if a.value.ndim == 2 and b.value.ndim == 2 and a.value.shape != b.value.shape:
        raise ShapeError(f"field shapes differ: {a.value.shape} vs {b.value.shape}")
    return tape, a, b


def add(a, b) -> Node:
    tape, a, b = _coerce_pair(a, b)
    with np.errstate(all="ignore"):
        val = a.value + b.value
    return tape.op("add", val, (a, b), (lambda g: g, lambda g: g))


def sub(a, b) -> Node:
    tape, a, b = _coerce_pair(a, b)
    with np.errstate(all="ignore"):
        val = a.value - b.value
    return tape.op("sub", val, (a, b), (lambda g: g, lambda g: -g))


def mul(a, b) -> Node:
    tape, a, b = _coerce_pair(a, b)
    with np.errstate(all="ignore"):
        val = a.value * b.value
    return tape.op(
        "mul",
        val,
        (a, b),
        (lambda g: g * b.value, lambda g: g * a.value),
    )


def div(a, b) -> Node:
    """Guarded division: |denominator| is floored at EPS_DENOM."""
    tape, a, b = _coerce_pair(a, b)
    with np.errstate(all="ignore"):
        safe = np.where(
            np.abs(b.value) < EPS_DENOM,
            np.where(b.value < 0, -EPS_DENOM, EPS_DENOM),
            b.value,
        )
        val = a.value / safe
    return tape.op(
        "div",
        val,
        (a, b),
        (lambda g: g / safe, lambda g: -g * a.value / (safe * safe)),
    )


def neg(a: Node) -> Node:
    return a.tape.op("neg", -a.value, (a,), (lambda g: -g,))


def sqrt(a: Node) -> Node:
    """Square root; argument clamped at 0, backward denominator floored."""
    val = np.sqrt(np.maximum(a.value, 0.0))
    denom = np.maximum(val, EPS_DENOM)
    return a.tape.op("sqrt", val, (a,), (lambda g: g * 0.5 / denom,))


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        val = np.exp(a.value)
    return a.tape.op("exp", val, (a,), (lambda g: g * val,))


def sin(a: Node) -> Node:
    return a.tape.op("sin", np.sin(a.value), (a,), (lambda g: g * np.cos(a.value),))


def cos(a: Node) -> Node:
    return a.tape.op("cos", np.cos(a.value), (a,), (lambda g: -g * np.sin(a.value),))


def softplus(a: Node) -> Node:
    """log(1 + e^x), computed stably; derivative is the logistic function."""
    val = np.logaddexp(0.0, a.value)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return a.tape.op("softplus", val, (a,), (lambda g: g * sig,))


def absolute(a: Node) -> Node:
    """Exact |x| with sign subgradient (0 at the kink)."""
    return a.tape.op("abs", np.abs(a.value), (a,), (lambda g: g * np.sign(a.value),))


def abs_smooth(a: Node, eps: float = EPS_ABS) -> Node:
    """Smooth |x| = sqrt(x^2 + eps^2); gradient x/sqrt(x^2+eps^2) is 0 at x=0."""
    val = np.sqrt(a.value * a.value + eps * eps)
    return a.tape.op("abs_smooth", val, (a,), (lambda g: g * a.value / val,))


def minimum(a, b) -> Node:
    tape, a, b = _coerce_pair(a, b)
    awins = a.value <= b.value
    return tape.op(
        "min",
        np.minimum(a.value, b.value),
        (a, b),
        (lambda g: g * awins, lambda g: g * ~awins),
    )


def maximum(a, b) -> Node:
    tape, a, b = _coerce_pair(a, b)
    awins = a.value >= b.value
    return tape.op(
        "max",
        np.maximum(a.value, b.value),
        (a, b),
        (lambda g: g * awins, lambda g: g * ~awins),
    )


def clamp(a: Node, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    if lo > hi:
        raise ContractError(f"clamp bounds reversed: {lo} > {hi}")
    inside = (a.value > lo) & (a.value < hi)
    return a.tape.op("clamp", np.clip(a.value, lo, hi), (a,), (lambda g: g * inside,))


def detach(a: Node) -> Node:
    """Re-enter a node's value as a constant, cutting the gradient path."""
    return a.tape.constant(a.value.copy())


# ---------------------------------------------------------------------------
# reductions and grid primitives
# ---------------------------------------------------------------------------


def reduce_mean(a: Node) -> Node:
    """Arithmetic mean over all pixels; backward spreads 1/(H*W) to each."""
    if a.is_scalar:
        raise ShapeError("reduce_mean requires a field node")
    n = a.value.size
    return a.tape.op(
        "mean",
        np.mean(a.value).reshape(()),
        (a,),
        (lambda g: np.full(a.value.shape, float(g) / n),),
    )


def spatial_diff(a: Node, axis: str) -> Node:
    """Forward difference f[i+1]-f[i] along 'u' (width) or 'v' (height).

    The final column/row is zero so the output shape matches the input.
    """
    if a.is_scalar:
        raise ShapeError("spatial_diff requires a field node")
    if axis not in ("u", "v"):
        raise ContractError(f"axis must be 'u' or 'v', got {axis!r}")
    ax = 1 if axis == "u" else 0
    if a.value.shape[ax] < 2:
        raise ShapeError(f"axis {axis} too short for differences: {a.value.shape}")
    out = np.zeros_like(a.value)
    if ax == 1:
        out[:, :-1] = a.value[:, 1:] - a.value[:, :-1]

        def vjp(g):
            grad = np.zeros_like(a.value)
            grad[:, 1:] += g[:, :-1]
            grad[:, :-1] -= g[:, :-1]
            return grad

    else:
        out[:-1, :] = a.value[1:, :] - a.value[:-1, :]

        def vjp(g):
            grad = np.zeros_like(a.value)
            grad[1:, :] += g[:-1, :]
            grad[:-1, :] -= g[:-1, :]
            return grad

    return a.tape.op("spatial_diff", out, (a,), (vjp,))


def box3(a: Node) -> Node:
    """3x3 uniform average over valid windows; output is (H-2, W-2)."""
    if a.is_scalar:
        raise ShapeError("box3 requires a field node")
    h, w = a.value.shape
    if h < 3 or w < 3:
        raise ShapeError(f"box3 needs at least 3x3, got {a.value.shape}")
    out = np.zeros((h - 2, w - 2))
    for di in range(3):
        for dj in range(3):
            out += a.value[di:di + h - 2, dj:dj + w - 2]
    out /= 9.0

    def vjp(g):
        grad = np.zeros_like(a.value)
        g9 = g / 9.0
        for di in range(3):
            for dj in range(3):
                grad[di:di + h - 2, dj:dj + w - 2] += g9
        return grad

    return a.tape.op("box3", out, (a,), (vjp,))


def bilinear_sample(f: Node, cu: Node, cv: Node) -> tuple[Node, Node]:
    """Sample field f at continuous pixel positions (cu, cv).

    Returns the interpolated node and a {0,1} constant mask that is 1
    exactly where all four neighbours lie inside the image. Out-of-mask
    samples are 0. Gradients flow to f and to both coordinate fields.
    """
    tape = f.tape
    if cu.tape is not tape or cv.tape is not tape:
        raise ContractError("operands belong to different tapes")
    if f.is_scalar or cu.is_scalar or cv.is_scalar:
        raise ShapeError("bilinear_sample requires field nodes")
    if cu.value.shape != cv.value.shape:
        raise ShapeError("coordinate fields must share a shape")
    h, w = f.value.shape
    x = cu.value
    y = cv.value
    valid = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc), w - 2).astype(np.intp)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.intp)
    x1 = x0 + 1
    y1 = y0 + 1
    wx = xc - x0
    wy = yc - y0
    f00 = f.value[y0, x0]
    f01 = f.value[y0, x1]
    f10 = f.value[y1, x0]
    f11 = f.value[y1, x1]
    top = f00 * (1.0 - wx) + f01 * wx
    bot = f10 * (1.0 - wx) + f11 * wx
    out = (top * (1.0 - wy) + bot * wy) * valid

    def vjp_f(g):
        gm = g * valid
        grad = np.zeros_like(f.value)
        np.add.at(grad, (y0, x0), gm * (1.0 - wx) * (1.0 - wy))
        np.add.at(grad, (y0, x1), gm * wx * (1.0 - wy))
        np.add.at(grad, (y1, x0), gm * (1.0 - wx) * wy)
        np.add.at(grad, (y1, x1), gm * wx * wy)
        return grad

    def vjp_cu(g):
        return g * valid * ((f01 - f00) * (1.0 - wy) + (f11 - f10) * wy)

    def vjp_cv(g):
        return g * valid * (bot - top)

    node = tape.op("bilinear", out, (f, cu, cv), (vjp_f, vjp_cu, vjp_cv))
    mask = tape.constant(valid.astype(np.float64))
    return node, mask


# ---------------------------------------------------------------------------
# structured field of 3-vectors
# ---------------------------------------------------------------------------


@dataclass
class VectorField3:
    """Three co-registered scalar fields forming a per-pixel 3-vector."""

    x: Node
    y: Node
    z: Node

    def __post_init__(self):
        if not (self.x.shape == self.y.shape == self.z.shape):
            raise ShapeError("vector field components must share a shape")

    @property
    def components(self) -> tuple[Node, Node, Node]:
        return (self.x, self.y, self.z)

    @property
    def shape(self):
        return self.x.shape

    def values(self) -> np.ndarray:
        """Stack forward values to an (H, W, 3) array."""
        return np.stack([c.value for c in self.components], axis=-1)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    """Outcome of an analytic-vs-finite-difference comparison.

    ``per_leaf`` maps leaf name to its maximum relative error
    |a - n| / max(|a|, |n|, eps_denom) over the sampled coordinates.
    """

    per_leaf: dict[str, float]
    worst_leaf: str
    worst_coord: tuple
    max_rel_err: float
    eps_fd: float
    samples_per_leaf: int
    checked: int = 0
    analytic_worst: float = 0.0
    numeric_worst: float = 0.0
    extras: dict = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def to_dict(self) -> dict:
        return {
            "per_leaf": {k: float(v) for k, v in self.per_leaf.items()},
            "worst_leaf": self.worst_leaf,
            "worst_coord": list(self.worst_coord),
            "max_rel_err": float(self.max_rel_err),
            "eps_fd": float(self.eps_fd),
            "samples_per_leaf": int(self.samples_per_leaf),
            "checked": int(self.checked),
            "analytic_at_worst": float(self.analytic_worst),
            "numeric_at_worst": float(self.numeric_worst),
        }


def grad_check(
    build,
    leaf_values: dict[str, np.ndarray],
    eps_fd: float = 1e-4,
    samples_per_leaf: int = 24,
    seed: int = 0,
    eps_denom: float = 1e-6,
) -> GradReport:
    """Compare analytic gradients of a loss graph against central differences.

    ``build(tape, leaves)`` must deterministically construct a scalar loss
    node from the given leaf nodes. Per leaf, up to ``samples_per_leaf``
    coordinates are perturbed by +-eps_fd (all coordinates for scalars and
    small fields). A re-evaluation mismatch at the base point means the
    builder is not deterministic and raises ContractError.
    """

    def evaluate(values) -> float:
        tape = Tape()
        leaves = {name: tape.leaf(name, v) for name, v in values.items()}
        loss = build(tape, leaves)
        if not isinstance(loss, Node) or not loss.is_scalar:
            raise ContractError("builder must return a scalar node")
        return float(loss.value)

    base = {name: _as_value(v).copy() for name, v in leaf_values.items()}
    f0 = evaluate(base)
    if evaluate(base) != f0:
        raise ContractError("builder is not deterministic: re-evaluation mismatch")

    tape = Tape()
    leaves = {name: tape.leaf(name, v) for name, v in base.items()}
    loss = build(tape, leaves)
    analytic = tape.backward(loss)

    rng = np.random.default_rng(seed)
    per_leaf: dict[str, float] = {}
    worst = ("", (), -1.0, 0.0, 0.0)
    checked = 0
    for name, value in base.items():
        flat = value.reshape(-1)
        n = flat.size
        if n <= samples_per_leaf:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=samples_per_leaf, replace=False)
        worst_leaf_err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps_fd
            fp = evaluate(base)
            flat[i] = orig - eps_fd
            fm = evaluate(base)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps_fd)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), eps_denom)
            checked += 1
            if rel > worst_leaf_err:
                worst_leaf_err = rel
            if rel > worst[2]:
                coord = np.unravel_index(i, value.shape) if value.ndim else ()
                worst = (name, tuple(int(c) for c in coord), rel, a, numeric)
        per_leaf[name] = worst_leaf_err
    return GradReport(
        per_leaf=per_leaf,
        worst_leaf=worst[0],
        worst_coord=worst[1],
        max_rel_err=worst[2],
        eps_fd=eps_fd,
        samples_per_leaf=samples_per_leaf,
        checked=checked,
        analytic_worst=worst[3],
        numeric_worst=worst[4],
    )
