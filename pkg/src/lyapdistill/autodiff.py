"""Minimal 64-bit autodiff engine with forward and reverse mode.

Values are plain float64 ndarrays. Gradient tracking starts at ``leaf``
variables: an operation returns a taped ``Var`` only when at least one input
is a ``Var``, otherwise it evaluates eagerly in numpy and returns a raw
array. Forward mode is carried by ``DualBatch`` pairs whose tangents are
propagated compositionally through the same operation set, so a tangent
built from taped primals stays differentiable (reverse-over-forward), which
is what lets directional-sensitivity losses be trained by gradient descent.

The primitive set is deliberately closed and small: affine maps, elementwise
tanh (sigmoid/SiLU are composites), sin/cos, sqrt, sums, concatenation, and
flat-vector slicing/reshaping for parameter unpacking.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    """A value that must be finite contains NaN or Inf."""


def as_array(x, name="value"):
    """Coerce to a float64 ndarray and reject non-finite entries."""
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return a


def check_finite(x, name="value"):
    if isinstance(x, DualBatch):
        check_finite(x.primal, name)
        if x.tangent is not None:
            check_finite(x.tangent, f"{name} tangent")
        return x
    a = x.value if isinstance(x, Var) else x
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return x


class Var:
    """A taped node. Everything reachable from a Var tracks gradients."""

    __slots__ = ("value", "parents", "vjp_rule")

    def __init__(self, value, parents=(), vjp_rule=None):
        self.value = value
        self.parents = parents
        self.vjp_rule = vjp_rule

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.value!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class DualBatch:
    """Forward-mode carrier: a primal with a same-shape tangent.

    A ``None`` tangent means an exact zero tangent and is skipped by the
    propagation rules. Primal and tangent may each be a raw array or a Var.
    """

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        if tangent is not None:
            ps = primal.shape if isinstance(primal, Var) else np.shape(primal)
            ts = tangent.shape if isinstance(tangent, Var) else np.shape(tangent)
            if ps != ts:
                raise ValueError(f"primal shape {ps} != tangent shape {ts}")
        self.primal = primal
        self.tangent = tangent


def leaf(x):
    """Create a gradient-tracked variable from array data."""
    return Var(as_array(x, "leaf"))


def value_of(x):
    """Underlying array of a Var/DualBatch, or the input unchanged."""
    if isinstance(x, DualBatch):
        x = x.primal
    if isinstance(x, Var):
        return x.value
    return x


def _is_dual(*args):
    return any(isinstance(a, DualBatch) for a in args)


def _is_var(*args):
    return any(isinstance(a, Var) for a in args)


def _split(x):
    if isinstance(x, DualBatch):
        return x.primal, x.tangent
    return x, None


def _raw(x):
    return x.value if isinstance(x, Var) else x


def _node(value, parents, vjp_rule):
    # parents keep their operand positions (raw entries included) so the
    # gradients a vjp rule returns stay aligned with them
    return Var(value, tuple(parents), vjp_rule)


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    if _is_dual(a, b):
        ap, at = _split(a)
        bp, bt = _split(b)
        p = add(ap, bp)
        if at is None:
            t = bt
        elif bt is None:
            t = at
        else:
            t = add(at, bt)
        return DualBatch(p, t)
    if _is_var(a, b):
        av, bv = _raw(a), _raw(b)
        ash, bsh = np.shape(av), np.shape(bv)

        def rule(g):
            return (_unbroadcast(g, ash) if isinstance(a, Var) else None,
                    _unbroadcast(g, bsh) if isinstance(b, Var) else None)

        return _node(av + bv, (a, b), rule)
    return np.add(a, b)


def neg(a):
    if isinstance(a, DualBatch):
        return DualBatch(neg(a.primal), None if a.tangent is None else neg(a.tangent))
    if isinstance(a, Var):
        return _node(-a.value, (a,), lambda g: (-g,))
    return np.negative(a)


def sub(a, b):
    return add(a, neg(b))


def mul(a, b):
    if _is_dual(a, b):
        ap, at = _split(a)
        bp, bt = _split(b)
        p = mul(ap, bp)
        t = None
        if at is not None:
            t = mul(at, bp)
        if bt is not None:
            t2 = mul(ap, bt)
            t = t2 if t is None else add(t, t2)
        return DualBatch(p, t)
    if _is_var(a, b):
        av, bv = _raw(a), _raw(b)
        ash, bsh = np.shape(av), np.shape(bv)

        def rule(g):
            return (_unbroadcast(g * bv, ash) if isinstance(a, Var) else None,
                    _unbroadcast(g * av, bsh) if isinstance(b, Var) else None)

        return _node(av * bv, (a, b), rule)
    return np.multiply(a, b)


def div(a, b):
    if _is_dual(a, b):
        ap, at = _split(a)
        bp, bt = _split(b)
        p = div(ap, bp)
        t = None
        if at is not None:
            t = div(at, bp)
        if bt is not None:
            t2 = neg(div(mul(p, bt), bp))
            t = t2 if t is None else add(t, t2)
        return DualBatch(p, t)
    if _is_var(a, b):
        av, bv = _raw(a), _raw(b)
        if np.any(bv == 0.0):
            raise ZeroDivisionError("division by zero in div")
        ash, bsh = np.shape(av), np.shape(bv)
        out = av / bv

        def rule(g):
            return (_unbroadcast(g / bv, ash) if isinstance(a, Var) else None,
                    _unbroadcast(-g * out / bv, bsh) if isinstance(b, Var) else None)

        return _node(out, (a, b), rule)
    bv = np.asarray(b)
    if np.any(bv == 0.0):
        raise ZeroDivisionError("division by zero in div")
    return np.divide(a, bv)


def matmul(a, b):
    """a @ b with a of rank 1 or 2 and b of rank 2."""
    if _is_dual(a, b):
        ap, at = _split(a)
        bp, bt = _split(b)
        p = matmul(ap, bp)
        t = None
        if at is not None:
            t = matmul(at, bp)
        if bt is not None:
            t2 = matmul(ap, bt)
            t = t2 if t is None else add(t, t2)
        return DualBatch(p, t)
    if _is_var(a, b):
        av, bv = _raw(a), _raw(b)

        def rule(g):
            if av.ndim == 1:
                ga = bv @ g if isinstance(a, Var) else None
                gb = np.outer(av, g) if isinstance(b, Var) else None
            else:
                ga = g @ bv.T if isinstance(a, Var) else None
                gb = av.T @ g if isinstance(b, Var) else None
            return ga, gb

        return _node(av @ bv, (a, b), rule)
    return np.matmul(a, b)


def tanh(a):
    if isinstance(a, DualBatch):
        p = tanh(a.primal)
        t = None
        if a.tangent is not None:
            t = mul(a.tangent, sub(1.0, mul(p, p)))
        return DualBatch(p, t)
    if isinstance(a, Var):
        out = np.tanh(a.value)
        return _node(out, (a,), lambda g: (g * (1.0 - out * out),))
    return np.tanh(a)


def sigmoid(a):
    # stable composite: 0.5 * tanh(x/2) + 0.5
    return add(mul(0.5, tanh(mul(0.5, a))), 0.5)


def silu(a):
    return mul(a, sigmoid(a))


def sin(a):
    if isinstance(a, DualBatch):
        t = None if a.tangent is None else mul(a.tangent, cos(a.primal))
        return DualBatch(sin(a.primal), t)
    if isinstance(a, Var):
        cv = np.cos(a.value)
        return _node(np.sin(a.value), (a,), lambda g: (g * cv,))
    return np.sin(a)


def cos(a):
    if isinstance(a, DualBatch):
        t = None if a.tangent is None else neg(mul(a.tangent, sin(a.primal)))
        return DualBatch(cos(a.primal), t)
    if isinstance(a, Var):
        sv = np.sin(a.value)
        return _node(np.cos(a.value), (a,), lambda g: (-g * sv,))
    return np.cos(a)


def sqrt(a):
    if isinstance(a, DualBatch):
        p = sqrt(a.primal)
        t = None if a.tangent is None else div(a.tangent, mul(2.0, p))
        return DualBatch(p, t)
    if isinstance(a, Var):
        if np.any(a.value < 0.0):
            raise ValueError("sqrt of negative value")
        out = np.sqrt(a.value)
        return _node(out, (a,), lambda g: (g / (2.0 * out),))
    if np.any(np.asarray(a) < 0.0):
        raise ValueError("sqrt of negative value")
    return np.sqrt(a)


def square(a):
    return mul(a, a)


def sum_(a, axis=None):
    if isinstance(a, DualBatch):
        t = None if a.tangent is None else sum_(a.tangent, axis)
        return DualBatch(sum_(a.primal, axis), t)
    if isinstance(a, Var):
        shape = a.value.shape

        def rule(g):
            if axis is None:
                return (np.full(shape, g),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape),)

        return _node(a.value.sum(axis=axis), (a,), rule)
    return np.sum(a, axis=axis)


def mean(a, axis=None):
    shape = np.shape(value_of(a))
    n = int(np.prod(shape)) if axis is None else shape[axis]
    return div(sum_(a, axis), float(n))


def concat(parts, axis=-1):
    if any(isinstance(p, DualBatch) for p in parts):
        prims, tans = [], []
        for p in parts:
            pp, pt = _split(p)
            prims.append(pp)
            if pt is None:
                pt = np.zeros(np.shape(value_of(pp)))
            tans.append(pt)
        return DualBatch(concat(prims, axis), concat(tans, axis))
    if any(isinstance(p, Var) for p in parts):
        vals = [_raw(p) for p in parts]
        sizes = [v.shape[axis] for v in vals]
        splits = np.cumsum(sizes)[:-1]

        def rule(g):
            pieces = np.split(g, splits, axis=axis)
            return tuple(pc if isinstance(p, Var) else None
                         for pc, p in zip(pieces, parts))

        return _node(np.concatenate(vals, axis=axis), tuple(parts), rule)
    return np.concatenate(parts, axis=axis)


def reshape(a, shape):
    if isinstance(a, DualBatch):
        t = None if a.tangent is None else reshape(a.tangent, shape)
        return DualBatch(reshape(a.primal, shape), t)
    if isinstance(a, Var):
        orig = a.value.shape
        return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))
    return np.reshape(a, shape)


def narrow(a, start, stop):
    """Slice [start:stop] of a flat vector; the parameter-unpacking primitive."""
    if isinstance(a, DualBatch):
        t = None if a.tangent is None else narrow(a.tangent, start, stop)
        return DualBatch(narrow(a.primal, start, stop), t)
    if isinstance(a, Var):
        n = a.value.shape[0]

        def rule(g):
            out = np.zeros(n)
            out[start:stop] = g
            return (out,)

        return _node(a.value[start:stop], (a,), rule)
    return a[start:stop]


def dot(a, b):
    return sum_(mul(a, b))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _var_parents(node):
    return (p for p in node.parents if isinstance(p, Var))


def _topo_order(root):
    order = []
    visited = {id(root)}
    stack = [(root, _var_parents(root))]
    while stack:
        node, it = stack[-1]
        pushed = False
        for p in it:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, _var_parents(p)))
                pushed = True
                break
        if not pushed:
            order.append(node)
            stack.pop()
    return order


def grads_of(output, leaves, seed=None):
    """Gradients of a Var ``output`` with respect to ``leaves``.

    ``seed`` is the cotangent at the output (defaults to 1.0 for scalars).
    Leaves not reached by the reverse sweep get zero gradients.
    """
    if not isinstance(output, Var):
        return [np.zeros_like(value_of(l)) for l in leaves]
    if seed is None:
        if output.value.ndim != 0 and output.value.size != 1:
            raise ValueError("default seed requires a scalar output")
        seed = np.ones_like(output.value)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.value.shape:
            raise ValueError(
                f"seed shape {seed.shape} != output shape {output.value.shape}")
    grads = {id(output): seed}
    for node in reversed(_topo_order(output)):
        g = grads.get(id(node))
        if g is None or node.vjp_rule is None:
            continue
        for p, pg in zip(node.parents, node.vjp_rule(g)):
            if pg is None or not isinstance(p, Var):
                continue
            pid = id(p)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return [grads.get(id(l), np.zeros_like(l.value)) for l in leaves]


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def jvp(f, x, v):
    """Evaluate (f(x), J·v) by tangent propagation; no Jacobian is formed."""
    x = as_array(x, "x")
    v = as_array(v, "v")
    if x.shape != v.shape:
        raise ValueError(f"x shape {x.shape} != v shape {v.shape}")
    out = f(DualBatch(x, v))
    if not isinstance(out, DualBatch):
        # f ignored its input's tangent structure (e.g. constant map)
        check_finite(value_of(out), "jvp primal")
        return out, np.zeros_like(value_of(out))
    p = out.primal
    t = np.zeros_like(value_of(p)) if out.tangent is None else out.tangent
    # primal and tangent stay taped when f closes over tracked leaves,
    # which is what makes sensitivity losses trainable in reverse mode
    check_finite(value_of(p), "jvp primal")
    check_finite(value_of(t), "jvp tangent")
    return p, t


def vjp(f, x, u):
    """Evaluate Jᵀ·u by reverse-mode taping through f at x."""
    x = as_array(x, "x")
    u = as_array(u, "u")
    lx = Var(x)
    out = f(lx)
    ov = value_of(out)
    if u.shape != ov.shape:
        raise ValueError(f"u shape {u.shape} != f(x) shape {ov.shape}")
    if not isinstance(out, Var):
        return np.zeros_like(x)
    (g,) = grads_of(out, [lx], seed=u)
    return check_finite(g, "vjp result")


def grad(loss, params):
    """Gradient of a scalar-valued map at ``params``."""
    return value_and_grad(loss, params)[1]


def value_and_grad(loss, params):
    params = as_array(params, "params")
    lp = Var(params)
    out = loss(lp)
    ov = value_of(out)
    if np.ndim(ov) != 0 and np.size(ov) != 1:
        raise ValueError("loss must be scalar-valued")
    check_finite(ov, "loss value")
    if not isinstance(out, Var):
        return float(ov), np.zeros_like(params)
    (g,) = grads_of(out, [lp])
    return float(ov), check_finite(g, "gradient")


def finite_difference_jvp(f, x, v, h=1e-5):
    """Central-difference J·v; the independent oracle for jvp."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = as_array(x, "x")
    v = as_array(v, "v")
    if x.shape != v.shape:
        raise ValueError(f"x shape {x.shape} != v shape {v.shape}")
    fp = value_of(f(x + h * v))
    fm = value_of(f(x - h * v))
    return (fp - fm) / (2.0 * h)


def finite_difference_grad(loss, params, indices=None, h=1e-6):
    """Central-difference gradient on selected coordinates (all by default)."""
    params = as_array(params, "params")
    flat = params.ravel()
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in idx:
        e = np.zeros(flat.size)
        e[i] = h
        fp = float(value_of(loss((flat + e).reshape(params.shape))))
        fm = float(value_of(loss((flat - e).reshape(params.shape))))
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(params.shape)
