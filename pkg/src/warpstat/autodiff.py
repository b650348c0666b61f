"""Reverse-mode automatic differentiation over numpy arrays.

All loss functions in this package are built from the primitives below, so a
single backward pass yields exact gradients with respect to every trainable
parameter. Matrix primitives (matmul, Cholesky, triangular solve) carry
adjoint rules so that log-determinants and Gaussian quadratic forms
differentiate without forming explicit inverses.

Values are float64 throughout. Nodes are immutable once created; a graph is
built dynamically by calling the primitives (values are computed eagerly) and
consumed by ``grad``.
"""

import itertools

import numpy as np
import scipy.linalg
import scipy.special
from scipy.special import erf as _erf_np

_NODE_COUNTER = itertools.count()

SQRT2 = float(np.sqrt(2.0))
SQRT_2PI = float(np.sqrt(2.0 * np.pi))
INV_SQRT_2PI = 1.0 / SQRT_2PI


class UnsupportedPrimitiveError(TypeError):
    """Raised when an expression cannot be recorded on the tape."""


class NonFiniteError(ArithmeticError):
    """Raised when a forward value turns non-finite; names the failing op."""

    def __init__(self, op, detail=""):
        self.op = op
        super().__init__(f"non-finite value produced by '{op}'{detail}")


class Node:
    """One value in the computation graph.

    ``parents`` and ``vjps`` are parallel tuples: ``vjps[i]`` maps the
    gradient at this node to the gradient contribution for ``parents[i]``.
    """

    __slots__ = ("value", "op", "parents", "vjps", "idx")

    # defer mixed ndarray/Node arithmetic to the Node operators instead of
    # letting numpy build object arrays
    __array_ufunc__ = None

    def __init__(self, value, op="const", parents=(), vjps=()):
        self.value = value
        self.op = op
        self.parents = parents
        self.vjps = vjps
        self.idx = next(_NODE_COUNTER)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value)

    # --- operator sugar -------------------------------------------------
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

    def __pow__(self, p):
        if isinstance(p, Node):
            raise UnsupportedPrimitiveError(
                "node ** node is not a primitive; use powxy(a, b)"
            )
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def constant(x):
    """Wrap an array as a graph constant (no gradient flows into it)."""
    return Node(np.asarray(x, dtype=np.float64), op="const")


def as_node(x):
    if isinstance(x, Node):
        return x
    if isinstance(x, (int, float, np.floating, np.integer, np.ndarray, list, tuple)):
        return constant(x)
    raise UnsupportedPrimitiveError(f"cannot place {type(x).__name__} on the tape")


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise arithmetic ---------------------------------------------


def add(a, b):
    a, b = as_node(a), as_node(b)
    return Node(
        a.value + b.value,
        op="add",
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(g, b.value.shape),
        ),
    )


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return Node(
        a.value - b.value,
        op="sub",
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(-g, b.value.shape),
        ),
    )


def mul(a, b):
    a, b = as_node(a), as_node(b)
    return Node(
        a.value * b.value,
        op="mul",
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b):
    a, b = as_node(a), as_node(b)
    out = a.value / b.value
    return Node(
        out,
        op="div",
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g / b.value, a.value.shape),
            lambda g: _unbroadcast(-g * out / b.value, b.value.shape),
        ),
    )


def neg(a):
    a = as_node(a)
    return Node(-a.value, op="neg", parents=(a,), vjps=(lambda g: -g,))


def pow_const(a, p):
    a = as_node(a)
    p = float(p)
    out = a.value**p
    return Node(
        out,
        op="pow",
        parents=(a,),
        vjps=(lambda g: g * p * a.value ** (p - 1.0),),
    )


def powxy(a, b):
    """a ** b for node-valued base and exponent (requires a > 0)."""
    return exp(mul(b, log(a)))


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, op="exp", parents=(a,), vjps=(lambda g: g * out,))


def log(a):
    a = as_node(a)
    return Node(np.log(a.value), op="log", parents=(a,), vjps=(lambda g: g / a.value,))


def log1p(a):
    a = as_node(a)
    return Node(
        np.log1p(a.value),
        op="log1p",
        parents=(a,),
        vjps=(lambda g: g / (1.0 + a.value),),
    )


def sqrt(a):
    a = as_node(a)
    out = np.sqrt(a.value)
    return Node(out, op="sqrt", parents=(a,), vjps=(lambda g: g * 0.5 / out,))


def square(a):
    a = as_node(a)
    return Node(
        np.square(a.value), op="square", parents=(a,), vjps=(lambda g: g * 2.0 * a.value,)
    )


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)
    return Node(out, op="tanh", parents=(a,), vjps=(lambda g: g * (1.0 - out * out),))


def sigmoid(a):
    a = as_node(a)
    # numerically stable logistic
    v = a.value
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return Node(out, op="sigmoid", parents=(a,), vjps=(lambda g: g * out * (1.0 - out),))


def softplus(a):
    """log(1 + exp(a)), overflow-safe."""
    a = as_node(a)
    v = a.value
    out = np.logaddexp(0.0, v)
    sig = 1.0 / (1.0 + np.exp(-np.clip(v, -700, 700)))
    return Node(out, op="softplus", parents=(a,), vjps=(lambda g: g * sig,))


def erf(a):
    a = as_node(a)
    return Node(
        _erf_np(a.value),
        op="erf",
        parents=(a,),
        vjps=(lambda g: g * (2.0 / np.sqrt(np.pi)) * np.exp(-a.value**2),),
    )


def absval(a):
    a = as_node(a)
    return Node(
        np.abs(a.value), op="abs", parents=(a,), vjps=(lambda g: g * np.sign(a.value),)
    )


def where(mask, a, b):
    """Select ``a`` where boolean array ``mask`` is true, else ``b``.

    ``mask`` is a plain array (not differentiated through).
    """
    mask = np.asarray(mask, dtype=bool)
    a, b = as_node(a), as_node(b)
    return Node(
        np.where(mask, a.value, b.value),
        op="where",
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(np.where(mask, g, 0.0), a.value.shape),
            lambda g: _unbroadcast(np.where(mask, 0.0, g), b.value.shape),
        ),
    )


# --- reductions and shaping ----------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).copy()

    return Node(np.asarray(out), op="sum", parents=(a,), vjps=(vjp,))


def mean_(a, axis=None, keepdims=False):
    a = as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) / float(n)


def _extreme_reduce(a, axis, keepdims, fn, argfn, opname):
    a = as_node(a)
    val = fn(a.value, axis=axis, keepdims=keepdims)
    if axis is None:
        flat_idx = argfn(a.value)

        def vjp(g):
            out = np.zeros_like(a.value)
            out.flat[flat_idx] = g
            return out

    else:
        idx = argfn(a.value, axis=axis)

        def vjp(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            out = np.zeros_like(a.value)
            np.put_along_axis(out, np.expand_dims(idx, axis), gg, axis=axis)
            return out

    return Node(np.asarray(val), op=opname, parents=(a,), vjps=(vjp,))


def max_(a, axis=None, keepdims=False):
    """Max reduction; gradient routes to the first attaining element."""
    return _extreme_reduce(a, axis, keepdims, np.max, np.argmax, "max")


def min_(a, axis=None, keepdims=False):
    return _extreme_reduce(a, axis, keepdims, np.min, np.argmin, "min")


def reshape(a, shape):
    a = as_node(a)
    return Node(
        a.value.reshape(shape),
        op="reshape",
        parents=(a,),
        vjps=(lambda g: g.reshape(a.value.shape),),
    )


def transpose(a):
    """Swap the last two axes (matrix transpose, batch-safe)."""
    a = as_node(a)
    return Node(
        np.swapaxes(a.value, -1, -2),
        op="transpose",
        parents=(a,),
        vjps=(lambda g: np.swapaxes(g, -1, -2),),
    )


def concat(nodes, axis=0):
    nodes = [as_node(x) for x in nodes]
    sizes = [x.value.shape[axis] for x in nodes]
    splits = np.cumsum(sizes)[:-1]

    def make_vjp(i):
        return lambda g: np.split(g, splits, axis=axis)[i]

    return Node(
        np.concatenate([x.value for x in nodes], axis=axis),
        op="concat",
        parents=tuple(nodes),
        vjps=tuple(make_vjp(i) for i in range(len(nodes))),
    )


def stack(nodes, axis=0):
    nodes = [as_node(x) for x in nodes]

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return Node(
        np.stack([x.value for x in nodes], axis=axis),
        op="stack",
        parents=tuple(nodes),
        vjps=tuple(make_vjp(i) for i in range(len(nodes))),
    )


def take(a, key):
    """Indexing/slicing. Gradient scatter-adds into the source positions."""
    a = as_node(a)
    out = a.value[key]

    def vjp(g):
        buf = np.zeros_like(a.value)
        np.add.at(buf, key, g)
        return buf

    return Node(np.asarray(out), op="take", parents=(a,), vjps=(vjp,))


def gather_rows(a, idx):
    """a[idx] for an integer index array over the leading axis."""
    idx = np.asarray(idx)
    return take(a, idx)


def diagonal(a):
    """Diagonal of the last two axes: (..., m, m) -> (..., m)."""
    a = as_node(a)
    m = a.value.shape[-1]

    def vjp(g):
        out = np.zeros_like(a.value)
        ii = np.arange(m)
        out[..., ii, ii] = g
        return out

    return Node(
        np.diagonal(a.value, axis1=-2, axis2=-1).copy(),
        op="diagonal",
        parents=(a,),
        vjps=(vjp,),
    )


# --- linear algebra -------------------------------------------------------


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise UnsupportedPrimitiveError("matmul operands must be at least 2-D")
    out = av @ bv

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return Node(out, op="matmul", parents=(a, b), vjps=(vjp_a, vjp_b))


def _solve_tri_np(L, B, trans):
    """Triangular solve on plain arrays; batched via generic solve."""
    if L.ndim == 2:
        return scipy.linalg.solve_triangular(L, B, lower=True, trans=1 if trans else 0)
    A = np.swapaxes(L, -1, -2) if trans else L
    return np.linalg.solve(A, B)


def cholesky(a):
    """Lower Cholesky factor of (..., m, m) SPD matrices.

    Raises np.linalg.LinAlgError on failure (callers apply jitter policy).
    """
    a = as_node(a)
    L = np.linalg.cholesky(a.value)

    def vjp(g):
        # adjoint of Cholesky: Abar = 0.5 * (T + T'), T = L^{-T} P' L^{-1},
        # with P = tril(L' g) - 0.5 * diag(L' g)
        Lt_g = np.swapaxes(L, -1, -2) @ g
        P = np.tril(Lt_g)
        m = L.shape[-1]
        ii = np.arange(m)
        P[..., ii, ii] *= 0.5
        T1 = _solve_tri_np(L, np.swapaxes(P, -1, -2), trans=True)  # L^{-T} P'
        T2 = _solve_tri_np(L, np.swapaxes(T1, -1, -2), trans=True)  # L^{-T} (L^{-T} P')'
        return 0.5 * (T2 + np.swapaxes(T2, -1, -2))

    return Node(L, op="cholesky", parents=(a,), vjps=(vjp,))


def solve_triangular(L, B, trans=False):
    """Solve L X = B (or L' X = B when ``trans``) with L lower triangular.

    Shapes: L (..., m, m), B (..., m, k).
    """
    L, B = as_node(L), as_node(B)
    X = _solve_tri_np(L.value, B.value, trans)

    def vjp_L(g):
        gB = _solve_tri_np(L.value, g, not trans)
        if trans:
            out = -X @ np.swapaxes(gB, -1, -2)
        else:
            out = -gB @ np.swapaxes(X, -1, -2)
        out = np.tril(out)
        return _unbroadcast(out, L.value.shape)

    def vjp_B(g):
        return _unbroadcast(_solve_tri_np(L.value, g, not trans), B.value.shape)

    return Node(X, op="solve_triangular", parents=(L, B), vjps=(vjp_L, vjp_B))


# --- composed helpers -----------------------------------------------------


def logdet_chol(L):
    """log det of A = L L' given its Cholesky factor (batched)."""
    return 2.0 * sum_(log(diagonal(L)), axis=-1)


def norm_cdf(x):
    """Standard normal distribution function.

    Primitive on scipy's ndtr: accurate to full relative precision deep in
    the lower tail, where the 0.5*(1 + erf) form cancels catastrophically
    (log-density losses take logs of these values).
    """
    x = as_node(x)
    out = scipy.special.ndtr(x.value)
    return Node(
        out,
        op="norm_cdf",
        parents=(x,),
        vjps=(lambda g: g * INV_SQRT_2PI * np.exp(-0.5 * x.value**2),),
    )


def norm_pdf(x):
    """Standard normal density."""
    return INV_SQRT_2PI * exp(-0.5 * square(x))


# --- backward pass --------------------------------------------------------


def _toposort(output):
    seen = set()
    order = []
    stack_ = [output]
    while stack_:
        node = stack_.pop()
        if node.idx in seen:
            continue
        seen.add(node.idx)
        order.append(node)
        stack_.extend(node.parents)
    order.sort(key=lambda n: n.idx)
    return order


def grad(output, wrt):
    """Gradient of scalar ``output`` with respect to the nodes in ``wrt``.

    Returns a list of arrays with the shapes of the ``wrt`` values. Nodes not
    reachable from ``output`` get zero gradients.
    """
    if output.value.shape != ():
        raise UnsupportedPrimitiveError(
            f"grad needs a scalar output, got shape {output.value.shape}"
        )
    order = _toposort(output)
    want = {w.idx for w in wrt}
    grads = {output.idx: np.ones(())}
    kept = {}
    for node in reversed(order):
        g = grads.pop(node.idx, None)
        if g is None:
            continue
        if node.idx in want:
            kept[node.idx] = g
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            acc = grads.get(parent.idx)
            if acc is None:
                grads[parent.idx] = contrib
            else:
                grads[parent.idx] = acc + contrib
    return [kept.get(w.idx, np.zeros_like(w.value)) for w in wrt]


def first_nonfinite(output):
    """Name of the earliest op in the graph with a non-finite value, or None."""
    for node in _toposort(output):
        if not np.all(np.isfinite(node.value)):
            return node.op
    return None


def check_finite(output):
    """Raise NonFiniteError naming the first bad op if output is non-finite."""
    if not np.all(np.isfinite(output.value)):
        op = first_nonfinite(output)
        raise NonFiniteError(op or output.op)
