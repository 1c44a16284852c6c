"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records eagerly-evaluated ops; backward() walks the records in reverse
insertion order (a valid reverse topological order) exactly once.  Ops accept
Vars mixed with plain scalars/arrays; non-Var operands are constants and do
not participate in differentiation.  The module-level functions (ad.exp,
ad.sqrt, ...) also accept plain numpy inputs and fall through to numpy, so
shared math can be written once and run taped or untaped.
"""

from __future__ import annotations

import numpy as np

from . import _kernels


class Tape:
    """Recorder for one forward pass.  Single-threaded by contract."""

    def __init__(self):
        self._records = []  # (out_idx, [(in_idx, vjp_fn), ...])
        self._count = 0

    def _next_idx(self):
        i = self._count
        self._count += 1
        return i

    def var(self, value, requires_grad=False) -> "Var":
        return Var(self, np.asarray(value, dtype=np.float64), requires_grad)

    def record(self, value, parents):
        """Append an op result.  parents: [(var, vjp(grad) -> grad_in), ...]."""
        tracked = [(p.idx, fn) for p, fn in parents if p.requires_grad]
        out = Var(self, value, bool(tracked))
        if tracked:
            self._records.append((out.idx, tracked))
        return out

    def clear(self):
        self._records.clear()
        self._count = 0


class Var:
    """A float64 array (rank <= 3) recorded on a tape."""

    __slots__ = ("tape", "idx", "value", "requires_grad")

    # make ndarray op Var defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape, value, requires_grad=False):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 3:
            raise ValueError("Var supports rank <= 3 arrays")
        self.tape = tape
        self.idx = tape._next_idx()
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.value.shape}, grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, e):
        return pow(self, e)


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _tape_of(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _binary(a, b, value, vjp_a, vjp_b):
    tape = _tape_of(a, b)
    if tape is None:
        return value
    parents = []
    if isinstance(a, Var):
        sa = a.value.shape
        parents.append((a, lambda g, f=vjp_a, s=sa: _unbroadcast(f(g), s)))
    if isinstance(b, Var):
        sb = b.value.shape
        parents.append((b, lambda g, f=vjp_b, s=sb: _unbroadcast(f(g), s)))
    return tape.record(value, parents)


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    av, bv = _val(a), _val(b)
    return _binary(a, b, av + bv, lambda g: g, lambda g: g)


def sub(a, b):
    av, bv = _val(a), _val(b)
    return _binary(a, b, av - bv, lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul expects rank-2 operands")
    return _binary(a, b, av @ bv,
                   lambda g: g @ bv.T,
                   lambda g: av.T @ g)


def affine(x, w, b):
    """x @ w + b with a fused record (saves one tape node per layer)."""
    xv, wv, bv = _val(x), _val(w), _val(b)
    value = xv @ wv + bv
    tape = _tape_of(x, w, b)
    if tape is None:
        return value
    parents = []
    if isinstance(x, Var):
        parents.append((x, lambda g: g @ wv.T))
    if isinstance(w, Var):
        parents.append((w, lambda g: xv.T @ g))
    if isinstance(b, Var):
        parents.append((b, lambda g: g.sum(axis=0)))
    return tape.record(value, parents)


def pow(base, expo):
    """base ** expo, differentiable in both arguments; base floored at 1e-12."""
    bv, ev = _val(base), _val(expo)
    bf = np.maximum(bv, 1e-12)
    out = bf ** ev
    return _binary(base, expo, out,
                   lambda g: g * ev * bf ** (ev - 1.0) * (bv > 0),
                   lambda g: g * out * np.log(bf))


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def relu(x):
    xv = _val(x)
    mask = xv > 0
    return _binary(x, None, xv * mask, lambda g: g * mask, None)


# Kernel dispatch only pays off on big arrays; tiny/0-d inputs stay in numpy.
_KERNEL_MIN_SIZE = 4096


def _sigmoid_val(xv):
    if xv.size < _KERNEL_MIN_SIZE:
        return 1.0 / (1.0 + np.exp(-xv))
    out = np.empty_like(xv)
    _kernels.sigmoid_fwd(np.ascontiguousarray(xv), out)
    return out


def _softplus_val(xv):
    if xv.size < _KERNEL_MIN_SIZE:
        return np.logaddexp(0.0, xv)
    out = np.empty_like(xv)
    _kernels.softplus_fwd(np.ascontiguousarray(xv), out)
    return out


def _exp_val(xv):
    if xv.size < _KERNEL_MIN_SIZE:
        return np.exp(xv)
    out = np.empty_like(xv)
    _kernels.exp_fwd(np.ascontiguousarray(xv), out)
    return out


def sigmoid(x):
    if not isinstance(x, Var):
        return _sigmoid_val(np.asarray(x, dtype=np.float64))
    out = _sigmoid_val(x.value)
    return x.tape.record(out, [(x, lambda g: g * out * (1.0 - out))])


def softplus(x):
    if not isinstance(x, Var):
        return _softplus_val(np.asarray(x, dtype=np.float64))
    out = _softplus_val(x.value)
    sig = _sigmoid_val(x.value)
    return x.tape.record(out, [(x, lambda g: g * sig)])


def exp(x):
    if not isinstance(x, Var):
        return _exp_val(np.asarray(x, dtype=np.float64))
    out = _exp_val(x.value)
    return x.tape.record(out, [(x, lambda g: g * out)])


def log(x):
    if not isinstance(x, Var):
        return np.log(x)
    if np.any(x.value <= 0):
        raise ValueError(f"log domain violation at node {x.idx}: min value "
                         f"{x.value.min()!r}")
    out = np.log(x.value)
    xv = x.value
    return x.tape.record(out, [(x, lambda g: g / xv)])


def sqrt(x):
    if not isinstance(x, Var):
        return np.sqrt(x)
    out = np.sqrt(x.value)
    return x.tape.record(out, [(x, lambda g: g * 0.5 / out)])


def sin(x):
    if not isinstance(x, Var):
        return np.sin(x)
    xv = x.value
    return x.tape.record(np.sin(xv), [(x, lambda g: g * np.cos(xv))])


def cos(x):
    if not isinstance(x, Var):
        return np.cos(x)
    xv = x.value
    return x.tape.record(np.cos(xv), [(x, lambda g: -g * np.sin(xv))])


def atan2(y, x):
    yv, xv = _val(y), _val(x)
    if not isinstance(y, Var) and not isinstance(x, Var):
        return np.arctan2(yv, xv)
    denom = xv * xv + yv * yv
    return _binary(y, x, np.arctan2(yv, xv),
                   lambda g: g * xv / denom,
                   lambda g: -g * yv / denom)


def minimum(a, b):
    av, bv = _val(a), _val(b)
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.minimum(av, bv)
    take_a = av <= bv
    return _binary(a, b, np.minimum(av, bv),
                   lambda g: g * take_a, lambda g: g * (~take_a))


def maximum(a, b):
    av, bv = _val(a), _val(b)
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.maximum(av, bv)
    take_a = av >= bv
    return _binary(a, b, np.maximum(av, bv),
                   lambda g: g * take_a, lambda g: g * (~take_a))


def where(cond, a, b):
    """Select by a plain boolean array; gradients route to the taken branch."""
    av, bv = _val(a), _val(b)
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.where(cond, av, bv)
    cond = np.asarray(cond)
    return _binary(a, b, np.where(cond, av, bv),
                   lambda g: g * cond, lambda g: g * (~cond))


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum(x, axis=None):
    if not isinstance(x, Var):
        return np.sum(x, axis=axis)
    xv = x.value
    out = xv.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, xv.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy()

    return x.tape.record(out, [(x, vjp)])


def mean(x, axis=None):
    if not isinstance(x, Var):
        return np.mean(x, axis=axis)
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def cumsum(x, axis):
    if not isinstance(x, Var):
        return np.cumsum(x, axis=axis)
    out = np.cumsum(x.value, axis=axis)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return x.tape.record(out, [(x, vjp)])


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    old = x.value.shape
    return x.tape.record(x.value.reshape(shape),
                         [(x, lambda g: g.reshape(old))])


def broadcast_to(x, shape):
    if not isinstance(x, Var):
        return np.broadcast_to(x, shape)
    old = x.value.shape
    return x.tape.record(np.broadcast_to(x.value, shape).copy(),
                         [(x, lambda g: _unbroadcast(g, old))])


def concat(xs, axis=0):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, x in enumerate(xs):
        if isinstance(x, Var):
            lo, hi = offsets[i], offsets[i + 1]
            parents.append((x, lambda g, lo=lo, hi=hi:
                            g.take(range(lo, hi), axis=axis)))
    return tape.record(out, parents)


def stack_cols(xs):
    """Stack rank-1 Vars/arrays into a (n, k) array."""
    vals = [_val(x) for x in xs]
    out = np.stack(vals, axis=1)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    parents = [(x, lambda g, j=i: g[:, j]) for i, x in enumerate(xs)
               if isinstance(x, Var)]
    return tape.record(out, parents)


def slice_cols(x, start, stop):
    if not isinstance(x, Var):
        return x[:, start:stop]
    xv = x.value

    def vjp(g):
        full = np.zeros_like(xv)
        full[:, start:stop] = g
        return full

    return x.tape.record(xv[:, start:stop], [(x, vjp)])


def col(x, j):
    """Column j of a rank-2 Var as a rank-1 Var."""
    if not isinstance(x, Var):
        return x[:, j]
    xv = x.value

    def vjp(g):
        full = np.zeros_like(xv)
        full[:, j] = g
        return full

    return x.tape.record(xv[:, j].copy(), [(x, vjp)])


def gather(x, idx, axis=0):
    idx = np.asarray(idx)
    if not isinstance(x, Var):
        return np.take(x, idx, axis=axis)
    xv = x.value
    out = np.take(xv, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(xv)
        np.add.at(full, (idx,) if axis == 0 else (slice(None), idx), g)
        return full

    return x.tape.record(out, [(x, vjp)])


def scatter_add(x, idx, size, axis=0):
    """Adjoint-of-gather as a forward op: rows of x summed into `size` slots."""
    idx = np.asarray(idx)
    xv = _val(x)
    shape = list(xv.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=np.float64)
    np.add.at(out, (idx,) if axis == 0 else (slice(None), idx), xv)
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, [(x, lambda g: np.take(g, idx, axis=axis))])


def custom(tape, value, parents):
    """Record an externally computed op.  parents: [(var, vjp), ...]."""
    return tape.record(np.asarray(value, dtype=np.float64), parents)


# ---------------------------------------------------------------------------
# backward pass and finite-difference checking

class Gradients:
    """Gradient map produced by backward()."""

    def __init__(self, grads, count):
        self._grads = grads
        self._count = count

    def of(self, var: Var) -> np.ndarray:
        g = self._grads.get(var.idx)
        if g is None:
            return np.zeros_like(var.value)
        return np.broadcast_to(np.asarray(g, dtype=np.float64), var.value.shape)


def backward(root: Var) -> Gradients:
    """Accumulate d(root)/d(leaf) for every reachable requires-grad Var."""
    if root.value.ndim != 0 and root.value.size != 1:
        raise ValueError("backward requires a scalar root")
    grads = {root.idx: np.ones_like(root.value)}
    for out_idx, parents in reversed(root.tape._records):
        g = grads.get(out_idx)
        if g is None:
            continue
        for in_idx, vjp in parents:
            contrib = vjp(g)
            prev = grads.get(in_idx)
            if prev is None:
                grads[in_idx] = contrib
            else:
                grads[in_idx] = prev + contrib
    return Gradients(grads, root.tape._count)


def grad_check(f, leaves, h=1e-5):
    """Max relative error between backward() and central finite differences.

    f maps a list of Vars (one per leaf array) to a scalar Var.
    """
    leaves = [np.asarray(x, dtype=np.float64) for x in leaves]
    tape = Tape()
    vs = [tape.var(x, requires_grad=True) for x in leaves]
    y = f(vs)
    if not np.all(np.isfinite(y.value)):
        raise FloatingPointError("non-finite objective in grad_check")
    grads = backward(y)
    analytic = [grads.of(v) for v in vs]

    def feval(xs):
        t = Tape()
        out = f([t.var(x) for x in xs]).value
        return float(out)

    worst = 0.0
    for li, x in enumerate(leaves):
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = feval(leaves)
            flat[j] = orig - h
            fm = feval(leaves)
            flat[j] = orig
            fd = (fp - fm) / (2.0 * h)
            an = analytic[li].reshape(-1)[j]
            if not (np.isfinite(fd) and np.isfinite(an)):
                raise FloatingPointError("non-finite values in grad_check")
            err = abs(an - fd) / max(1e-8, abs(an) + abs(fd))
            worst = max(worst, err)
    return worst
