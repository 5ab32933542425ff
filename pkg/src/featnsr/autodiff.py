"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Only the operations needed by the field networks, the renderer and the
consistency losses are provided.  Every op records its primal value and a
vector-Jacobian product per differentiable input; ``Tape.backward`` walks the
records once, newest first.

Second-order quantities (gradients of the SDF normal with respect to the
weights) come for free: the normal is built from ordinary tape ops by
forward-propagating input tangents, so reverse mode differentiates through it.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import TapeConsumed

Vjp = Callable[[np.ndarray], np.ndarray]


class Var:
    __slots__ = ("tape", "value", "idx")
    # make ``ndarray op Var`` defer to the Var's reflected operators
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", value: np.ndarray, idx: int):
        self.tape = tape
        self.value = value
        self.idx = idx

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.value.shape})"

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

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


class Tape:
    """Records one forward evaluation; ``backward`` may run once."""

    def __init__(self):
        self._parents: list[tuple[tuple[int, Vjp], ...]] = []
        self._shapes: list[tuple[int, ...]] = []
        self.consumed = False

    def __len__(self):
        return len(self._parents)

    def leaf(self, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        return self._push(value, ())

    def _push(self, value: np.ndarray, parents) -> Var:
        self._parents.append(tuple(parents))
        self._shapes.append(value.shape)
        return Var(self, value, len(self._parents) - 1)

    def record(self, value: np.ndarray, parents: Sequence[tuple[Var, Vjp]]) -> Var:
        return self._push(value, [(p.idx, fn) for p, fn in parents])

    def backward(self, output: Var, wrt: Sequence[Var], adjoint=1.0) -> list[np.ndarray]:
        """Adjoints of ``output`` (seeded with ``adjoint``) for each var in ``wrt``."""
        if self.consumed:
            raise TapeConsumed("backward already ran on this tape")
        self.consumed = True
        grads: list = [None] * len(self._parents)
        grads[output.idx] = np.broadcast_to(np.asarray(adjoint, dtype=np.float64),
                                            output.value.shape).copy()
        keep = {v.idx for v in wrt}
        for i in range(output.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            for pidx, fn in self._parents[i]:
                contrib = fn(g)
                # adjoints are never modified in place, so contributions can be shared
                if grads[pidx] is None:
                    grads[pidx] = contrib
                else:
                    grads[pidx] = grads[pidx] + contrib
            if i not in keep:
                grads[i] = None
        out = []
        for v in wrt:
            g = grads[v.idx]
            out.append(np.zeros(v.value.shape) if g is None else g.reshape(v.value.shape))
        return out


def backward(tape: Tape, loss: Var, params: Var, loss_adjoint=1.0) -> np.ndarray:
    """Gradient of ``loss`` with respect to the flat parameter leaf ``params``."""
    return tape.backward(loss, [params], loss_adjoint)[0]


# ---------------------------------------------------------------------------
# helpers


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _binary(a, b, value, da, db):
    tape = _tape_of(a, b)
    parents = []
    if isinstance(a, Var):
        shape = a.value.shape
        parents.append((a, lambda g: _unbroadcast(da(g), shape)))
    if isinstance(b, Var):
        shape_b = b.value.shape
        parents.append((b, lambda g: _unbroadcast(db(g), shape_b)))
    return tape.record(value, parents)


def _unary(x: Var, value, dx):
    return x.tape.record(value, [(x, dx)])


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    return _binary(a, b, _val(a) + _val(b), lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, _val(a) - _val(b), lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def square(x: Var):
    v = x.value
    return _unary(x, v * v, lambda g: 2.0 * g * v)


def sqrt(x: Var):
    out = np.sqrt(x.value)
    return _unary(x, out, lambda g: 0.5 * g / out)


def exp(x: Var):
    out = np.exp(x.value)
    return _unary(x, out, lambda g: g * out)


def log(x: Var):
    v = x.value
    return _unary(x, np.log(v), lambda g: g / v)


def abs_(x: Var):
    v = x.value
    return _unary(x, np.abs(v), lambda g: g * np.sign(v))


def sigmoid(x: Var):
    out = _sigmoid(x.value)
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def softplus(x: Var, beta: float = 1.0):
    out, slope = softplus_and_slope(x.value, beta)
    return _unary(x, out, lambda g: g * slope)


def softplus_pair(x: Var, beta: float = 1.0):
    """Taped ``softplus(x)`` and its slope ``sigmoid(beta x)`` sharing one exp."""
    out, slope = softplus_and_slope(x.value, beta)
    h = _unary(x, out, lambda g: g * slope)
    d = _unary(x, slope, lambda g: g * (beta * slope * (1.0 - slope)))
    return h, d


def softplus_and_slope(v: np.ndarray, beta: float):
    e = np.exp(-beta * np.abs(v))
    out = np.maximum(v, 0.0) + np.log1p(e) / beta
    slope = np.where(v >= 0, 1.0, e) / (1.0 + e)
    return out, slope


def relu(x: Var):
    v = x.value
    mask = v > 0
    return _unary(x, np.where(mask, v, 0.0), lambda g: g * mask)


def sin(x: Var):
    v = x.value
    return _unary(x, np.sin(v), lambda g: g * np.cos(v))


def where(mask: np.ndarray, a, b):
    """Select ``a`` where ``mask`` else ``b``; ``mask`` is a constant."""
    mask = np.asarray(mask, dtype=bool)
    value = np.where(mask, _val(a), _val(b))
    return _binary(a, b, value, lambda g: g * mask, lambda g: g * ~mask)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-v))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(x, w):
    """``x @ w`` with ``w`` 2-D; ``x`` may carry any number of leading axes."""
    xv, wv = _val(x), _val(w)
    out = xv @ wv
    tape = _tape_of(x, w)
    parents = []
    if isinstance(x, Var):
        parents.append((x, lambda g: g @ wv.T))
    if isinstance(w, Var):
        k = wv.shape[0]
        parents.append((w, lambda g: xv.reshape(-1, k).T @ g.reshape(-1, wv.shape[1])))
    return tape.record(out, parents)


def sum_(x: Var, axis=None, keepdims=False):
    v = x.value
    out = v.sum(axis=axis, keepdims=keepdims)
    shape = v.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _unary(x, np.asarray(out, dtype=np.float64), vjp)


def mean(x: Var, axis=None, keepdims=False):
    n = x.value.size if axis is None else np.prod([x.value.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Var, shape):
    old = x.value.shape
    return _unary(x, x.value.reshape(shape), lambda g: g.reshape(old))


def transpose(x: Var, axes):
    inv = np.argsort(axes)
    return _unary(x, np.transpose(x.value, axes), lambda g: np.transpose(g, inv))


def getitem(x: Var, key):
    v = x.value
    out = v[key]

    def vjp(g):
        full = np.zeros(v.shape)
        np.add.at(full, key, g)
        return full

    return _unary(x, np.array(out, dtype=np.float64), vjp)


def param_view(flat: Var, offset: int, shape) -> Var:
    """Contiguous slice of a flat parameter vector reshaped to ``shape``."""
    n = int(np.prod(shape))
    size = flat.value.shape[0]

    def vjp(g):
        full = np.zeros(size)
        full[offset:offset + n] = g.ravel()
        return full

    return _unary(flat, flat.value[offset:offset + n].reshape(shape), vjp)


def concat(xs: Sequence, axis=-1):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not any(isinstance(x, Var) for x in xs):
        return out
    tape = _tape_of(*xs)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    parents = []
    for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
        if isinstance(x, Var):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(lo, hi)
            sl = tuple(sl)
            parents.append((x, lambda g, sl=sl: g[sl]))
    return tape.record(out, parents)


def exclusive_cumprod(x: Var) -> Var:
    """``out[..., i] = prod_{j<i} x[..., j]`` along the last axis.

    The adjoint avoids dividing by ``x`` so that factors equal to zero are
    handled exactly.
    """
    v = x.value
    n = v.shape[-1]
    out = np.ones_like(v)
    if n > 1:
        out[..., 1:] = np.cumprod(v[..., :-1], axis=-1)

    def vjp(g):
        # d out_i / d x_j = prod_{k<i, k!=j} x_k for i > j
        # suffix recursion r_j = sum_{i>j} g_i prod_{j<k<i} x_k
        r = np.zeros_like(v)
        acc = np.zeros(v.shape[:-1])
        for j in range(n - 2, -1, -1):
            acc = g[..., j + 1] + v[..., j + 1] * acc
            r[..., j] = acc
        return out * r

    return _unary(x, out, vjp)


def bilinear_sample(data: np.ndarray, coords, scale, view=None):
    """Bilinear lookup into constant feature grids at image-space coordinates.

    ``data`` is ``C x Hf x Wf`` (or ``V x C x Hf x Wf`` with an integer
    ``view`` array broadcast against ``coords[..., 0]``).  ``coords[..., :2]``
    holds image pixel coords ``(u, v)``; ``scale = (Wf / W, Hf / H)`` maps them
    to feature coords via ``(u + 0.5) * scale - 0.5``.  Coordinates are clamped
    to the grid border, where the clamped direction has zero derivative.
    Returns ``(..., C)``; a ``Var`` when ``coords`` is one.
    """
    cv = _val(coords)
    if data.ndim == 3:
        data = data[None]
        view = np.zeros(cv.shape[:-1], dtype=np.int64)
    view = np.broadcast_to(np.asarray(view, dtype=np.int64), cv.shape[:-1])
    _, c, hf, wf = data.shape
    sx, sy = scale
    uf = (cv[..., 0] + 0.5) * sx - 0.5
    vf = (cv[..., 1] + 0.5) * sy - 0.5
    in_u = (uf > 0) & (uf < wf - 1)
    in_v = (vf > 0) & (vf < hf - 1)
    uf = np.clip(uf, 0.0, wf - 1)
    vf = np.clip(vf, 0.0, hf - 1)
    u0 = np.minimum(np.floor(uf).astype(np.int64), max(wf - 2, 0))
    v0 = np.minimum(np.floor(vf).astype(np.int64), max(hf - 2, 0))
    u1 = np.minimum(u0 + 1, wf - 1)
    v1 = np.minimum(v0 + 1, hf - 1)
    a = (uf - u0)[..., None]
    b = (vf - v0)[..., None]
    grid = np.moveaxis(data, 1, -1)  # V x Hf x Wf x C
    f00 = grid[view, v0, u0]
    f01 = grid[view, v0, u1]
    f10 = grid[view, v1, u0]
    f11 = grid[view, v1, u1]
    top = f00 + a * (f01 - f00)
    bot = f10 + a * (f11 - f10)
    out = top + b * (bot - top)
    if not isinstance(coords, Var):
        return out
    du = ((1 - b) * (f01 - f00) + b * (f11 - f10)) * (sx * in_u[..., None])
    dv = (bot - top) * (sy * in_v[..., None])

    def vjp(g):
        gu = (g * du).sum(-1)
        gv = (g * dv).sum(-1)
        full = np.zeros(cv.shape)
        full[..., 0] = gu
        full[..., 1] = gv
        return full

    return coords.tape.record(out, [(coords, vjp)])
