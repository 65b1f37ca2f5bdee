"""A small reverse-mode differentiation kernel over numpy arrays.

Only the operations the trajectory model needs are provided.  Each op
records its parents and a closure that maps the output gradient to parent
gradients; :meth:`Tensor.backward` replays the closures in reverse
topological order.  The LSTM step and the bivariate Gaussian likelihood are
fused ops with hand-written backward passes.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=float)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --- reductions and shape ------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(
        np.stack([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


# --- linear algebra ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for a (..., n, k) and b (k, m) or matching batch shapes."""
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _make(a.data @ b.data, (a, b), back)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum; every index of an operand must occur in the other or the output."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    return _make(
        np.einsum(spec, a.data, b.data),
        (a, b),
        lambda g: (np.einsum(f"{out},{sb}->{sa}", g, b.data), np.einsum(f"{out},{sa}->{sb}", g, a.data)),
    )


# --- softmax family ----------------------------------------------------------------


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    sh = a.data - m
    lse = np.log(np.exp(sh).sum(axis=axis, keepdims=True))
    y = sh - lse
    p = np.exp(y)
    return _make(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def masked_softmax(a, mask, axis=-1) -> Tensor:
    """Softmax over entries where ``mask`` is true; all-masked slices give zeros."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    filled = np.where(mask, a.data, -np.inf)
    m = filled.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(np.where(mask, a.data, 0.0) - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    y = np.where(s > 0, e / np.where(s > 0, s, 1.0), 0.0)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


# --- fused model ops ----------------------------------------------------------------


def lstm_step(xw, hc, w_h) -> Tensor:
    """One LSTM update.

    ``xw`` is the precomputed input projection plus bias, shape (B, 4H) with
    gate order (input, forget, cell, output); ``hc`` packs the previous
    hidden and cell states as (B, 2H); ``w_h`` is (H, 4H).  Returns the new
    packed (B, 2H) state.
    """
    xw, hc, w_h = as_tensor(xw), as_tensor(hc), as_tensor(w_h)
    H = w_h.shape[0]
    h, c = hc.data[:, :H], hc.data[:, H:]
    pre = xw.data + h @ w_h.data
    i = _sigmoid(pre[:, :H])
    f = _sigmoid(pre[:, H : 2 * H])
    gg = np.tanh(pre[:, 2 * H : 3 * H])
    o = _sigmoid(pre[:, 3 * H :])
    c2 = f * c + i * gg
    tc = np.tanh(c2)
    h2 = o * tc

    def back(g):
        gh, gc = g[:, :H], g[:, H:]
        gc = gc + gh * o * (1.0 - tc * tc)
        dpre = np.concatenate(
            [
                gc * gg * i * (1.0 - i),
                gc * c * f * (1.0 - f),
                gc * i * (1.0 - gg * gg),
                gh * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        g_hc = np.concatenate([dpre @ w_h.data.T, gc * f], axis=1)
        g_xw = _unbroadcast(dpre, xw.shape)
        return g_xw, g_hc, h.T @ dpre

    return _make(np.concatenate([h2, c2], axis=1), (xw, hc, w_h), back)


LOG_SIGMA_CLIP = 6.0
RHO_PRE_CLIP = 5.0
LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_params(raw: np.ndarray, pos_scale: float = 1.0):
    """Decoder outputs (..., 5) -> (mu (..., 2) metres, sigma (..., 2), rho (...))."""
    mu = raw[..., :2] * pos_scale
    sigma = np.exp(np.clip(raw[..., 2:4], -LOG_SIGMA_CLIP, LOG_SIGMA_CLIP))
    rho = np.tanh(np.clip(raw[..., 4], -RHO_PRE_CLIP, RHO_PRE_CLIP))
    return mu, sigma, rho


def bivariate_nll(raw, target, pos_scale: float = 1.0) -> Tensor:
    """Per-point negative log density of ``target`` under the decoder's Gaussians.

    ``raw`` is (..., 5) = (mu_x, mu_y, log sigma_x, log sigma_y, pre-rho), with
    mu in units of ``pos_scale`` metres; ``target`` broadcasts against (..., 2).
    Returns (...).
    """
    raw = as_tensor(raw)
    r = raw.data
    mu, sigma, rho = gaussian_params(r, pos_scale)
    ls = np.log(sigma)
    y = np.broadcast_to(np.asarray(target, dtype=float), mu.shape)
    dx = (y[..., 0] - mu[..., 0]) / sigma[..., 0]
    dy = (y[..., 1] - mu[..., 1]) / sigma[..., 1]
    q = 1.0 - rho * rho
    quad = dx * dx + dy * dy - 2.0 * rho * dx * dy
    nll = LOG_2PI + ls[..., 0] + ls[..., 1] + 0.5 * np.log(q) + quad / (2.0 * q)

    def back(g):
        ex = (dx - rho * dy) / q
        ey = (dy - rho * dx) / q
        out = np.empty_like(r)
        out[..., 0] = -ex / sigma[..., 0] * pos_scale
        out[..., 1] = -ey / sigma[..., 1] * pos_scale
        in_x = np.abs(r[..., 2]) < LOG_SIGMA_CLIP
        in_y = np.abs(r[..., 3]) < LOG_SIGMA_CLIP
        out[..., 2] = np.where(in_x, 1.0 - dx * ex, 0.0)
        out[..., 3] = np.where(in_y, 1.0 - dy * ey, 0.0)
        in_r = np.abs(r[..., 4]) < RHO_PRE_CLIP
        out[..., 4] = np.where(in_r, -rho - dx * dy + rho * quad / q, 0.0)
        return (out * g[..., None],)

    return _make(nll, (raw,), back)


# --- parameters -------------------------------------------------------------------


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=float), requires_grad=True)
