"""Dense f64 tensors with a reverse-mode tape and an Adam optimizer.

Ops run eagerly on numpy arrays. When a :class:`Tape` is active (``with Tape()
as tape:``) and an op touches a tensor that requires gradients, the op is
recorded so ``tape.backward(loss, params)`` can return gradients. Outside a
tape every op is a plain forward computation.
"""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

# Floor applied to probabilities before taking logs (KL, NLL).
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError(f"empty tensor of shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("non-finite values in tensor data")
        self.data = arr
        self.requires_grad = requires_grad
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of ops; one writer per tape."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out, inputs, backward_fn):
        # weak back-reference: a strong one would make every activation a GC cycle
        out._tape = weakref.ref(self)
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss, params):
        """Gradients of scalar ``loss`` with respect to each of ``params``.

        Parameters the loss does not depend on get zero arrays.
        """
        if loss._tape is None or loss._tape() is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


def backward(tape, loss, params):
    return tape.backward(loss, params)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, backward_fn):
    if not np.isfinite(data).all():
        raise NumericError("op produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), bw)


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x):
    """Natural log with inputs clamped below at PROB_FLOOR."""
    x = as_tensor(x)
    xc = np.maximum(x.data, PROB_FLOOR)
    live = x.data > PROB_FLOOR
    return _result(np.log(xc), (x,), lambda g: (np.where(live, g / xc, 0.0),))


# -- shape ------------------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def take(x, index, unique=False):
    """``x[index]`` for any numpy index; repeated indices accumulate gradient.

    Pass ``unique=True`` when an advanced index never repeats an element; the
    backward pass then uses plain assignment instead of ``np.add.at``.
    """
    x = as_tensor(x)
    shape = x.shape
    basic = isinstance(index, slice) or (
        isinstance(index, tuple) and all(isinstance(i, (slice, int)) for i in index))

    def bw(g):
        out = np.zeros(shape)
        if basic or unique:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(np.array(x.data[index]), (x,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def embedding(weight, ids):
    """Row lookup ``weight[ids]`` for an integer id array."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"token id out of range [0, {n})")
    d = weight.shape[1]

    def bw(g):
        flat = ids.reshape(-1)
        onehot = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(n, flat.size))
        return (np.asarray(onehot @ g.reshape(-1, d)),)

    return _result(weight.data[ids], (weight,), bw)


# -- reductions -------------------------------------------------------------


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy batching; ``b`` may be a shared 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    if bd.ndim == 2:
        k, n = bd.shape
        lead = ad.shape[:-1]

        def bw(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(*lead, k)
            gb = ad.reshape(-1, k).T @ g2
            return ga, gb

        return _result(ad @ bd, (a, b), bw)

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), bw)


# -- probability kernels ----------------------------------------------------


def _softmax_array(v, axis=-1, temperature=1.0, mask=None):
    z = v / temperature
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(v, temperature=1.0, axis=-1, mask=None):
    """exp((v - max v)/tau) normalized along ``axis``.

    ``mask`` (bool, broadcastable) marks live entries; masked entries get
    probability exactly 0.
    """
    v = as_tensor(v)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    y = _softmax_array(v.data, axis, temperature, mask)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot) / temperature,)

    return _result(y, (v,), bw)


def log_softmax(v, axis=-1):
    v = as_tensor(v)
    z = v.data - v.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = np.exp(out)
    return _result(out, (v,), lambda g: (g - y * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = g * gd
        gxhat_mean = gx.mean(axis=-1, keepdims=True)
        proj = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gx - gxhat_mean - xhat * proj)
        dgamma = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        dbeta = g.reshape(-1, xd.shape[-1]).sum(axis=0)
        return dx, dgamma, dbeta

    return _result(xhat * gd + beta.data, (x, gamma, beta), bw)


def _check_prob(p, name):
    if (p < 0).any():
        raise ValueError(f"{name} has negative entries")
    if not np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
        raise ValueError(f"{name} does not sum to 1")


def kl_div(p, q):
    """KL(P || Q) in nats along the last axis, averaged over leading axes.

    0 * ln(0/q) is taken as 0 and q is clamped below at PROB_FLOOR. The clamp
    can leave a row a few ulps under zero, so row totals are floored at 0.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_div length mismatch: {p.shape} vs {q.shape}")
    pd, qd = p.data, q.data
    _check_prob(pd, "P")
    _check_prob(qd, "Q")
    qc = np.maximum(qd, PROB_FLOOR)
    live = pd > 0
    safe_p = np.where(live, pd, 1.0)
    terms = np.where(live, pd * (np.log(safe_p) - np.log(qc)), 0.0)
    rows = terms.size // terms.shape[-1]
    value = np.maximum(terms.sum(axis=-1), 0.0).sum() / rows

    def bw(g):
        gp = np.where(live, np.log(safe_p) - np.log(qc) + 1.0, 0.0) * (g / rows)
        gq = np.where(qd > PROB_FLOOR, -pd / qc, 0.0) * (g / rows)
        return gp, gq

    return _result(np.asarray(value), (p, q), bw)


def cross_entropy_nll(logits, targets):
    """Mean over positions of -ln softmax(logits)[target]."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {targets.shape[0]} targets")
    bad = (targets < 0) | (targets >= v)
    if bad.any():
        raise IndexError(f"target id {targets[bad][0]} outside vocabulary [0, {v})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, targets]
    probs = np.exp(z - lse[:, None])

    def bw(g):
        d = probs.copy()
        d[rows, targets] -= 1.0
        return (d * (g / n),)

    return _result(np.asarray(nll.mean()), (logits,), bw)


# -- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def copy(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         [a.copy() for a in self.m], [a.copy() for a in self.v])


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Pure: returns (new_params, new_state)."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param/grad shape mismatch: {p.shape} vs {g.shape}")
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    for p, a in zip(params, m):
        if a.shape != p.shape:
            raise ShapeError(f"moment shape {a.shape} does not match param {p.shape}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = b1 * mi + (1.0 - b1) * g
        vi = b2 * vi + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps))
        new_m.append(mi)
        new_v.append(vi)
    return new_p, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)


class Adam:
    """Stateful wrapper that updates tensors in place; skips frozen tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self, grads):
        live = [i for i, p in enumerate(self.params) if p.requires_grad]
        if not live:
            return
        if not self.state.m:
            self.state.m = [np.zeros_like(self.params[i].data) for i in live]
            self.state.v = [np.zeros_like(self.params[i].data) for i in live]
        new, self.state = adam_step([self.params[i].data for i in live], [grads[i] for i in live], self.state)
        for i, arr in zip(live, new):
            self.params[i].data = arr
