"""Dense numpy tensors with a small reverse-mode autodiff engine.

Only the operations the point network needs are provided. Every op returns a
new :class:`Tensor` whose ``_backward`` closure maps the output gradient to a
tuple of parent gradients; :func:`backward` walks the graph in reverse
topological order and accumulates those into ``.grad``.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit
from scipy.special import erf

from .errors import ConfigError

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


_flop_tally = []


class count_flops:
    """Context manager tallying forward FLOPs: 2 per multiply-accumulate in
    ``linear`` plus one per element compared or summed by pooling ops."""

    def __enter__(self):
        self.total = 0
        _flop_tally.append(self)
        return self

    def __exit__(self, *exc):
        _flop_tally.remove(self)


def _tally(n):
    for c in _flop_tally:
        c.total += int(n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_done")

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = None
        self.op = op
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    __slots__ = ("name", "weight_decay_exempt")

    def __init__(self, data, name="", weight_decay_exempt=False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.weight_decay_exempt = weight_decay_exempt

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data, parents, op, backward_fn):
    parents = tuple(parents)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), _parents=parents, op=op)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    if loss._done:
        raise RuntimeError("backward already called on this graph")
    order = _toposort(loss)
    for node in order:
        if not node._parents and node.grad is not None:
            raise RuntimeError("leaf gradients already populated; zero them before a second backward")
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for p, g in zip(node._parents, grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.array(g, dtype=p.data.dtype, copy=True)
            else:
                p.grad += g
    loss._done = True


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a = as_tensor(a, getattr(b, "dtype", None))
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), "add_scalar", lambda g: (g,))
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))
    # bias-add: b broadcast along the last axis
    if b.data.ndim == 1 and a.shape[-1] == b.shape[0]:
        return _make(a.data + b.data, (a, b), "add_bias",
                     lambda g: (g, g.reshape(-1, b.shape[0]).sum(0)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def neg(a):
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def sub(a, b):
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -float(b))


def mul(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), "mul_scalar", lambda g: (g * c,))
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def sum_all(a):
    return _make(np.asarray(a.data.sum()), (a,), "sum", lambda g: (np.broadcast_to(g, a.shape),))


def mean_all(a):
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), "mean",
                 lambda g: (np.broadcast_to(g / n, a.shape),))


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * (1.0 / math.sqrt(2.0))))
    out = d * cdf

    def bw(g):
        pdf = np.exp(-0.5 * d * d) * (1.0 / math.sqrt(2.0 * math.pi))
        return (cdf + d * pdf) * g,

    return _make(out, (x,), "gelu", bw)


# ---------------------------------------------------------------- dense layers


def linear(x, W, b=None):
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    out = x.data @ W.data
    if _flop_tally:
        _tally(2 * x.shape[0] * W.shape[0] * W.shape[1])
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
        out = out + b.data
        parents = (x, W, b)
    else:
        parents = (x, W)

    def bw(g):
        gx = g @ W.data.T if x.requires_grad else None
        gW = x.data.T @ g if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g.sum(0)

    return _make(out, parents, "linear", bw)


def batch_norm(x, scale=None, shift=None, running_mean=None, running_var=None,
               training=True, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalization over the rows of an ``[N, C]`` tensor.

    ``running_mean``/``running_var`` are numpy buffers updated in place during
    training (unbiased variance, as torch does). ``scale``/``shift`` may be None
    for a non-affine normalization.
    """
    d = x.data
    if d.ndim != 2:
        raise ShapeError(f"batch_norm expects [N, C], got {x.shape}")
    if training:
        n = d.shape[0]
        if n < 2:
            raise ValueError(f"batch_norm: degenerate batch of {n} row(s) in training mode")
        mu = d.mean(0)
        var = d.var(0)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(d.dtype)
    xhat = (d - mu) * inv
    out = xhat
    if scale is not None:
        out = out * scale.data + shift.data
    parents = (x,) if scale is None else (x, scale, shift)

    def bw(g):
        gxhat = g * scale.data if scale is not None else g
        if training:
            gx = inv * (gxhat - gxhat.mean(0) - xhat * (gxhat * xhat).mean(0))
        else:
            gx = gxhat * inv
        if scale is None:
            return gx,
        return gx, (g * xhat).sum(0), g.sum(0)

    return _make(out.astype(d.dtype), parents, "batch_norm", bw)


# ---------------------------------------------------------------- indexing and pooling


def _check_index(idx, n):
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"neighbor index out of range [0, {n}): min {idx.min()}, max {idx.max()}")
    return idx


@njit(cache=True, nogil=True)
def _max_slot(g):
    """Max over axis 1 of ``[N, k, C]`` and the winning slot (lowest on ties)."""
    n, k, c = g.shape
    best = np.empty((n, c), g.dtype)
    slot = np.zeros((n, c), np.int64)
    for i in range(n):
        for j in range(c):
            best[i, j] = g[i, 0, j]
        for t in range(1, k):
            for j in range(c):
                v = g[i, t, j]
                if v > best[i, j]:
                    best[i, j] = v
                    slot[i, j] = t
    return best, slot


@njit(cache=True, nogil=True)
def _gather_max(x, idx):
    """Fused gather + max: winner value and winning source row per (i, c)."""
    n, k = idx.shape
    c = x.shape[1]
    best = np.empty((n, c), x.dtype)
    src = np.empty((n, c), np.int64)
    for i in range(n):
        r = idx[i, 0]
        for j in range(c):
            best[i, j] = x[r, j]
            src[i, j] = r
        for t in range(1, k):
            r = idx[i, t]
            for j in range(c):
                v = x[r, j]
                if v > best[i, j]:
                    best[i, j] = v
                    src[i, j] = r
    return best, src


def _scatter_rows(flat_rows, g2d, n):
    """Sum rows of ``g2d`` ([M, C]) into an ``[n, C]`` array at ``flat_rows``."""
    c = g2d.shape[1]
    keys = (flat_rows[:, None] * c + np.arange(c)).ravel()
    return np.bincount(keys, weights=g2d.ravel(), minlength=n * c).reshape(n, c).astype(g2d.dtype)


def index_rows(x, idx):
    """``x[idx]`` for a 1-D index array; backward scatters-adds."""
    idx = _check_index(idx, x.shape[0])
    n = x.shape[0]
    return _make(x.data[idx], (x,), "index_rows",
                 lambda g: (_scatter_rows(idx.ravel(), g.reshape(idx.size, -1), n).reshape(x.shape),))


def gather_rows(x, idx):
    """``out[n, t] = x[idx[n, t]]`` giving ``[N, k, C]``."""
    idx = _check_index(idx, x.shape[0])
    n, c = x.shape

    def bw(g):
        return _scatter_rows(idx.ravel(), g.reshape(-1, c), n),

    return _make(x.data[idx], (x,), "gather_rows", bw)


def neighbor_max(x, idx, edge=False):
    """Max over each row's neighbors; ``edge`` subtracts the center feature.

    Ties go to the lowest neighbor slot.
    """
    idx = _check_index(idx, x.shape[0])
    n, c = x.shape
    if _flop_tally:
        _tally(idx.size * c)
    out, src = _gather_max(np.ascontiguousarray(x.data), np.ascontiguousarray(idx, dtype=np.int64))
    if edge:
        out = out - x.data

    def bw(g):
        keys = (src * c + np.arange(c)).ravel()
        gx = np.bincount(keys, weights=g.ravel(), minlength=n * c).reshape(n, c).astype(g.dtype)
        if edge:
            gx -= g
        return gx,

    return _make(out, (x,), "neighbor_max_edge" if edge else "neighbor_max", bw)


def neighbor_avg(x, idx, edge=False):
    idx = _check_index(idx, x.shape[0])
    n, c = x.shape
    k = idx.shape[1]
    out = x.data[idx].mean(1)
    if _flop_tally:
        _tally(n * k * c)
    if edge:
        out = out - x.data

    def bw(g):
        gx = _scatter_rows(idx.ravel(), np.repeat(g / k, k, axis=0), n)
        if edge:
            gx -= g
        return gx,

    return _make(out, (x,), "neighbor_avg_edge" if edge else "neighbor_avg", bw)


def pospool(x, idx, relpos, edge=False):
    """Average of neighbor features weighted by raw relative coordinates.

    Channel ``c`` is weighted by coordinate component ``c % 3``; ``relpos`` is a
    constant ``[N, k, 3]`` array (no gradient flows into it).
    """
    n, c = x.shape
    if c % 3:
        raise ConfigError(f"pospool needs channels divisible by 3, got {c}")
    idx = _check_index(idx, n)
    k = idx.shape[1]
    rel = relpos.data if isinstance(relpos, Tensor) else np.asarray(relpos)
    w = np.tile(rel.astype(x.dtype), (1, 1, c // 3))  # [N, k, C]
    feats = x.data[idx]
    if edge:
        feats = feats - x.data[:, None, :]
    out = (feats * w).mean(1)
    if _flop_tally:
        _tally(n * k * c)

    def bw(g):
        gw = g[:, None, :] * w / k  # dL/dfeats
        gx = _scatter_rows(idx.ravel(), gw.reshape(-1, c), n)
        if edge:
            gx -= gw.sum(1)
        return gx,

    return _make(out, (x,), "pospool_edge" if edge else "pospool", bw)


def max_over_axis1(x):
    """Max over the middle axis of ``[N, k, C]``; ties go to the lowest slot."""
    d = x.data
    if _flop_tally:
        _tally(d.size)
    out, slot = _max_slot(np.ascontiguousarray(d))

    def bw(g):
        gx = np.zeros_like(d)
        np.put_along_axis(gx, slot[:, None, :], g[:, None, :], axis=1)
        return gx,

    return _make(out, (x,), "max_axis1", bw)


def segment_max(x, offsets):
    """Per-segment max over rows: segment ``b`` spans ``offsets[b]:offsets[b+1]``."""
    d = x.data
    offsets = np.asarray(offsets)
    nseg = len(offsets) - 1
    rows = np.empty((nseg, d.shape[1]), dtype=np.int64)
    for b in range(nseg):
        rows[b] = d[offsets[b]:offsets[b + 1]].argmax(0) + offsets[b]
    cols = np.arange(d.shape[1])
    out = d[rows, cols]
    if _flop_tally:
        _tally(d.size)

    def bw(g):
        gx = np.zeros_like(d)
        np.add.at(gx, (rows, np.broadcast_to(cols, rows.shape)), g)
        return gx,

    return _make(out, (x,), "segment_max", bw)


def row_scale(x, s):
    """Multiply each row of ``x`` by a constant per-row factor ``s`` ([N])."""
    s = np.asarray(s, dtype=x.dtype)[:, None]
    return _make(x.data * s, (x,), "row_scale", lambda g: (g * s,))


# ---------------------------------------------------------------- losses


def log_softmax_np(z):
    z = z - z.max(1, keepdims=True)
    return z - np.log(np.exp(z).sum(1, keepdims=True))


def softmax_cross_entropy(logits, labels, smoothing=0.0):
    """Mean label-smoothed cross entropy.

    Equals ``(1 - s) * CE(labels) + s * mean_c CE(c)``.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    z = logits.data
    n, k = z.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    logp = log_softmax_np(z.astype(np.float64))
    target = np.full((n, k), smoothing / k)
    target[np.arange(n), labels] += 1.0 - smoothing
    loss = -(target * logp).sum() / n

    def bw(g):
        return ((np.exp(logp) - target) * (g / n)).astype(z.dtype),

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), "softmax_ce", bw)


def mse(pred, target):
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mse: pred shape {pred.shape} != target shape {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _make(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred,), "mse",
                 lambda g: (diff * (2.0 * g / n),))


# ---------------------------------------------------------------- stochastic regularizers


def dropout(x, p, training, rng):
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


def drop_path(x, p, training, rng, offsets):
    """Stochastic depth: zero a whole cloud's residual branch with probability ``p``.

    ``offsets`` delimits the clouds (rows ``offsets[b]:offsets[b+1]``).
    """
    if not training or p == 0.0:
        return x
    offsets = np.asarray(offsets)
    keep = (rng.random(len(offsets) - 1) >= p) / (1.0 - p)
    return row_scale(x, np.repeat(keep, np.diff(offsets)))


# ---------------------------------------------------------------- gradient check


def grad_check(f, x, tol=1e-4, h=1e-5, n_points=100, rng=None):
    """Compare the analytic gradient of scalar ``f(x)`` with central differences.

    ``x`` is converted to float64. At most ``n_points`` random entries are
    probed. Returns a dict with ``max_rel_err`` (max abs error over probed
    entries divided by the largest probed gradient magnitude) and ``ok``.
    """
    rng = rng or np.random.default_rng(0)
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = xt.grad.ravel()
    flat = base.ravel()
    probe = np.arange(flat.size)
    if flat.size > n_points:
        probe = rng.choice(flat.size, n_points, replace=False)
    numeric = np.empty(len(probe))
    for j, i in enumerate(probe):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        numeric[j] = (fp - fm) / (2 * h)
    a = analytic[probe]
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(a).max(initial=0.0), 1e-12)
    err = float(np.abs(a - numeric).max(initial=0.0) / scale)
    return {"max_rel_err": err, "ok": err < tol, "n_probed": len(probe),
            "analytic": a, "numeric": numeric}
