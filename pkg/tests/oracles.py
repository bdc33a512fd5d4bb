"""Brute-force reference implementations used as test oracles."""
import numpy as np


def knn(pos, k):
    n = len(pos)
    out = np.empty((n, k), np.int64)
    for i in range(n):
        d = ((pos - pos[i]) ** 2).sum(1)
        others = [j for j in range(n) if j != i]
        others.sort(key=lambda j: (d[j], j))
        out[i] = [i] + others[: k - 1]
    return out


def fps(pos, m, start=0):
    sel = [start]
    while len(sel) < m:
        d = np.min([((pos - pos[s]) ** 2).sum(1) for s in sel], axis=0)
        sel.append(int(np.argmax(d)))
    return np.array(sel)


def grid(pos, cell, origin=(0.0, 0.0, 0.0)):
    seen, kept = set(), []
    origin = np.asarray(origin, np.float64)
    for i, p in enumerate(pos):
        key = tuple(np.floor((p - origin) / cell).astype(np.int64))
        if key not in seen:
            seen.add(key)
            kept.append(i)
    return np.array(kept, np.int64)


def nearest_parent(pos, kept):
    parent = np.empty(len(pos), np.int64)
    for i, p in enumerate(pos):
        d = ((pos[kept] - p) ** 2).sum(1)
        parent[i] = int(np.argmin(d))
    parent[kept] = np.arange(len(kept))
    return parent


def neighbor_max(x, idx, edge):
    n, c = x.shape
    out = np.empty((n, c), x.dtype)
    for i in range(n):
        for ch in range(c):
            vals = [x[j, ch] - (x[i, ch] if edge else 0) for j in idx[i]]
            out[i, ch] = max(vals)
    return out


def pospool(x, idx, rel):
    n, c = x.shape
    k = idx.shape[1]
    out = np.zeros((n, c))
    for i in range(n):
        for ch in range(c):
            out[i, ch] = sum(x[idx[i, t], ch] * rel[i, t, ch % 3] for t in range(k)) / k
    return out


def confusion(pred, gt, k):
    cm = np.zeros((k, k), np.int64)
    for p, g in zip(pred, gt):
        cm[g, p] += 1
    return cm


def model_grad_check(model, loss_fn, n_probe=40, h=1e-5, seed=0):
    """Max relative error between the model's analytic parameter gradients and
    central differences of ``loss_fn()`` evaluated in float64."""
    rng = np.random.default_rng(seed)
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    analytic, numeric = [], []
    for _ in range(n_probe):
        p = params[rng.integers(len(params))]
        i = rng.integers(p.data.size)
        analytic.append(float(p.grad.ravel()[i]))
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = float(loss_fn().data)
        flat[i] = orig - h
        fm = float(loss_fn().data)
        flat[i] = orig
        numeric.append((fp - fm) / (2 * h))
    a, nu = np.array(analytic), np.array(numeric)
    return float(np.abs(a - nu).max() / max(np.abs(nu).max(), np.abs(a).max(), 1e-12)), a, nu


def knn_dense(pos, k):
    """Full distance matrix, stable sort: ties go to the lower index, self first."""
    d = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, -1.0)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def fps_dense(pos, m, start=0):
    sel = [start]
    mind = ((pos - pos[start]) ** 2).sum(1)
    while len(sel) < m:
        nxt = int(np.argmax(mind))
        sel.append(nxt)
        mind = np.minimum(mind, ((pos - pos[nxt]) ** 2).sum(1))
    return np.array(sel)


def nearest_parent_dense(pos, kept):
    d = ((pos[:, None, :] - pos[kept][None, :, :]) ** 2).sum(-1)
    parent = np.argmin(d, axis=1)
    parent[kept] = np.arange(len(kept))
    return parent
