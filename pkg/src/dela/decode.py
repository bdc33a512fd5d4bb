"""Empirical checks that relative spatial encodings can be decoded locally.

Two graph conditions on k-NN patches (unique undirected edges, neighbors
reachable from the center) and a probe that fits a small decoder from
feature differences s_j - s_i to relative coordinates p_j - p_i.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import geometry as G
from . import nn
from . import tensor as T
from .errors import ConfigError
from .model import cloud_hierarchy, prepare_batch
from .training import AdamW, TrainConfig, cosine_lr, load_model, scene_input

log = logging.getLogger(__name__)

UNIQUENESS_TOL = 1e-9
THRESHOLD_NOTE = ("decode_mse <= baseline_var/10 is an acceptance target chosen for this harness; "
                  "no quantitative threshold comes from the method itself")


@dataclass
class LocalGraph:
    """k-NN patch around ``center``: the center, its neighbors and theirs.

    ``directed_edges`` holds (m, n) with n a neighbor of m (both in the
    patch, no self loops). ``undirected_edges`` keeps the bidirectional pairs
    once each, as (m, n) with m < n.
    """
    center: int
    nodes: np.ndarray
    directed_edges: np.ndarray
    undirected_edges: np.ndarray
    neighbors: np.ndarray


def build_local_graph(pc, nbr, center):
    pos = pc.positions if isinstance(pc, G.PointCloud) else np.asarray(pc)
    nbr = np.asarray(nbr)
    if not 0 <= center < len(pos):
        raise IndexError(f"center {center} out of range for {len(pos)} points")
    first = nbr[center]
    nodes = np.unique(np.concatenate([[center], first, nbr[first].ravel()]))
    src = np.repeat(nodes, nbr.shape[1])
    dst = nbr[nodes].ravel()
    keep = np.isin(dst, nodes) & (src != dst)
    directed = np.unique(np.stack([src[keep], dst[keep]], 1), axis=0).reshape(-1, 2)
    codes = set(map(tuple, directed.tolist()))
    und = sorted({(min(m, n), max(m, n)) for m, n in codes if (n, m) in codes})
    undirected = np.array(und, dtype=np.int64).reshape(-1, 2)
    neighbors = np.array([n for n in first if n != center], dtype=np.int64)
    return LocalGraph(int(center), nodes, directed, undirected, neighbors)


def check_edge_uniqueness(g, pc, tol=UNIQUENESS_TOL):
    """True iff no two undirected edges share a vector (up to orientation) within ``tol``."""
    pos = pc.positions if isinstance(pc, G.PointCloud) else np.asarray(pc)
    e = g.undirected_edges
    if len(e) == 0:
        return True
    v = pos[e[:, 1]] - pos[e[:, 0]]
    # an undirected edge has no orientation, so compare against both signs
    pairs = cKDTree(np.concatenate([v, -v])).query_pairs(tol, output_type="ndarray")
    return len(pairs) == 0


def check_connectivity(g, center=None, decode_k=None):
    """Are the center's first ``decode_k`` neighbors reachable from it over
    undirected edges that stay inside the center's neighborhood?"""
    center = g.center if center is None else center
    allowed = set(g.neighbors.tolist()) | {center}
    adj = {m: [] for m in allowed}
    for m, n in g.undirected_edges.tolist():
        if m in allowed and n in allowed:
            adj[m].append(n)
            adj[n].append(m)
    seen = {center}
    todo = deque([center])
    while todo:
        for n in adj[todo.popleft()]:
            if n not in seen:
                seen.add(n)
                todo.append(n)
    targets = g.neighbors if decode_k is None else g.neighbors[: max(decode_k - 1, 0)]
    return all(int(n) in seen for n in targets)


def graph_rates(pc, k, centers=None, decode_k=None, tol=UNIQUENESS_TOL):
    """(edge_uniqueness_rate, connectivity_rate) over ``centers`` of one cloud."""
    pos = pc.positions if isinstance(pc, G.PointCloud) else np.asarray(pc)
    nbr = G.knn(pos, k)
    centers = range(len(pos)) if centers is None else centers
    uniq = conn = 0
    for c in centers:
        g = build_local_graph(pos, nbr, c)
        uniq += check_edge_uniqueness(g, pos, tol)
        conn += check_connectivity(g, c, decode_k)
    n = len(centers)
    return uniq / n, conn / n


# ---------------------------------------------------------------- decoder probe


@dataclass
class DecodeReport:
    edge_uniqueness_rate: float
    connectivity_rate: float
    decode_mse: float
    baseline_var: float
    stage: int = 0
    pairs_train: int = 0
    pairs_test: int = 0
    warnings: list = field(default_factory=list)
    note: str = THRESHOLD_NOTE
    samples: tuple | None = field(default=None, repr=False)

    def passes_target(self):
        return self.decode_mse <= self.baseline_var / 10

    def to_text(self):
        lines = [f"edge_uniqueness_rate: {self.edge_uniqueness_rate:.6f}",
                 f"connectivity_rate: {self.connectivity_rate:.6f}",
                 f"decode_mse: {self.decode_mse:.6g}",
                 f"baseline_var: {self.baseline_var:.6g}",
                 f"stage: {self.stage}",
                 f"pairs_train: {self.pairs_train}",
                 f"pairs_test: {self.pairs_test}",
                 f"meets_target: {str(self.passes_target()).lower()}",
                 f"note: {self.note}"]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines) + "\n"


def write_report(path, report):
    with open(path, "w") as f:
        f.write(report.to_text())


def read_report(path):
    vals, warnings = {}, []
    with open(path) as f:
        for line in f:
            key, _, val = line.rstrip("\n").partition(": ")
            if key == "warning":
                warnings.append(val)
            else:
                vals[key] = val
    return DecodeReport(float(vals["edge_uniqueness_rate"]), float(vals["connectivity_rate"]),
                        float(vals["decode_mse"]), float(vals["baseline_var"]), int(vals["stage"]),
                        int(vals["pairs_train"]), int(vals["pairs_test"]), warnings, vals.get("note", ""))


class Decoder(nn.Module):
    def __init__(self, cin, hidden=128, rng=None):
        self.net = nn.Sequential(nn.Linear(cin, hidden, rng=rng), nn.GELU(),
                                 nn.Linear(hidden, hidden, rng=rng), nn.GELU(),
                                 nn.Linear(hidden, 3, rng=rng))

    def __call__(self, x):
        return self.net(x)


def fit_pairs(x_train, y_train, x_test, y_test, seed=0, hidden=128, steps=1500, batch=512, lr=3e-3):
    """Train a fresh 3-layer MLP on (x, y) pairs.

    Returns (held-out mse, baseline variance, held-out predictions)."""
    rng = np.random.default_rng(seed)
    mu, sd = x_train.mean(0), x_train.std(0) + 1e-6
    xtr = ((x_train - mu) / sd).astype(np.float32)
    xte = ((x_test - mu) / sd).astype(np.float32)
    dec = Decoder(xtr.shape[1], hidden, rng)
    opt = AdamW(dec.parameters(), weight_decay=1e-4)
    for step in range(steps):
        idx = rng.integers(0, len(xtr), size=min(batch, len(xtr)))
        loss = T.mse(dec(T.Tensor(xtr[idx])), y_train[idx].astype(np.float32))
        opt.zero_grad()
        T.backward(loss)
        opt.step(cosine_lr(step, steps, lr, warmup=steps // 20))
    pred = dec(T.Tensor(xte)).data
    mse = float(((pred - y_test) ** 2).mean())
    base = float(y_test.var(0).mean())
    return mse, base, pred


def _looks_untrained(model):
    for name, buf in model.named_buffers():
        if name.endswith("running_mean") and np.any(buf != 0):
            return False
    return True


def collect_pairs(model, dataset, stage=0, source="features", max_pairs=40000, seed=0, train_cfg=None, batch_size=8):
    """Per-cloud (s_j - s_i, p_j - p_i) pairs at ``stage`` from a frozen model.

    ``source`` picks the stage output features (the tensor the regularization
    head reads) or the raw spatial encodings.
    """
    cfg = model.cfg
    if not 0 <= stage < len(cfg.stages):
        raise ConfigError(f"stage {stage} out of range for a {len(cfg.stages)}-stage model")
    train_cfg = train_cfg or TrainConfig()
    model.eval()
    rng = np.random.default_rng([seed, 7])
    per_cloud = max(1, max_pairs // max(len(dataset), 1))
    out = []
    for start in range(0, len(dataset), batch_size):
        chunk = list(dataset[start:start + batch_size])
        if cfg.task == "scene_seg":
            chunk = [scene_input(pc, train_cfg.grid_size)[0] for pc in chunk]
        batch = prepare_batch(chunk, cfg)
        feats, encs = model.encode(batch, upto=stage + 1)
        s = (feats if source == "features" else encs)[stage].data.astype(np.float64)
        geom = batch.stages[stage]
        for b in range(len(chunk)):
            lo, hi = geom.offsets[b], geom.offsets[b + 1]
            i = rng.integers(lo, hi, size=per_cloud)
            j = geom.nbr[i, rng.integers(1, geom.nbr.shape[1], size=per_cloud)] if geom.nbr.shape[1] > 1 else i
            out.append((s[j] - s[i], geom.positions[j] - geom.positions[i]))
    return out


def fit_decoder(model, dataset, stage=0, seed=0, source="features", max_pairs=40000, test_frac=0.25,
                graph_centers=64, steps=1500, train_cfg=None):
    """Freeze ``model`` (or a checkpoint path), probe decodability at ``stage``
    and measure the two graph conditions on the same stage's geometry."""
    warnings = []
    if isinstance(model, str):
        model = load_model(model)
    if _looks_untrained(model):
        warnings.append("model looks untrained (batch-norm running means are all zero)")
    pairs = collect_pairs(model, dataset, stage, source, max_pairs, seed, train_cfg)
    rng = np.random.default_rng([seed, 11])
    order = rng.permutation(len(pairs))
    n_test = max(1, int(round(test_frac * len(pairs)))) if len(pairs) > 1 else 0
    test_ids, train_ids = order[:n_test], order[n_test:]
    if n_test == 0:
        warnings.append("single cloud: held-out pairs come from the same cloud")
        x, y = pairs[0]
        cut = int(len(x) * (1 - test_frac))
        xtr, ytr, xte, yte = x[:cut], y[:cut], x[cut:], y[cut:]
    else:
        xtr = np.concatenate([pairs[i][0] for i in train_ids])
        ytr = np.concatenate([pairs[i][1] for i in train_ids])
        xte = np.concatenate([pairs[i][0] for i in test_ids])
        yte = np.concatenate([pairs[i][1] for i in test_ids])
    # unit-variance targets, same normalization as the regularization term
    rms = np.sqrt((ytr ** 2).mean())
    ytr, yte = ytr / rms, yte / rms
    mse, base, pred = fit_pairs(xtr, ytr, xte, yte, seed=seed, steps=steps)
    uniq, conn = _stage_graph_rates(model, dataset, stage, graph_centers, seed, train_cfg)
    return DecodeReport(uniq, conn, mse, base, stage, len(xtr), len(xte), warnings, samples=(pred, yte))


def _stage_graph_rates(model, dataset, stage, centers, seed, train_cfg):
    cfg = model.cfg
    rng = np.random.default_rng([seed, 13])
    train_cfg = train_cfg or TrainConfig()
    uniq = conn = total = 0
    per_cloud = max(1, centers // max(len(dataset), 1))
    for pc in list(dataset)[:centers]:
        if cfg.task == "scene_seg":
            pc = scene_input(pc, train_cfg.grid_size)[0]
        pos, nbr, _, _ = cloud_hierarchy(pc.positions, cfg)[stage]
        for c in rng.integers(0, len(pos), size=per_cloud):
            g = build_local_graph(pos, nbr, int(c))
            uniq += check_edge_uniqueness(g, pos)
            conn += check_connectivity(g)
            total += 1
    return uniq / total, conn / total

