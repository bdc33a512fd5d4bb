"""Point-set kernels: k-NN, farthest point sampling, grid subsampling,
nearest-parent maps and relative coordinates, plus the DPCD cloud file format.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .tensor import Tensor

DPCD_MAGIC = b"DPCD"
DPCD_VERSION = 1
LABELS_NONE, LABELS_POINT, LABELS_CLOUD = 0, 1, 2

CELL_BITS = 21
CELL_BIAS = 1 << (CELL_BITS - 1)
HOT_TABLE_SIZE = 4096


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | int | None = None
    schema: list = field(default_factory=list)
    category: int | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3 or len(self.positions) < 1:
            raise ValueError(f"positions must be [N>=1, 3], got {self.positions.shape}")
        if not np.isfinite(self.positions).all():
            raise ValueError("positions contain non-finite values")
        if self.features is None:
            self.features = np.zeros((len(self.positions), 0), np.float32)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.shape[0] != len(self.positions):
            raise ValueError("features and positions disagree on N")
        if len(self.schema) != self.features.shape[1]:
            raise ValueError(f"schema {self.schema} does not name {self.features.shape[1]} feature columns")
        if self.labels is not None and not np.isscalar(self.labels):
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.positions)

    @property
    def label_mode(self):
        if self.labels is None:
            return LABELS_NONE
        return LABELS_CLOUD if np.isscalar(self.labels) else LABELS_POINT

    def select(self, idx):
        labels = self.labels
        if self.label_mode == LABELS_POINT:
            labels = labels[idx]
        return PointCloud(self.positions[idx], self.features[idx], labels, list(self.schema), self.category)

    def feature_block(self, names):
        """Columns of ``features`` for the given schema names, in that order."""
        cols = []
        for name in names:
            hits = [i for i, s in enumerate(self.schema) if s == name or s.startswith(name + ".")]
            if not hits:
                raise KeyError(f"feature {name!r} not in schema {self.schema}")
            cols.extend(hits)
        return self.features[:, cols]


@dataclass
class SubsampleMap:
    kept: np.ndarray
    parent: np.ndarray


# ---------------------------------------------------------------- k-NN


@njit(cache=True)
def _knn_kernel(pos, k):
    n = pos.shape[0]
    out = np.empty((n, k), np.int64)
    bd = np.empty(k)
    bi = np.empty(k, np.int64)
    for i in range(n):
        cnt = 0
        xi, yi, zi = pos[i, 0], pos[i, 1], pos[i, 2]
        for j in range(n):
            if j == i:
                d = -1.0
            else:
                dx = pos[j, 0] - xi
                dy = pos[j, 1] - yi
                dz = pos[j, 2] - zi
                d = dx * dx + dy * dy + dz * dz
            if cnt < k:
                p = cnt
                cnt += 1
            elif d < bd[k - 1]:
                p = k - 1
            else:
                continue
            # strict comparison keeps the lower index first on ties
            while p > 0 and bd[p - 1] > d:
                bd[p] = bd[p - 1]
                bi[p] = bi[p - 1]
                p -= 1
            bd[p] = d
            bi[p] = j
        out[i] = bi
    return out


def knn(pc, k):
    """Indices of the ``k`` nearest points of every point, self first.

    Remaining neighbors are sorted by ascending distance, ties by lower index.
    """
    pos = pc.positions if isinstance(pc, PointCloud) else np.ascontiguousarray(pc, dtype=np.float64)
    n = len(pos)
    if not 1 <= k <= n:
        raise ValueError(f"knn: need 1 <= k <= N, got k={k}, N={n}")
    return _knn_kernel(pos, k)


# ---------------------------------------------------------------- farthest point sampling


@njit(cache=True)
def _fps_kernel(pos, m, start):
    n = pos.shape[0]
    out = np.empty(m, np.int64)
    mind = np.full(n, np.inf)
    cur = start
    for s in range(m):
        out[s] = cur
        best, best_d = 0, -1.0
        x, y, z = pos[cur, 0], pos[cur, 1], pos[cur, 2]
        for j in range(n):
            dx = pos[j, 0] - x
            dy = pos[j, 1] - y
            dz = pos[j, 2] - z
            d = dx * dx + dy * dy + dz * dz
            if d < mind[j]:
                mind[j] = d
            if mind[j] > best_d:
                best_d = mind[j]
                best = j
        cur = best
    return out


def fps(pc, m, start=0):
    """Greedy farthest point sampling, returned in selection order."""
    pos = pc.positions if isinstance(pc, PointCloud) else np.ascontiguousarray(pc, dtype=np.float64)
    n = len(pos)
    if not 1 <= m <= n:
        raise ValueError(f"fps: need 1 <= m <= N, got m={m}, N={n}")
    if not 0 <= start < n:
        raise ValueError(f"fps: start {start} out of range")
    return _fps_kernel(pos, m, start)


# ---------------------------------------------------------------- grid subsampling


@njit(cache=True)
def _cell_keys_kernel(pos, cell, origin, bias, bits):
    n = pos.shape[0]
    keys = np.empty(n, np.int64)
    for i in range(n):
        key = 0
        for d in range(3):
            c = np.floor((pos[i, d] - origin[d]) / cell)
            if not abs(c) < bias:
                return keys, False
            key = (key << bits) | (np.int64(c) + bias)
        keys[i] = key
    return keys, True


def cell_keys(positions, cell, origin_offset=(0.0, 0.0, 0.0)):
    """Pack the three signed cell coordinates of each point into one int64 key."""
    if not cell > 0:
        raise ValueError(f"grid cell size must be positive, got {cell}")
    pos = np.ascontiguousarray(positions, np.float64).reshape(-1, 3)
    keys, ok = _cell_keys_kernel(pos, float(cell), np.asarray(origin_offset, np.float64), CELL_BIAS, CELL_BITS)
    if not ok:
        raise ValueError("cell coordinates exceed the 21-bit key range; use a larger cell")
    return keys


@njit(cache=True)
def _mix(key):
    z = np.uint64(key)
    z = (z ^ (z >> np.uint64(33))) * np.uint64(0xFF51AFD7ED558CCD)
    z = (z ^ (z >> np.uint64(33))) * np.uint64(0xC4CEB9FE1A85EC53)
    return z ^ (z >> np.uint64(33))


def _table_capacity(n):
    cap = 16
    while cap < 2 * n:
        cap *= 2
    return cap


@njit(cache=True)
def _grid_single_kernel(keys, cap):
    n = keys.shape[0]
    table = np.full(cap, -1, np.int64)
    mask = np.uint64(cap - 1)
    kept = np.empty(n, np.int64)
    m = 0
    for i in range(n):
        key = keys[i]
        h = _mix(key) & mask
        while True:
            t = table[h]
            if t == -1:
                table[h] = key
                kept[m] = i
                m += 1
                break
            if t == key:
                break
            h = (h + np.uint64(1)) & mask
    return kept[:m]


@njit(cache=True)
def _grid_dual_kernel(keys, cap, hot_size, hot_bits):
    n = keys.shape[0]
    table = np.full(cap, -1, np.int64)
    hot = np.full(hot_size, -1, np.int64)
    mask = np.uint64(cap - 1)
    hot_shift = np.uint64(64 - max(hot_bits, 1))
    hmask = np.uint64(hot_size - 1)
    kept = np.empty(n, np.int64)
    m = 0
    for i in range(n):
        key = keys[i]
        # multiplicative (Fibonacci) hash: top bits of key * 2^64/phi
        hs = ((np.uint64(key) * np.uint64(0x9E3779B97F4A7C15)) >> hot_shift) & hmask
        if hot[hs] == key:
            continue
        hot[hs] = key
        h = _mix(key) & mask
        while True:
            t = table[h]
            if t == -1:
                table[h] = key
                kept[m] = i
                m += 1
                break
            if t == key:
                break
            h = (h + np.uint64(1)) & mask
    return kept[:m]


def grid_subsample_kept(positions, cell, origin_offset=(0.0, 0.0, 0.0), hot_size=HOT_TABLE_SIZE,
                        single_table=False):
    """First point (in storage order) of every occupied cell.

    A small direct-mapped table of recently seen cells is probed before the
    main open-addressing table; ``single_table=True`` runs the reference path
    without it. Both return identical results.
    """
    if hot_size <= 0 or hot_size & (hot_size - 1):
        raise ValueError(f"hot table size must be a power of two, got {hot_size}")
    keys = cell_keys(positions, cell, origin_offset)
    cap = _table_capacity(len(keys))
    if single_table:
        return _grid_single_kernel(keys, cap)
    return _grid_dual_kernel(keys, cap, hot_size, hot_size.bit_length() - 1)


def grid_subsample(pc, cell, origin_offset=(0.0, 0.0, 0.0), hot_size=HOT_TABLE_SIZE):
    pos = pc.positions if isinstance(pc, PointCloud) else np.asarray(pc, np.float64)
    kept = grid_subsample_kept(pos, cell, origin_offset, hot_size)
    return SubsampleMap(kept, nearest_parent(pos, kept))


# ---------------------------------------------------------------- parents and features


@njit(cache=True)
def _nearest_kernel(fine, coarse):
    n = fine.shape[0]
    out = np.empty(n, np.int64)
    for i in range(n):
        best, best_d = 0, np.inf
        x, y, z = fine[i, 0], fine[i, 1], fine[i, 2]
        for j in range(coarse.shape[0]):
            dx = coarse[j, 0] - x
            dy = coarse[j, 1] - y
            dz = coarse[j, 2] - z
            d = dx * dx + dy * dy + dz * dz
            if d < best_d:
                best_d = d
                best = j
        out[i] = best
    return out


def nearest_parent(fine, kept):
    """Position in ``kept`` of the nearest retained point for every fine point."""
    pos = fine.positions if isinstance(fine, PointCloud) else np.ascontiguousarray(fine, np.float64)
    kept = np.asarray(kept, np.int64)
    parent = _nearest_kernel(pos, np.ascontiguousarray(pos[kept]))
    parent[kept] = np.arange(len(kept))
    return parent


def relative_coords(pc, nbr):
    """``out[i, t] = p[nbr[i, t]] - p[i]`` as a float32 ``[N, k, 3]`` tensor."""
    pos = pc.positions if isinstance(pc, PointCloud) else np.asarray(pc, np.float64)
    return Tensor((pos[nbr] - pos[:, None, :]).astype(np.float32))


def height_feature(pc):
    pos = pc.positions if isinstance(pc, PointCloud) else np.asarray(pc, np.float64)
    z = pos[:, 2]
    return Tensor((z - z.min())[:, None].astype(np.float32))


# ---------------------------------------------------------------- DPCD files


def write_pointcloud(path, pc):
    n, f = pc.features.shape
    schema = ",".join(pc.schema).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DPCD_MAGIC)
        fh.write(struct.pack("<IIIB", DPCD_VERSION, n, f, pc.label_mode))
        fh.write(struct.pack("<I", len(schema)))
        fh.write(schema)
        fh.write(np.asarray(pc.positions, "<f4").tobytes())
        fh.write(np.asarray(pc.features, "<f4").tobytes())
        if pc.label_mode == LABELS_POINT:
            fh.write(np.asarray(pc.labels, "<i4").tobytes())
        elif pc.label_mode == LABELS_CLOUD:
            fh.write(struct.pack("<i", int(pc.labels)))


def read_pointcloud(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != DPCD_MAGIC:
        raise ValueError(f"{path}: not a DPCD point cloud file")
    version, n, f, mode = struct.unpack_from("<IIIB", buf, 4)
    if version != DPCD_VERSION:
        raise ValueError(f"{path}: unsupported DPCD version {version}")
    pos = 17
    (slen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    schema_str = buf[pos:pos + slen].decode("utf-8")
    schema = schema_str.split(",") if schema_str else []
    pos += slen
    positions = np.frombuffer(buf, "<f4", 3 * n, pos).reshape(n, 3)
    pos += 12 * n
    features = np.frombuffer(buf, "<f4", f * n, pos).reshape(n, f)
    pos += 4 * f * n
    labels = None
    if mode == LABELS_POINT:
        labels = np.frombuffer(buf, "<i4", n, pos).astype(np.int64)
    elif mode == LABELS_CLOUD:
        (labels,) = struct.unpack_from("<i", buf, pos)
    elif mode != LABELS_NONE:
        raise ValueError(f"{path}: unknown label mode {mode}")
    return PointCloud(positions, features, labels, schema)
