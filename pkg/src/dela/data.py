"""Procedural desk-scale datasets and the on-disk dataset directory layout.

A dataset directory holds one DPCD file per cloud plus ``manifest.json``
recording the task kind, class counts, per-cloud categories and, for part
segmentation, which part labels belong to which category.
"""
from __future__ import annotations

import json
import os

import numpy as np

from .errors import DataError
from .geometry import PointCloud, read_pointcloud, write_pointcloud

KINDS = ("shapes-cls", "shapes-partseg", "rooms-seg")
SHAPE_NAMES = ("sphere", "cube", "cone", "torus", "cylinder", "pyramid", "helix", "plane")
PART_CATEGORIES = {
    "lamp": ("pole", "shade"),
    "table": ("top", "legs"),
    "mushroom": ("stem", "cap"),
    "rocket": ("body", "nose", "fins"),
}
ROOM_CLASSES = ("floor", "wall", "furniture")
ROOM_COLORS = np.array([[0.55, 0.45, 0.35], [0.85, 0.85, 0.8], [0.3, 0.4, 0.7]])


class Dataset(list):
    """A list of clouds plus metadata (``kind``, ``num_classes``, ...)."""

    def __init__(self, clouds=(), **meta):
        super().__init__(clouds)
        self.meta = meta

    @property
    def kind(self):
        return self.meta.get("kind")

    @property
    def num_classes(self):
        return self.meta["num_classes"]


# ---------------------------------------------------------------- primitive surfaces


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def sample_primitive(name, n, rng):
    """``n`` points on the surface of a unit-scale primitive centred at the origin."""
    u, v = rng.random(n), rng.random(n)
    if name == "sphere":
        return _unit(rng.normal(size=(n, 3)))
    if name == "cube":
        p = rng.uniform(-1, 1, (n, 3))
        axis = rng.integers(0, 3, n)
        p[np.arange(n), axis] = np.sign(rng.random(n) - 0.5)
        return p * 0.8
    if name == "cone":
        h = np.sqrt(u)
        t = 2 * np.pi * v
        return np.stack([h * np.cos(t), h * np.sin(t), 1 - 2 * h], 1)
    if name == "torus":
        a, b = 2 * np.pi * u, 2 * np.pi * v
        return np.stack([(0.75 + 0.25 * np.cos(b)) * np.cos(a), (0.75 + 0.25 * np.cos(b)) * np.sin(a),
                         0.25 * np.sin(b)], 1)
    if name == "cylinder":
        t = 2 * np.pi * u
        return np.stack([0.6 * np.cos(t), 0.6 * np.sin(t), 2 * v - 1], 1)
    if name == "pyramid":
        # four triangular faces over a square base
        face = rng.integers(0, 4, n)
        a, b = rng.random(n), rng.random(n)
        flip = a + b > 1
        a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
        corners = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], float)
        c0, c1 = corners[face], corners[(face + 1) % 4]
        base = c0 * (1 - a - b)[:, None] + c1 * a[:, None]
        return np.concatenate([base, (b * 2 - 1)[:, None]], 1)
    if name == "helix":
        t = 4 * np.pi * u
        r = 0.1 * rng.normal(size=(n, 3))
        return np.stack([np.cos(t), np.sin(t), t / (2 * np.pi) - 1], 1) + r
    if name == "plane":
        return np.stack([2 * u - 1, 2 * v - 1, 0.02 * rng.normal(size=n)], 1)
    raise DataError(f"unknown primitive {name!r}")


def _rotate_z(p, angle):
    c, s = np.cos(angle), np.sin(angle)
    return p @ np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]])


def _normalize(p):
    p = p - p.mean(0)
    return p / np.abs(p).max()


def make_shape_cloud(label, n, rng, noise=0.01):
    p = sample_primitive(SHAPE_NAMES[label], n, rng)
    p = p * rng.uniform(0.8, 1.2, 3)
    p = _rotate_z(p, rng.uniform(0, 2 * np.pi))
    p = _normalize(p) + noise * rng.normal(size=p.shape)
    return PointCloud(p, labels=int(label))


def _cyl(n, rng, radius, z0, z1):
    t = 2 * np.pi * rng.random(n)
    return np.stack([radius * np.cos(t), radius * np.sin(t), rng.uniform(z0, z1, n)], 1)


def _part_points(category, n, rng):
    """Point arrays for each part of one composite shape."""
    s = rng.uniform(0.85, 1.15)
    if category == "lamp":
        pole = _cyl(n[0], rng, 0.06 * s, -1.0, 0.3)
        h = np.sqrt(rng.random(n[1]))
        t = 2 * np.pi * rng.random(n[1])
        rad = 0.2 + 0.5 * h * s
        shade = np.stack([rad * np.cos(t), rad * np.sin(t), 0.9 - 0.6 * h], 1)
        return [pole, shade]
    if category == "table":
        top = rng.uniform(-1, 1, (n[0], 3)) * [1.0 * s, 0.7 * s, 0.04]
        top[:, 2] += 0.5
        legs = []
        per = np.array_split(np.arange(n[1]), 4)
        for (x, y), idx in zip([(0.8, 0.55), (-0.8, 0.55), (-0.8, -0.55), (0.8, -0.55)], per):
            leg = _cyl(len(idx), rng, 0.05, -0.7, 0.42)
            legs.append(leg + [x * s, y * s, 0])
        return [top, np.concatenate(legs)]
    if category == "mushroom":
        stem = _cyl(n[0], rng, 0.18 * s, -0.9, 0.15)
        cap = _unit(rng.normal(size=(n[1], 3)))
        cap[:, 2] = np.abs(cap[:, 2])
        cap = cap * [0.8 * s, 0.8 * s, 0.5] + [0, 0, 0.25]
        return [stem, cap]
    if category == "rocket":
        body = _cyl(n[0], rng, 0.22, -0.8, 0.5 * s)
        h = np.sqrt(rng.random(n[1]))
        t = 2 * np.pi * rng.random(n[1])
        nose = np.stack([0.22 * h * np.cos(t), 0.22 * h * np.sin(t), 0.5 * s + 0.06 + 0.5 * (1 - h)], 1)
        fins = []
        per = np.array_split(np.arange(n[2]), 3)
        for k, idx in enumerate(per):
            a, b = rng.random(len(idx)), rng.random(len(idx))
            fin = np.stack([0.3 + 0.35 * a, np.zeros(len(idx)), -0.95 + 0.4 * b * (1 - a)], 1)
            fins.append(_rotate_z(fin, 2 * np.pi * k / 3))
        return [body, nose, np.concatenate(fins)]
    raise DataError(f"unknown part category {category!r}")


def part_label_table():
    """Global part id of every (category index, part index)."""
    table, nxt = [], 0
    for parts in PART_CATEGORIES.values():
        table.append(list(range(nxt, nxt + len(parts))))
        nxt += len(parts)
    return table


def make_part_cloud(category, n, rng, noise=0.005):
    names = list(PART_CATEGORIES)
    parts = PART_CATEGORIES[names[category]]
    frac = rng.dirichlet(np.full(len(parts), 8.0))
    counts = np.maximum((frac * n).astype(int), 8)
    counts[0] += n - counts.sum()
    pts = _part_points(names[category], counts, rng)
    ids = part_label_table()[category]
    labels = np.concatenate([np.full(len(p), ids[i]) for i, p in enumerate(pts)])
    p = np.concatenate(pts)
    p = _rotate_z(p, rng.uniform(0, 2 * np.pi)) + noise * rng.normal(size=p.shape)
    order = rng.permutation(len(p))
    return PointCloud(p[order], labels=labels[order], category=category)


def make_room(n, rng, noise=0.01):
    """A rectangular room: floor, four walls and a few box-shaped furniture items."""
    w, d, h = rng.uniform(3, 5), rng.uniform(3, 5), rng.uniform(2.2, 2.8)
    boxes = []
    for _ in range(rng.integers(2, 5)):
        size = rng.uniform([0.4, 0.4, 0.4], [1.2, 1.2, 1.0])
        centre = rng.uniform([size[0] / 2 + 0.1, size[1] / 2 + 0.1], [w - size[0] / 2 - 0.1, d - size[1] / 2 - 0.1])
        boxes.append((centre, size))
    areas = np.array([w * d, 2 * (w + d) * h, sum(2 * (s[0] * s[1] + s[0] * s[2] + s[1] * s[2]) for _, s in boxes)])
    counts = rng.multinomial(n, areas / areas.sum())
    floor = np.stack([rng.uniform(0, w, counts[0]), rng.uniform(0, d, counts[0]), np.zeros(counts[0])], 1)
    side = rng.integers(0, 4, counts[1])
    t = rng.random(counts[1])
    wall = np.stack([np.where(side == 0, t * w, np.where(side == 1, w, np.where(side == 2, t * w, 0.0))),
                     np.where(side == 0, 0.0, np.where(side == 1, t * d, np.where(side == 2, d, t * d))),
                     rng.uniform(0, h, counts[1])], 1)
    per = rng.multinomial(counts[2], np.full(len(boxes), 1 / len(boxes)))
    furn = []
    for (centre, size), m in zip(boxes, per):
        b = sample_primitive("cube", m, rng) / 0.8 * size / 2
        furn.append(b + [centre[0], centre[1], size[2] / 2])
    p = np.concatenate([floor, wall, *furn])
    labels = np.concatenate([np.zeros(counts[0], int), np.ones(counts[1], int), np.full(counts[2], 2)])
    # scanner-like storage order: sweep along x so neighbors in storage are spatially close
    p = p + noise * rng.normal(size=p.shape)
    order = np.lexsort((p[:, 1], np.floor(p[:, 0] / 0.25)))
    p, labels = p[order], labels[order]
    rgb = np.clip(ROOM_COLORS[labels] + 0.05 * rng.normal(size=(len(p), 3)), 0, 1)
    return PointCloud(p, rgb, labels, ["rgb.r", "rgb.g", "rgb.b"])


def generate(kind, count, points, seed=0):
    rng = np.random.default_rng(seed)
    if kind == "shapes-cls":
        clouds = [make_shape_cloud(i % len(SHAPE_NAMES), points, rng) for i in range(count)]
        return Dataset(clouds, kind=kind, task="classification", num_classes=len(SHAPE_NAMES),
                       class_names=list(SHAPE_NAMES))
    if kind == "shapes-partseg":
        ncat = len(PART_CATEGORIES)
        clouds = [make_part_cloud(i % ncat, points, rng) for i in range(count)]
        table = part_label_table()
        return Dataset(clouds, kind=kind, task="part_seg", num_classes=sum(map(len, table)),
                       num_categories=ncat, category_parts=table)
    if kind == "rooms-seg":
        clouds = [make_room(points, rng) for _ in range(count)]
        return Dataset(clouds, kind=kind, task="scene_seg", num_classes=len(ROOM_CLASSES),
                       class_names=list(ROOM_CLASSES))
    raise DataError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")


# ---------------------------------------------------------------- directories


def save_dataset(path, ds):
    os.makedirs(path, exist_ok=True)
    files = []
    for i, pc in enumerate(ds):
        name = f"cloud_{i:05d}.dpcd"
        write_pointcloud(os.path.join(path, name), pc)
        files.append({"file": name, "category": pc.category})
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump({**ds.meta, "files": files}, f, indent=1)


def load_dataset(path):
    """Load a dataset directory, or ``synthetic:KIND[:COUNT[:POINTS[:SEED]]]``."""
    if path.startswith("synthetic:"):
        parts = path.split(":")[1:]
        try:
            nums = [int(v) for v in parts[1:]]
        except ValueError as e:
            raise DataError(f"bad synthetic dataset spec {path!r}: {e}") from e
        count, points, seed = nums + [64, 256, 0][len(nums):]
        return generate(parts[0], count, points, seed)
    manifest = os.path.join(path, "manifest.json")
    try:
        with open(manifest) as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read dataset manifest {manifest}: {e}") from e
    files = meta.pop("files")
    clouds = []
    for entry in files:
        try:
            pc = read_pointcloud(os.path.join(path, entry["file"]))
        except (OSError, ValueError) as e:
            raise DataError(str(e)) from e
        pc.category = entry.get("category")
        clouds.append(pc)
    return Dataset(clouds, **meta)
