"""The DeLA network: relative spatial encoding, LFP blocks, downsampling,
task heads, the relative-coordinate regularizer, and parameter/FLOP accounting.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import geometry as G
from . import tensor as T
from .errors import ConfigError, DataError
from .nn import GELU, BatchNorm, Embedding, Linear, Module, Sequential
from .tensor import Tensor

TASKS = ("classification", "scene_seg", "part_seg")
POOLING_MODES = ("max", "edge_max", "avg", "edge_avg", "pospool", "edge_pospool")
FEATURE_DIMS = {"height": 1, "rgb": 3, "normal": 3}
RESIDUAL_NORM_INIT = 0.3


@dataclass
class StageConfig:
    channels: int
    depth: int
    k: int
    pointnet_dim: int
    drop_path_rate: float = 0.0

    def validate(self):
        if self.depth < 0 or self.depth % 2:
            raise ConfigError(f"stage depth counts LFP layers and must be even, got {self.depth}")
        if min(self.channels, self.k, self.pointnet_dim) < 1:
            raise ConfigError(f"stage channels, k and pointnet_dim must be >= 1: {self}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop_path_rate must lie in [0, 1): {self.drop_path_rate}")


@dataclass
class SubsampleConfig:
    mode: str = "fps"
    # fps: fraction of points kept per stage; grid: nominal fraction for FLOP accounting
    ratio: float = 0.25
    # grid only: cell size of the first downsampling, doubled at every later stage
    cell: float = 0.08


@dataclass
class ModelConfig:
    stages: list
    task: str = "part_seg"
    num_classes: int = 2
    input_features: list = field(default_factory=lambda: ["height"])
    subsample: SubsampleConfig = field(default_factory=SubsampleConfig)
    head_drop: float = 0.5
    pooling_mode: str = "edge_max"
    reg_lambda: float = 3e-3
    mlp_ratio: int = 2
    head_dim: int = 256
    cls_widths: list = field(default_factory=lambda: [1024, 1024, 512])
    num_categories: int = 16
    class_embed_dim: int = 64
    stage_drop: float = 0.1

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        if isinstance(self.subsample, dict):
            self.subsample = SubsampleConfig(**self.subsample)
        self.validate()

    def validate(self):
        if not self.stages:
            raise ConfigError("model needs at least one stage")
        for s in self.stages:
            s.validate()
        chans = [s.channels for s in self.stages]
        if any(b < a for a, b in zip(chans, chans[1:])):
            raise ConfigError(f"stage channels must be non-decreasing, got {chans}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.pooling_mode not in POOLING_MODES:
            raise ConfigError(f"unknown pooling mode {self.pooling_mode!r}; expected one of {POOLING_MODES}")
        if "pospool" in self.pooling_mode and any(c % 3 for c in chans):
            raise ConfigError(f"pospool pooling needs channels divisible by 3, got {chans}")
        if self.reg_lambda <= 0:
            raise ConfigError("reg_lambda must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        for name in self.input_features:
            if name not in FEATURE_DIMS:
                raise ConfigError(f"unknown input feature {name!r}; known: {sorted(FEATURE_DIMS)}")
        if self.subsample.mode not in ("fps", "grid"):
            raise ConfigError(f"subsample mode must be fps or grid, got {self.subsample.mode!r}")
        if not 0 < self.subsample.ratio <= 1 or self.subsample.cell <= 0:
            raise ConfigError(f"bad subsample settings {self.subsample}")

    @property
    def input_dim(self):
        return sum(FEATURE_DIMS[n] for n in self.input_features)

    def to_dict(self):
        return dataclasses.asdict(self)


def save_model_config(path, cfg):
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)


def load_model_config(path):
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read model config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown model config keys {sorted(unknown)}")
    try:
        return ModelConfig(**raw)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def _stages(dims, depths, k, cp0=32, cp=16, max_drop_path=0.1):
    n = len(dims)
    return [StageConfig(c, d, k, cp0 if i == 0 else cp, max_drop_path * i / max(n - 1, 1))
            for i, (c, d) in enumerate(zip(dims, depths))]


def preset(name):
    """Model configurations of the five reference benchmarks.

    Depth values count LFP layers; the benchmark table lists (LFP, LFP, MLP)
    units, so every stage depth here is twice the tabulated figure.
    """
    grid = dict(mode="grid", ratio=0.22)
    presets = {
        "s3dis": dict(stages=_stages([64, 128, 256, 512], [4, 4, 8, 4], 24), task="scene_seg",
                      num_classes=13, input_features=["rgb", "height"],
                      subsample=SubsampleConfig(cell=0.08, **grid)),
        "scannet": dict(stages=_stages([64, 96, 160, 288, 512], [4, 4, 4, 8, 4], 24), task="scene_seg",
                        num_classes=20, input_features=["rgb", "normal", "height"],
                        subsample=SubsampleConfig(cell=0.04, **grid)),
        "shapenetpart": dict(stages=_stages([96, 192, 320, 512], [4, 4, 4, 4], 20), task="part_seg",
                             num_classes=50, input_features=["normal", "height"]),
        "scanobjectnn": dict(stages=_stages([96, 192, 384], [4, 4, 4], 24), task="classification",
                             num_classes=15, input_features=["height"]),
        "modelnet40": dict(stages=_stages([96, 192, 384], [4, 4, 4], 20), task="classification",
                           num_classes=40, input_features=["height"]),
    }
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    return ModelConfig(**presets[name])


PRESET_NAMES = ("s3dis", "scannet", "shapenetpart", "scanobjectnn", "modelnet40")


# ---------------------------------------------------------------- batch geometry


@dataclass
class StageGeom:
    positions: np.ndarray
    offsets: np.ndarray
    nbr: np.ndarray
    relpos: np.ndarray
    kept: np.ndarray | None = None
    parent: np.ndarray | None = None


@dataclass
class Batch:
    stages: list
    features: np.ndarray
    point_labels: np.ndarray | None = None
    cloud_labels: np.ndarray | None = None
    categories: np.ndarray | None = None

    @property
    def num_clouds(self):
        return len(self.stages[0].offsets) - 1


def stage_size(n, ratio):
    return max(1, int(n * ratio))


def padded_knn(pos, k):
    """k-NN table; clouds with fewer than ``k`` points repeat their farthest neighbor."""
    n = len(pos)
    if n >= k:
        return G.knn(pos, k)
    nbr = G.knn(pos, n)
    return np.concatenate([nbr, np.repeat(nbr[:, -1:], k - n, axis=1)], axis=1)


def cloud_hierarchy(pos, cfg, grid_offsets=None):
    """Per-stage (positions, neighbor table, kept, parent) for one cloud."""
    out = []
    for s, st in enumerate(cfg.stages):
        kept = parent = None
        if s > 0:
            if cfg.subsample.mode == "fps":
                kept = G.fps(pos, stage_size(len(pos), cfg.subsample.ratio), 0)
            else:
                cell = cfg.subsample.cell * 2 ** (s - 1)
                origin = pos.min(0)
                if grid_offsets is not None:
                    origin = origin - grid_offsets[s - 1] * cell
                kept = G.grid_subsample_kept(pos, cell, origin)
            parent = G.nearest_parent(pos, kept)
            pos = pos[kept]
        out.append((pos, padded_knn(pos, st.k), kept, parent))
    return out


def input_features(pc, cfg):
    cols = []
    for name in cfg.input_features:
        if name == "height":
            cols.append(G.height_feature(pc).data)
            continue
        try:
            block = pc.feature_block([name])
        except KeyError as e:
            raise ConfigError(f"config wants feature {name!r} but the cloud schema is {pc.schema}") from e
        if block.shape[1] != FEATURE_DIMS[name]:
            raise ConfigError(f"feature {name!r} has {block.shape[1]} columns, expected {FEATURE_DIMS[name]}")
        cols.append(block)
    if not cols:
        return np.zeros((len(pc), 0), np.float32)
    return np.concatenate(cols, axis=1).astype(np.float32)


def prepare_batch(clouds, cfg, rng=None, hierarchies=None):
    """Concatenate clouds and build their per-stage geometry.

    ``rng`` draws random grid offsets (scene training); ``hierarchies`` may
    supply precomputed :func:`cloud_hierarchy` results.
    """
    if not clouds:
        raise DataError("empty batch")
    if hierarchies is None:
        hierarchies = []
        for pc in clouds:
            offs = None
            if rng is not None and cfg.subsample.mode == "grid":
                offs = rng.random((len(cfg.stages), 3))
            hierarchies.append(cloud_hierarchy(pc.positions, cfg, offs))
    stages = []
    for s in range(len(cfg.stages)):
        pos, nbr, kept, parent = [], [], [], []
        base = prev_base = 0
        counts = []
        for h in hierarchies:
            p, nb, kp, pa = h[s]
            pos.append(p)
            nbr.append(nb + base)
            counts.append(len(p))
            if s > 0:
                kept.append(kp + prev_base)
                parent.append(pa + base)
                prev_base += len(h[s - 1][0])
            base += len(p)
        positions = np.concatenate(pos)
        table = np.concatenate(nbr)
        relpos = (positions[table] - positions[:, None, :]).astype(np.float32)
        stages.append(StageGeom(positions, np.concatenate([[0], np.cumsum(counts)]), table, relpos,
                                np.concatenate(kept) if s > 0 else None,
                                np.concatenate(parent) if s > 0 else None))
    feats = np.concatenate([input_features(pc, cfg) for pc in clouds])
    batch = Batch(stages, feats)
    if cfg.task == "classification":
        if any(pc.label_mode == G.LABELS_POINT for pc in clouds):
            raise DataError("classification needs per-cloud labels")
        if all(pc.labels is not None for pc in clouds):
            batch.cloud_labels = np.array([int(pc.labels) for pc in clouds])
    else:
        if all(pc.label_mode == G.LABELS_POINT for pc in clouds):
            batch.point_labels = np.concatenate([pc.labels for pc in clouds])
    if cfg.task == "part_seg":
        if any(pc.category is None for pc in clouds):
            raise DataError("part segmentation needs a category on every cloud")
        batch.categories = np.array([pc.category for pc in clouds])
    return batch


# ---------------------------------------------------------------- layers


def pool(x, geom, mode):
    if mode == "max":
        return T.neighbor_max(x, geom.nbr, edge=False)
    if mode == "edge_max":
        return T.neighbor_max(x, geom.nbr, edge=True)
    if mode == "avg":
        return T.neighbor_avg(x, geom.nbr, edge=False)
    if mode == "edge_avg":
        return T.neighbor_avg(x, geom.nbr, edge=True)
    if mode == "pospool":
        return T.pospool(x, geom.nbr, geom.relpos, edge=False)
    if mode == "edge_pospool":
        return T.pospool(x, geom.nbr, geom.relpos, edge=True)
    raise ConfigError(f"unknown pooling mode {mode!r}")


class LFP(Module):
    """Linear projection, neighbor pooling, then normalization."""

    def __init__(self, c, mode="edge_max", rng=None, use_norm=True):
        self.proj = Linear(c, c, bias=False, rng=rng)
        self.norm = BatchNorm(c, init_scale=RESIDUAL_NORM_INIT) if use_norm else None
        self.mode = mode

    def __call__(self, x, geom):
        h = pool(self.proj(x), geom, self.mode)
        return self.norm(h) if self.norm is not None else h


class MLP(Module):
    def __init__(self, c, ratio, rng=None):
        self.fc1 = Linear(c, c * ratio, bias=False, rng=rng)
        self.norm1 = BatchNorm(c * ratio)
        self.fc2 = Linear(c * ratio, c, bias=False, rng=rng)
        self.norm2 = BatchNorm(c, init_scale=RESIDUAL_NORM_INIT)

    def __call__(self, x):
        return self.norm2(self.fc2(T.gelu(self.norm1(self.fc1(x)))))


class SpatialEncoder(Module):
    """Small PointNet over relative neighbor offsets (plus gathered features)."""

    def __init__(self, in_dim, width, out_dim, proj_dim=None, rng=None):
        self.mlp = Sequential(
            Linear(in_dim, width, bias=False, rng=rng), BatchNorm(width), GELU(),
            Linear(width, width, bias=False, rng=rng), BatchNorm(width), GELU(),
            Linear(width, out_dim, bias=False, rng=rng),
        )
        self.proj = Linear(out_dim, proj_dim, bias=False, rng=rng) if proj_dim else None
        self.norm = BatchNorm(proj_dim or out_dim, affine=False)

    def __call__(self, geom, feats=None):
        n, k, _ = geom.relpos.shape
        inp = geom.relpos
        if feats is not None and feats.shape[1]:
            inp = np.concatenate([inp, feats[geom.nbr]], axis=-1)
        h = self.mlp(Tensor(inp.reshape(n * k, -1)))
        h = T.max_over_axis1(T.reshape(h, (n, k, -1)))
        if self.proj is not None:
            h = self.proj(h)
        return self.norm(h)


class Block(Module):
    """Preparatory MLP followed by ``depth/2`` units of (LFP, LFP, MLP)."""

    def __init__(self, c, depth, ratio, mode, drop_path_rate, rng=None):
        self.prep = MLP(c, ratio, rng)
        self.lfps = [LFP(c, mode, rng) for _ in range(depth)]
        self.mlps = [MLP(c, ratio, rng) for _ in range(depth // 2)]
        self.drop_path_rate = drop_path_rate

    def __call__(self, x, geom, rng):
        def branch(h):
            return T.drop_path(h, self.drop_path_rate, self.training, rng, geom.offsets)

        x = x + branch(self.prep(x))
        for i, lfp in enumerate(self.lfps):
            x = x + branch(lfp(x, geom))
            if i % 2 == 1:
                x = x + branch(self.mlps[i // 2](x))
        return x


class Stage(Module):
    def __init__(self, cfg, s, rng):
        st = cfg.stages[s]
        c = st.channels
        self.index = s
        if s == 0:
            self.encoder = SpatialEncoder(3 + cfg.input_dim, st.pointnet_dim, c, rng=rng)
        else:
            prev = cfg.stages[s - 1].channels
            self.lift = Sequential(Linear(prev, c, bias=False, rng=rng), BatchNorm(c))
            self.down_lfp = LFP(c, cfg.pooling_mode, rng)
            self.encoder = SpatialEncoder(3, st.pointnet_dim, st.pointnet_dim, proj_dim=c, rng=rng)
        self.block = Block(c, st.depth, cfg.mlp_ratio, cfg.pooling_mode, st.drop_path_rate, rng)
        self.reg_head = Sequential(Linear(c, c, bias=False, rng=rng), BatchNorm(c), GELU(),
                                   Linear(c, 3, bias=True, rng=rng))
        if cfg.task != "classification":
            self.head_proj = Sequential(BatchNorm(c), Linear(c, cfg.head_dim, bias=False, rng=rng))

    def downsample(self, x, prev_geom, geom):
        h = self.lift(x)
        h = h + self.down_lfp(h, prev_geom)
        return T.index_rows(h, geom.kept)


def regularization_loss(x, geom, head, rng):
    """MSE between predicted and unit-normalized relative coordinates of one
    random (non-self) neighbor per point, predicted from feature differences."""
    n, k = geom.nbr.shape
    if k < 2:
        return None
    slot = rng.integers(1, k, size=n)
    j = geom.nbr[np.arange(n), slot]
    target = geom.positions[j] - geom.positions
    rms = np.sqrt((target ** 2).mean())
    if rms > 0:
        target = target / rms
    pred = head(T.index_rows(x, j) - x)
    return T.mse(pred, target.astype(pred.dtype))


@dataclass
class Output:
    logits: Tensor
    stage_features: list
    reg_loss: Tensor | None = None


class DeLA(Module):
    def __init__(self, cfg, seed=0):
        cfg.validate()
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        rng = np.random.default_rng(seed)
        self.stages = [Stage(cfg, s, rng) for s in range(len(cfg.stages))]
        last = cfg.stages[-1].channels
        if cfg.task == "classification":
            lift, h1, h2 = cfg.cls_widths
            self.cls_lift = Sequential(Linear(last, lift, bias=False, rng=rng), BatchNorm(lift), GELU())
            self.classifier = Sequential(Linear(lift, h1, bias=False, rng=rng), BatchNorm(h1), GELU(),
                                         Linear(h1, h2, bias=False, rng=rng), BatchNorm(h2), GELU())
            self.out = Linear(h2, cfg.num_classes, rng=rng)
        else:
            width = cfg.head_dim
            if cfg.task == "part_seg":
                self.class_embed = Embedding(cfg.num_categories, cfg.class_embed_dim, rng)
                width += cfg.class_embed_dim
            self.classifier = Sequential(BatchNorm(width), GELU(), Linear(width, cfg.head_dim, bias=False, rng=rng),
                                         BatchNorm(cfg.head_dim), GELU())
            self.out = Linear(cfg.head_dim, cfg.num_classes, rng=rng)
        self.assign_names()

    def __call__(self, batch, rng=None, compute_reg=False):
        return self.forward(batch, rng, compute_reg)

    def encode(self, batch, rng=None, upto=None):
        """Run the stages, returning per-stage features and spatial encodings."""
        rng = rng if rng is not None else self.rng
        feats, encodings = [], []
        x = None
        for s, stage in enumerate(self.stages[: upto]):
            geom = batch.stages[s]
            if s == 0:
                x = stage.encoder(geom, batch.features)
                encodings.append(x)
            else:
                x = stage.downsample(x, batch.stages[s - 1], geom)
                enc = stage.encoder(geom)
                encodings.append(enc)
                x = x + enc
            x = stage.block(x, geom, rng)
            feats.append(x)
        return feats, encodings

    def forward(self, batch, rng=None, compute_reg=False):
        rng = rng if rng is not None else self.rng
        feats, _ = self.encode(batch, rng)
        reg = None
        if compute_reg:
            losses = [regularization_loss(x, batch.stages[s], self.stages[s].reg_head, rng)
                      for s, x in enumerate(feats)]
            losses = [l for l in losses if l is not None]
            if losses:
                reg = losses[0]
                for l in losses[1:]:
                    reg = reg + l
                reg = reg * (1.0 / len(losses))
        if self.cfg.task == "classification":
            logits = self.classification_head(feats[-1], batch.stages[-1].offsets, rng)
        else:
            logits = self.segmentation_head(feats, batch, rng)
        return Output(logits, feats, reg)

    def classification_head(self, x, offsets, rng):
        h = T.segment_max(self.cls_lift(x), offsets)
        h = T.dropout(self.classifier(h), self.cfg.head_drop, self.training, rng)
        return self.out(h)

    def segmentation_head(self, feats, batch, rng):
        """Per-stage linear, nearest-parent upsampling to the input resolution, sum."""
        up = np.arange(len(batch.stages[0].positions))
        total = None
        for s, x in enumerate(feats):
            if s > 0:
                up = batch.stages[s].parent[up]
            h = self.stages[s].head_proj(x)
            if s > 0 and self.training and self.cfg.stage_drop > 0:
                p = self.cfg.stage_drop
                keep = (rng.random(batch.num_clouds) >= p) / (1.0 - p)
                h = T.row_scale(h, np.repeat(keep, np.diff(batch.stages[s].offsets)))
            h = T.index_rows(h, up) if s > 0 else h
            total = h if total is None else total + h
        if self.cfg.task == "part_seg":
            counts = np.diff(batch.stages[0].offsets)
            emb = self.class_embed(np.repeat(batch.categories, counts))
            total = T.concat([total, emb], axis=1)
        h = T.dropout(self.classifier(total), self.cfg.head_drop, self.training, rng)
        return self.out(h)


# ---------------------------------------------------------------- accounting


def _lin(i, o, bias=False):
    return i * o + (o if bias else 0)


def param_count(cfg):
    """Learnable scalars of :class:`DeLA` built from ``cfg``, counted in closed form."""
    r = cfg.mlp_ratio
    mlp = lambda c: _lin(c, r * c) + 2 * r * c + _lin(r * c, c) + 2 * c  # noqa: E731
    lfp = lambda c: _lin(c, c) + 2 * c  # noqa: E731
    total = 0
    for s, st in enumerate(cfg.stages):
        c, cp = st.channels, st.pointnet_dim
        if s == 0:
            total += _lin(3 + cfg.input_dim, cp) + 2 * cp + _lin(cp, cp) + 2 * cp + _lin(cp, c)
        else:
            prev = cfg.stages[s - 1].channels
            total += _lin(prev, c) + 2 * c + lfp(c)
            total += _lin(3, cp) + 2 * cp + _lin(cp, cp) + 2 * cp + _lin(cp, cp) + _lin(cp, c)
        total += mlp(c) * (1 + st.depth // 2) + lfp(c) * st.depth
        total += _lin(c, c) + 2 * c + _lin(c, 3, True)
        if cfg.task != "classification":
            total += 2 * c + _lin(c, cfg.head_dim)
    if cfg.task == "classification":
        lift, h1, h2 = cfg.cls_widths
        total += _lin(cfg.stages[-1].channels, lift) + 2 * lift
        total += _lin(lift, h1) + 2 * h1 + _lin(h1, h2) + 2 * h2 + _lin(h2, cfg.num_classes, True)
    else:
        width = cfg.head_dim
        if cfg.task == "part_seg":
            total += cfg.num_categories * cfg.class_embed_dim
            width += cfg.class_embed_dim
        total += 2 * width + _lin(width, cfg.head_dim) + 2 * cfg.head_dim
        total += _lin(cfg.head_dim, cfg.num_classes, True)
    return total


def stage_point_counts(cfg, points):
    counts = [points]
    for _ in cfg.stages[1:]:
        counts.append(stage_size(counts[-1], cfg.subsample.ratio))
    return counts


def flop_count(cfg, points=1024):
    """Inference FLOPs for one cloud of ``points`` points.

    Two FLOPs per multiply-accumulate in every linear layer plus one per
    element entering a neighbor or global pooling. Per-stage point counts
    follow ``cfg.subsample.ratio``. Training-only regularization heads are
    excluded.
    """
    r = cfg.mlp_ratio
    counts = stage_point_counts(cfg, points)
    total = 0
    for s, st in enumerate(cfg.stages):
        n, c, cp = counts[s], st.channels, st.pointnet_dim
        k = st.k
        if s == 0:
            total += 2 * n * k * (_lin(3 + cfg.input_dim, cp) + _lin(cp, cp) + _lin(cp, c)) + n * k * c
        else:
            pn, prev = counts[s - 1], cfg.stages[s - 1]
            total += 2 * pn * _lin(prev.channels, c)
            total += 2 * pn * _lin(c, c) + pn * prev.k * c
            total += 2 * n * k * (_lin(3, cp) + 2 * _lin(cp, cp)) + n * k * cp + 2 * n * _lin(cp, c)
        total += (1 + st.depth // 2) * 2 * n * 2 * r * c * c
        total += st.depth * (2 * n * c * c + n * k * c)
        if cfg.task != "classification":
            total += 2 * n * c * cfg.head_dim
    if cfg.task == "classification":
        lift, h1, h2 = cfg.cls_widths
        n = counts[-1]
        total += 2 * n * cfg.stages[-1].channels * lift + n * lift
        total += 2 * (lift * h1 + h1 * h2 + h2 * cfg.num_classes)
    else:
        width = cfg.head_dim + (cfg.class_embed_dim if cfg.task == "part_seg" else 0)
        total += 2 * points * (width * cfg.head_dim + cfg.head_dim * cfg.num_classes)
    return total
