"""Optimizer, schedules, augmentation, metrics and the train/eval loops."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import queue
import threading
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import geometry as G
from . import tensor as T
from .errors import ConfigError, DataError, NumericError
from .model import DeLA, load_model_config, prepare_batch, save_model_config
from .nn import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "loss", "reg_loss", "lr", "reg_strength")


@dataclass
class AugmentConfig:
    scale: bool = True
    scale_range: tuple = (0.9, 1.1)
    rotate: bool = False
    jitter: bool = False
    jitter_sigma: float = 0.005
    jitter_clip: float = 0.02
    height_translate: bool = False
    height_range: float = 0.2
    feature_drop: float = 0.2

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)

    @classmethod
    def off(cls):
        return cls(scale=False, rotate=False, jitter=False, height_translate=False, feature_drop=0.0)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    base_lr: float = 2e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    label_smoothing: float = 0.1
    reg_lambda: float = 3e-3
    reg_enabled: bool = True
    warmup_frac: float = 0.05
    max_points: int = 4096
    grid_size: float = 0.04
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    workers: int = 1
    eval_every: int = 0
    target_accuracy: float | None = None

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self):
        if self.epochs < 1 or self.base_lr <= 0 or self.batch_size < 1:
            raise ConfigError("epochs, batch_size and base_lr must be positive")
        if not 0 < self.reg_lambda < 1:
            raise ConfigError(f"reg_lambda must lie in (0, 1), got {self.reg_lambda}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")


def load_train_config(path):
    try:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        return TrainConfig(**raw)
    except (OSError, yaml.YAMLError, TypeError) as e:
        raise ConfigError(f"cannot read train config {path}: {e}") from e


def save_train_config(path, cfg):
    with open(path, "w") as f:
        yaml.safe_dump(json.loads(json.dumps(dataclasses.asdict(cfg))), f, sort_keys=False)


# ---------------------------------------------------------------- optimizer and schedules


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, wd=0.0):
    """One AdamW update in place. Weight decay is decoupled and applied
    multiplicatively before the Adam step; exempt parameters skip it."""
    b1, b2 = betas
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if wd and not getattr(p, "weight_decay_exempt", False):
            p.data *= 1 - lr * wd
        m = m_all.setdefault(i, np.zeros_like(p.data))
        v = v_all.setdefault(i, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


class AdamW:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = list(params)
        self.betas, self.eps, self.weight_decay = tuple(betas), eps, weight_decay
        self.state = {}

    def step(self, lr):
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr, self.betas, self.eps,
                   self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def cosine_lr(step, total, base_lr, warmup=0):
    if step < warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr
    frac = min(1.0, (step - warmup) / (total - warmup))
    return 0.5 * base_lr * (1 + math.cos(math.pi * frac))


def reg_strength(step, total, lam):
    """Exponential decay from 1 at step 0 to ``lam`` at ``total``."""
    return lam ** (min(step, total) / total)


# ---------------------------------------------------------------- augmentation


def rotate_z(pos, angle):
    c, s = math.cos(angle), math.sin(angle)
    return pos @ np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def augment(pc, cfg, rng):
    pos = pc.positions
    feats = pc.features
    normal_cols = [i for i, s in enumerate(pc.schema) if s.startswith("normal")]
    if cfg.rotate:
        angle = rng.uniform(0, 2 * math.pi)
        pos = rotate_z(pos, angle)
        if normal_cols:
            feats = feats.copy()
            feats[:, normal_cols] = rotate_z(feats[:, normal_cols].astype(np.float64), angle)
    if cfg.scale:
        pos = pos * rng.uniform(*cfg.scale_range)
    if cfg.jitter:
        pos = pos + np.clip(cfg.jitter_sigma * rng.normal(size=pos.shape), -cfg.jitter_clip, cfg.jitter_clip)
    if cfg.height_translate:
        pos = pos + np.array([0.0, 0.0, rng.uniform(-cfg.height_range, cfg.height_range)])
    if cfg.feature_drop and feats.shape[1] and rng.random() < cfg.feature_drop:
        drop = [i for i, s in enumerate(pc.schema) if s.startswith(("rgb", "normal"))]
        feats = feats.copy()
        feats[:, drop] = 0.0
    return G.PointCloud(pos, feats, pc.labels, list(pc.schema), pc.category)


def scene_crop(pc, max_points, rng):
    """Keep the ``max_points`` points nearest a randomly chosen center point."""
    if len(pc) <= max_points:
        return pc
    center = pc.positions[rng.integers(len(pc))]
    d = ((pc.positions - center) ** 2).sum(1)
    keep = np.sort(np.argpartition(d, max_points - 1)[:max_points])
    return pc.select(keep)


def scene_input(pc, grid_size, rng=None):
    """Grid-subsample a full-resolution scene; returns the cloud and the
    full-resolution parent map for interpolating predictions back."""
    offset = rng.random(3) * grid_size if rng is not None else np.zeros(3)
    kept = G.grid_subsample_kept(pc.positions, grid_size, pc.positions.min(0) - offset)
    return pc.select(kept), G.nearest_parent(pc.positions, kept)


# ---------------------------------------------------------------- metrics


def confusion_matrix(pred, gt, num_classes):
    pred = np.asarray(pred, np.int64).ravel()
    gt = np.asarray(gt, np.int64).ravel()
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def metrics_from_confusion(cm):
    """OA, mAcc and mIoU; class means run over classes present in the ground truth."""
    cm = np.asarray(cm, np.float64)
    tp = np.diag(cm)
    gt_count = cm.sum(1)
    union = gt_count + cm.sum(0) - tp
    present = gt_count > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = tp / gt_count
        iou = tp / union
    return {
        "OA": float(tp.sum() / max(cm.sum(), 1)),
        "mAcc": float(acc[present].mean()) if present.any() else 0.0,
        "mIoU": float(iou[present].mean()) if present.any() else 0.0,
        "per_class_iou": [float(v) if p else None for v, p in zip(iou, present)],
    }


def part_metrics(preds, labels, categories, category_parts):
    """Instance mIoU (mean over shapes) and category mIoU (mean over categories)."""
    per_cat = {}
    shape_ious = []
    for pred, gt, cat in zip(preds, labels, categories):
        ious = []
        for part in category_parts[cat]:
            p, g = pred == part, gt == part
            union = (p | g).sum()
            ious.append(1.0 if union == 0 else (p & g).sum() / union)
        shape_ious.append(float(np.mean(ious)))
        per_cat.setdefault(cat, []).append(shape_ious[-1])
    return {"instance_mIoU": float(np.mean(shape_ious)),
            "category_mIoU": float(np.mean([np.mean(v) for v in per_cat.values()]))}


# ---------------------------------------------------------------- loops


def _producer(items, make, out, stop):
    try:
        for item in items:
            if stop.is_set():
                return
            out.put(make(item))
    except Exception as e:  # surfaced in the consumer
        out.put(e)
    out.put(None)


def prefetch(items, make, workers=1, depth=2):
    """Yield ``make(item)`` for each item, computed ahead in a worker thread
    through a bounded queue. Order is preserved."""
    if workers <= 0:
        for item in items:
            yield make(item)
        return
    q = queue.Queue(maxsize=depth)
    stop = threading.Event()
    th = threading.Thread(target=_producer, args=(list(items), make, q, stop), daemon=True)
    th.start()
    try:
        while True:
            got = q.get()
            if got is None:
                break
            if isinstance(got, Exception):
                raise got
            yield got
    finally:
        stop.set()
        while th.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                th.join(0.01)


def _check_compat(model_cfg, dataset):
    meta = getattr(dataset, "meta", {})
    if "num_classes" in meta and meta["num_classes"] != model_cfg.num_classes:
        raise ConfigError(f"model has {model_cfg.num_classes} classes but the dataset has {meta['num_classes']}")
    if "task" in meta and meta["task"] != model_cfg.task:
        raise ConfigError(f"model task {model_cfg.task!r} does not match dataset task {meta['task']!r}")


def _train_cloud(pc, model_cfg, train_cfg, rng):
    pc = augment(pc, train_cfg.augment, rng)
    if model_cfg.task == "scene_seg":
        pc, _ = scene_input(pc, train_cfg.grid_size, rng)
        pc = scene_crop(pc, train_cfg.max_points, rng)
    return pc


def task_loss(model, out, batch, smoothing):
    if model.cfg.task == "classification":
        return T.softmax_cross_entropy(out.logits, batch.cloud_labels, smoothing)
    return T.softmax_cross_entropy(out.logits, batch.point_labels, smoothing)


@dataclass
class TrainResult:
    model: DeLA
    history: list
    metrics: dict | None = None


def train(model_cfg, train_cfg, dataset, out_dir=None, model=None, progress=None):
    """Train from scratch (or continue ``model``) and return the model with
    per-epoch history. Writes checkpoint, configs, log and metrics to
    ``out_dir`` when given."""
    _check_compat(model_cfg, dataset)
    if model_cfg.task == "classification" and min(train_cfg.batch_size, len(dataset)) < 2:
        raise ConfigError("classification training needs at least 2 clouds per batch for batch norm")
    model = model or DeLA(model_cfg, seed=train_cfg.seed)
    model.train()
    opt = AdamW(model.parameters(), train_cfg.betas, train_cfg.eps, train_cfg.weight_decay)
    n = len(dataset)
    bs = min(train_cfg.batch_size, n)
    nb = n // bs if model_cfg.task == "classification" else math.ceil(n / bs)
    total = train_cfg.epochs * nb
    warmup = int(round(train_cfg.warmup_frac * total))
    history = []
    step = 0
    log_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "log.csv"), "w")
        log_file.write(",".join(LOG_FIELDS) + "\n")
    try:
        for epoch in range(train_cfg.epochs):
            order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
            groups = [order[b * bs:(b + 1) * bs] for b in range(nb)]

            def make(b, epoch=epoch):
                rng = np.random.default_rng([train_cfg.seed, epoch, b, 1])
                clouds = [_train_cloud(dataset[i], model_cfg, train_cfg, rng) for i in groups[b]]
                return prepare_batch(clouds, model_cfg, rng)

            losses, regs = [], []
            for b, batch in enumerate(prefetch(range(nb), make, train_cfg.workers)):
                lr = cosine_lr(step, total, train_cfg.base_lr, warmup)
                strength = reg_strength(step, total, train_cfg.reg_lambda)
                frng = np.random.default_rng([train_cfg.seed, epoch, b, 2])
                out = model(batch, frng, compute_reg=train_cfg.reg_enabled)
                loss = task_loss(model, out, batch, train_cfg.label_smoothing)
                total_loss = loss if out.reg_loss is None else loss + out.reg_loss * strength
                if not np.isfinite(total_loss.data):
                    raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
                opt.zero_grad()
                T.backward(total_loss)
                opt.step(lr)
                losses.append(loss.item())
                regs.append(out.reg_loss.item() if out.reg_loss is not None else 0.0)
                step += 1
            rec = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)), "reg_loss": float(np.mean(regs)),
                   "lr": lr, "reg_strength": strength}
            if train_cfg.eval_every and (epoch + 1) % train_cfg.eval_every == 0:
                rec["train_OA"] = evaluate(model, dataset, model_cfg, train_cfg)["OA"]
                model.train()
            history.append(rec)
            if log_file:
                log_file.write(",".join(f"{rec[k]:.8g}" if isinstance(rec[k], float) else str(rec[k])
                                        for k in LOG_FIELDS) + "\n")
                log_file.flush()
            if progress:
                progress(rec)
            log.info("epoch %d loss %.4f reg %.4f lr %.2e", epoch, rec["loss"], rec["reg_loss"], lr)
            target = train_cfg.target_accuracy
            if target is not None and rec.get("train_OA", -1) >= target:
                break
    finally:
        if log_file:
            log_file.close()
    result = TrainResult(model, history)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint.dela"), model.state_dict())
        save_model_config(os.path.join(out_dir, "model_config.yaml"), model_cfg)
        save_train_config(os.path.join(out_dir, "train_config.yaml"), train_cfg)
        result.metrics = evaluate(model, dataset, model_cfg, train_cfg)
        write_metrics(os.path.join(out_dir, "metrics.json"), result.metrics)
    return result


def write_metrics(path, metrics):
    keep = {k: v for k, v in metrics.items() if k != "confusion"}
    with open(path, "w") as f:
        json.dump(keep, f, indent=1)


def load_model(checkpoint, model_config=None):
    """Rebuild a model from a checkpoint and its config (defaults to the
    ``model_config.yaml`` stored next to the checkpoint)."""
    if model_config is None:
        model_config = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "model_config.yaml")
    cfg = load_model_config(model_config)
    model = DeLA(cfg)
    try:
        model.load_state_dict(load_checkpoint(checkpoint))
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot load checkpoint {checkpoint}: {e}") from e
    return model.eval()


def predict(model, dataset, train_cfg=None, batch_size=8):
    """Inference-mode predictions per cloud (full resolution for scenes)."""
    cfg = model.cfg
    train_cfg = train_cfg or TrainConfig()
    model.eval()
    parts = getattr(dataset, "meta", {}).get("category_parts")
    preds = []
    for start in range(0, len(dataset), batch_size):
        chunk = list(dataset[start:start + batch_size])
        parents = [None] * len(chunk)
        if cfg.task == "scene_seg":
            pairs = [scene_input(pc, train_cfg.grid_size) for pc in chunk]
            chunk, parents = [p for p, _ in pairs], [m for _, m in pairs]
        batch = prepare_batch(chunk, cfg)
        logits = model(batch).logits.data
        if cfg.task == "classification":
            preds.extend(int(v) for v in logits.argmax(1))
            continue
        off = batch.stages[0].offsets
        for b, pc in enumerate(chunk):
            lg = logits[off[b]:off[b + 1]]
            if cfg.task == "part_seg" and parts:
                allowed = parts[pc.category]
                pred = np.asarray(allowed)[lg[:, allowed].argmax(1)]
            else:
                pred = lg.argmax(1)
            preds.append(pred[parents[b]] if parents[b] is not None else pred)
    return preds


def evaluate(model, dataset, model_cfg=None, train_cfg=None, batch_size=8):
    """Metrics of ``model`` (or a checkpoint path) over ``dataset``."""
    if isinstance(model, str):
        model = load_model(model)
    was_training = model.training
    preds = predict(model, dataset, train_cfg, batch_size)
    k = model.cfg.num_classes
    if model.cfg.task == "classification":
        gt = [int(pc.labels) for pc in dataset]
        cm = confusion_matrix(preds, gt, k)
    else:
        cm = confusion_matrix(np.concatenate(preds), np.concatenate([pc.labels for pc in dataset]), k)
    metrics = metrics_from_confusion(cm)
    metrics["confusion"] = cm
    parts = getattr(dataset, "meta", {}).get("category_parts")
    if model.cfg.task == "part_seg" and parts:
        metrics.update(part_metrics(preds, [pc.labels for pc in dataset], [pc.category for pc in dataset], parts))
    model.train(was_training)
    return metrics
