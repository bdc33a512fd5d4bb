import csv
import json
import math
import os

import numpy as np
import pytest
from conftest import toy_config

import oracles
from dela import model as M
from dela import tensor as T
from dela import training as TR
from dela.data import Dataset, generate
from dela.errors import ConfigError, DataError
from dela.geometry import PointCloud
from dela.nn import Parameter


def quick_cfg(**kw):
    base = dict(epochs=3, batch_size=2, base_lr=5e-3, label_smoothing=0.0, augment=TR.AugmentConfig.off(),
                workers=0)
    base.update(kw)
    return TR.TrainConfig(**base)


def small_parts(n=4, points=48, seed=0):
    return generate("shapes-partseg", n, points, seed)


# ---------------------------------------------------------------- optimizer


def test_adamw_zero_grad_no_decay():
    p = Parameter(np.array([1.0, -2.0]))
    TR.adamw_step([p], [np.zeros(2)], {}, lr=0.1, wd=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_zero_grad_decay():
    p = Parameter(np.array([1.0, -2.0]))
    TR.adamw_step([p], [np.zeros(2)], {}, lr=0.1, wd=0.05)
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.05))


def test_adamw_exempt_skips_decay():
    p = Parameter(np.array([1.0]), weight_decay_exempt=True)
    TR.adamw_step([p], [np.zeros(1)], {}, lr=0.1, wd=0.05)
    assert p.data[0] == 1.0


def test_adamw_first_step():
    p = Parameter(np.array([1.0]))
    TR.adamw_step([p], [np.array([1.0])], {}, lr=0.1, betas=(0.9, 0.999), eps=1e-8, wd=0.0)
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)


def test_adamw_matches_hand_rolled_two_steps():
    p = Parameter(np.array([0.5, -1.0]))
    state = {}
    grads = [np.array([0.3, -0.2]), np.array([-0.1, 0.4])]
    ref = np.array([0.5, -1.0])
    m = v = np.zeros(2)
    for t, g in enumerate(grads, 1):
        TR.adamw_step([p], [g], state, lr=0.01, wd=0.1)
        ref = ref * (1 - 0.01 * 0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


# ---------------------------------------------------------------- schedules


def test_cosine_lr():
    assert TR.cosine_lr(10, 110, 2e-3, warmup=10) == pytest.approx(2e-3)
    assert TR.cosine_lr(110, 110, 2e-3, warmup=10) == pytest.approx(0.0, abs=1e-15)
    assert TR.cosine_lr(60, 110, 2e-3, warmup=10) == pytest.approx(1e-3)
    assert TR.cosine_lr(5, 110, 2e-3, warmup=10) == pytest.approx(1e-3)


def test_reg_strength():
    assert TR.reg_strength(0, 1000, 3e-3) == 1.0
    assert TR.reg_strength(1000, 1000, 3e-3) == 3e-3
    assert TR.reg_strength(500, 1000, 3e-3) == pytest.approx(math.sqrt(3e-3), rel=1e-12)
    vals = [TR.reg_strength(s, 1000, 3e-3) for s in range(0, 1001, 10)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TR.TrainConfig(reg_lambda=1.5)
    with pytest.raises(ConfigError):
        TR.TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TR.TrainConfig(base_lr=-1.0)


def test_train_config_yaml_roundtrip(tmp_path):
    cfg = quick_cfg(seed=7)
    TR.save_train_config(tmp_path / "t.yaml", cfg)
    back = TR.load_train_config(tmp_path / "t.yaml")
    assert back == cfg


# ---------------------------------------------------------------- augmentation


def _cloud(rng, n=50):
    return PointCloud(rng.random((n, 3)), rng.random((n, 3)), rng.integers(0, 3, n), ["rgb.r", "rgb.g", "rgb.b"])


def test_augment_off_is_identity(rng):
    pc = _cloud(rng)
    out = TR.augment(pc, TR.AugmentConfig.off(), rng)
    np.testing.assert_array_equal(out.positions, pc.positions)
    np.testing.assert_array_equal(out.features, pc.features)


def test_rotation_full_turn():
    pos = np.random.default_rng(0).random((30, 3))
    np.testing.assert_allclose(TR.rotate_z(pos, 2 * math.pi), pos, atol=1e-5)


def test_scaling_multiplies_distances(rng):
    pc = _cloud(rng)
    cfg = TR.AugmentConfig.off()
    cfg.scale = True
    out = TR.augment(pc, cfg, np.random.default_rng(5))
    s = np.random.default_rng(5).uniform(*cfg.scale_range)
    i, j = rng.integers(0, 50, (2, 20))
    d0 = np.linalg.norm(pc.positions[i] - pc.positions[j], axis=1)
    d1 = np.linalg.norm(out.positions[i] - out.positions[j], axis=1)
    np.testing.assert_allclose(d1, s * d0, rtol=1e-12)


def test_rotation_keeps_distances_and_z(rng):
    pc = _cloud(rng)
    cfg = TR.AugmentConfig.off()
    cfg.rotate = True
    out = TR.augment(pc, cfg, rng)
    np.testing.assert_allclose(out.positions[:, 2], pc.positions[:, 2])
    np.testing.assert_allclose(np.linalg.norm(out.positions[:, :2], axis=1), np.linalg.norm(pc.positions[:, :2], axis=1))


def test_feature_drop_zeroes_colour(rng):
    pc = _cloud(rng)
    cfg = TR.AugmentConfig.off()
    cfg.feature_drop = 1.0
    np.testing.assert_array_equal(TR.augment(pc, cfg, rng).features, 0)


def test_jitter_is_clipped(rng):
    pc = _cloud(rng, 2000)
    cfg = TR.AugmentConfig.off()
    cfg.jitter = True
    d = TR.augment(pc, cfg, rng).positions - pc.positions
    assert np.abs(d).max() <= cfg.jitter_clip + 1e-12
    assert 0.004 < d.std() < 0.006


def test_scene_crop(rng):
    pc = _cloud(rng, 200)
    assert TR.scene_crop(pc, 500, rng) is pc
    out = TR.scene_crop(pc, 40, np.random.default_rng(3))
    assert len(out) == 40
    center = pc.positions[np.random.default_rng(3).integers(200)]
    d = ((pc.positions - center) ** 2).sum(1)
    np.testing.assert_array_equal(np.sort(((out.positions - center) ** 2).sum(1)), np.sort(d)[:40])


# ---------------------------------------------------------------- metrics


def test_metrics_perfect():
    m = TR.metrics_from_confusion(TR.confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], 3))
    assert m["OA"] == m["mIoU"] == m["mAcc"] == 1.0


def test_metrics_binary_all_zero():
    m = TR.metrics_from_confusion(TR.confusion_matrix([0, 0, 0, 0], [0, 0, 1, 1], 2))
    assert m["OA"] == 0.5
    assert m["mIoU"] == 0.25
    assert m["per_class_iou"] == [0.5, 0.0]


def test_miou_skips_absent_classes():
    m = TR.metrics_from_confusion(TR.confusion_matrix([0, 1], [0, 1], 4))
    assert m["mIoU"] == 1.0 and m["per_class_iou"][2] is None


def test_confusion_matches_tally_oracle(rng):
    for _ in range(20):
        k = int(rng.integers(2, 8))
        gt, pred = rng.integers(0, k, (2, 300))
        np.testing.assert_array_equal(TR.confusion_matrix(pred, gt, k), oracles.confusion(pred, gt, k))


def test_metrics_order_invariant(rng):
    gt, pred = rng.integers(0, 5, (2, 400))
    perm = rng.permutation(400)
    a = TR.metrics_from_confusion(TR.confusion_matrix(pred, gt, 5))
    b = TR.metrics_from_confusion(TR.confusion_matrix(pred[perm], gt[perm], 5))
    assert a == b


def test_metrics_in_unit_interval(rng):
    gt, pred = rng.integers(0, 6, (2, 100))
    m = TR.metrics_from_confusion(TR.confusion_matrix(pred, gt, 6))
    assert all(0 <= m[k] <= 1 for k in ("OA", "mAcc", "mIoU"))


def test_part_metrics():
    preds = [np.array([0, 0, 1, 1]), np.array([2, 2, 3, 3])]
    labels = [np.array([0, 0, 1, 1]), np.array([2, 3, 3, 3])]
    out = TR.part_metrics(preds, labels, [0, 1], {0: [0, 1], 1: [2, 3]})
    second = (0.5 + 2 / 3) / 2
    assert out["instance_mIoU"] == pytest.approx((1 + second) / 2)
    assert out["category_mIoU"] == pytest.approx((1 + second) / 2)


# ---------------------------------------------------------------- prefetch


@pytest.mark.parametrize("workers", [0, 1])
def test_prefetch_preserves_order(workers):
    assert list(TR.prefetch(range(20), lambda i: i * i, workers)) == [i * i for i in range(20)]


def test_prefetch_propagates_errors():
    def boom(i):
        if i == 3:
            raise RuntimeError("bad item")
        return i
    with pytest.raises(RuntimeError, match="bad item"):
        list(TR.prefetch(range(10), boom, 1))


def test_prefetch_early_exit():
    gen = TR.prefetch(range(1000), lambda i: i, 1, depth=2)
    assert next(gen) == 0
    gen.close()


# ---------------------------------------------------------------- loops


def test_training_is_deterministic():
    cfg = toy_config()
    data = small_parts()
    a = TR.train(cfg, quick_cfg(), data).history
    b = TR.train(cfg, quick_cfg(), data).history
    assert [r["loss"] for r in a] == [r["loss"] for r in b]
    assert [r["reg_loss"] for r in a] == [r["reg_loss"] for r in b]


def test_prefetch_worker_does_not_change_losses():
    cfg = toy_config()
    data = small_parts()
    a = TR.train(cfg, quick_cfg(workers=0), data).history
    b = TR.train(cfg, quick_cfg(workers=1), data).history
    assert [r["loss"] for r in a] == [r["loss"] for r in b]


def test_fixed_batch_loss_strictly_decreases():
    cfg = toy_config(head_drop=0.0, stage_drop=0.0)
    model = M.DeLA(cfg, seed=0)
    batch = M.prepare_batch(list(small_parts(4, 64)), cfg)
    opt = TR.AdamW(model.parameters(), weight_decay=0.0)
    losses = []
    for _ in range(20):
        out = model(batch, np.random.default_rng(0))
        loss = T.softmax_cross_entropy(out.logits, batch.point_labels)
        opt.zero_grad()
        loss.backward()
        opt.step(2e-3)
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_train_writes_outputs(tmp_path):
    cfg = toy_config()
    res = TR.train(cfg, quick_cfg(epochs=2), small_parts(), out_dir=str(tmp_path))
    for name in ("log.csv", "checkpoint.dela", "model_config.yaml", "train_config.yaml", "metrics.json"):
        assert (tmp_path / name).exists(), name
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert list(rows[0]) == list(TR.LOG_FIELDS)
    assert len(rows) == 2
    strengths = [float(r["reg_strength"]) for r in rows]
    assert 3e-3 < strengths[1] < strengths[0] < 1.0
    metrics = json.load(open(tmp_path / "metrics.json"))
    assert {"OA", "mAcc", "mIoU", "per_class_iou"} <= set(metrics)
    assert len(res.history) == 2


def test_reg_strength_reaches_lambda_at_end():
    res = TR.train(toy_config(), quick_cfg(epochs=2), small_parts())
    # logged strength is the one used by the last step, one step short of the end
    total = res.history[-1]["step"]
    assert res.history[-1]["reg_strength"] == pytest.approx(TR.reg_strength(total - 1, total, 3e-3))


def test_evaluate_checkpoint_matches_in_memory(tmp_path):
    cfg = toy_config()
    data = small_parts()
    res = TR.train(cfg, quick_cfg(epochs=2), data, out_dir=str(tmp_path))
    a = TR.evaluate(res.model, data)
    b = TR.evaluate(str(tmp_path / "checkpoint.dela"), data)
    np.testing.assert_array_equal(a["confusion"], b["confusion"])


def test_evaluate_perfect_predictions():
    cfg = toy_config(task="classification", num_classes=3)
    model = M.DeLA(cfg)
    data = Dataset([PointCloud(np.random.default_rng(i).random((20, 3)), labels=0) for i in range(4)])
    preds = TR.predict(model, data)
    for pc, p in zip(data, preds):
        pc.labels = p
    m = TR.evaluate(model, data)
    assert m["OA"] == m["mIoU"] == 1.0


def test_evaluate_order_invariant():
    cfg = toy_config()
    model = M.DeLA(cfg).eval()
    data = small_parts(5)
    rev = Dataset(list(data)[::-1], **data.meta)
    a, b = TR.evaluate(model, data), TR.evaluate(model, rev)
    np.testing.assert_array_equal(a["confusion"], b["confusion"])
    assert a["mIoU"] == b["mIoU"]


def test_scene_eval_runs_at_full_resolution():
    cfg = toy_config(task="scene_seg", num_classes=4, chans=(12, 24), input_features=["height"],
                     subsample=M.SubsampleConfig("grid", 0.25, 0.1))
    data = generate("rooms-seg", 2, 3000, 0)
    preds = TR.predict(M.DeLA(cfg), data, TR.TrainConfig(grid_size=0.1))
    assert [len(p) for p in preds] == [len(pc) for pc in data]


def test_bad_checkpoint_is_data_error(tmp_path):
    cfg = toy_config()
    M.save_model_config(tmp_path / "model_config.yaml", cfg)
    (tmp_path / "checkpoint.dela").write_bytes(b"garbage")
    with pytest.raises(DataError):
        TR.load_model(str(tmp_path / "checkpoint.dela"))


def test_dataset_task_mismatch():
    with pytest.raises(ConfigError):
        TR.train(toy_config(task="classification", num_classes=8), quick_cfg(), small_parts())


def test_classification_needs_two_clouds():
    cfg = toy_config(task="classification", num_classes=8)
    data = generate("shapes-cls", 1, 32, 0)
    with pytest.raises(ConfigError):
        TR.train(cfg, quick_cfg(batch_size=1), data)


def test_train_from_dataset_file(tmp_path):
    from dela.data import load_dataset, save_dataset
    data = small_parts()
    save_dataset(str(tmp_path / "d"), data)
    back = load_dataset(str(tmp_path / "d"))
    assert os.path.isdir(tmp_path / "d")
    a = TR.train(toy_config(), quick_cfg(epochs=1), data).history
    b = TR.train(toy_config(), quick_cfg(epochs=1), back).history
    assert a[0]["loss"] == pytest.approx(b[0]["loss"], rel=1e-5)
