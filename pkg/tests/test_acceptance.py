"""Acceptance criteria. Each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
"""
import dataclasses
import time

import numpy as np
import pytest
from conftest import toy_config
from test_tensor import OP_NAMES, _op_cases

import oracles
from dela import geometry as G
from dela import model as M
from dela import tensor as T
from dela import training as TR
from dela.data import generate, make_room
from dela.decode import fit_decoder
from dela.geometry import PointCloud
from dela.tensor import Tensor

TABLE1 = {  # name: (params M, GFLOPs per 1024 points)
    "s3dis": (7.0, 0.96), "scannet": (8.0, 0.81), "shapenetpart": (7.5, 1.85),
    "scanobjectnn": (5.3, 1.5), "modelnet40": (5.3, 1.44),
}


@pytest.fixture
def report(capsys):
    def emit(num, name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {num}. {name}: {detail}")
        assert ok, detail
    return emit


# ---------------------------------------------------------------- 1, 2: Table 1 accounting


def test_1_param_counts(report):
    errs = {n: M.param_count(M.preset(n)) / 1e6 for n in TABLE1}
    rel = {n: errs[n] / TABLE1[n][0] - 1 for n in TABLE1}
    detail = ", ".join(f"{n} {errs[n]:.2f}M ({rel[n]:+.1%})" for n in TABLE1)
    report(1, "params within 10%", all(abs(r) <= 0.10 for r in rel.values()), detail)


def test_2_flop_counts(report):
    got = {n: M.flop_count(M.preset(n), 1024) / 1e9 for n in TABLE1}
    rel = {n: got[n] / TABLE1[n][1] - 1 for n in TABLE1}
    detail = ", ".join(f"{n} {got[n]:.3f}G ({rel[n]:+.1%})" for n in TABLE1)
    report(2, "FLOPs/1024 pts within 15%", all(abs(r) <= 0.15 for r in rel.values()), detail)


# ---------------------------------------------------------------- 3: edge max identity


def test_3_edge_max_identity(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        n, c, k = int(rng.integers(1, 64)), int(rng.integers(1, 32)), int(rng.integers(1, 17))
        x = (rng.normal(size=(n, c)) * rng.uniform(0.1, 100)).astype(np.float32)
        idx = np.concatenate([np.arange(n)[:, None], rng.integers(0, n, (n, k - 1))], 1)
        fused = T.neighbor_max(Tensor(x), idx, edge=True).data
        literal = (x[idx] - x[:, None, :]).max(1)
        pooled = T.neighbor_max(Tensor(x), idx).data - x
        worst = max(worst, np.abs(fused - literal).max(), np.abs(fused - pooled).max())
    report(3, "edge max-pool == pool-then-subtract", worst <= 1e-6, f"max |diff| {worst:.2e} over 1000 instances")


# ---------------------------------------------------------------- 4: oracle equivalence


def _instance(rng):
    n = int(rng.integers(1, 513))
    if rng.random() < 0.25:  # lattice points stress the tie rules
        return rng.integers(0, 6, size=(n, 3)).astype(np.float64)
    return rng.normal(size=(n, 3)) * rng.uniform(0.1, 10)


def test_4_oracle_equivalence(report):
    rng = np.random.default_rng(4)
    t0 = time.time()
    bad = {"knn": 0, "fps": 0, "grid": 0, "nearest_parent": 0}
    for _ in range(1000):
        pos = _instance(rng)
        k = int(rng.integers(1, min(len(pos), 32) + 1))
        bad["knn"] += not np.array_equal(G.knn(pos, k), oracles.knn_dense(pos, k))
    for _ in range(1000):
        pos = _instance(rng)
        m, start = int(rng.integers(1, len(pos) + 1)), int(rng.integers(0, len(pos)))
        bad["fps"] += not np.array_equal(G.fps(pos, m, start), oracles.fps_dense(pos, m, start))
    for _ in range(1000):
        pos = _instance(rng)
        cell, off = float(rng.uniform(0.05, 2.0)), rng.normal(size=3)
        ref = oracles.grid(pos, cell, off)
        dual = G.grid_subsample_kept(pos, cell, off)
        single = G.grid_subsample_kept(pos, cell, off, single_table=True)
        bad["grid"] += not (np.array_equal(dual, ref) and np.array_equal(single, ref))
    for _ in range(1000):
        pos = _instance(rng)
        kept = np.sort(rng.choice(len(pos), int(rng.integers(1, len(pos) + 1)), replace=False))
        bad["nearest_parent"] += not np.array_equal(G.nearest_parent(pos, kept),
                                                    oracles.nearest_parent_dense(pos, kept))
    big = make_room(100_000, np.random.default_rng(4)).positions
    ref = oracles.grid(big, 0.05)
    big_ok = (np.array_equal(G.grid_subsample_kept(big, 0.05), ref)
              and np.array_equal(G.grid_subsample_kept(big, 0.05, single_table=True), ref))
    ok = not any(bad.values()) and big_ok
    detail = (", ".join(f"{k} {1000 - v}/1000" for k, v in bad.items())
              + f", 1e5-point grid {'match' if big_ok else 'MISMATCH'} ({time.time() - t0:.0f}s)")
    report(4, "oracle equivalence", ok, detail)


# ---------------------------------------------------------------- 5: gradients


def _op_cases_with_weights(rng):
    cases = _op_cases(rng)
    a = rng.normal(size=(5, 12))
    cases["linear_weight"] = lambda w: T.sum_all(T.gelu(T.linear(Tensor(a), w)))
    return cases


def _e2e_setup():
    cfg = toy_config(chans=(6, 12), k=6)
    batch = M.prepare_batch(list(generate("shapes-partseg", 2, 32, 5)), cfg)

    def loss_fn(model):
        out = model(batch, np.random.default_rng(0), compute_reg=True)
        return T.softmax_cross_entropy(out.logits, batch.point_labels, 0.1) + out.reg_loss * 0.5
    return cfg, loss_fn


def test_5_gradients(report):
    worst_op, worst_name = 0.0, ""
    names = OP_NAMES + ["linear_weight"]
    for name in names:
        f = _op_cases_with_weights(np.random.default_rng(1))[name]
        x = np.random.default_rng(2).normal(size=(12, 6))
        res = T.grad_check(f, x, tol=1e-5)
        if res["max_rel_err"] >= worst_op:
            worst_op, worst_name = res["max_rel_err"], name

    cfg, loss_fn = _e2e_setup()
    m64 = M.DeLA(cfg, seed=0).astype(np.float64)
    err64, _, _ = oracles.model_grad_check(m64, lambda: loss_fn(m64), n_probe=60)

    # 32-bit analytic gradients against 64-bit central differences of the same weights
    m32 = M.DeLA(cfg, seed=0)
    T.backward(loss_fn(m32))
    ref = M.DeLA(cfg, seed=0).astype(np.float64)
    pairs = [(p32, p64) for (_, p32), (_, p64) in zip(m32.named_parameters(), ref.named_parameters())
             if p32.grad is not None]
    rng = np.random.default_rng(7)
    ana, num = [], []
    for _ in range(60):
        p32, p64 = pairs[rng.integers(len(pairs))]
        i = rng.integers(p64.data.size)
        flat = p64.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + 1e-5
        fp = loss_fn(ref).item()
        flat[i] = orig - 1e-5
        fm = loss_fn(ref).item()
        flat[i] = orig
        ana.append(float(p32.grad.ravel()[i]))
        num.append((fp - fm) / 2e-5)
    ana, num = np.array(ana), np.array(num)
    err32 = float(np.abs(ana - num).max() / max(np.abs(num).max(), 1e-12))
    ok = worst_op < 1e-5 and err64 < 1e-5 and err32 < 1e-3
    detail = (f"{len(names)} ops worst {worst_op:.1e} ({worst_name}); 2-stage model 64-bit {err64:.1e}, "
              f"32-bit vs 64-bit FD {err32:.1e}")
    report(5, "finite-difference gradient suite", ok, detail)


# ---------------------------------------------------------------- 6: translation invariance


def test_6_translation_invariance(report):
    shift = np.array([17.3, -4.2, 9.9])
    errs = {}
    room = generate("rooms-seg", 1, 20000, 6)[0]
    room, _ = TR.scene_input(room, 0.04)
    rng = np.random.default_rng(6)
    normals = rng.normal(size=(2048, 3))
    part = generate("shapes-partseg", 1, 2048, 6)[0]
    part = PointCloud(part.positions, normals, part.labels, ["normal.x", "normal.y", "normal.z"], part.category)
    cases = {"s3dis": (room, ["rgb"]), "shapenetpart": (part, ["normal"])}
    for name, (pc, feats) in cases.items():
        cfg = dataclasses.replace(M.preset(name), input_features=feats)
        model = M.DeLA(cfg, seed=0).eval()
        moved = PointCloud(pc.positions + shift, pc.features, pc.labels, pc.schema, pc.category)
        a = model(M.prepare_batch([pc], cfg)).logits.data
        b = model(M.prepare_batch([moved], cfg)).logits.data
        errs[name] = float(np.abs(a - b).max() / np.abs(a).max())
    ok = all(e <= 1e-4 for e in errs.values())
    report(6, "segmentation translation invariance", ok,
           ", ".join(f"{n} rel {e:.1e} ({len(cases[n][0])} pts)" for n, e in errs.items()))


# ---------------------------------------------------------------- 7, 8: overfit and decode


def overfit_config(num_classes):
    return M.ModelConfig(stages=[M.StageConfig(32, 2, 16, 16), M.StageConfig(64, 2, 16, 16)], task="part_seg",
                         num_classes=num_classes, num_categories=4, head_dim=64, class_embed_dim=16,
                         head_drop=0.0, stage_drop=0.0)


def overfit_train_config(reg, early_stop):
    return TR.TrainConfig(epochs=200, batch_size=8, base_lr=5e-3, augment=TR.AugmentConfig.off(),
                          label_smoothing=0.0, reg_enabled=reg, eval_every=5,
                          target_accuracy=0.99 if early_stop else None)


@pytest.fixture(scope="module")
def overfit_data():
    return generate("shapes-partseg", 64, 256, 0)


@pytest.fixture(scope="module")
def overfit_runs(overfit_data):
    """Regularized run trained the full 200 epochs (reused by the decode
    check) and an unregularized run that stops once it hits 99%."""
    cfg = overfit_config(overfit_data.num_classes)
    out = {}
    for reg, early in ((True, False), (False, True)):
        t = time.time()
        res = TR.train(cfg, overfit_train_config(reg, early), overfit_data)
        out[reg] = (res, time.time() - t)
    return cfg, out


def _first_epoch_at(history, target=0.99):
    for rec in history:
        if rec.get("train_OA", -1) >= target:
            return rec["epoch"] + 1
    return None


@pytest.mark.slow
def test_7_overfit(report, overfit_runs, overfit_data):
    _, runs = overfit_runs
    parts = []
    ok = True
    for reg in (True, False):
        res, secs = runs[reg]
        final = TR.evaluate(res.model, overfit_data)["OA"]
        hit = _first_epoch_at(res.history)
        ok &= hit is not None and hit <= 200 and final >= 0.99
        parts.append(f"reg {'on' if reg else 'off'}: >=99% at epoch {hit}, final OA {final:.4f} ({secs:.0f}s)")
    report(7, "2-stage overfit of 64 part-seg clouds", ok, "; ".join(parts))


@pytest.mark.slow
def test_8_decode(report, overfit_runs, overfit_data):
    cfg, runs = overfit_runs
    trained = runs[True][0].model
    t = time.time()
    rep = fit_decoder(trained, overfit_data, stage=0, seed=0)
    untrained = fit_decoder(M.DeLA(cfg, seed=0), overfit_data, stage=0, seed=0)
    ok = rep.decode_mse <= rep.baseline_var / 10 and untrained.decode_mse > rep.decode_mse
    detail = (f"trained mse {rep.decode_mse:.4f} vs baseline/10 {rep.baseline_var / 10:.4f}; "
              f"untrained mse {untrained.decode_mse:.4f}; uniqueness {rep.edge_uniqueness_rate:.3f}, "
              f"connectivity {rep.connectivity_rate:.3f} ({time.time() - t:.0f}s)")
    report(8, "stage-0 decodability", ok, detail)


# ---------------------------------------------------------------- 9, 10


def test_9_schedule_endpoints(report):
    total = 12345
    a, b = TR.reg_strength(0, total, 3e-3), TR.reg_strength(total, total, 3e-3)
    report(9, "reg_strength endpoints", a == 1.0 and b == 3e-3, f"s(0)={a!r}, s(T)={b!r}")


def test_10_not_reproducible(capsys):
    with capsys.disabled():
        print("\n[N/A ] 10. published benchmark accuracy/mIoU and the 468 instances/s throughput need the full datasets "
              "and the original GPU; not attempted. `dela bench` is the harness for trying them.")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
