"""Command line: ``dela {train,eval,bench,verify,flops,gen-data}``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time

import numpy as np

from . import geometry as G
from .errors import ConfigError, DataError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("dela")


def _model_config(path):
    from .model import PRESET_NAMES, load_model_config, preset
    if path in PRESET_NAMES:
        return preset(path)
    return load_model_config(path)


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def cmd_train(args):
    from .data import load_dataset
    from .plotting import training_curves
    from .training import TrainConfig, load_train_config, train
    cfg = _model_config(args.model_config)
    tcfg = load_train_config(args.train_config) if args.train_config else TrainConfig()
    if args.seed is not None:
        tcfg.seed = args.seed
    ds = load_dataset(args.data)
    res = train(cfg, tcfg, ds, args.out, progress=lambda r: log.info(
        "epoch %d loss %.4f reg %.4f", r["epoch"], r["loss"], r["reg_loss"]))
    training_curves(res.history, os.path.join(args.out, "training.png"))
    print(json.dumps({k: res.metrics[k] for k in ("OA", "mAcc", "mIoU")}))
    return EXIT_OK


def cmd_eval(args):
    from .data import load_dataset
    from .plotting import confusion
    from .training import evaluate, load_model, write_metrics
    model = load_model(args.checkpoint, args.model_config)
    ds = load_dataset(args.data)
    m = evaluate(model, ds)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    write_metrics(os.path.join(out, "eval_metrics.json"), m)
    confusion(m["confusion"], os.path.join(out, "confusion.png"), ds.meta.get("class_names"))
    rows = [[i, "" if v is None else f"{v:.6f}"] for i, v in enumerate(m["per_class_iou"])]
    print(f"OA,{m['OA']:.6f}\nmAcc,{m['mAcc']:.6f}\nmIoU,{m['mIoU']:.6f}")
    print(_csv(rows, ["class", "iou"]), end="")
    return EXIT_OK


def _timed(fn, repeat, warmup=1):
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t)
    return np.array(out)


def coherent_corpus(n, seed=0):
    """Scanner-ordered room points: consecutive points fall in nearby cells."""
    from .data import make_room
    return make_room(n, np.random.default_rng(seed)).positions


def grid_throughput(pos, cell, repeat):
    """Points/s of the dual-table and single-table grid paths, timed interleaved
    so both see the same machine load."""
    origin = pos.min(0)
    paths = {"grid_dual": False, "grid_single": True}
    out = {k: [] for k in paths}
    for single in paths.values():
        G.grid_subsample_kept(pos, cell, origin, single_table=single)
    for _ in range(repeat):
        for label, single in paths.items():
            t = time.perf_counter()
            G.grid_subsample_kept(pos, cell, origin, single_table=single)
            out[label].append(len(pos) / (time.perf_counter() - t))
    return {k: np.array(v) for k, v in out.items()}


def cmd_bench(args):
    from .data import make_shape_cloud
    from .model import DeLA, flop_count, prepare_batch
    from .plotting import bench_bars
    cfg = _model_config(args.model_config)
    rng = np.random.default_rng(args.seed)
    model = DeLA(cfg, seed=args.seed).eval()
    cols = [f"{name}.{c}" for name in cfg.input_features if name != "height" for c in "xyz"]

    def cloud():
        pos = make_shape_cloud(0, args.points, rng).positions
        return G.PointCloud(pos, rng.random((args.points, len(cols))).astype(np.float32), None, cols)

    clouds = [cloud() for _ in range(args.batch)]
    batch = prepare_batch(clouds, cfg)
    times = _timed(lambda: model(batch), args.repeat)
    thr = args.batch / times
    flops = flop_count(cfg, args.points)
    rows = [["model", args.points, args.batch, len(times), f"{thr.mean():.3f}", f"{thr.std():.3f}",
             f"{flops / 1e9:.4f}"]]

    pos = coherent_corpus(args.grid_points, args.seed)
    rates = grid_throughput(pos, args.grid_cell, max(args.repeat, 5))
    for label, pts in rates.items():
        rows.append([label, len(pos), 1, len(pts), f"{pts.mean():.1f}", f"{pts.std():.1f}", ""])
    print(_csv(rows, ["item", "points", "batch", "repeats", "per_s_mean", "per_s_std", "gflops_per_instance"]),
          end="")
    ratio = np.median(rates["grid_dual"]) / np.median(rates["grid_single"])
    print(f"dual_vs_single,{ratio:.3f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.csv"), "w") as f:
            f.write(_csv(rows, ["item", "points", "batch", "repeats", "per_s_mean", "per_s_std",
                                "gflops_per_instance"]))
        bench_bars([(r[0], float(r[4]), float(r[5])) for r in rows[1:]], os.path.join(args.out, "grid_bench.png"))
    return EXIT_OK


def cmd_verify(args):
    from .data import load_dataset
    from .decode import fit_decoder, write_report
    from .plotting import decode_scatter
    from .training import load_model
    model = load_model(args.checkpoint, args.model_config)
    ds = load_dataset(args.data)
    rep = fit_decoder(model, ds, args.stage, seed=args.seed)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), f"decode_stage{args.stage}.txt")
    write_report(out, rep)
    if rep.samples is not None:
        decode_scatter(rep.samples[0], rep.samples[1], os.path.splitext(out)[0] + ".png")
    print(rep.to_text(), end="")
    return EXIT_OK


def cmd_flops(args):
    from .model import PRESET_NAMES, flop_count, param_count
    names = args.model_config or list(PRESET_NAMES)
    rows = []
    for name in names:
        cfg = _model_config(name)
        rows.append([os.path.basename(name), cfg.task, "-".join(str(s.channels) for s in cfg.stages),
                     "-".join(str(s.depth // 2) for s in cfg.stages), cfg.stages[0].k,
                     f"{param_count(cfg) / 1e6:.3f}", f"{flop_count(cfg, args.points) / 1e9:.3f}"])
    print(_csv(rows, ["config", "task", "dims", "depth", "k", "params_M", "gflops"]), end="")
    return EXIT_OK


def cmd_gen_data(args):
    from .data import generate, save_dataset
    ds = generate(args.kind, args.count, args.points, args.seed)
    save_dataset(args.out, ds)
    print(f"wrote {len(ds)} clouds to {args.out}")
    return EXIT_OK


def build_parser():
    from .data import KINDS
    p = argparse.ArgumentParser(prog="dela", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--model-config", required=True, help="YAML file or preset name")
    t.add_argument("--train-config")
    t.add_argument("--data", required=True, help="dataset dir or synthetic:KIND[:COUNT[:POINTS[:SEED]]]")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--model-config", help="defaults to model_config.yaml next to the checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="inference and grid-subsampling throughput")
    b.add_argument("--model-config", required=True)
    b.add_argument("--points", type=int, default=1024)
    b.add_argument("--batch", type=int, default=8)
    b.add_argument("--repeat", type=int, default=5)
    b.add_argument("--grid-points", type=int, default=1_000_000)
    b.add_argument("--grid-cell", type=float, default=0.04)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(fn=cmd_bench)

    v = sub.add_parser("verify", help="decodability report for a checkpoint")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--model-config")
    v.add_argument("--data", required=True)
    v.add_argument("--stage", type=int, default=0)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(fn=cmd_verify)

    f = sub.add_parser("flops", help="parameter and FLOP table")
    f.add_argument("--model-config", action="append", help="repeatable; defaults to all presets")
    f.add_argument("--points", type=int, default=1024)
    f.set_defaults(fn=cmd_flops)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--kind", required=True, choices=KINDS)
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--points", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
