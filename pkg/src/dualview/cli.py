"""Operator surface: dataset generation, training, evaluation, gradient
checking, kernel benchmarking, and BEV heatmap export.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O error.
Every subcommand prints its resolved configuration before running;
DVA_THREADS overrides the kernel thread count (0 = auto).
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time

import numpy as np

from . import __version__, kernel
from .config import rig_config_to_dict
from .errors import DualViewError, IoError
from .gradcheck import random_instance, run_all
from .synth import default_frustum, default_grid, default_rig, generate_scene, read_dataset, write_dataset
from .trainer import (
    TrainConfig,
    build_voxel_coords,
    evaluate,
    load_checkpoint,
    prepare_scene,
    probe_logits,
    save_checkpoint,
    sigmoid,
    train,
)


def _print_config(name: str, cfg: dict) -> None:
    print(f"[{name}] resolved config: {json.dumps(cfg, sort_keys=True)}")


def _load_full_config(path):
    """Config file: rig/grid/depth_bins schema plus an optional "train" map."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    rig_doc = {k: v for k, v in doc.items() if k != "train"}
    rig, frustum, grid = None, None, None
    if rig_doc:
        from .config import rig_config_from_dict
        rig, frustum, grid = rig_config_from_dict(rig_doc)
    tcfg = TrainConfig.from_dict(doc.get("train", {}))
    return rig, frustum, grid, tcfg, doc


def cmd_gen_data(args) -> int:
    if args.config:
        rig, frustum, grid, _, _ = _load_full_config(args.config)
    else:
        rig, frustum, grid = default_rig(), default_frustum(), default_grid()
    cfg = {"seed": args.seed, "scenes": args.scenes, "boxes": args.boxes,
           "out": args.out, "rig": rig_config_to_dict(rig, frustum, grid)}
    _print_config("gen-data", cfg)
    scenes = [generate_scene(args.seed + i, args.boxes, rig, grid) for i in range(args.scenes)]
    write_dataset(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    rig, frustum, grid, tcfg, doc = _load_full_config(args.config)
    if frustum is None or grid is None:
        raise IoError("train config must define grid and depth_bins")
    scenes = read_dataset(args.data)
    _print_config("train", {"config": doc, "data": args.data, "out": args.out,
                            "report": args.report})
    t0 = time.perf_counter()
    params, report = train(tcfg, scenes, grid, frustum)
    wall = time.perf_counter() - t0
    save_checkpoint(args.out, params)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(report.to_json())
    last = report.epochs[-1]
    print(f"trained {tcfg.epochs} epochs in {wall:.1f}s; "
          f"final train_loss={last['train_loss']:.4f} eval_loss={last['eval_loss']:.4f} "
          f"eval_iou={last['eval_iou']:.3f}")
    return 0


def cmd_eval(args) -> int:
    rig, frustum, grid, tcfg, doc = _load_full_config(args.config)
    if frustum is None or grid is None:
        raise IoError("eval config must define grid and depth_bins")
    scenes = read_dataset(args.data)
    _print_config("eval", {"config": doc, "ckpt": args.ckpt, "data": args.data})
    params = load_checkpoint(args.ckpt)
    cv_curr = build_voxel_coords(scenes[0].rig, frustum, grid)
    preps = [prepare_scene(s, grid, frustum, tcfg.n_channels, cv_curr, tcfg.np_dtype)
             for s in scenes]
    loss, iou = evaluate(params, tcfg, preps)
    print(f"eval_loss={loss:.6f} eval_iou={iou:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    dtype = np.float64 if args.mode == 64 else np.float32
    tol = args.tol if args.tol is not None else (1e-4 if args.mode == 64 else 0.5)
    pipeline_tol = max(tol, 1e-3) if args.mode == 64 else tol
    # 32-bit central differences carry ~1e-2 absolute noise, so the step
    # and the relative-error floor scale up with the precision loss.
    step = args.step if args.step is not None else (1e-5 if args.mode == 64 else 1e-2)
    floor = 1e-6 if args.mode == 64 else 3e-2
    _print_config("gradcheck", {"seed": args.seed, "mode": args.mode, "step": step,
                                "tol": tol, "pipeline_tol": pipeline_tol})
    errs = run_all(seed=args.seed, step=step, dtype=dtype, floor=floor)
    failed = []
    for name in sorted(errs):
        limit = pipeline_tol if name.startswith("pipeline.") else tol
        status = "ok" if errs[name] < limit else "FAIL"
        if status == "FAIL":
            failed.append(name)
        print(f"  {name:40s} worst rel err {errs[name]:.3e}  [{status}]")
    print(f"gradcheck: {len(errs) - len(failed)}/{len(errs)} gradients within tolerance")
    return 0 if not failed else 1


def _bench_instance(args):
    return random_instance(args.seed, n=args.n, h=args.height, w=args.width, d=args.d,
                           grid_counts=(args.nx, args.ny, args.nz), l=args.l,
                           dtype=np.float32)


def _time_forward(f, d, cv, po, strategy, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        kernel.dva_forward(f, d, cv, po, strategy=strategy)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cmd_bench(args) -> int:
    backends = ["numba", "numpy"] if args.backend == "both" else [args.backend]
    _print_config("bench", {"n": args.n, "h": args.height, "w": args.width, "d": args.d,
                            "grid": [args.nx, args.ny, args.nz], "l": args.l,
                            "strategy": args.strategy, "threads": args.threads,
                            "repeats": args.repeats, "backend": args.backend,
                            "seed": args.seed})
    f, d, cv, po = _bench_instance(args)
    n_rays = int(cv.valid.sum())
    if args.threads > 0:
        kernel.set_num_threads(args.threads)
    results = {}
    for backend in backends:
        kernel.set_backend(backend)
        kernel.dva_forward(f, d, cv, po, strategy=args.strategy)  # warm up / JIT
        med = _time_forward(f, d, cv, po, args.strategy, args.repeats)
        q_det, _ = kernel.dva_forward(f, d, cv, po, strategy="deterministic")
        q_rel, _ = kernel.dva_forward(f, d, cv, po, strategy="relaxed")
        denom = np.maximum(1e-6, np.abs(q_det.astype(np.float64)))
        max_rel = float((np.abs(q_det.astype(np.float64) - q_rel.astype(np.float64)) / denom).max())
        results[backend] = med
        print(f"  backend={backend:5s} strategy={args.strategy:13s} "
              f"median_forward={med * 1e3:.3f} ms  rays/s={n_rays / med:.3e}  "
              f"det_vs_relaxed_max_rel_diff={max_rel:.3e}")
    if len(results) == 2:
        print(f"  speedup numba over numpy: {results['numpy'] / results['numba']:.2f}x")
    return 0


def cmd_dump_bev(args) -> int:
    rig, frustum, grid, tcfg, doc = _load_full_config(args.config)
    if frustum is None or grid is None:
        raise IoError("dump-bev config must define grid and depth_bins")
    _print_config("dump-bev", {"ckpt": args.ckpt, "data": args.data,
                               "index": args.index, "out": args.out, "config": doc})
    scenes = read_dataset(args.data)
    if not (0 <= args.index < len(scenes)):
        raise IoError(f"sample index {args.index} out of range (dataset has {len(scenes)})")
    params = load_checkpoint(args.ckpt)
    prep = prepare_scene(scenes[args.index], grid, frustum, tcfg.n_channels,
                         dtype=tcfg.np_dtype)
    from .trainer import sample_forward
    parts, _ = sample_forward(params, prep, tcfg, with_caches=False)
    prob = sigmoid(probe_logits(parts["q_final"], params.probe))
    write_pgm(args.out, prob)
    print(f"wrote {grid.nx}x{grid.ny} BEV heatmap to {args.out}")
    return 0


def write_pgm(path, prob: np.ndarray) -> None:
    """Binary PGM (P5) of a probability grid; row 0 is the max-y edge."""
    nx, ny = prob.shape
    img = np.clip(np.rint(prob * 255.0), 0, 255).astype(np.uint8)
    rows = img.T[::-1]  # row r <- y index ny-1-r, column c <- x index c
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{nx} {ny}\n255\n".encode("ascii"))
            f.write(rows.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write PGM {path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    """Inverse of write_pgm; returns the probability grid scaled back to [0, 1]."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise IoError(f"cannot read PGM {path}: {exc}") from exc
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise IoError("not a binary PGM file")
    nx, ny = (int(x) for x in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=nx * ny).reshape(ny, nx)
    return (data[::-1].T).astype(np.float64) / 255.0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualview",
                                description="Dual-view attention BEV toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=10)
    g.add_argument("--boxes", type=int, default=8)
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="rig/grid config JSON (default: built-in rig)")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the pipeline on a dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--report", help="JSON report path")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", required=True)
    e.set_defaults(fn=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--mode", type=int, choices=(32, 64), default=64)
    gc.add_argument("--step", type=float, default=None,
                    help="finite-difference step (default 1e-5 in 64-bit, 1e-2 in 32-bit)")
    gc.add_argument("--tol", type=float, default=None)
    gc.set_defaults(fn=cmd_gradcheck)

    b = sub.add_parser("bench", help="kernel throughput benchmark")
    b.add_argument("--n", type=int, default=6)
    b.add_argument("--height", type=int, default=16)
    b.add_argument("--width", type=int, default=16)
    b.add_argument("--d", type=int, default=16)
    b.add_argument("--nx", type=int, default=128)
    b.add_argument("--ny", type=int, default=128)
    b.add_argument("--nz", type=int, default=8)
    b.add_argument("--l", type=int, default=32)
    b.add_argument("--strategy", choices=("deterministic", "relaxed"), default="deterministic")
    b.add_argument("--threads", type=int, default=0, help="0 = leave unchanged")
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--backend", choices=("numba", "numpy", "both"), default="both")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=cmd_bench)

    dv = sub.add_parser("dump-bev", help="export a BEV occupancy heatmap as PGM")
    dv.add_argument("--ckpt", required=True)
    dv.add_argument("--data", required=True)
    dv.add_argument("--index", type=int, default=0)
    dv.add_argument("--out", required=True)
    dv.add_argument("--config", required=True)
    dv.set_defaults(fn=cmd_dump_bev)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DualViewError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
