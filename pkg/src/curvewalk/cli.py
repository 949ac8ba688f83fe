"""Command-line front end: train, eval, gradcheck, analyze-curves, bench.

Exit codes: 0 ok, 1 verification failure, 2 usage error, 3 numeric divergence.
Primary outputs are JSON/JSONL/CSV; PNG renderings are written next to them
unless ``--no-figures`` is given.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import re
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .dataio import SHAPE_KINDS, Dataset, DatasetError, load_dataset, synth_shape, synth_splits
from .geometry import knn_indices
from .model import (CurveNetConfig, DivergenceError, TrainConfig, build, desk_config, evaluate,
                    forward_classify, forward_features, full_config, load_model, train)
from .nn import CheckpointError
from .walk import CurveStats, curve_stats, group_curves, policy_for_variant

log = logging.getLogger("curvewalk")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
POLICIES = ("naive", "momentum", "momentum+cs")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# shared helpers


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=10, cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def run_id(config: dict) -> str:
    """Content hash of the resolved configuration (stable across reruns)."""
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def write_manifest(out: Path, command: str, config: dict, seed: int, argv: list[str]) -> dict:
    manifest = {
        "run_id": run_id(config),
        "command": command,
        "config": config,
        "seed": seed,
        "git_describe": git_describe(),
        "argv": list(argv),
        "started": _now(),
        "finished": None,
    }
    _dump(out / "manifest.json", manifest)
    return manifest


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def resolve_threads(flag: int | None) -> int:
    if flag is None:
        env = os.environ.get("CURVEWALK_THREADS")
        if env is None:
            return 1
        try:
            flag = int(env)
        except ValueError:
            raise UsageError(f"CURVEWALK_THREADS must be an integer, got {env!r}") from None
    if flag < 1:
        raise UsageError("--threads must be >= 1")
    return flag


def parse_curves(spec: str, n_groups: int) -> dict[int, tuple[int, int]]:
    """``"n,l@g[,g...]"`` -> ``{group: (n, l)}``; ``"none"`` -> no curves."""
    if spec.lower() == "none":
        return {}
    m = re.fullmatch(r"(\d+),(\d+)@(\d+(?:,\d+)*)", spec.strip())
    if not m:
        raise UsageError(f"--curves expects n,l@groups (e.g. 16,16@1) or none, got {spec!r}")
    n, length = int(m.group(1)), int(m.group(2))
    groups = [int(g) for g in m.group(3).split(",")]
    if n < 1 or length < 1:
        raise UsageError("curve quantity and length must be >= 1")
    bad = [g for g in groups if not 1 <= g <= n_groups]
    if bad:
        raise UsageError(f"--curves group(s) {bad} outside 1..{n_groups}")
    return {g: (n, length) for g in groups}


def model_config(args) -> CurveNetConfig:
    task = "classify" if args.task == "classify" else "pointwise"
    theta = math.radians(args.theta_bar)
    if not 0.0 < theta <= math.pi:
        raise UsageError("--theta-bar must lie in (0, 180]")
    if args.arch == "desk":
        cfg = desk_config(args.num_classes, args.points, None, args.k, task, theta)
        groups = [[0], [1]]
    else:
        cfg = full_config(args.num_classes, args.points, None, args.k, task)
        groups = [[0, 1], [2, 3], [4, 5], [6, 7]]
    for g, curves in parse_curves(args.curves, len(groups)).items():
        for i in groups[g - 1]:
            cfg.blocks[i].curves = curves
            cfg.blocks[i].theta_bar = theta
    for b in cfg.blocks:
        if b.npoint is not None and b.npoint <= b.k:
            raise UsageError(f"--points {args.points} too small for k={b.k} after downsampling")
    if args.points <= args.k:
        raise UsageError(f"--points must exceed --k ({args.k})")
    return cfg


def load_data(data: str, classes: list[str] | None, points: int, n_train: int, n_test: int,
              data_seed: int) -> tuple[Dataset, Dataset]:
    if data == "synth":
        kinds = classes or list(SHAPE_KINDS)
        unknown = [k for k in kinds if k not in SHAPE_KINDS]
        if unknown:
            raise UsageError(f"unknown synthetic class(es) {unknown}; choose from {list(SHAPE_KINDS)}")
        return synth_splits(kinds, n_train, n_test, points, seed=data_seed)
    root = Path(data)
    if not root.is_dir():
        raise UsageError(f"--data must be 'synth' or an existing directory, got {data!r}")
    return (load_dataset(root, points, "train", classes), load_dataset(root, points, "test", classes))


def _classes(arg: str | None) -> list[str] | None:
    return [c for c in arg.split(",") if c] if arg else None


# --------------------------------------------------------------------------
# train / eval


def cmd_train(args, argv) -> int:
    threads = resolve_threads(args.threads)
    if args.epochs < 0 or args.batch < 1 or args.lr < 0:
        raise UsageError("--epochs >= 0, --batch >= 1 and --lr >= 0 are required")
    classes = _classes(args.classes)
    args.num_classes = len(classes) if classes else len(SHAPE_KINDS)
    if args.data != "synth" and classes is None:
        root = Path(args.data)
        if root.is_dir():
            args.num_classes = len([p for p in root.iterdir() if p.is_dir()])
    mcfg = model_config(args)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, schedule=args.schedule,
                       seed=args.seed, votes=1, shards=threads, weight_decay=args.weight_decay)
    data_cfg = {"data": args.data, "classes": classes, "points": args.points,
                "n_train": args.n_train, "n_test": args.n_test, "data_seed": args.data_seed}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {"model": mcfg.to_dict(), "train": asdict(tcfg), "data": data_cfg, "task": args.task,
              "arch": args.arch, "curves": args.curves, "theta_bar_deg": args.theta_bar,
              "threads": threads}
    manifest = write_manifest(out, "train", config, args.seed, argv)
    train_ds, test_ds = load_data(args.data, classes, args.points, args.n_train, args.n_test, args.data_seed)
    if args.task == "normals" and any(c.normals is None for c in train_ds.clouds):
        raise UsageError("--task normals needs clouds with normals")
    model = build(mcfg, seed=args.seed)
    status = EXIT_OK
    try:
        history = train(model, train_ds, test_ds, tcfg, out, row_extra={"run_id": manifest["run_id"]},
                        on_epoch=lambda r: log.info("epoch %d loss %.4f val %s", r["epoch"],
                                                    r["train_loss"], r["val_metric"]))
    except (DivergenceError, NonFiniteError) as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        history, status = [], EXIT_DIVERGED
    manifest["finished"] = _now()
    manifest["exit_code"] = status
    manifest["artifacts"] = sorted(p.name for p in out.iterdir() if p.is_file())
    _dump(out / "manifest.json", manifest)
    if history and not args.no_figures:
        from .plotting import training_curves
        training_curves(history, out / "training.png",
                        "val accuracy" if args.task == "classify" else "val cosine error")
    return status


def _load_run(run: Path, checkpoint: str):
    mpath = run / "manifest.json"
    if not mpath.is_file():
        raise UsageError(f"{run} has no manifest.json")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    ckpt = run / checkpoint
    if not ckpt.is_file():
        raise UsageError(f"missing checkpoint {ckpt}")
    cfg = CurveNetConfig.from_dict(manifest["config"]["model"])
    return manifest, load_model(ckpt, cfg)


def cmd_eval(args, argv) -> int:
    if args.votes < 1:
        raise UsageError("--votes must be >= 1")
    manifest, model = _load_run(Path(args.run), args.checkpoint)
    d = manifest["config"]["data"]
    train_ds, test_ds = load_data(d["data"], d["classes"], d["points"], d["n_train"], d["n_test"],
                                  d["data_seed"])
    ds = test_ds if args.split == "test" else train_ds
    metric = evaluate(model, ds, args.votes, manifest["seed"])
    print(json.dumps({"metric": metric, "votes": args.votes, "n_samples": len(ds)}, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args, argv) -> int:
    from .gradsuite import TARGETS, TOLERANCE, run_suite

    only = [t for chunk in (args.only or []) for t in chunk.split(",") if t]
    if args.list:
        print("\n".join(TARGETS))
        return EXIT_OK
    try:
        results = run_suite(only or None, args.seed)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    failed = [r["target"] for r in results if not r["passed"]]
    doc = {
        "tolerance": TOLERANCE,
        "targets": [{k: r[k] for k in ("target", "max_rel_error", "passed")} for r in results],
        "max_rel_error": max(r["max_rel_error"] for r in results),
        "passed": not failed,
    }
    print(json.dumps(doc, indent=2, sort_keys=True))
    if failed:
        print("gradcheck failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# --------------------------------------------------------------------------
# analyze-curves


def max_knn_radius(coords: np.ndarray, k: int) -> float:
    """Largest distance from any point to its k-th nearest neighbour."""
    idx = knn_indices(coords, coords, k, exclude_self=True)
    far = coords[idx[:, -1]]
    return float(np.linalg.norm(far - coords, axis=-1).max())


def _merge_stats(parts: list[CurveStats]) -> CurveStats:
    return CurveStats(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                        ("indices", "dist_to_start", "dist_to_last", "revisits", "mean_turn_deg")))


def cmd_analyze_curves(args, argv) -> int:
    if args.seeds < 1 or args.length < 1 or args.k < 1 or args.n < 1:
        raise UsageError("--seeds, --length, --k and --n must be >= 1")
    if args.k >= args.points:
        raise UsageError("--k must be smaller than --points")
    policies = list(POLICIES) if args.policy == "all" else [args.policy]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.run:
        manifest, model = _load_run(Path(args.run), args.checkpoint)
        source, base_cfg = "checkpoint", CurveNetConfig.from_dict(manifest["config"]["model"])
    else:
        model, source = None, "random-init"
        base_cfg = desk_config(4, args.points, (args.n, args.length), k=min(20, args.points - 1))
    if not any(b.curves for b in base_cfg.blocks):
        raise UsageError("the model has no curve-grouping block to analyze")
    config = {"source": source, "run": args.run, "checkpoint": args.checkpoint if args.run else None,
              "seeds": args.seeds, "policies": policies, "length": args.length, "k": args.k,
              "n": args.n, "points": args.points, "shape": args.shape}
    manifest = write_manifest(out, "analyze-curves", config, 0, argv)
    kinds = list(SHAPE_KINDS) if args.shape == "all" else [args.shape]
    per_policy: dict[str, list[CurveStats]] = {p: [] for p in policies}
    radii, ca_var_in, ca_var_out = [], [], []
    first = None
    for s in range(args.seeds):
        cloud = synth_shape(kinds[s % len(kinds)], args.points, np.random.default_rng([s, 17]))
        net = model if model is not None else build(base_cfg, seed=s)
        net.eval()
        traces: list[dict] = []
        with ad.no_grad():
            forward_features(net, cloud.coords[None], traces=traces)
        bi = next(i for i, b in enumerate(net.blocks) if b.policy is not None)
        tr, block = traces[bi], net.blocks[bi]
        xyz = tr["coords"][0]
        feats = Tensor(tr["encoded"].data)
        graph = knn_indices(xyz[None], xyz[None], args.k, exclude_self=True)
        n = min(args.n, len(xyz))
        for p in policies:
            with ad.no_grad():
                cs = group_curves(feats, graph, n, args.length, policy_for_variant(block.policy, p))
            per_policy[p].append(curve_stats(cs.indices[0], xyz))
        radii.append(max_knn_radius(xyz, args.k))
        ca_var_in.append(float(tr["encoded"].data[0].var(axis=0).mean()))
        ca_var_out.append(float(tr["aggregated"].data[0].var(axis=0).mean()))
        if first is None:
            first = (xyz, tr["encoded"].data[0], tr["aggregated"].data[0])
    radius = max(radii)
    policies_json = {}
    for p, parts in per_policy.items():
        policies_json[p] = _merge_stats(parts).to_json()
    main_policy = policies[-1]
    final = policies_json[main_policy]["aggregate"]["mean_dist_to_start"][-1]
    travel = {"policy": main_policy, "step": args.length - 1, "mean_dist_to_start": final,
              "max_knn_radius": radius, "k": args.k, "exceeds_knn_range": bool(final > radius)}
    doc = {
        "run_id": manifest["run_id"],
        "source": source,
        "length": args.length,
        "k": args.k,
        "n_curves": n,
        "seeds": args.seeds,
        "knn_radius_per_seed": radii,
        "policies": policies_json,
        "travel": travel,
        "channel_variance": {"ca_input": float(np.mean(ca_var_in)), "ca_output": float(np.mean(ca_var_out))},
    }
    _dump(out / "curve_stats.json", doc)
    from .aggregate import write_channel_variance_csv
    xyz, enc, agg = first
    write_channel_variance_csv(out / "channel_variance.csv", xyz, agg)
    write_channel_variance_csv(out / "channel_variance_input.csv", xyz, enc)
    if not args.no_figures:
        from .plotting import channel_mean_scatter, travel_distance
        travel_distance({p: policies_json[p]["aggregate"] for p in policies}, out / "travel_distance.png", radius)
        channel_mean_scatter(xyz, {"CA input": enc.mean(axis=1), "CA output": agg.mean(axis=1)},
                             out / "channel_mean.png")
    manifest["finished"] = _now()
    manifest["artifacts"] = sorted(p.name for p in out.iterdir() if p.is_file())
    _dump(out / "manifest.json", manifest)
    print(json.dumps(travel, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# bench


def _time_forward(model, coords: np.ndarray, iters: int, warmup: int) -> dict:
    model.eval()
    times = []
    for i in range(warmup + iters):
        t0 = time.perf_counter()
        with ad.no_grad():
            forward_classify(model, coords)
        if i >= warmup:
            times.append((time.perf_counter() - t0) * 1e3)
    return {"median_ms": float(np.median(times)), "p95_ms": float(np.percentile(times, 95)),
            "iters": iters}


def cmd_bench(args, argv) -> int:
    if args.iters < 1 or args.warmup < 0 or args.batch < 1:
        raise UsageError("--iters >= 1, --warmup >= 0 and --batch >= 1 are required")
    if args.points <= 20:
        raise UsageError("--points must exceed 20")
    rng = np.random.default_rng(args.seed)
    coords = np.stack([synth_shape(SHAPE_KINDS[i % 4], args.points, rng).coords for i in range(args.batch)])
    modes = {"on": ["curves_on"], "off": ["curves_off"], "both": ["curves_on", "curves_off"]}[args.curves]
    results = {}
    for mode in modes:
        curves = (args.n, args.length) if mode == "curves_on" else None
        model = build(desk_config(4, args.points, curves), seed=args.seed)
        results[mode] = _time_forward(model, coords, args.iters, args.warmup)
    doc = {"points": args.points, "batch": args.batch, "warmup": args.warmup, "results": results}
    print(json.dumps(doc, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "bench.json", doc)
        if not args.no_figures:
            from .plotting import latency_bars
            latency_bars(results, out / "bench.png")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curvewalk", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a CurveNet and write manifest, checkpoints, metrics")
    p.add_argument("--data", default="synth", help="'synth' or a root/<class>/<split>/*.off tree")
    p.add_argument("--classes", help="comma-separated class names (default: all)")
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--n-train", type=int, default=200, help="synthetic training clouds")
    p.add_argument("--n-test", type=int, default=80, help="synthetic test clouds")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--task", choices=("classify", "normals"), default="classify")
    p.add_argument("--arch", choices=("desk", "full"), default="desk")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--schedule", choices=("cosine", "step"), default="cosine")
    p.add_argument("--curves", default="16,16@1", help="n,l@groups or 'none'")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--theta-bar", type=float, default=90.0, help="suppression angle in degrees")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("--run", required=True, help="directory written by 'train'")
    p.add_argument("--checkpoint", default="best.cwt")
    p.add_argument("--votes", type=int, default=1)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--only", action="append", help="target name(s), comma-separated; repeatable")
    p.add_argument("--list", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("analyze-curves", help="walk statistics, travel distance, channel variance")
    p.add_argument("--run", help="trained run directory (default: random initialisations)")
    p.add_argument("--checkpoint", default="best.cwt")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--policy", choices=POLICIES + ("all",), default="momentum+cs")
    p.add_argument("--length", type=int, default=30)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--n", type=int, default=16, help="curves per cloud")
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--shape", choices=tuple(SHAPE_KINDS) + ("all",), default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_analyze_curves)

    p = sub.add_parser("bench", help="forward latency with curves on/off")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--curves", choices=("on", "off", "both"), default="both")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
