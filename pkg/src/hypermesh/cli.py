"""Command line: gradcheck, train, eval, export-embeddings, bench."""
from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .autodiff import finite_diff_check, registry
from .checkpoint import CheckpointError
from .config import Config
from .layers import dhgc_layer, dhgc_stack, init_mobius, make_space, unify_image_features
from .manifold import DTYPE, _expmap0, _logmap0
from .synthetic import generate_scene, stack_scenes
from . import manifold as mf
from .graph import hyperbolic_knn
from .objectives import chamfer_distance
from .train import NonFiniteLoss, configure_threads, evaluate, load_params, run_training

EMBEDDING_SETS = ("mesh_hand", "mesh_obj", "shallow", "deep_hand", "deep_obj")


def cmd_gradcheck(args) -> int:
    names = list(registry())
    if args.op:
        unknown = [n for n in args.op if n not in names]
        if unknown:
            print(f"error: unknown op {unknown[0]!r}; valid: {', '.join(names)}", file=sys.stderr)
            return 2
        names = args.op
    failed = 0
    for name in names:
        report = finite_diff_check(name, seed=args.seed, tol=args.tol)
        print(report.line(), flush=True)
        failed += not report.passed
    print(f"{len(names) - failed}/{len(names)} ops passed")
    return 1 if failed else 0


def _load_config(path) -> Config:
    return config_mod.load(path) if path else Config()


def cmd_train(args) -> int:
    cfg = _load_config(args.config).updated(space=args.space, epochs=args.epochs, seed=args.seed, out=args.out)

    def progress(row):
        print(
            f"epoch {row['epoch']:>4}  loss {row['total_loss']:.6e}  "
            f"hand_vert_err {row['hand_vert_err']:.6e}  chamfer {row['chamfer']:.6e}",
            file=sys.stderr,
            flush=True,
        )

    try:
        path = run_training(cfg, progress)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(path)
    return 0


def _config_for_checkpoint(checkpoint, override) -> Config:
    if override:
        return config_mod.load(override)
    echoed = Path(checkpoint).parent / "config.txt"
    return config_mod.load(echoed) if echoed.exists() else Config()


def cmd_eval(args) -> int:
    if args.checkpoint is None and not args.oracle:
        print("error: --checkpoint is required unless --oracle is given", file=sys.stderr)
        return 2
    cfg = _config_for_checkpoint(args.checkpoint, args.config) if args.checkpoint else _load_config(args.config)
    params = None
    if not args.oracle:
        try:
            params = load_params(args.checkpoint, cfg)
        except (CheckpointError, KeyError, ValueError) as exc:
            print(f"error: cannot load checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
            return 2
    report = evaluate(cfg, params, oracle=args.oracle)
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def embedding_rows(cfg: Config, params, scene_seed: int) -> list[list]:
    """Rows ``[set, space, x0, x1, ...]``: ball coordinates, then their log at the origin.

    Image sets are unified with the hand branch's maps. A Euclidean model's
    features are sent into the ball with the exponential map at the origin.
    """
    space = make_space(cfg.space, cfg.curvature)
    kappa = -cfg.curvature
    batch = stack_scenes([generate_scene(scene_seed, cfg.scene)])
    with torch.no_grad():
        sets = {
            "mesh_hand": dhgc_stack(batch.init_hand * cfg.coord_scale, params.hand.dhgc, cfg.k, space),
            "mesh_obj": dhgc_stack(batch.init_obj * cfg.coord_scale, params.obj.dhgc, cfg.k, space),
        }
        unified = unify_image_features(batch.features, params.hand.ihgc, space)
        sets.update(shallow=unified.shallow, deep_hand=unified.deep_hand, deep_obj=unified.deep_obj)
    rows = []
    balls = {}
    for name in EMBEDDING_SETS:
        x = sets[name][0]
        balls[name] = x if cfg.space == "hyperbolic" else _expmap0(x, kappa)
    for space_name in ("ball", "tangent"):
        for name in EMBEDDING_SETS:
            x = balls[name] if space_name == "ball" else _logmap0(balls[name], kappa)
            rows.extend([name, space_name, *map(repr, r)] for r in x.tolist())
    return rows


def cmd_export_embeddings(args) -> int:
    cfg = _config_for_checkpoint(args.checkpoint, args.config)
    try:
        params = load_params(args.checkpoint, cfg)
    except (CheckpointError, KeyError, ValueError) as exc:
        print(f"error: cannot load checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
        return 2
    rows = embedding_rows(cfg, params, args.scene_seed)
    width = len(rows[0]) - 2
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["set", "space", *(f"x{i}" for i in range(width))])
        writer.writerows(rows)
    print(out)
    return 0


# -- benchmarks ----------------------------------------------------------------

BENCH_DIM = 64


def _bench_inputs(n: int):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n, BENCH_DIM))
    x *= (rng.uniform(0, 0.9, size=(n, 1)) / np.linalg.norm(x, axis=1, keepdims=True))
    y = np.roll(x, 1, axis=0) * 0.9
    return torch.as_tensor(x, dtype=DTYPE), torch.as_tensor(y, dtype=DTYPE), rng


def _bench_op(name: str, n: int):
    x, y, rng = _bench_inputs(n)
    k = min(8, n)
    if name == "mobius_add":
        return lambda: mf.mobius_add(x, y)
    if name == "expmap0":
        return lambda: mf.expmap0(x)
    if name == "logmap0":
        return lambda: mf.logmap0(x)
    if name == "geodesic_distance":
        return lambda: mf.geodesic_distance(x, y)
    if name == "mobius_matvec":
        M = torch.as_tensor(rng.normal(size=(BENCH_DIM, BENCH_DIM)) / 8, dtype=DTYPE)
        return lambda: mf.mobius_matvec(M, x)
    if name == "einstein_midpoint":
        return lambda: mf.einstein_midpoint(x)
    if name == "hyperbolic_knn":
        return lambda: hyperbolic_knn(x, x, k)
    if name == "chamfer_distance":
        return lambda: chamfer_distance(x[:, :3], y[:, :3])
    if name == "dhgc_layer":
        if n < 2:
            raise ValueError("dhgc_layer needs n >= 2")
        p = init_mobius(rng, BENCH_DIM, BENCH_DIM)
        return lambda: dhgc_layer(x, p, min(8, n - 1))
    raise KeyError(name)


BENCH_OPS = (
    "mobius_add",
    "expmap0",
    "logmap0",
    "geodesic_distance",
    "mobius_matvec",
    "einstein_midpoint",
    "hyperbolic_knn",
    "chamfer_distance",
    "dhgc_layer",
)


def bench(name: str, n: int, reps: int = 100) -> tuple[float, float]:
    fn = _bench_op(name, n)
    fn()
    times = []
    with torch.no_grad():
        for _ in range(reps):
            t = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t)
    return float(np.median(times)), float(np.percentile(times, 95))


def cmd_bench(args) -> int:
    ops = BENCH_OPS if args.op == "all" else (args.op,)
    for op in ops:
        if op not in BENCH_OPS:
            print(f"error: unknown op {op!r}; valid: {', '.join(BENCH_OPS)}, all", file=sys.stderr)
            return 2
    if args.n < 1:
        print("error: --n must be positive", file=sys.stderr)
        return 2
    print("op\tn\treps\tmedian_s\tp95_s")
    for op in ops:
        try:
            med, p95 = bench(op, args.n, args.reps)
        except ValueError as exc:
            if args.op != "all":
                print(f"error: {exc}", file=sys.stderr)
                return 2
            print(f"skipped {op}: {exc}", file=sys.stderr)
            continue
        print(f"{op}\t{args.n}\t{args.reps}\t{med:.6e}\t{p95:.6e}", flush=True)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypermesh", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every registered op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=None, help="override every op's tolerance")
    p.add_argument("--op", action="append", help="check only this op (repeatable)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on the toy scenes")
    p.add_argument("--config")
    p.add_argument("--space", choices=("hyperbolic", "euclidean"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on the eval scenes")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--config", help="defaults to config.txt next to the checkpoint")
    p.add_argument("--oracle", action="store_true", help="score the ground-truth meshes instead")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", help="ball and tangent coordinates of one scene's features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene-seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="defaults to config.txt next to the checkpoint")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("bench", help="median and p95 wall time of an op")
    p.add_argument("--op", required=True, help=f"one of {', '.join(BENCH_OPS)} or 'all'")
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--reps", type=int, default=100)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_threads()
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
