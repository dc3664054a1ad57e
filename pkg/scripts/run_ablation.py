"""Train the same configuration in hyperbolic and Euclidean space and compare.

    python scripts/run_ablation.py --config configs/toy.cfg --out runs/ablation

Each space gets its own run directory; the table reports eval metrics of the
trained model next to the untrained (epochs=0) baseline.
"""
import argparse
import json
import sys
import time
from pathlib import Path

from hypermesh.cli import main

KEYS = ("hand_joint_err", "hand_vert_err", "object_chamfer", "max_penetration", "intersection_volume")


def cli(*argv):
    code = main([str(a) for a in argv])
    if code != 0:
        sys.exit(f"hypermesh {argv[0]} exited with {code}")


def train_and_eval(cfg, out, *extra):
    t0 = time.perf_counter()
    cli("train", "--config", cfg, "--out", out, *extra)
    elapsed = time.perf_counter() - t0
    cli("eval", "--checkpoint", out / "checkpoint.txt", "--out", out / "metrics.json")
    return json.loads((out / "metrics.json").read_text()), elapsed


def main_():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=Path("configs/toy.cfg"))
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--epochs", type=int, default=None)
    args = ap.parse_args()
    extra = ("--epochs", args.epochs) if args.epochs is not None else ()

    base, _ = train_and_eval(args.config, args.out / "init", "--epochs", 0)
    rows = {"init": (base, 0.0)}
    for space in ("hyperbolic", "euclidean"):
        rows[space] = train_and_eval(args.config, args.out / space, "--space", space, *extra)

    print(f"{'run':<12}" + "".join(f"{k:>21}" for k in KEYS) + f"{'train_s':>9}")
    for name, (m, secs) in rows.items():
        print(f"{name:<12}" + "".join(f"{m[k]:>21.6e}" for k in KEYS) + f"{secs:>9.0f}")
    for space in ("hyperbolic", "euclidean"):
        m = rows[space][0]
        print(
            f"{space}: hand_vert_err {m['hand_vert_err'] / base['hand_vert_err']:.3f}x, "
            f"object_chamfer {m['object_chamfer'] / base['object_chamfer']:.3f}x of the untrained baseline"
        )


if __name__ == "__main__":
    main_()
