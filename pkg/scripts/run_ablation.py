"""Toy loss ablation: train every loss over several seeds and tabulate stability.

    python3 scripts/run_ablation.py --seeds 0 1 2 --steps 2000 --out results/ablation.json
"""

import argparse
import json
from pathlib import Path

from etr.losses import LossKind
from etr.pipeline import make_toy_dataset, train_toy


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--logit-scale", type=float, default=16.0)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    rows = []
    print(f"{'loss':20s} {'seed':>4s} {'nonfinite':>9s} {'max|g|':>9s} {'acc':>6s}")
    for kind in LossKind:
        for seed in args.seeds:
            data = make_toy_dataset(seed)
            tr = train_toy(kind, data, args.steps, args.lr, seed, logit_scale=args.logit_scale)
            row = {
                "loss": kind.value,
                "seed": seed,
                "n_nonfinite": tr.n_nonfinite,
                "first_nonfinite_step": tr.finite.index(False) if tr.n_nonfinite else None,
                "max_finite_grad_norm": tr.max_finite_grad_norm,
                "final_accuracy": tr.eval_accuracy[-1],
            }
            rows.append(row)
            print(f"{kind.value:20s} {seed:4d} {tr.n_nonfinite:9d} {tr.max_finite_grad_norm:9.3g} {tr.eval_accuracy[-1]:6.3f}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({"args": vars(args) | {"out": str(args.out)}, "rows": rows}, indent=2))


if __name__ == "__main__":
    main()
