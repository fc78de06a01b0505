"""Seed the desk benchmark store and run every aggregation variant.

    python3 scripts/desk_benchmark.py --out runs [--replicas 5]

Prints the comparison table plus how many replicas ended with the main
path holding more than 95% of the routing weight.
"""
import argparse
from pathlib import Path

from multipath.cli import main as cli
from multipath.report import read_tsv

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk_benchmark.json"
VARIANTS = {
    "decoupled": [],
    "standard": ["--ablate", "standard-aggregation"],
    "sum": ["--ablate", "sum-aggregation"],
    "zero_bias": ["--ablate", "zero-bias-init"],
    "unit_lr": ["--ablate", "unit-lr-multiplier"],
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs")
    ap.add_argument("--config", default=str(CONFIG))
    ap.add_argument("--replicas", type=int, default=5)
    ap.add_argument("--variants", nargs="*", default=list(VARIANTS))
    args = ap.parse_args()
    out = Path(args.out)
    store = out / "store"
    if not (store / "manifest.json").exists():
        assert cli(["seed", "--config", args.config, "--store", str(store)]) == 0
    for name in args.variants:
        print(f"== {name}", flush=True)
        rc = cli(["evolve", "--config", args.config, "--store", str(store), "--output", str(out / name),
                  "--replicas", str(args.replicas), "--resume", *VARIANTS[name]])
        assert rc == 0
    cli(["report", *[str(out / v) for v in args.variants], "--dot", str(out / "system.dot")])
    for name in args.variants:
        rows = read_tsv(out / name / "replicas.tsv")
        last = {r["replica"]: r for r in rows}
        weights = [last[k]["main_weight"] for k in sorted(last)]
        collapsed = sum(w > 0.95 for w in weights)
        print(f"{name:<10} main-path weight per replica {[round(w, 3) for w in weights]}  >0.95 in {collapsed}")


if __name__ == "__main__":
    main()
