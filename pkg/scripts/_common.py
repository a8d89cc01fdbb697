"""Shared plumbing for the experiment scripts."""
import argparse
from pathlib import Path

from prd.cli import load_config

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.yaml"


def parser(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", default=str(DESK))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default=str(ROOT / "runs"))
    return p


def config(args, name, **flags):
    return load_config(args.config, flags={"name": name, "seeds": args.seeds, "out": args.out, **flags})


def row(label, agg, *metrics):
    cells = []
    for m in metrics:
        c = agg["metrics"].get(m)
        cells.append(f"{100 * c['mean']:6.1f} ± {100 * c['stderr']:4.1f}" if c else "     n/a     ")
    print(f"{label:<24}" + "  ".join(cells))
