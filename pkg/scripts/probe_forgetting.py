"""Task-1 linear-probe accuracy after every session for beta = 0 and beta = 4, plus figures."""
from pathlib import Path

from _common import config, parser

from prd.cli import execute, plot

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    records = []
    for beta in (0.0, 4.0):
        agg = execute(config(args, f"beta{beta:g}", probe=True, train={"loss": {"beta": beta}}))
        records += agg["records"]
        c = agg["metrics"]["probe_task1"]
        print(f"beta = {beta:g}: final task-1 probe {100 * c['mean']:.1f} ± {100 * c['stderr']:.1f}")
    written, _ = plot(records, Path(args.out) / "figures")
    print("\n".join(str(p) for p in written))
