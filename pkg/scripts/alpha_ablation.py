"""Prototype-loss coefficient sweep; alpha = 0 leaves the prototypes at their random init."""
from _common import config, parser, row

from prd.cli import execute

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    print(f"chance = {100 / 10:.1f}")
    for alpha in (0.0, 1.0, 2.0, 4.0):
        agg = execute(config(args, f"alpha{alpha:g}", train={"loss": {"alpha": alpha}}))
        row(f"alpha = {alpha:g}", agg, "avg_observed_accuracy")
