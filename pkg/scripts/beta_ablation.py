"""Relation-distillation coefficient sweep on the desk stream (class- and task-incremental)."""
from _common import config, parser, row

from prd.cli import execute

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    print(f"{'':<24}{'class-inc':^14}  {'task-inc':^14}")
    for beta in (0.0, 1.0, 4.0, 16.0):
        aggs = [execute(config(args, f"beta{beta:g}-{mode}", mode=mode, train={"loss": {"beta": beta}}))
                for mode in ("class", "task")]
        row(f"beta = {beta:g}", {"metrics": {m: a["metrics"]["avg_observed_accuracy"]
                                             for m, a in zip(("class", "task"), aggs)}}, "class", "task")
