"""PRD with small per-class replay buffers against the replay-free run and plain ER."""
from _common import config, parser, row

from prd.cli import execute

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    for m in (0, 5, 20, 50):
        row(f"PRD  M = {m}", execute(config(args, f"prd-M{m}", train={"replay_capacity": m})), "avg_observed_accuracy")
    for m in (5, 20, 50):
        agg = execute(config(args, f"er-M{m}", train={"replay_capacity": m, "method": "er"}))
        row(f"ER   M = {m}", agg, "avg_observed_accuracy")
