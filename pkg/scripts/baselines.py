"""Joint (single-session) training, fine-tuning and PRD on the desk stream."""
from _common import config, parser, row

from prd.cli import execute

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    iid = config(args, "iid", stream={"num_tasks": 1, "classes_per_task": 10})
    row("iid (one session)", execute(iid), "avg_observed_accuracy")
    row("fine-tuning", execute(config(args, "finetune", train={"method": "finetune"})), "avg_observed_accuracy",
        "forgetting")
    row("PRD", execute(config(args, "prd")), "avg_observed_accuracy", "forgetting")
