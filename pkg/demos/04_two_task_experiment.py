#!/usr/bin/env python3
"""The headline experiment: sequential two-task training with and without replay.

Trains the standard two-task scheme both ways and prints the five-step
trajectory of each task's retrieval quality.  Without replay, the first
task's mAP collapses once the second task trains over it; with the
conformal replay banks it survives.  Takes a few seconds.
"""

from xmcl import run_sequence, standard_two_task_config

SEED = 0


def show(title, report):
    print(title)
    print(f'{"step":>5}' + "".join(f"{f'task {t}':>10}" for t in report["task_ids"]) + f'{"avg":>10}')
    for s in report["steps"]:
        by_task = {r["task_id"]: r["mAP"] for r in s["records"]}
        cells = "".join(f'{by_task[t]:>10.1f}' for t in report["task_ids"])
        print(f'{s["step"]:>5}{cells}{s["average"]["mAP"]:>10.1f}')
    print()


print("steps: 1 start, 2/3 halfway+end of task 0, 4/5 halfway+end of task 1\n")

report, _ = run_sequence(standard_two_task_config(mpm=True), SEED)
show("with replay banks (mAP %)", report)

report_off, _ = run_sequence(standard_two_task_config(mpm=False), SEED)
show("without replay (mAP %)", report_off)

keep = next(r["mAP"] for r in report["steps"][-1]["records"] if r["task_id"] == 0)
lose = next(r["mAP"] for r in report_off["steps"][-1]["records"] if r["task_id"] == 0)
print(f"task-0 mAP after task 1: {keep:.1f} with replay vs {lose:.1f} without")
