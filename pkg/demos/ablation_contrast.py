"""Cuboid turning with and without the contact and rolling constraints, for one seed.

The ablation pins each fingertip to its starting point in the object frame
instead of planning contact geometry. Run with
``python3 demos/ablation_contrast.py [seed]``; the ablated episode takes a few minutes.
"""

import sys

from dexroll.config import TaskConfig, package_dir
from dexroll.runner import run_episode

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
task = TaskConfig.load(package_dir() / "cuboid_turning.json").build()
for ablation in (False, True):
    log = run_episode(task, seed, ablation=ablation)
    label = "ablation" if ablation else "full    "
    worst = max(d["angle_deg"] for d in log.plan_deviation)
    drop = f"dropped at step {log.drop_step}" if log.dropped else "no drop"
    print(f"{label} distance {log.metrics['distance_to_goal']:7.2f} deg  {drop:<18} steps {len(log.actions)}  worst plan deviation {worst:.2f} deg")
