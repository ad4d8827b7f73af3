"""One closed-loop valve-turning episode: warmup solve, then shrinking-horizon replanning.

Run with ``python3 demos/valve_episode.py [seed]``.
"""

import sys

import numpy as np

from dexroll.config import TaskConfig, package_dir
from dexroll.runner import run_episode

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
task = TaskConfig.load(package_dir() / "valve_turning.json").build()
log, reports = run_episode(task, seed, return_reports=True)

model, start = task.spec.model, np.asarray(log.states[0]["theta"])
print(f"valve turning, seed {seed}, goal {np.degrees(task.metric['goal_angle']):.1f} deg")
print(f"{'step':>4} {'horizon':>7} {'solve':>7} {'iters':>5} {'angle (deg)':>11} {'plan dev (deg)':>14}")
for k, (T, rep, dev) in enumerate(zip(log.horizons, reports, log.plan_deviation)):
    angle = np.degrees(model.joint_angle(np.asarray(log.states[k + 1]["theta"]), start))
    print(f"{k:4d} {T:7d} {rep['phase']:>7} {rep['iterations']:5d} {angle:11.2f} {dev['angle_deg']:14.3f}")
print(f"distance to goal {log.metrics['distance_to_goal']:.2f} deg, valid {log.metrics['valid']}")
