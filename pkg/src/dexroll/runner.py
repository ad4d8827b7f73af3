"""Episode and batch execution: warmup solve, receding-horizon control, rollout, metrics."""

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .body import DegenerateNormalError, hard_contacts
from .config import TaskConfig
from .kinematics import forward_kinematics, points_jacobian
from .optimizer import MPCController, SolverError, State, pregrasp_solve, record_tip_anchors
from .plant import DropDetector, EpisodeLog, audit_step, metrics, plant_step, pose_deviation
from .rotations import quat_to_matrix

WORKERS_ENV = "DEXROLL_WORKERS"


def _state_dict(s):
    return {"q": s.q.tolist(), "x": s.x.tolist(), "theta": s.theta.tolist()}


def retract_fingers(spec, state, clearance=0.01):
    """Move each fingertip ``clearance`` away from the object along its contact normal."""
    q = state.q.copy()
    fk = forward_kinematics(spec.chain, q[None])
    cs = hard_contacts(spec.body, spec.chain, q, spec.model.scene, state.pose, fk=fk)
    for i, c in enumerate(cs):
        sl = spec.chain.finger_slices[i]
        J = points_jacobian(spec.chain, fk, np.array([c["link"]]), c["point"][None, None])[0, 0][:, sl]
        n = c["normal"] / np.linalg.norm(c["normal"])
        q[sl] += np.linalg.lstsq(J, clearance * n, rcond=None)[0]
    return State(np.clip(q, spec.chain.q_min, spec.chain.q_max), state.x.copy(), state.theta.copy())


def _top_displacement(state, start, point):
    p = quat_to_matrix(state.theta) @ point + state.x
    p0 = quat_to_matrix(start.theta) @ point + start.x
    return float(np.linalg.norm(p - p0))


def run_episode(task, seed, ablation=False, pregrasp=False, online_iters=None, return_reports=False):
    """Run one closed-loop episode of ``task`` (a built :class:`~dexroll.config.Task`)."""
    solver = replace(task.solver, online_iters=online_iters) if online_iters else task.solver
    state = task.initial_state.copy()
    spec = task.ablation_spec if ablation else task.spec
    log = EpisodeLog(task.name, int(seed))
    reports = []
    top = task.metric.get("top_point")
    top = None if top is None else np.asarray(top, float)
    try:
        if pregrasp:
            start = retract_fingers(spec, state)
            plan, rep = pregrasp_solve(spec, start, solver, seed=seed)
            rep["phase"] = "pregrasp"
            reports.append(rep)
            s = start
            for t in range(plan.T):
                s, _ = plant_step(s, {"u": plan.u[t], "f": np.zeros_like(plan.f[t]), "fe": np.zeros(3)}, spec, task.plant)
            state = s
        if ablation:
            spec = replace(spec, p_hat=record_tip_anchors(spec, state))
        start = state.copy()
        log.states.append(_state_dict(state))
        ctrl = MPCController(spec, solver, seed=seed)
        ctrl.warmup(state)
        detector = DropDetector(task.plant)
        while ctrl.plan is not None:
            planned = ctrl.plan.state(1)
            log.horizons.append(int(ctrl.plan.T))
            action, _ = ctrl.step()
            nxt, flags = plant_step(state, action, spec, task.plant)
            log.actions.append({k: np.asarray(v).tolist() for k, v in action.items()})
            log.audits.append(audit_step(spec, state, action, nxt))
            log.plan_deviation.append(pose_deviation(planned, nxt))
            log.flags.append(flags)
            state = nxt
            log.states.append(_state_dict(state))
            if top is not None:
                log.top_displacement.append(_top_displacement(state, start, top))
            cs = hard_contacts(spec.body, spec.chain, state.q, spec.model.scene, state.pose)
            com_z = float((quat_to_matrix(state.theta) @ spec.model.com + state.x)[2])
            if detector.update([c["distance"] for c in cs], com_z):
                log.dropped = True
                log.drop_step = len(log.actions)
                break
            if ctrl.plan is not None:
                ctrl.replan(state)
        reports.extend(ctrl.reports)
    except (SolverError, DegenerateNormalError, FloatingPointError, np.linalg.LinAlgError) as err:
        log.error = f"{type(err).__name__}: {err}"
        if not log.states:
            log.states.append(_state_dict(state))
    log.metrics = metrics(log, task.metric)
    return (log, reports) if return_reports else log


def _worker(args):
    cfg_path, seed, ablation, pregrasp, online_iters, out = args
    task = TaskConfig.load(cfg_path).build()
    t0 = time.perf_counter()
    log, reports = run_episode(task, seed, ablation, pregrasp, online_iters, return_reports=True)
    wall = time.perf_counter() - t0
    if out is not None:
        out = Path(out)
        log.write_json(out / f"episode_{seed}.json")
        log.write_csv(out / f"episode_{seed}.csv")
        (out / f"solve_{seed}.json").write_text(json.dumps(_slim_reports(reports), indent=1, sort_keys=True, default=float) + "\n")
    return seed, log.metrics, log.error, log.dropped, wall


def _slim_reports(reports):
    keep = ("phase", "status", "iterations", "cost", "eq_violation", "ineq_violation", "families", "horizon", "particles", "active_families", "inactive_families")
    return [{k: r[k] for k in keep if k in r} for r in reports]


def worker_count(n_jobs):
    try:
        w = int(os.environ.get(WORKERS_ENV, "1"))
    except ValueError:
        w = 1
    return max(1, min(w, n_jobs))


def summarize(results, wall_clock):
    """Aggregate per-seed metrics; distances of invalid episodes are excluded."""
    results = sorted(results, key=lambda r: r[0])
    valid = [r[1]["distance_to_goal"] for r in results if r[1]["valid"]]
    return {
        "seeds": [r[0] for r in results],
        "n_episodes": len(results),
        "n_valid": len(valid),
        "validity_rate": len(valid) / len(results) if results else 0.0,
        "distance_deg_mean": float(np.mean(valid)) if valid else None,
        "distance_deg_std": float(np.std(valid)) if valid else None,
        "distance_deg_all": [r[1]["distance_to_goal"] for r in results],
        "dropped": [bool(r[3]) for r in results],
        "errors": {str(r[0]): r[2] for r in results if r[2]},
        "episode_wall_clock_s": [round(r[4], 3) for r in results],
        "wall_clock_s": round(wall_clock, 3),
    }


def run_batch(cfg_path, seeds, ablation=False, pregrasp=False, online_iters=None, out=None):
    """Run every seed (in a worker pool when ``DEXROLL_WORKERS`` > 1) and write the summary."""
    cfg = TaskConfig.load(cfg_path)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.snapshot.json").write_text(cfg.to_json() + "\n")
    jobs = [(str(cfg_path), int(s), ablation, pregrasp, online_iters, None if out is None else str(out)) for s in seeds]
    t0 = time.perf_counter()
    n_workers = worker_count(len(jobs))
    if n_workers == 1:
        results = [_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(n_workers) as pool:
            results = list(pool.map(_worker, jobs))
    summary = summarize(results, time.perf_counter() - t0)
    summary.update({"task": cfg.name, "ablation": bool(ablation), "pregrasp": bool(pregrasp)})
    if out is not None:
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
