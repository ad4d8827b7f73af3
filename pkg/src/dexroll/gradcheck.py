"""Finite-difference audit of every analytic constraint and objective Jacobian.

Each time step of a randomly perturbed trajectory is one configuration. For
every variable block (joints, object pose, commands, finger forces,
environment force) a random direction restricted to that block is pushed
through the solver's own retraction, and the analytic directional derivative
of each residual row is compared with a central difference. Rows whose
central differences at ``h`` and ``h/2`` disagree sit on a non-smooth point of
the hard-min geometry and are skipped. Differences smaller than the round-off
of the central difference itself are not counted as errors.
"""

from dataclasses import dataclass, replace
from typing import Dict

import numpy as np

from .optimizer import Layout, Trajectory, cost_residuals, evaluate_constraints, record_tip_anchors

BLOCKS = ("q", "o", "u", "f", "fe")
DEFAULT_TOL = 1e-4
# rolling rows differentiated w.r.t. joints carry the third-order chain term
ROLLING_Q_TOL = 1e-2
# residual evaluation round-off, in units of machine epsilon times (1 + |r|)
ROUNDOFF = 64 * np.finfo(float).eps


@dataclass
class FamilyResult:
    name: str
    worst: float = 0.0
    worst_block: str = ""
    worst_ratio: float = 0.0  # worst error over its tolerance
    worst_raw: float = 0.0  # worst relative error before the round-off allowance
    configs: int = 0
    rows: int = 0
    skipped: int = 0
    passed: bool = True

    def to_dict(self):
        return {
            "family": self.name,
            "worst_rel_error": self.worst,
            "worst_raw_rel_error": self.worst_raw,
            "worst_block": self.worst_block,
            "tolerance": tolerance(self.name, self.worst_block) if self.worst_block else DEFAULT_TOL,
            "configs": self.configs,
            "rows": self.rows,
            "skipped_nonsmooth": self.skipped,
            "passed": self.passed,
        }


@dataclass
class GradcheckReport:
    task: str
    families: Dict[str, FamilyResult]
    min_configs: int

    @property
    def passed(self):
        return all(r.passed for r in self.families.values())

    @property
    def failing(self):
        return [name for name, r in self.families.items() if not r.passed]

    def to_dict(self):
        return {"task": self.task, "passed": self.passed, "failing": self.failing, "families": [r.to_dict() for r in self.families.values()]}

    def lines(self):
        out = []
        for r in self.families.values():
            mark = "PASS" if r.passed else "FAIL"
            out.append(
                f"{mark} {r.name:<17} worst rel err {r.worst:.2e} ({r.worst_block or '-'}, raw {r.worst_raw:.2e})  configs {r.configs}  rows {r.rows}  skipped {r.skipped}"
            )
        return out


def tolerance(family, block):
    return ROLLING_Q_TOL if (family == "rolling" and block == "q") else DEFAULT_TOL


def random_trajectory(spec, state, rng, q_sigma=0.05, o_sigma=0.03):
    """A trajectory scattered around ``state`` with interior joints and commands."""
    T, ch = spec.T, spec.chain
    margin = 0.05 * (ch.q_max - ch.q_min)
    q = np.clip(state.q + rng.normal(0.0, q_sigma, (T + 1, ch.n_q)), ch.q_min + margin, ch.q_max - margin)
    q[0] = state.q
    lay = Layout(spec, T)
    do = rng.normal(0.0, 1.0, (T, lay.k)) * lay.unit[lay.off_o : lay.off_u].reshape(T, lay.k) * (o_sigma / 0.1)
    x = np.broadcast_to(state.x, (T + 1, 3)).copy()
    theta = np.broadcast_to(state.theta, (T + 1, 4)).copy()
    x[1:], theta[1:] = spec.model.retract(x[1:], theta[1:], do)
    span = 0.5 * (ch.u_max - ch.u_min)
    u = np.clip(rng.uniform(-0.5, 0.5, (T, ch.n_q)) * span, ch.u_min, ch.u_max)
    f = rng.normal(0.0, 0.5, (T, spec.n_fingers, 3))
    fe = rng.normal(0.0, 0.5, (T, 3))
    return Trajectory(q, x, theta, u, f, fe)


def _direction(lay, block, rng):
    lo, hi = {
        "q": (lay.off_q, lay.off_o),
        "o": (lay.off_o, lay.off_u),
        "u": (lay.off_u, lay.off_f),
        "f": (lay.off_f, lay.off_fe),
        "fe": (lay.off_fe, lay.n),
    }[block]
    v = np.zeros(lay.n)
    if hi <= lo:
        return None
    v[lo:hi] = rng.normal(0.0, 1.0, hi - lo) * lay.unit[lo:hi]
    return v


def _residuals(spec, traj, families):
    blocks = evaluate_constraints(spec, traj, jacobian=False, families=families)
    out = {}
    for b in blocks:
        out.setdefault(b.name, []).append(b.residual)
    out = {k: np.concatenate(v) for k, v in out.items()}
    out["objective"] = np.atleast_1d(float(np.sum(cost_residuals(spec, traj, jacobian=False)[0] ** 2)))
    return out


def _analytic(spec, traj, families):
    blocks = evaluate_constraints(spec, traj, jacobian=True, families=families)
    jac, times = {}, {}
    for b in blocks:
        jac.setdefault(b.name, []).append(b.jac)
        times.setdefault(b.name, []).append(b.times)
    jac = {k: np.concatenate(v) for k, v in jac.items()}
    times = {k: np.concatenate(v) for k, v in times.items()}
    r, Jr = cost_residuals(spec, traj, jacobian=True)
    jac["objective"] = (2.0 * Jr.T @ r)[None]
    times["objective"] = np.array([-1])
    return jac, times


def audit_trajectory(spec, traj, families, rng, results, tag, h=1e-5, atol=1e-6, smooth_tol=1e-3):
    """Accumulate per-family worst errors for one trajectory into ``results``."""
    lay = Layout(spec, traj.T)
    jac, times = _analytic(spec, traj, families)
    r0 = _residuals(spec, traj, families)
    seen = {name: set() for name in jac}
    for block in BLOCKS:
        v = _direction(lay, block, rng)
        if v is None:
            continue
        f1p = _residuals(spec, lay.apply(spec, traj, h * v), families)
        f1m = _residuals(spec, lay.apply(spec, traj, -h * v), families)
        f2p = _residuals(spec, lay.apply(spec, traj, 0.5 * h * v), families)
        f2m = _residuals(spec, lay.apply(spec, traj, -0.5 * h * v), families)
        for name, J in jac.items():
            a = J @ v
            fd1 = (f1p[name] - f1m[name]) / (2 * h)
            fd2 = (f2p[name] - f2m[name]) / h
            scale = np.maximum(np.abs(a), np.abs(fd2))
            smooth = np.abs(fd1 - fd2) <= smooth_tol * scale + atol
            noise = ROUNDOFF * (1.0 + np.abs(r0[name])) / (0.5 * h)
            raw = np.abs(a - fd2) / (scale + atol)
            err = np.maximum(np.abs(a - fd2) - noise, 0.0) / (scale + atol)
            res = results.setdefault(name, FamilyResult(name))
            res.skipped += int(np.sum(~smooth))
            res.rows += int(np.sum(smooth))
            if np.any(smooth):
                res.worst_raw = max(res.worst_raw, float(np.max(raw[smooth])))
                worst = float(np.max(err[smooth]))
                ratio = worst / tolerance(name, block)
                if ratio > 1.0:
                    res.passed = False
                if ratio >= res.worst_ratio:
                    res.worst, res.worst_block, res.worst_ratio = worst, block, ratio
                seen[name].update((tag, int(t)) for t in times[name][smooth])
    for name, s in seen.items():
        results[name].configs += len(s) if name != "objective" else int(bool(s))


def gradcheck(task, n_configs=100, seed=0, horizon=25):
    """Audit the task's active families, the ablation tracking family and the objective.

    Returns a :class:`GradcheckReport`; a family fails when its worst relative
    error exceeds its tolerance or fewer than ``n_configs`` configurations were
    checked.
    """
    rng = np.random.default_rng(seed)
    state = task.initial_state
    results = {}
    specs = [(task.spec, tuple(task.spec.families))]
    if "tracking" in task.ablation_spec.families:
        abl = replace(task.ablation_spec, p_hat=record_tip_anchors(task.ablation_spec, state))
        specs.append((abl, ("tracking",)))
    n_traj = -(-n_configs // horizon)
    for k, (spec, fams) in enumerate(specs):
        spec = spec.with_horizon(horizon)
        for j in range(n_traj):
            traj = random_trajectory(spec, state, rng)
            audit_trajectory(spec, traj, fams, rng, results, tag=(k, j))
    # the objective is one scalar per trajectory; sample extra short trajectories for it
    obj_spec = task.spec.with_horizon(2)
    obj = results.pop("objective", FamilyResult("objective"))
    obj_hits = 0
    while obj_hits < n_configs:
        traj = random_trajectory(obj_spec, state, rng)
        sub = {"objective": obj}
        audit_trajectory(obj_spec, traj, (), rng, sub, tag=("objective", obj_hits))
        obj_hits += 1
    for name, res in results.items():
        if res.configs < n_configs:
            res.passed = False
    results["objective"] = obj
    if obj.configs < n_configs:
        obj.passed = False
    return GradcheckReport(task.name, results, n_configs)
