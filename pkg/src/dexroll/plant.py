"""Kinematic quasi-static rollout of finger commands on the object.

Joints move toward the PD steady state under the commanded contact load. The
object follows the fingers by pure rolling: its pose increment at each substep
is the least-squares solution that makes object and finger contact-point
velocities agree tangentially. Penetration is then removed by pushing the
object along the contact normals and, if that is not enough, by letting the
penetrating fingers yield.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .body import contact_estimate, hard_contacts
from .constraints import tangent_projection
from .kinematics import forward_kinematics, gravity_torque, points_jacobian
from .optimizer import State, Trajectory, evaluate_constraints, family_maxima
from .rotations import quat_conj, quat_log, quat_mul, quat_to_matrix, relative_angle, skew


@dataclass
class PlantConfig:
    substeps: int = 10
    contact_tol: float = 2e-3  # hard-min distance below which a finger drives the object
    d_drop: float = 0.01
    drop_steps: int = 2
    floor_z: float = -np.inf
    penetration_tol: float = 1e-4
    max_push_iters: int = 20
    rank_tol: float = 1e-8


def _object_point_map(model, x, theta, points):
    """(M, 3, k): displacement of object material points per reduced object coordinate."""
    R = quat_to_matrix(theta)
    tm = model.tangent_map(theta)  # (6, k)
    r = points - x
    # dp = dx + (R d_body) x r
    M = np.zeros((len(points), 3, 6))
    M[:, :, :3] = np.eye(3)
    M[:, :, 3:] = -skew(r) @ R
    return M @ tm


def _contact_rows(spec, state, contacts, dq, fk, which):
    """Stack tangential rolling rows ``P(n)(v_finger - dp_object)`` for fingers in ``which``."""
    A, b = [], []
    if not which:
        return np.zeros((0, spec.model.n_tangent)), np.zeros(0)
    pts = np.array([contacts[i]["point"] for i in which])
    links = np.array([contacts[i]["link"] for i in which])
    J = points_jacobian(spec.chain, fk, links, pts[None])[0]  # (M,3,n_q)
    Mo = _object_point_map(spec.model, state.x, state.theta, pts)
    for m, i in enumerate(which):
        P = tangent_projection(contacts[i]["normal"])
        A.append(P @ Mo[m])
        b.append(P @ (J[m] @ dq))
    return np.concatenate(A), np.concatenate(b)


def _lstsq(A, b, tol):
    if len(A) == 0:
        return np.zeros(A.shape[1]), False
    sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=tol)
    return sol, rank < A.shape[1]


def _retract(model, state, xi):
    x, th = model.retract(state.x, state.theta, xi)
    return State(state.q, x, th)


def _resolve_penetration(spec, state, cfg, flags):
    """Push the object out along contact normals, then let fingers yield."""
    model = spec.model
    for _ in range(cfg.max_push_iters):
        fk = forward_kinematics(spec.chain, state.q[None])
        cs = hard_contacts(spec.body, spec.chain, state.q, model.scene, state.pose, fk=fk)
        pen = [i for i, c in enumerate(cs) if c["distance"] < -cfg.penetration_tol]
        if not pen:
            return state
        touching = [i for i, c in enumerate(cs) if c["distance"] < cfg.contact_tol and i not in pen]
        pts = np.array([cs[i]["point"] for i in pen])
        Mo = _object_point_map(model, state.x, state.theta, pts)
        rows = [cs[i]["normal"] @ Mo[m] for m, i in enumerate(pen)]
        A = np.array(rows)
        b = np.array([-cs[i]["distance"] for i in pen])
        if touching:
            At, bt = _contact_rows(spec, state, cs, np.zeros(spec.chain.n_q), fk, touching)
            A = np.concatenate([A, At])
            b = np.concatenate([b, bt])
        xi, _ = _lstsq(A, b, cfg.rank_tol)
        state = _retract(model, state, xi)
        # remaining penetration: the finger yields along its own distance gradient
        q = state.q.copy()
        for i in pen:
            phi, g = _hard_distance_q(spec, q, state, i)
            if phi < -cfg.penetration_tol:
                gg = float(g @ g)
                if gg > 1e-12:
                    q = np.clip(q - phi * g / gg, spec.chain.q_min, spec.chain.q_max)
                    flags["finger_yield"] = flags.get("finger_yield", 0) + 1
        state = State(q, state.x, state.theta)
    flags["penetration_unresolved"] = True
    return state


def _hard_distance_q(spec, q, state, i):
    """Hard-min distance of finger ``i`` and its gradient w.r.t. the joints."""
    fk = forward_kinematics(spec.chain, q[None])
    c = hard_contacts(spec.body, spec.chain, q, spec.model.scene, state.pose, fk=fk)[i]
    J = points_jacobian(spec.chain, fk, np.array([c["link"]]), c["point"][None, None])[0, 0]
    return c["distance"], c["normal"] @ J


def joint_target(spec, state, action):
    """PD steady state of the commanded increment under the planned contact load."""
    Kp = np.broadcast_to(np.asarray(spec.Kp, float), (spec.chain.n_q,))
    load = -gravity_torque(spec.chain, state.q)
    for i in range(spec.n_fingers):
        est = contact_estimate(spec.body, i, spec.chain, state.q, spec.model.scene, state.pose, spec.delta)
        load = load + est.jacobian[0].T @ action["f"][i]
    return np.clip(state.q + action["u"] - load / Kp, spec.chain.q_min, spec.chain.q_max)


def plant_step(state, action, spec, cfg=None):
    """Advance one control step; returns ``(next_state, flags)``."""
    cfg = cfg or PlantConfig()
    flags: Dict = {}
    u = np.asarray(action["u"], float)
    if not np.any(u) and not np.any(action.get("f", 0.0)):
        target = state.q.copy()
    else:
        target = joint_target(spec, state, action)
    dq = (target - state.q) / cfg.substeps
    if not np.any(dq):
        return state.copy(), flags
    for _ in range(cfg.substeps):
        fk = forward_kinematics(spec.chain, state.q[None])
        cs = hard_contacts(spec.body, spec.chain, state.q, spec.model.scene, state.pose, fk=fk)
        active = [i for i, c in enumerate(cs) if c["distance"] < cfg.contact_tol]
        A, b = _contact_rows(spec, state, cs, dq, fk, active)
        if len(A) == 0:
            flags["no_contact_substeps"] = flags.get("no_contact_substeps", 0) + 1
            xi = np.zeros(spec.model.n_tangent)
        else:
            xi, deficient = _lstsq(A, b, cfg.rank_tol)
            if deficient:
                flags["rank_deficient_substeps"] = flags.get("rank_deficient_substeps", 0) + 1
        state = State(state.q + dq, state.x, state.theta)
        if np.any(xi):
            state = _retract(spec.model, state, xi)
        state = _resolve_penetration(spec, state, cfg, flags)
    return state, flags


def finger_distances(spec, state):
    cs = hard_contacts(spec.body, spec.chain, state.q, spec.model.scene, state.pose)
    return np.array([c["distance"] for c in cs])


class DropDetector:
    """Hysteresis drop test: a finger beyond ``d_drop`` for ``drop_steps`` consecutive steps."""

    def __init__(self, cfg=None):
        self.cfg = cfg or PlantConfig()
        self.count = 0

    def update(self, distances, com_z=None):
        far = bool(np.any(np.asarray(distances) > self.cfg.d_drop))
        self.count = self.count + 1 if far else 0
        below = com_z is not None and com_z < self.cfg.floor_z
        return self.count >= self.cfg.drop_steps or below


def detect_drop(state, spec, cfg=None, history=0):
    """Stateless drop test; ``history`` is the number of preceding far steps."""
    cfg = cfg or PlantConfig()
    det = DropDetector(cfg)
    det.count = history
    com = spec.model.com
    com_z = float((quat_to_matrix(state.theta) @ com + state.x)[2])
    return det.update(finger_distances(spec, state), com_z)


@dataclass
class EpisodeLog:
    task: str
    seed: int
    states: List[Dict] = field(default_factory=list)
    actions: List[Dict] = field(default_factory=list)
    audits: List[Dict] = field(default_factory=list)
    plan_deviation: List[Dict] = field(default_factory=list)
    horizons: List[int] = field(default_factory=list)
    flags: List[Dict] = field(default_factory=list)
    top_displacement: List[float] = field(default_factory=list)
    dropped: bool = False
    drop_step: Optional[int] = None
    metrics: Dict = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def n_steps(self):
        return len(self.actions)

    def to_dict(self):
        return {
            "task": self.task,
            "seed": self.seed,
            "states": self.states,
            "actions": self.actions,
            "audits": self.audits,
            "plan_deviation": self.plan_deviation,
            "horizons": self.horizons,
            "flags": self.flags,
            "top_displacement": self.top_displacement,
            "dropped": self.dropped,
            "drop_step": self.drop_step,
            "metrics": self.metrics,
            "error": self.error,
        }

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def write_csv(self, path):
        fams = sorted({k for a in self.audits for k in a})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            first = self.states[0] if self.states else {"q": [], "x": [], "theta": []}
            head = ["step", "horizon"] + [f"q{j}" for j in range(len(first["q"]))] + ["x", "y", "z", "qw", "qx", "qy", "qz"]
            head += [f"res_{f}" for f in fams] + ["dev_pos_m", "dev_ang_deg"]
            w.writerow(head)
            for t, s in enumerate(self.states):
                row = [t, self.horizons[t - 1] if 0 < t <= len(self.horizons) else ""]
                row += [f"{v:.10g}" for v in s["q"]] + [f"{v:.10g}" for v in s["x"]] + [f"{v:.10g}" for v in s["theta"]]
                a = self.audits[t - 1] if 0 < t <= len(self.audits) else {}
                row += [_cell(a.get(f, "")) for f in fams]
                d = self.plan_deviation[t - 1] if 0 < t <= len(self.plan_deviation) else {}
                row += [f"{d['position']:.6g}" if d else "", f"{d['angle_deg']:.6g}" if d else ""]
                w.writerow(row)


def _cell(v):
    return f"{v:.6g}" if isinstance(v, (int, float)) else str(v)


def audit_step(spec, s0, action, s1):
    """Constraint residual maxima of one executed transition."""
    traj = Trajectory(
        np.stack([s0.q, s1.q]),
        np.stack([s0.x, s1.x]),
        np.stack([s0.theta, s1.theta]),
        np.asarray(action["u"], float)[None],
        np.asarray(action["f"], float)[None],
        np.asarray(action["fe"], float)[None],
    )
    fams = [f for f in spec.families if f not in ("terminal_contact",)]
    try:
        blocks = evaluate_constraints(spec.with_horizon(1), traj, jacobian=False, families=fams)
    except ValueError as err:
        return {"error": str(err)}
    return family_maxima(blocks)


def pose_deviation(planned, actual):
    return {
        "position": float(np.linalg.norm(planned.x - actual.x)),
        "angle_deg": float(np.degrees(relative_angle(planned.theta, actual.theta))),
    }


def metrics(log, task):
    """Distance to goal (deg) and validity for a finished episode.

    ``task`` provides ``metric`` ("orientation" or "joint_angle"), ``goal_theta``,
    ``goal_angle`` (rad, joint-angle tasks), ``validity`` ("no_drop",
    "top_displacement" or "none") and ``max_top_displacement``.
    """
    final = log.states[-1]
    start = log.states[0]
    theta_f = np.asarray(final["theta"], float)
    if task.get("metric") == "joint_angle":
        axis = np.asarray(task["axis"], float)
        rel = quat_mul(theta_f, quat_conj(np.asarray(start["theta"], float)))
        ang = float(quat_log(rel) @ axis)
        dist = abs(np.degrees(ang - task["goal_angle"]))
    else:
        dist = float(np.degrees(relative_angle(theta_f, np.asarray(task["goal_theta"], float))))
    if task.get("validity") == "top_displacement":
        disp = max(log.top_displacement) if log.top_displacement else 0.0
        valid = disp <= task.get("max_top_displacement", 0.02) and log.error is None
    elif task.get("validity") == "none":
        valid = log.error is None
    else:
        valid = not log.dropped and log.error is None
    return {"distance_to_goal": dist, "valid": bool(valid)}
