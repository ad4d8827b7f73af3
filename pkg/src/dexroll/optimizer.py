"""Trajectory optimization over joint motion, object motion and contact forces.

Decision variables are stacked per block: joints ``q_1..q_T``, object pose
perturbations for steps ``1..T`` (reduced to the object's joint coordinates),
delta commands ``u_0..u_{T-1}``, finger forces and, when an environment
contact is modelled, the environment force. The start state ``s_0`` is fixed.

The solver is an augmented Lagrangian with a projected Gauss-Newton /
Levenberg-Marquardt inner loop on the stacked least-squares merit

    [sqrt(2) r_cost; sqrt(rho) (c + lambda/rho); sqrt(rho) max(0, g + mu/rho)]

where ``c``/``g`` are equality/inequality residuals divided by per-family scales.
"""

import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import constraints as C
from .body import DEFAULT_DELTA, DegenerateNormalError, contact_estimate
from .geometry import ObjectPose
from .kinematics import forward_kinematics, gravity_torque, link_points_world
from .rotations import left_jacobian_inv, quat_conj, quat_log, quat_mul, quat_normalize, quat_to_matrix, right_jacobian_inv, slerp

FAMILIES = (
    "contact",
    "terminal_contact",
    "rolling",
    "torque",
    "wrench",
    "friction",
    "min_force",
    "env_contact",
    "region",
    "tracking",
)
DEFAULT_FAMILIES = ("contact", "rolling", "torque", "wrench", "friction", "min_force")
DEFAULT_SCALES = {
    "contact": 0.01,
    "terminal_contact": 0.01,
    "rolling": 0.1,
    "torque": 0.1,
    "wrench": 1.0,
    "friction": 1.0,
    "min_force": 1.0,
    "env_contact": 0.01,
    "region": 0.01,
    "tracking": 0.01,
}


HOLD_WEIGHT = 1e6  # pose cost weight that keeps the object still during pregrasp


class SolverError(RuntimeError):
    """Raised when the problem produces non-finite values."""


@dataclass
class State:
    q: np.ndarray
    x: np.ndarray
    theta: np.ndarray

    def copy(self):
        return State(self.q.copy(), self.x.copy(), self.theta.copy())

    @property
    def pose(self):
        return ObjectPose(self.x, self.theta)

    def to_dict(self):
        return {"q": self.q.tolist(), "x": self.x.tolist(), "theta": self.theta.tolist()}


@dataclass
class Trajectory:
    """States ``s_0..s_T`` and actions ``u_0..u_{T-1}``."""

    q: np.ndarray  # (T+1, n_q)
    x: np.ndarray  # (T+1, 3)
    theta: np.ndarray  # (T+1, 4)
    u: np.ndarray  # (T, n_q)
    f: np.ndarray  # (T, N_f, 3)
    fe: np.ndarray  # (T, 3)

    def __post_init__(self):
        T = len(self.u)
        if T < 1:
            raise ValueError("horizon must be at least 1")
        for name, arr, n in (("q", self.q, T + 1), ("x", self.x, T + 1), ("theta", self.theta, T + 1), ("f", self.f, T), ("fe", self.fe, T)):
            if len(arr) != n:
                raise ValueError(f"{name} has length {len(arr)}, expected {n}")

    @property
    def T(self):
        return len(self.u)

    def state(self, t):
        return State(self.q[t].copy(), self.x[t].copy(), self.theta[t].copy())

    def copy(self):
        return Trajectory(*(a.copy() for a in (self.q, self.x, self.theta, self.u, self.f, self.fe)))

    def shift(self):
        """Drop the first step; the result has horizon ``T - 1``."""
        if self.T < 2:
            raise ValueError("cannot shift a horizon-1 trajectory")
        return Trajectory(self.q[1:].copy(), self.x[1:].copy(), self.theta[1:].copy(), self.u[1:].copy(), self.f[1:].copy(), self.fe[1:].copy())

    def with_start(self, state):
        out = self.copy()
        out.q[0], out.x[0], out.theta[0] = state.q, state.x, state.theta
        return out

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("q", "x", "theta", "u", "f", "fe")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], float) for k in ("q", "x", "theta", "u", "f", "fe")))


@dataclass
class ProblemSpec:
    """Everything that defines one trajectory problem except the start state."""

    chain: object
    body: object
    model: C.ObjectModel
    goal_x: np.ndarray
    goal_theta: np.ndarray
    T: int = 10
    dt: float = 0.1
    families: Sequence[str] = DEFAULT_FAMILIES
    delta: float = DEFAULT_DELTA
    Kp: float = 3.0
    mu: float = 0.95
    f_min: Sequence[float] = (0.0,)
    w_x: float = 1.0
    w_theta: float = 1.0
    terminal_weight: float = 10.0
    w_smooth: Sequence[float] = (1.0, 100.0, 1.0)  # joints, position, orientation
    sigma_u: float = 2.5e-2
    sigma_f: float = 0.15
    region_anchor: Optional[np.ndarray] = None
    region_radius: float = 0.02
    region_finger: int = 0
    tips: Optional[List] = None  # per finger (link, local point) for tracking
    p_hat: Optional[np.ndarray] = None  # (N_f, 3) object-frame fingertip anchors
    env_samples: Optional[np.ndarray] = None  # object surface samples (body frame)
    scales: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SCALES))

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("horizon must be at least 1")
        for name in self.families:
            if name not in FAMILIES:
                raise ValueError(f"unknown constraint family {name!r}")
        if min(self.w_x, self.w_theta, self.terminal_weight, *self.w_smooth) < 0:
            raise ValueError("cost weights must be non-negative")
        self.goal_x = np.asarray(self.goal_x, float)
        self.goal_theta = quat_normalize(np.asarray(self.goal_theta, float))
        fm = np.asarray(self.f_min, float).ravel()
        self.f_min = np.broadcast_to(fm, (self.n_fingers,)).copy() if fm.size == 1 else fm
        if ("env_contact" in self.families) and (self.model.env_scene is None or self.env_samples is None):
            raise ValueError("env_contact needs an environment scene and object samples")
        if "region" in self.families and self.region_anchor is None:
            raise ValueError("region constraint needs an anchor")
        if "tracking" in self.families and self.tips is None:
            raise ValueError("tracking constraint needs fingertip definitions")

    @property
    def n_fingers(self):
        return len(self.body)

    @property
    def has_env_force(self):
        return self.model.env_scene is not None and self.env_samples is not None and "wrench" in self.families

    def with_horizon(self, T):
        return replace(self, T=T)


@dataclass
class SolverConfig:
    warmup_iters: int = 100
    online_iters: int = 30
    inner_iters: int = 3
    rho0: float = 10.0
    rho_growth: float = 2.0
    rho_max: float = 1e6
    multiplier_damping: float = 1.0
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 8
    lm_init: float = 1e-3
    particles: int = 8
    seed: int = 0
    tol_eq: float = 1e-3
    tol_ineq: float = 1e-3
    tol_grad: float = 1e-6
    tol_step: float = 1e-2  # outer-iteration step, infinity norm in per-variable units
    trust_radius: float = 1.0  # max inner step, in multiples of the per-variable units

    def __post_init__(self):
        if min(self.warmup_iters, self.online_iters, self.inner_iters, self.particles) < 1:
            raise ValueError("iteration counts and particle count must be >= 1")
        if not self.rho0 > 0:
            raise ValueError("initial penalty must be positive")


# --- variable layout ----------------------------------------------------------------


class Layout:
    """Offsets of each variable block in the stacked decision vector."""

    def __init__(self, spec, T):
        self.T = T
        self.n_q = spec.chain.n_q
        self.k = spec.model.n_tangent
        self.n_f = spec.n_fingers
        self.env = spec.has_env_force
        self.off_q = 0
        self.off_o = self.off_q + T * self.n_q
        self.off_u = self.off_o + T * self.k
        self.off_f = self.off_u + T * self.n_q
        self.off_fe = self.off_f + T * self.n_f * 3
        self.n = self.off_fe + (T * 3 if self.env else 0)
        lo = np.full(self.n, -np.inf)
        hi = np.full(self.n, np.inf)
        ch = spec.chain
        for t in range(T):
            lo[self.cols("q", t + 1)] = ch.q_min
            hi[self.cols("q", t + 1)] = ch.q_max
            lo[self.cols("u", t)] = ch.u_min
            hi[self.cols("u", t)] = ch.u_max
        self.lower = lo
        self.upper = hi
        # per-variable step units: rad for joints/rotations, m for positions, N for forces
        unit = np.empty(self.n)
        unit[self.off_q : self.off_o] = 0.1
        o_unit = np.array([0.01, 0.01, 0.01, 0.1, 0.1, 0.1]) if spec.model.joint == "free" else np.full(self.k, 0.1)
        unit[self.off_o : self.off_u] = np.tile(o_unit, T)
        unit[self.off_u : self.off_f] = 0.05
        unit[self.off_f :] = 0.5
        self.unit = unit

    def cols(self, key, t):
        """Column indices (array) of variable ``key`` at time ``t`` (None if fixed)."""
        if key == "q":
            return None if t == 0 else np.arange(self.off_q + (t - 1) * self.n_q, self.off_q + t * self.n_q)
        if key == "o":
            return None if t == 0 else np.arange(self.off_o + (t - 1) * self.k, self.off_o + t * self.k)
        if key == "u":
            return np.arange(self.off_u + t * self.n_q, self.off_u + (t + 1) * self.n_q)
        if key.startswith("f") and key != "fe":
            i = int(key[1:])
            s = self.off_f + (t * self.n_f + i) * 3
            return np.arange(s, s + 3)
        if key == "fe":
            return np.arange(self.off_fe + t * 3, self.off_fe + t * 3 + 3) if self.env else None
        raise KeyError(key)

    def pack(self, traj):
        z = np.zeros(self.n)
        z[self.off_q : self.off_o] = traj.q[1:].ravel()
        z[self.off_u : self.off_f] = traj.u.ravel()
        z[self.off_f : self.off_fe] = traj.f.ravel()
        if self.env:
            z[self.off_fe :] = traj.fe.ravel()
        return z

    def apply(self, spec, traj, dz):
        """Retract a step ``dz`` onto ``traj``; joint and command bounds are enforced by clamping."""
        T = self.T
        out = traj.copy()
        out.q[1:] = np.clip(traj.q[1:] + dz[self.off_q : self.off_o].reshape(T, self.n_q), spec.chain.q_min, spec.chain.q_max)
        do = dz[self.off_o : self.off_u].reshape(T, self.k)
        out.x[1:], out.theta[1:] = spec.model.retract(traj.x[1:], traj.theta[1:], do)
        out.u = np.clip(traj.u + dz[self.off_u : self.off_f].reshape(T, self.n_q), spec.chain.u_min, spec.chain.u_max)
        out.f = traj.f + dz[self.off_f : self.off_fe].reshape(T, self.n_f, 3)
        if self.env:
            out.fe = traj.fe + dz[self.off_fe :].reshape(T, 3)
        return out


# --- assembly -----------------------------------------------------------------------


@dataclass
class Block:
    name: str
    kind: str
    residual: np.ndarray  # (rows,)
    jac: Optional[np.ndarray]  # (rows, n) or None
    times: np.ndarray  # (rows,) time index of each row (for reporting)


def _scatter(J, lay, row0, m, ts, key, block, tmap):
    """Add a (B, m, dim) block into rows ``row0 + b*m + r`` of ``J``."""
    base = key[0] if key in ("q0", "q1", "o0", "o1") else key
    shift = 1 if key in ("q1", "o1") else 0
    for b, t in enumerate(ts):
        cols = lay.cols(base, t + shift)
        if cols is None:
            continue
        blk = block[b]
        if base == "o":
            blk = blk @ tmap[t + shift]
        J[row0 + b * m : row0 + (b + 1) * m, cols] += blk


def _estimates(spec, traj, fk, derivatives=True):
    pose = ObjectPose(traj.x, traj.theta)
    return [contact_estimate(spec.body, i, spec.chain, traj.q, spec.model.scene, pose, spec.delta, fk=fk, derivatives=derivatives) for i in range(spec.n_fingers)]


def _env(spec, traj):
    return C.env_estimate(spec.model.env_scene, spec.env_samples, traj.x, traj.theta, spec.delta)


def evaluate_constraints(spec, traj, jacobian=True, families=None):
    """Evaluate every active family over the horizon; returns a list of :class:`Block`."""
    T = traj.T
    lay = Layout(spec, T)
    fams = spec.families if families is None else families
    fk = forward_kinematics(spec.chain, traj.q)
    needs_est = any(f in fams for f in ("contact", "terminal_contact", "rolling", "torque", "wrench", "friction", "region"))
    ests = _estimates(spec, traj, fk, derivatives=jacobian) if needs_est else None
    env = _env(spec, traj) if (spec.model.env_scene is not None and spec.env_samples is not None and any(f in fams for f in ("env_contact", "wrench"))) else None
    tmap = spec.model.tangent_map(traj.theta)
    steps = np.arange(T)
    states = np.arange(1, T + 1)
    head = slice(0, T)
    evals = []  # (name, ConstraintEval, times)

    if "contact" in fams:
        for i, e in enumerate(ests):
            evals.append(("contact", C.contact(e.subset(states)), states))
    if "terminal_contact" in fams:
        for i, e in enumerate(ests):
            evals.append(("terminal_contact", C.contact(e.subset(np.array([T]))), np.array([T])))
    if "rolling" in fams:
        for i, e in enumerate(ests):
            c = C.rolling(e.subset(head), traj.q[:-1], traj.q[1:], traj.x[:-1], traj.theta[:-1], traj.x[1:], traj.theta[1:], spec.dt)
            evals.append(("rolling", c, steps))
    if "torque" in fams:
        c = C.robot_torque_balance(spec.chain, spec.Kp, traj.q[:-1], traj.q[1:], traj.u, traj.f, [e.subset(head) for e in ests])
        evals.append(("torque", c, steps))
    if "wrench" in fams:
        fe = traj.fe if lay.env else None
        env_h = C.EnvEstimate(*(a[head] for a in (env.distance, env.d_distance_do, env.point, env.d_point_do))) if (lay.env and env is not None) else None
        c = C.object_wrench_balance(spec.model, traj.x[:-1], traj.theta[1:], traj.f, [e.subset(head) for e in ests], fe, env_h)
        evals.append(("wrench", c, steps))
    if "friction" in fams:
        for i, e in enumerate(ests):
            eh = e.subset(head)
            c = C.friction_cone(traj.f[:, i], -eh.normal, spec.mu, {"q0": -eh.d_normal_dq, "o0": -eh.d_normal_do})
            c.jac[f"f{i}"] = c.jac.pop("f")
            evals.append(("friction", c, steps))
    if "min_force" in fams:
        for i in range(spec.n_fingers):
            c = C.min_force(traj.f[:, i], spec.f_min[i])
            c.jac[f"f{i}"] = c.jac.pop("f")
            evals.append(("min_force", c, steps))
    if "env_contact" in fams:
        sub = C.EnvEstimate(*(a[1:] for a in (env.distance, env.d_distance_do, env.point, env.d_point_do)))
        evals.append(("env_contact", C.env_contact(sub), states))
    if "region" in fams:
        e = ests[spec.region_finger].subset(states)
        evals.append(("region", C.region(e, traj.x[1:], traj.theta[1:], spec.region_anchor, spec.region_radius), states))
    if "tracking" in fams:
        for i, (link, local) in enumerate(spec.tips):
            c = C.ablation_tracking(spec.chain, traj.q[1:], traj.x[1:], traj.theta[1:], link, local, spec.p_hat[i])
            evals.append(("tracking", c, states))

    blocks = []
    for name, c, ts in evals:
        B, m = c.residual.shape
        res = c.residual.ravel()
        J = None
        if jacobian:
            J = np.zeros((B * m, lay.n))
            for key, blk in c.jac.items():
                _scatter(J, lay, 0, m, ts, key, blk, tmap)
        blocks.append(Block(name, c.kind, res, J, np.repeat(ts, m)))
    return blocks


def cost_residuals(spec, traj, jacobian=True):
    """Stacked residual vector whose squared norm is the objective."""
    T = traj.T
    lay = Layout(spec, T)
    wq, wp, wo = (math.sqrt(w) for w in spec.w_smooth)
    wt = np.ones(T)
    wt[-1] = spec.terminal_weight
    gx = np.sqrt(wt * spec.w_x)[:, None]
    gt = np.sqrt(wt * spec.w_theta)[:, None]
    th = traj.theta[1:]
    phi_goal = quat_log(quat_mul(quat_conj(spec.goal_theta), th))
    dq = traj.q[1:] - traj.q[:-1]
    dx = traj.x[1:] - traj.x[:-1]
    phi_s = quat_log(quat_mul(quat_conj(traj.theta[:-1]), traj.theta[1:]))
    parts = [gx * (traj.x[1:] - spec.goal_x), gt * phi_goal, wq * dq, wp * dx, wo * phi_s]
    r = np.concatenate([p.ravel() for p in parts])
    if not jacobian:
        return r, None
    J = np.zeros((len(r), lay.n))
    tmap = spec.model.tangent_map(traj.theta)
    n_q = spec.chain.n_q
    row = 0
    Jr_goal = right_jacobian_inv(phi_goal)
    Jr_s = right_jacobian_inv(phi_s)
    Jl_s = left_jacobian_inv(phi_s)
    for t in range(1, T + 1):
        c = lay.cols("o", t)
        J[row + 3 * (t - 1) : row + 3 * t, c] = gx[t - 1] * tmap[t, :3]
    row += 3 * T
    for t in range(1, T + 1):
        c = lay.cols("o", t)
        J[row + 3 * (t - 1) : row + 3 * t, c] = gt[t - 1] * Jr_goal[t - 1] @ tmap[t, 3:]
    row += 3 * T
    for t in range(1, T + 1):
        rr = slice(row + n_q * (t - 1), row + n_q * t)
        J[rr, lay.cols("q", t)] += wq * np.eye(n_q)
        if t > 1:
            J[rr, lay.cols("q", t - 1)] -= wq * np.eye(n_q)
    row += n_q * T
    for t in range(1, T + 1):
        rr = slice(row + 3 * (t - 1), row + 3 * t)
        J[rr, lay.cols("o", t)] += wp * tmap[t, :3]
        if t > 1:
            J[rr, lay.cols("o", t - 1)] -= wp * tmap[t - 1, :3]
    row += 3 * T
    for t in range(1, T + 1):
        rr = slice(row + 3 * (t - 1), row + 3 * t)
        J[rr, lay.cols("o", t)] += wo * Jr_s[t - 1] @ tmap[t, 3:]
        if t > 1:
            J[rr, lay.cols("o", t - 1)] -= wo * Jl_s[t - 1] @ tmap[t - 1, 3:]
    return r, J


def evaluate_objective(traj, spec):
    """Objective value and its gradient over the stacked decision vector."""
    r, J = cost_residuals(spec, traj)
    return float(r @ r), 2.0 * J.T @ r


# --- initialization -----------------------------------------------------------------


def init_trajectory(spec, state, seed):
    """Straight-line object path with fingers dragged along at their contacts.

    Each step moves every finger by the least-squares joint motion that keeps its
    softmin contact point attached to the object, plus Gaussian noise of scale
    ``sigma_u``. Forces start pushing along the inward normal with magnitude
    ``max(f_min, sigma_f)`` plus noise of scale ``sigma_f``.
    """
    rng = np.random.default_rng(seed)
    T, n_q, ch = spec.T, spec.chain.n_q, spec.chain
    s = np.linspace(0.0, 1.0, T + 1)
    if spec.model.joint == "free":
        x = (1 - s)[:, None] * state.x + s[:, None] * spec.goal_x
    else:
        x = np.broadcast_to(spec.model.anchor, (T + 1, 3)).copy()
    theta = slerp(np.broadcast_to(state.theta, (T + 1, 4)), np.broadcast_to(spec.goal_theta, (T + 1, 4)), s)
    theta[0] = state.theta
    q = np.empty((T + 1, n_q))
    u = np.empty((T, n_q))
    f = np.empty((T, spec.n_fingers, 3))
    q[0] = state.q
    R = quat_to_matrix(theta)
    for t in range(T):
        pose = ObjectPose(x[t], theta[t])
        follow = np.zeros(n_q)
        for i in range(spec.n_fingers):
            try:
                est = contact_estimate(spec.body, i, ch, q[t][None], spec.model.scene, pose, spec.delta)
            except DegenerateNormalError:
                f[t, i] = 0.0
                continue
            p = est.point[0]
            target = R[t + 1] @ R[t].T @ (p - x[t]) + x[t + 1]
            sl = ch.finger_slices[i]
            J = est.jacobian[0][:, sl]
            follow[sl] = np.linalg.lstsq(J, target - p, rcond=None)[0]
            f[t, i] = -est.normal[0] * max(float(spec.f_min[i]), spec.sigma_f)
        step = np.clip(follow + rng.normal(0.0, spec.sigma_u, n_q), ch.u_min, ch.u_max)
        q[t + 1] = np.clip(q[t] + step, ch.q_min, ch.q_max)
        u[t] = q[t + 1] - q[t]
    f = f + rng.normal(0.0, spec.sigma_f, f.shape)
    fe = rng.normal(0.0, spec.sigma_f, (T, 3)) if spec.has_env_force else np.zeros((T, 3))
    return Trajectory(q, x, theta, u, f, fe)


# --- solver -------------------------------------------------------------------------


class _Problem:
    """Augmented-Lagrangian bookkeeping for one trajectory problem."""

    def __init__(self, spec, T):
        self.spec = spec
        self.lay = Layout(spec, T)

    def evaluate(self, traj, jacobian=True):
        blocks = evaluate_constraints(self.spec, traj, jacobian)
        r, Jr = cost_residuals(self.spec, traj, jacobian)
        return blocks, r, Jr

    def split(self, blocks, jacobian=True):
        sc = self.spec.scales
        eq = [b for b in blocks if b.kind == "eq"]
        iq = [b for b in blocks if b.kind == "ineq"]
        n = self.lay.n

        def stack(bs):
            if not bs:
                return np.zeros(0), np.zeros((0, n))
            res = np.concatenate([b.residual / sc[b.name] for b in bs])
            J = np.concatenate([b.jac / sc[b.name] for b in bs]) if jacobian else None
            return res, J

        return stack(eq), stack(iq)

    def merit_parts(self, r, c, g, lam, mu, rho):
        sr = math.sqrt(rho)
        pen_g = np.maximum(0.0, g + mu / rho)
        return np.concatenate([math.sqrt(2.0) * r, sr * (c + lam / rho), sr * pen_g])


def _violation(c, g):
    ve = float(np.max(np.abs(c))) if c.size else 0.0
    vi = float(np.max(np.maximum(g, 0.0))) if g.size else 0.0
    return ve, vi


def family_maxima(blocks):
    out = {}
    for b in blocks:
        v = np.abs(b.residual) if b.kind == "eq" else np.maximum(b.residual, 0.0)
        out[b.name] = max(out.get(b.name, 0.0), float(v.max()) if v.size else 0.0)
    return out


def _check_finite(*arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise SolverError("non-finite value in residuals or gradients")


def _kkt_multipliers(grad_f, Jc, Jg, g, tol):
    """Least-squares multiplier estimate and the resulting stationarity residual."""
    active = g > -tol
    A = np.concatenate([Jc, Jg[active]]) if Jg.size else Jc
    if A.size == 0:
        return np.zeros(Jc.shape[0]), np.zeros(Jg.shape[0]), float(np.max(np.abs(grad_f))) if grad_f.size else 0.0
    lam_all, *_ = np.linalg.lstsq(A.T, -grad_f, rcond=None)
    lam = lam_all[: Jc.shape[0]]
    mu = np.zeros(Jg.shape[0])
    mu[active] = np.maximum(lam_all[Jc.shape[0] :], 0.0)
    stat = grad_f + Jc.T @ lam + Jg.T @ mu
    return lam, mu, float(np.max(np.abs(stat)))


def _free_mask(z, lay, grad):
    """Variables not pinned at an active bound."""
    at_lo = (z <= lay.lower + 1e-12) & (grad > 0)
    at_hi = (z >= lay.upper - 1e-12) & (grad < 0)
    return ~(at_lo | at_hi)


def _solve_particle(spec, init, cfg, iters):
    prob = _Problem(spec, init.T)
    lay = prob.lay
    traj = init.copy()
    history = []
    try:
        blocks, r, Jr = prob.evaluate(traj)
    except DegenerateNormalError as err:
        return traj, {"status": "not_converged", "error": str(err), "iterations": 0, "history": []}, (np.inf, np.inf)
    _check_finite(r, Jr, *(b.jac for b in blocks))
    (c, Jc), (g, Jg) = prob.split(blocks)
    grad_f = 2.0 * Jr.T @ r
    _, _, kkt = _kkt_multipliers(grad_f, Jc, Jg, g, cfg.tol_ineq)
    lam = np.zeros(c.shape[0])
    mu = np.zeros(g.shape[0])
    ve, vi = _violation(c, g)
    rho = cfg.rho0
    lm = cfg.lm_init
    status = "not_converged"
    it = 0
    if ve <= cfg.tol_eq and vi <= cfg.tol_ineq and kkt <= cfg.tol_grad:
        status = "converged"
    while status != "converged" and it < iters:
        it += 1
        prev_ve, prev_vi = ve, vi
        moved = np.zeros(lay.n)
        for _ in range(cfg.inner_iters):
            R = prob.merit_parts(r, c, g, lam, mu, rho)
            Jg_act = Jg * ((g + mu / rho) > 0)[:, None]
            JR = np.concatenate([math.sqrt(2.0) * Jr, math.sqrt(rho) * Jc, math.sqrt(rho) * Jg_act])
            grad = JR.T @ R
            z = lay.pack(traj)
            free = _free_mask(z, lay, grad)
            A = JR[:, free]
            H = A.T @ A
            d = np.diag(H).copy()
            # damping floor in step units so unconstrained directions stay bounded
            d = np.maximum(d, 1e-6 * max(1.0, d.max(initial=0.0)) / lay.unit[free] ** 2 * lay.unit[free].min() ** 2)
            m0 = 0.5 * float(R @ R)
            accepted = False
            for _lm in range(14):
                try:
                    step_free = np.linalg.solve(H + lm * np.diag(d), -grad[free])
                except np.linalg.LinAlgError:
                    lm *= 10.0
                    continue
                dz = np.zeros(lay.n)
                dz[free] = step_free
                ratio = float(np.max(np.abs(dz) / lay.unit)) / cfg.trust_radius
                if ratio > 1.0:
                    if _lm < 8:
                        lm *= 10.0
                        continue
                    dz /= ratio
                slope = float(grad @ dz)
                if slope >= 0:
                    lm *= 10.0
                    continue
                alpha = 1.0
                for _bt in range(cfg.max_backtracks):
                    trial = lay.apply(spec, traj, alpha * dz)
                    try:
                        tb, tr, _ = prob.evaluate(trial, jacobian=False)
                        (tc, _), (tg, _) = prob.split(tb, jacobian=False)
                        m1 = 0.5 * float(np.sum(prob.merit_parts(tr, tc, tg, lam, mu, rho) ** 2))
                    except DegenerateNormalError:
                        m1 = np.inf
                    if np.isfinite(m1) and m1 <= m0 + cfg.armijo * alpha * slope:
                        accepted = True
                        break
                    alpha *= cfg.shrink
                if accepted:
                    lm = max(lm / 3.0, 1e-9)
                    break
                lm *= 10.0
            if not accepted:
                break
            traj = trial
            blocks, r, Jr = prob.evaluate(traj)
            _check_finite(r, Jr, *(b.jac for b in blocks))
            (c, Jc), (g, Jg) = prob.split(blocks)
            moved += alpha * dz
            if float(np.max(np.abs(alpha * dz) / lay.unit)) < 1e-3 * cfg.tol_step:
                break
        ve, vi = _violation(c, g)
        lam = lam + cfg.multiplier_damping * rho * c
        mu = np.maximum(0.0, mu + rho * g)
        grew = False
        if (ve > 0.5 * prev_ve and ve > cfg.tol_eq) or (vi > 0.5 * prev_vi and vi > cfg.tol_ineq):
            if rho < cfg.rho_max:
                rho = min(rho * cfg.rho_growth, cfg.rho_max)
                grew = True
        grad_f = 2.0 * Jr.T @ r
        _, _, kkt = _kkt_multipliers(grad_f, Jc, Jg, g, cfg.tol_ineq)
        history.append(
            {"iteration": it, "rho": rho, "rho_increased": grew, "eq_violation": ve, "ineq_violation": vi, "cost": float(r @ r), "kkt": kkt, "families": family_maxima(blocks)}
        )
        step = float(np.max(np.abs(moved) / lay.unit))
        history[-1]["step"] = step
        if ve <= cfg.tol_eq and vi <= cfg.tol_ineq and (kkt <= cfg.tol_grad or step <= cfg.tol_step):
            status = "converged"
    cost = float(r @ r)
    report = {
        "status": status,
        "iterations": it,
        "cost": cost,
        "eq_violation": ve,
        "ineq_violation": vi,
        "families": family_maxima(blocks),
        "history": history,
    }
    return traj, report, (max(ve, vi), cost)


def solve(spec, init, config, particles=None, iters=None):
    """Solve from ``init`` plus ``particles - 1`` random restarts; keep the most feasible."""
    n_part = config.particles if particles is None else particles
    n_iter = config.warmup_iters if iters is None else iters
    start = init.state(0)
    inits = [init] + [init_trajectory(spec.with_horizon(init.T), start, config.seed + k) for k in range(1, n_part)]
    results = []
    for k, tr in enumerate(inits):
        traj, rep, key = _solve_particle(spec, tr, config, n_iter)
        rep["particle"] = k
        results.append((traj, rep, key))
    tol = max(config.tol_eq, config.tol_ineq)

    def rank(item):
        v, cost = item[2]
        return (v if v > tol else 0.0, cost)

    best = min(results, key=rank)
    report = dict(best[1])
    report["particles"] = [{"particle": r[1]["particle"], "violation": r[2][0], "cost": r[2][1], "status": r[1]["status"]} for r in results]
    report["active_families"] = list(spec.families)
    report["inactive_families"] = [f for f in FAMILIES if f not in spec.families]
    return best[0], report


def pregrasp_spec(spec):
    """The same problem with only terminal-step contact equalities (plus bounds)."""
    return replace(spec, families=("terminal_contact",))


def pregrasp_solve(spec, state, config, seed=None):
    """Move the fingertips onto the object, holding the object still."""
    ps = pregrasp_spec(spec)
    # a stiff pose cost pins the object, which the plant will not move either
    ps = replace(ps, goal_x=np.asarray(state.x, float), goal_theta=np.asarray(state.theta, float), w_x=HOLD_WEIGHT, w_theta=HOLD_WEIGHT)
    init = init_trajectory(ps, state, config.seed if seed is None else seed)
    init.f[:] = 0.0
    init.fe[:] = 0.0
    traj, report = solve(ps, init, config, particles=1, iters=config.warmup_iters)
    # nothing in the reduced problem ties the commands to the joint path, so
    # set them to what the free-motion PD steady state needs to follow it
    Kp = np.broadcast_to(np.asarray(spec.Kp, float), (spec.chain.n_q,))
    sag = gravity_torque(spec.chain, traj.q[:-1]) / Kp
    traj.u = np.clip(np.diff(traj.q, axis=0) - sag, spec.chain.u_min, spec.chain.u_max)
    return traj, report


def record_tip_anchors(spec, state):
    """Object-frame locations of each fingertip point at ``state`` (ablation anchors)."""
    fk = forward_kinematics(spec.chain, state.q[None])
    R = quat_to_matrix(state.theta)
    out = []
    for link, local in spec.tips:
        p = link_points_world(fk, np.array([link]), np.asarray(local, float)[None])[0, 0]
        out.append(R.T @ (p - state.x))
    return np.array(out)


class MPCController:
    """Shrinking-horizon receding control with warm starts."""

    def __init__(self, spec, config, seed=0):
        self.spec = spec
        self.config = replace(config, seed=seed)
        self.seed = seed
        self.plan = None
        self.reports = []

    @property
    def horizon(self):
        return None if self.plan is None else self.plan.T

    def warmup(self, state):
        init = init_trajectory(self.spec, state, self.seed)
        self.plan, rep = solve(self.spec.with_horizon(init.T), init, self.config, iters=self.config.warmup_iters)
        rep["phase"] = "warmup"
        self.reports.append(rep)
        return self.plan

    def replan(self, state):
        """Re-solve the current (already shifted) plan from the measured ``state``."""
        warm = self.plan.with_start(state)
        self.plan, rep = solve(self.spec.with_horizon(warm.T), warm, self.config, particles=1, iters=self.config.online_iters)
        rep["phase"] = "online"
        rep["horizon"] = warm.T
        self.reports.append(rep)
        return self.plan

    def step(self):
        """First action of the plan and the shifted warm start (None once the horizon is spent)."""
        return mpc_step(self)


def mpc_step(controller):
    """Pop the first action; the controller keeps the plan shifted by one step."""
    plan = controller.plan
    action = {"u": plan.u[0].copy(), "f": plan.f[0].copy(), "fe": plan.fe[0].copy()}
    controller.plan = plan.shift() if plan.T > 1 else None
    return action, controller.plan


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True, default=float)
