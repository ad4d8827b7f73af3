"""Constraint families of the contact-rolling trajectory problem.

Every operation is batched over a leading dimension ``B`` (typically the time
steps of a horizon) and returns a :class:`ConstraintEval`. Jacobian blocks are
keyed by the variable they differentiate:

``q0``, ``q1``   joint vectors at steps t and t+1 (n_q)
``o0``, ``o1``   object pose tangent at t and t+1, ``(dx, dtheta_body)`` (6)
``u``            delta joint command (n_q)
``f<i>``         force of finger i on the object (3)
``fe``           environment force on the object (3)

Inequalities follow the ``g <= 0`` convention.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .body import softmin_weights
from .geometry import SdfScene, evaluate_scene
from .kinematics import GRAVITY, forward_kinematics, gravity_torque, gravity_torque_jacobian, link_points_world, points_jacobian
from .rotations import quat_conj, quat_exp, quat_from_axis_angle, quat_log, quat_mul, quat_normalize, quat_to_matrix, right_jacobian_inv, skew

G_VEC = np.array([0.0, 0.0, GRAVITY])
NORM_EPS = 1e-6
JOINT_TYPES = ("free", "revolute", "spherical")


@dataclass
class ConstraintEval:
    residual: np.ndarray  # (B, m)
    jac: Dict[str, np.ndarray]  # name -> (B, m, dim)
    kind: str  # "eq" | "ineq"

    @property
    def dim(self):
        return self.residual.shape[-1]


@dataclass
class ObjectModel:
    """Manipulated object: geometry, inertial data and joint to the world.

    For ``revolute`` objects ``axis`` is the world rotation axis and ``anchor``
    the fixed world position of the object origin; ``spherical`` objects pivot
    about ``anchor``.
    """

    scene: SdfScene
    mass: float = 0.1
    com: np.ndarray = field(default_factory=lambda: np.zeros(3))
    joint: str = "free"
    axis: Optional[np.ndarray] = None
    anchor: Optional[np.ndarray] = None
    env_scene: Optional[SdfScene] = None

    def __post_init__(self):
        if self.mass < 0:
            raise ValueError("object mass must be non-negative")
        if self.joint not in JOINT_TYPES:
            raise ValueError(f"unknown object joint {self.joint!r}")
        self.com = np.asarray(self.com, float)
        if self.joint != "free" and self.anchor is None:
            raise ValueError(f"{self.joint} object needs an anchor")
        if self.anchor is not None:
            self.anchor = np.asarray(self.anchor, float)
        if self.joint == "revolute":
            if self.axis is None:
                raise ValueError("revolute object needs an axis")
            a = np.asarray(self.axis, float)
            self.axis = a / np.linalg.norm(a)

    @property
    def n_tangent(self):
        return {"free": 6, "revolute": 1, "spherical": 3}[self.joint]

    def tangent_map(self, theta):
        """(…, 6, k) map from the reduced perturbation to ``(dx, dtheta_body)``."""
        theta = np.asarray(theta, float)
        lead = theta.shape[:-1]
        k = self.n_tangent
        out = np.zeros(lead + (6, k))
        if self.joint == "free":
            out[..., :, :] = np.eye(6)
        elif self.joint == "spherical":
            out[..., 3:, :] = np.eye(3)
        else:
            R = quat_to_matrix(theta)
            out[..., 3:, 0] = np.einsum("...ji,j->...i", R, self.axis)
        return out

    def retract(self, x, theta, d):
        """Apply a reduced perturbation ``d`` to ``(x, theta)``."""
        d = np.asarray(d, float)
        if self.joint == "free":
            return x + d[..., :3], quat_normalize(quat_mul(theta, quat_exp(d[..., 3:])))
        if self.joint == "spherical":
            return np.broadcast_to(self.anchor, np.shape(x)).copy(), quat_normalize(quat_mul(theta, quat_exp(d)))
        rot = quat_from_axis_angle(self.axis, d[..., 0])
        return np.broadcast_to(self.anchor, np.shape(x)).copy(), quat_normalize(quat_mul(rot, theta))

    def joint_angle(self, theta, theta_ref):
        """Signed rotation of ``theta`` relative to ``theta_ref`` about the revolute axis."""
        rel = quat_log(quat_mul(theta, quat_conj(theta_ref)))
        return rel @ self.axis

    def wrench_rows(self):
        """Indices into the (force, torque) 6-vector kept by wrench balance."""
        return {"free": np.arange(6), "spherical": np.arange(3, 6), "revolute": None}[self.joint]


# --- basic geometry ----------------------------------------------------------------


def angular_velocity(theta0, theta1, dt):
    """World-frame angular velocity taking ``theta0`` to ``theta1`` in ``dt`` seconds."""
    rel = quat_mul(theta1, quat_conj(theta0))
    rel = np.where(rel[..., :1] < 0, -rel, rel)
    if np.any(np.abs(rel[..., 0]) < 1e-12):
        raise ValueError("rotation between steps is pi; step too large")
    return quat_log(rel) / dt


def _angular_velocity_jac(theta0, theta1, dt):
    """omega and its derivatives w.r.t. body-frame perturbations of theta0 and theta1."""
    w = angular_velocity(theta0, theta1, dt)
    R0 = quat_to_matrix(theta0)
    A = right_jacobian_inv(w * dt) @ R0 / dt
    return w, -A, A


def _least_aligned_axis(n):
    return np.argmin(np.abs(n), axis=-1)  # argmin keeps x, y, z order on ties


def tangent_projection(n):
    """2x3 matrix whose rows are an orthonormal basis of the plane orthogonal to ``n``."""
    n = np.asarray(n, float)
    nn = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(nn < 1e-12):
        raise ValueError("zero normal")
    n = n / nn
    k = _least_aligned_axis(n)
    a = np.eye(3)[k]
    nk = np.take_along_axis(n, k[..., None], axis=-1)
    w = a - nk * n
    t1 = w / np.linalg.norm(w, axis=-1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2], axis=-2)


def tangent_projection_derivative(n):
    """``dP[..., a, i, j] = d P_ai / d n_j`` for a unit normal ``n``."""
    n = np.asarray(n, float)
    k = _least_aligned_axis(n)
    a = np.eye(3)[k]
    nk = np.take_along_axis(n, k[..., None], axis=-1)
    w = a - nk * n
    wn = np.linalg.norm(w, axis=-1)[..., None, None]
    t1 = w / wn[..., 0]
    I = np.eye(3)
    dw = -(n[..., :, None] * a[..., None, :] + nk[..., None] * I)
    dt1 = (I - t1[..., :, None] * t1[..., None, :]) / wn @ dw
    dt2 = -skew(t1) + skew(n) @ dt1
    return np.stack([dt1, dt2], axis=-3)


def _smooth_norm(v):
    return np.sqrt(np.sum(v * v, axis=-1) + NORM_EPS**2)


# --- constraint families -------------------------------------------------------------


def contact(est):
    """Finger-object softmin distance, to be driven to zero (m)."""
    return ConstraintEval(est.distance[:, None], {"q0": est.d_distance_dq[:, None], "o0": est.d_distance_do[:, None]}, "eq")


def rolling(est, q0, q1, x0, theta0, x1, theta1, dt):
    """Tangential velocity mismatch of the contact point on finger and object (m/s).

    ``est`` is the contact estimate at ``(q0, o0)``.
    """
    B = len(q0)
    Jv, dJv_q, dJv_o = est.jv(q1 - q0)
    Jv, dJv_q, dJv_o = Jv / dt, dJv_q / dt, dJv_o / dt
    w, dw0, dw1 = _angular_velocity_jac(theta0, theta1, dt)
    r = est.point - x0
    v = Jv - np.cross(w, r) - (x1 - x0) / dt
    n = est.normal
    P = tangent_projection(n)
    dP = tangent_projection_derivative(n)
    res = np.einsum("bai,bi->ba", P, v)
    Wx = skew(w)
    Rx = skew(r)
    dv_q0 = dJv_q - est.jacobian / dt - Wx @ est.d_point_dq
    dr_o0 = est.d_point_do.copy()
    dr_o0[:, :, :3] -= np.eye(3)
    dv_o0 = dJv_o - Wx @ dr_o0
    dv_o0[:, :, 3:] += Rx @ dw0
    dv_o0[:, :, :3] += np.eye(3) / dt
    dv_o1 = np.zeros((B, 3, 6))
    dv_o1[:, :, :3] = -np.eye(3) / dt
    dv_o1[:, :, 3:] = Rx @ dw1
    Pv = np.einsum("baij,bi->baj", dP, v)  # (B,2,3): d(P v)/dn
    jac = {
        "q0": P @ dv_q0 + Pv @ est.d_normal_dq,
        "o0": P @ dv_o0 + Pv @ est.d_normal_do,
        "q1": P @ est.jacobian / dt,
        "o1": P @ dv_o1,
    }
    return ConstraintEval(res, jac, "eq")


def robot_torque_balance(chain, Kp, q0, q1, u, forces, estimates):
    """Joint torque balance of the PD-controlled hand under contact loads (N m).

    ``forces`` is (B, N_f, 3); ``estimates`` a list of per-finger contact
    estimates at ``(q0, o0)``.
    """
    B, n = q0.shape
    Kp = np.broadcast_to(np.asarray(Kp, float), (n,))
    tau_g = gravity_torque(chain, q0)
    res = Kp * (q1 - q0 - u) - tau_g
    dq0 = -np.diag(Kp)[None] - gravity_torque_jacobian(chain, q0)
    do0 = np.zeros((B, n, 6))
    jac = {"q1": np.broadcast_to(np.diag(Kp), (B, n, n)).copy(), "u": np.broadcast_to(-np.diag(Kp), (B, n, n)).copy()}
    for i, est in enumerate(estimates):
        jtf, dq, do = est.jtf(forces[:, i])
        res = res + jtf
        dq0 = dq0 + dq
        do0 = do0 + do
        jac[f"f{i}"] = np.swapaxes(est.jacobian, 1, 2)
    jac["q0"] = dq0
    jac["o0"] = do0
    return ConstraintEval(res, jac, "eq")


def object_wrench_balance(model, x0, theta1, forces, estimates, fe=None, env=None):
    """Quasi-static force (N) and torque (N m) balance on the object.

    Moments are taken about the object origin at step t. ``env`` is an
    :class:`EnvEstimate` supplying the environment contact point; it is required
    when ``fe`` is given.
    """
    B = len(x0)
    force = forces.sum(axis=1) - model.mass * G_VEC
    R1 = quat_to_matrix(theta1)
    r_com = np.einsum("bij,j->bi", R1, model.com)
    torque = -model.mass * np.cross(r_com, G_VEC)
    jac_full = {}
    dq0 = []
    do0 = np.zeros((B, 6, 6))
    for i, est in enumerate(estimates):
        f = forces[:, i]
        r = est.point - x0
        torque = torque + np.cross(r, f)
        Jf = np.zeros((B, 6, 3))
        Jf[:, :3] = np.eye(3)
        Jf[:, 3:] = skew(r)
        jac_full[f"f{i}"] = Jf
        Fx = skew(f)
        dr_o = est.d_point_do.copy()
        dr_o[:, :, :3] -= np.eye(3)
        do0[:, 3:] -= Fx @ dr_o
        dq0.append(-Fx @ est.d_point_dq)
    if fe is not None:
        if env is None:
            raise ValueError("environment force needs an environment contact point")
        force = force + fe
        r_e = env.point - x0
        torque = torque + np.cross(r_e, fe)
        Je = np.zeros((B, 6, 3))
        Je[:, :3] = np.eye(3)
        Je[:, 3:] = skew(r_e)
        jac_full["fe"] = Je
        dr_o = env.d_point_do.copy()
        dr_o[:, :, :3] -= np.eye(3)
        do0[:, 3:] -= skew(fe) @ dr_o
    if dq0:
        q = np.zeros((B, 6, dq0[0].shape[-1]))
        q[:, 3:] = sum(dq0)
        jac_full["q0"] = q
    jac_full["o0"] = do0
    o1 = np.zeros((B, 6, 6))
    o1[:, 3:, 3:] = -model.mass * skew(G_VEC) @ R1 @ skew(model.com)
    jac_full["o1"] = o1
    wrench = np.concatenate([force, torque], axis=-1)
    if model.joint == "revolute":
        sel = np.concatenate([np.zeros(3), model.axis])[None, :]  # (1, 6)
        return ConstraintEval(wrench @ sel.T, {k: np.einsum("rj,bjv->brv", sel, v) for k, v in jac_full.items()}, "eq")
    rows = model.wrench_rows()
    return ConstraintEval(wrench[:, rows], {k: v[:, rows] for k, v in jac_full.items()}, "eq")


def friction_matrix(n, mu):
    """(…, 5, 3) rows of the linearized cone plus the non-negative normal row."""
    P = tangent_projection(n)
    t1, t2 = P[..., 0, :], P[..., 1, :]
    mn = mu * n
    return np.stack([t1 - mn, -t1 - mn, t2 - mn, -t2 - mn, -n], axis=-2)


def friction_cone(f, n, mu, dn=None):
    """Linearized 4-sided friction pyramid plus ``-n.f <= 0`` (N).

    ``n`` is the direction along which the finger pushes the object. ``dn`` is
    an optional dict of normal derivatives ``{name: (B, 3, dim)}`` that are
    chained into the Jacobian.
    """
    f = np.asarray(f, float)
    n = np.asarray(n, float)
    if not mu > 0:
        raise ValueError("friction coefficient must be positive")
    A = friction_matrix(n, mu)
    res = np.einsum("...ri,...i->...r", A, f)
    jac = {"f": A}
    if dn:
        dP = tangent_projection_derivative(n)  # (B,2,3,3)
        dt = np.einsum("baij,bi->baj", dP, f)  # (B,2,3): d(t_a.f)/dn
        dmn = np.broadcast_to(-mu * f[:, None, :], dt[:, :1].shape)
        dA = np.concatenate([dt[:, :1] + dmn, -dt[:, :1] + dmn, dt[:, 1:] + dmn, -dt[:, 1:] + dmn, -f[:, None, :]], axis=1)
        for name, d in dn.items():
            jac[name] = dA @ d
    return ConstraintEval(res, jac, "ineq")


def min_force(f, f_min):
    """``f_min - |f| <= 0`` with a smoothed norm (N)."""
    f = np.asarray(f, float)
    nrm = _smooth_norm(f)
    return ConstraintEval((f_min - nrm)[..., None], {"f": -(f / nrm[..., None])[..., None, :]}, "ineq")


@dataclass
class EnvEstimate:
    distance: np.ndarray  # (B,)
    d_distance_do: np.ndarray  # (B, 6)
    point: np.ndarray  # (B, 3)
    d_point_do: np.ndarray  # (B, 3, 6)


def env_estimate(env_scene, samples_body, x, theta, delta):
    """Softmin distance and contact point between object surface samples and the environment."""
    x = np.asarray(x, float).reshape(-1, 3)
    R = quat_to_matrix(np.asarray(theta, float)).reshape(-1, 3, 3)
    B = len(x)
    pts = np.einsum("bij,nj->bni", R, samples_body) + x[:, None]
    ev = evaluate_scene(pts, env_scene, np.zeros((B, 3)), np.broadcast_to(np.eye(3), (B, 3, 3)), hessian=False)
    g_b = np.einsum("bji,bnj->bni", R, ev.grad)
    dphi = np.concatenate([ev.grad, np.cross(samples_body[None], g_b)], axis=-1)  # (B,N,6)
    h = softmin_weights(ev.phi, delta)
    Phi = np.einsum("bn,bn->b", h, ev.phi)
    dh = -delta * h[:, :, None] * (dphi - np.einsum("bn,bnv->bv", h, dphi)[:, None])
    dPhi = np.einsum("bn,bnv->bv", h, dphi) + np.einsum("bn,bnv->bv", ev.phi, dh)
    c = np.einsum("bn,bni->bi", h, pts)
    dp = np.zeros(pts.shape + (6,))
    dp[..., :3] = np.eye(3)
    dp[..., 3:] = -np.einsum("bij,njk->bnik", R, skew(samples_body))
    dc = np.einsum("bn,bniv->biv", h, dp) + np.einsum("bni,bnv->biv", pts, dh)
    return EnvEstimate(Phi, dPhi, c, dc)


def env_contact(env):
    """Object-environment softmin distance, to be driven to zero (m)."""
    return ConstraintEval(env.distance[:, None], {"o0": env.d_distance_do[:, None]}, "eq")


def region(est, x, theta, anchor_body, radius=0.02):
    """Keep the finger contact within ``radius`` of a body-frame anchor point (m)."""
    R = quat_to_matrix(theta)
    a = np.asarray(anchor_body, float)
    d = est.point - (np.einsum("bij,j->bi", R, a) + x)
    nrm = _smooth_norm(d)
    u = d / nrm[:, None]
    dd_o = est.d_point_do.copy()
    dd_o[:, :, :3] -= np.eye(3)
    dd_o[:, :, 3:] += R @ skew(a)
    jac = {"q0": np.einsum("bi,biv->bv", u, est.d_point_dq)[:, None], "o0": np.einsum("bi,biv->bv", u, dd_o)[:, None]}
    return ConstraintEval((nrm - radius)[:, None], jac, "ineq")


def ablation_tracking(chain, q, x, theta, link, tip_local, p_hat):
    """Fingertip point minus its recorded object-frame location mapped to the world (m)."""
    q = np.asarray(q, float).reshape(-1, chain.n_q)
    fk = forward_kinematics(chain, q)
    links = np.array([link])
    tip = link_points_world(fk, links, np.asarray(tip_local, float)[None])
    J = points_jacobian(chain, fk, links, tip)[:, 0]
    R = quat_to_matrix(theta)
    p_hat = np.asarray(p_hat, float)
    res = tip[:, 0] - (np.einsum("bij,j->bi", R, p_hat) + x)
    B = len(q)
    do = np.zeros((B, 3, 6))
    do[:, :, :3] = -np.eye(3)
    do[:, :, 3:] = R @ skew(p_hat)
    return ConstraintEval(res, {"q0": J, "o0": do}, "eq")
