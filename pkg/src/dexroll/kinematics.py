"""Serial-chain kinematics for a hand made of independent revolute fingers.

Every joint owns the link that follows it, so link indices and joint indices
coincide. Joints are numbered finger by finger in declaration order.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np

from .rotations import quat_normalize, quat_to_matrix

GRAVITY = 9.8


@dataclass
class Joint:
    name: str
    axis: np.ndarray
    origin_xyz: np.ndarray
    origin_quat: np.ndarray
    lower: float
    upper: float
    u_lower: float = -0.1
    u_upper: float = 0.1
    mass: float = 0.0
    com: np.ndarray = field(default_factory=lambda: np.zeros(3))
    link: Optional[str] = None

    def __post_init__(self):
        self.axis = np.asarray(self.axis, float)
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValueError(f"joint {self.name}: axis must be unit norm")
        self.origin_xyz = np.asarray(self.origin_xyz, float)
        self.origin_quat = quat_normalize(np.asarray(self.origin_quat, float))
        self.com = np.asarray(self.com, float)
        if not self.lower < self.upper:
            raise ValueError(f"joint {self.name}: need lower < upper")
        if not self.u_lower < self.u_upper:
            raise ValueError(f"joint {self.name}: need u_lower < u_upper")
        if self.mass < 0:
            raise ValueError(f"joint {self.name}: negative link mass")
        if self.link is None:
            self.link = self.name + "_link"


@dataclass
class Finger:
    name: str
    base_xyz: np.ndarray
    base_quat: np.ndarray
    joints: List[Joint]

    def __post_init__(self):
        self.base_xyz = np.asarray(self.base_xyz, float)
        self.base_quat = quat_normalize(np.asarray(self.base_quat, float))


class KinematicChain:
    """A fixed-base hand: independent revolute fingers."""

    def __init__(self, fingers, name="hand"):
        self.name = name
        self.fingers = list(fingers)
        self.joints = [j for f in self.fingers for j in f.joints]
        self.finger_slices = []
        start = 0
        for f in self.fingers:
            self.finger_slices.append(slice(start, start + len(f.joints)))
            start += len(f.joints)
        self.link_names = [j.link for j in self.joints]
        if len(set(self.link_names)) != len(self.link_names):
            raise ValueError("link names must be unique")
        self.link_finger = np.concatenate(
            [np.full(len(f.joints), i) for i, f in enumerate(self.fingers)]
        ).astype(int)
        self.q_min = np.array([j.lower for j in self.joints])
        self.q_max = np.array([j.upper for j in self.joints])
        self.u_min = np.array([j.u_lower for j in self.joints])
        self.u_max = np.array([j.u_upper for j in self.joints])
        self.masses = np.array([j.mass for j in self.joints])
        self.coms = np.array([j.com for j in self.joints]).reshape(-1, 3)

    @property
    def n_q(self):
        return len(self.joints)

    def link_index(self, name):
        return self.link_names.index(name)

    def finger_index(self, name):
        return [f.name for f in self.fingers].index(name)

    # -- serialization ---------------------------------------------------------
    def to_dict(self):
        return {
            "name": self.name,
            "fingers": [
                {
                    "name": f.name,
                    "base": {"xyz": f.base_xyz.tolist(), "quat_wxyz": f.base_quat.tolist()},
                    "joints": [
                        {
                            "name": j.name,
                            "axis": j.axis.tolist(),
                            "origin": {"xyz": j.origin_xyz.tolist(), "quat_wxyz": j.origin_quat.tolist()},
                            "limits": [j.lower, j.upper],
                            "delta_limits": [j.u_lower, j.u_upper],
                            "link": {"name": j.link, "mass": j.mass, "com": j.com.tolist()},
                        }
                        for j in f.joints
                    ],
                }
                for f in self.fingers
            ],
        }

    @classmethod
    def from_dict(cls, d):
        fingers = []
        for fd in d["fingers"]:
            joints = []
            for jd in fd["joints"]:
                link = jd.get("link", {})
                origin = jd.get("origin", {})
                dl = jd.get("delta_limits", [-0.1, 0.1])
                joints.append(
                    Joint(
                        name=jd["name"],
                        axis=jd["axis"],
                        origin_xyz=origin.get("xyz", [0.0, 0.0, 0.0]),
                        origin_quat=origin.get("quat_wxyz", [1.0, 0.0, 0.0, 0.0]),
                        lower=jd["limits"][0],
                        upper=jd["limits"][1],
                        u_lower=dl[0],
                        u_upper=dl[1],
                        mass=link.get("mass", 0.0),
                        com=link.get("com", [0.0, 0.0, 0.0]),
                        link=link.get("name"),
                    )
                )
            base = fd.get("base", {})
            fingers.append(
                Finger(fd["name"], base.get("xyz", [0.0, 0.0, 0.0]), base.get("quat_wxyz", [1.0, 0.0, 0.0, 0.0]), joints)
            )
        return cls(fingers, name=d.get("name", "hand"))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


class FKResult(NamedTuple):
    """Batched link frames; ``(B, n_links, ...)``."""

    link_pos: np.ndarray
    link_rot: np.ndarray
    joint_axis: np.ndarray  # world-frame joint axes
    joint_pos: np.ndarray  # world-frame joint origins


def _check_q(chain, q):
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != chain.n_q:
        raise ValueError(f"expected {chain.n_q} joint values, got {q.shape[-1]}")
    return q


def _axis_angle_matrix(axis, angle):
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def forward_kinematics(chain, q):
    """World pose of every link for joint vector(s) ``q`` of shape ``(n_q,)`` or ``(B, n_q)``."""
    q = _check_q(chain, q)
    single = q.ndim == 1
    qb = q.reshape(-1, chain.n_q)
    B = qb.shape[0]
    n = chain.n_q
    pos = np.empty((B, n, 3))
    rot = np.empty((B, n, 3, 3))
    axes = np.empty((B, n, 3))
    jpos = np.empty((B, n, 3))
    for f, sl in zip(chain.fingers, chain.finger_slices):
        P = np.broadcast_to(f.base_xyz, (B, 3)).copy()
        Rm = np.broadcast_to(quat_to_matrix(f.base_quat), (B, 3, 3)).copy()
        for k, j in zip(range(sl.start, sl.stop), f.joints):
            P = P + Rm @ j.origin_xyz
            Rm = Rm @ quat_to_matrix(j.origin_quat)
            axes[:, k] = Rm @ j.axis
            jpos[:, k] = P
            Rm = Rm @ _axis_angle_matrix(j.axis, qb[:, k])
            pos[:, k] = P
            rot[:, k] = Rm
    res = FKResult(pos, rot, axes, jpos)
    if single:
        return FKResult(*(a[0] for a in res))
    return res


def _on_path(chain):
    """Boolean (n_links, n_q): joint k moves link l."""
    n = chain.n_q
    m = np.zeros((n, n), dtype=bool)
    for sl in chain.finger_slices:
        for l in range(sl.start, sl.stop):
            m[l, sl.start : l + 1] = True
    return m


def points_jacobian(chain, fk, links, p_world):
    """Positional Jacobians of world points rigidly attached to ``links``.

    ``fk`` is a batched :class:`FKResult`, ``links`` an int array (N,) and
    ``p_world`` has shape (B, N, 3). Returns (B, N, 3, n_q).
    """
    mask = _on_path(chain)[np.asarray(links)]  # (N, n_q)
    lever = p_world[:, :, None, :] - fk.joint_pos[:, None, :, :]  # (B,N,n_q,3)
    cols = np.cross(fk.joint_axis[:, None, :, :], lever)  # (B,N,n_q,3)
    cols = cols * mask[None, :, :, None]
    return np.swapaxes(cols, -1, -2)


def points_jacobian_derivative(chain, fk, links, J):
    """Derivative of point Jacobians: ``dJ[..., a, k, m] = d J[a, k] / d q_m``.

    For revolute chains: ``dJ_k/dq_m = w_m x J_k`` when joint m precedes or
    equals k, and ``w_k x J_m`` otherwise (both on the point's path).
    """
    w = fk.joint_axis  # (B, n_q, 3)
    mask = _on_path(chain)[np.asarray(links)]  # (N, m)
    Jc = np.swapaxes(J, -1, -2)  # (B,N,n_q,3) columns
    # A[b,n,k,m] = w_m x J_k ; Bt[b,n,k,m] = w_k x J_m
    A = np.cross(w[:, None, None, :, :], Jc[:, :, :, None, :])
    Bt = np.cross(w[:, None, :, None, :], Jc[:, :, None, :, :])
    n = chain.n_q
    m_le_k = np.tril(np.ones((n, n), dtype=bool))  # [k, m]: m <= k
    out = np.where(m_le_k[None, None, :, :, None], A, Bt)  # (B,N,k,m,3)
    out = out * (mask[:, :, None] & mask[:, None, :])[None, :, :, :, None]
    return np.moveaxis(out, -1, 2)  # (B,N,3,k,m)


def point_jacobian(chain, q, link, p_local):
    """3 x n_q positional Jacobian of a link-frame point."""
    q = _check_q(chain, q)
    if not 0 <= link < chain.n_q:
        raise ValueError(f"link {link} not in chain")
    fk = forward_kinematics(chain, q.reshape(1, -1))
    p_w = fk.link_rot[:, link] @ np.asarray(p_local, float) + fk.link_pos[:, link]
    return points_jacobian(chain, fk, np.array([link]), p_w[:, None, :])[0, 0]


def link_points_world(fk, links, p_local):
    """World coordinates (B, N, 3) of link-frame points."""
    R = fk.link_rot[:, links]  # (B,N,3,3)
    return np.einsum("bnij,nj->bni", R, p_local) + fk.link_pos[:, links]


def gravity_torque(chain, q):
    """Generalized gravity force ``sum_l J_com,l^T (m_l g_down)`` (N m)."""
    q = _check_q(chain, q)
    single = q.ndim == 1
    qb = q.reshape(-1, chain.n_q)
    if not np.any(chain.masses):
        out = np.zeros_like(qb)
        return out[0] if single else out
    fk = forward_kinematics(chain, qb)
    links = np.arange(chain.n_q)
    com_w = link_points_world(fk, links, chain.coms)
    J = points_jacobian(chain, fk, links, com_w)  # (B,L,3,n)
    f = chain.masses[:, None] * np.array([0.0, 0.0, -GRAVITY])  # (L,3)
    out = np.einsum("blan,la->bn", J, f)
    return out[0] if single else out


def gravity_torque_jacobian(chain, q):
    """d tau_g / d q, shape (B, n_q, n_q)."""
    qb = _check_q(chain, q).reshape(-1, chain.n_q)
    B = qb.shape[0]
    if not np.any(chain.masses):
        return np.zeros((B, chain.n_q, chain.n_q))
    fk = forward_kinematics(chain, qb)
    links = np.arange(chain.n_q)
    com_w = link_points_world(fk, links, chain.coms)
    J = points_jacobian(chain, fk, links, com_w)
    dJ = points_jacobian_derivative(chain, fk, links, J)  # (B,L,3,k,m)
    f = chain.masses[:, None] * np.array([0.0, 0.0, -GRAVITY])
    return np.einsum("blakm,la->bkm", dJ, f)


def potential_energy(chain, q):
    """Gravitational potential ``sum m g z_com`` (J); used as a test oracle."""
    qb = _check_q(chain, q).reshape(-1, chain.n_q)
    fk = forward_kinematics(chain, qb)
    com_w = link_points_world(fk, np.arange(chain.n_q), chain.coms)
    return np.einsum("l,bl->b", chain.masses * GRAVITY, com_w[..., 2])
