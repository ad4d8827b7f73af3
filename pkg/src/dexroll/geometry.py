"""Analytic signed distance fields for boxes, cylinders, spheres and their unions.

Distances are negative inside. Every query also returns gradients with respect
to the world-frame query point and to the object pose, where the orientation
gradient lives in the body-frame rotation tangent space (see
:mod:`dexroll.rotations`).
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .rotations import quat_normalize, quat_to_matrix, skew

KINDS = ("sphere", "box", "cylinder")

# points closer than this to a medial set / primitive tie are flagged
NONSMOOTH_TOL = 1e-9


def _as_quat(q):
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != 4:
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) >= 1e-9):
        raise ValueError("quaternion is not unit norm (tolerance 1e-9)")
    return q


@dataclass(frozen=True)
class ObjectPose:
    """Object position ``x`` (m, world) and orientation ``theta`` (wxyz quaternion).

    Both fields may carry a leading batch dimension.
    """

    x: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "theta", _as_quat(self.theta))

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @property
    def rotation(self):
        return quat_to_matrix(self.theta)

    def transform(self, p_body):
        """Map body-frame points to the world frame."""
        R = self.rotation
        return np.einsum("...ij,...j->...i", R, p_body) + self.x


@dataclass(frozen=True)
class Primitive:
    """A primitive shape placed in the object body frame.

    ``size`` holds ``(radius,)`` for spheres, half extents ``(hx, hy, hz)`` for
    boxes and ``(radius, half_length)`` for z-aligned cylinders.
    """

    kind: str
    size: np.ndarray
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        size = np.atleast_1d(np.asarray(self.size, dtype=float))
        expected = {"sphere": 1, "box": 3, "cylinder": 2}[self.kind]
        if size.shape != (expected,):
            raise ValueError(f"{self.kind} needs {expected} dimensions, got {size.shape}")
        if np.any(size <= 0):
            raise ValueError("primitive dimensions must be strictly positive")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "quat", _as_quat(np.asarray(self.quat, dtype=float).reshape(4)))

    @classmethod
    def sphere(cls, radius, position=(0, 0, 0), quat=(1, 0, 0, 0)):
        return cls("sphere", [radius], np.asarray(position, float), np.asarray(quat, float))

    @classmethod
    def box(cls, half_extents, position=(0, 0, 0), quat=(1, 0, 0, 0)):
        return cls("box", half_extents, np.asarray(position, float), np.asarray(quat, float))

    @classmethod
    def cylinder(cls, radius, half_length, position=(0, 0, 0), quat=(1, 0, 0, 0)):
        return cls("cylinder", [radius, half_length], np.asarray(position, float), np.asarray(quat, float))

    @property
    def rotation(self):
        return quat_to_matrix(self.quat)

    def to_dict(self):
        dims = {
            "sphere": lambda s: {"radius": s[0]},
            "box": lambda s: {"half_extents": list(s)},
            "cylinder": lambda s: {"radius": s[0], "half_length": s[1]},
        }[self.kind](self.size.tolist())
        return {
            "kind": self.kind,
            "dimensions": dims,
            "pose": {"xyz": self.position.tolist(), "quat_wxyz": self.quat.tolist()},
        }

    @classmethod
    def from_dict(cls, d):
        dims = d["dimensions"]
        pose = d.get("pose", {})
        pos = pose.get("xyz", [0.0, 0.0, 0.0])
        quat = quat_normalize(np.asarray(pose.get("quat_wxyz", [1.0, 0.0, 0.0, 0.0]), float))
        kind = d["kind"]
        if kind == "sphere":
            return cls.sphere(dims["radius"], pos, quat)
        if kind == "box":
            return cls.box(dims["half_extents"], pos, quat)
        if kind == "cylinder":
            return cls.cylinder(dims["radius"], dims["half_length"], pos, quat)
        raise ValueError(f"unknown primitive kind {kind!r}")


@dataclass(frozen=True)
class SdfScene:
    """Union of primitives; the composite distance is the hard min over members."""

    primitives: Sequence[Primitive]

    def __post_init__(self):
        prims = tuple(self.primitives)
        if not prims:
            raise ValueError("scene needs at least one primitive")
        object.__setattr__(self, "primitives", prims)

    def __len__(self):
        return len(self.primitives)

    def to_list(self):
        return [p.to_dict() for p in self.primitives]

    @classmethod
    def from_list(cls, items):
        return cls([Primitive.from_dict(d) for d in items])


# --- local (primitive-frame) distance functions --------------------------------
# Each returns phi (M,), grad (M,3), hess (M,3,3) and a nonsmooth mask (M,).


def _sphere_local(p, size):
    r = size[0]
    d = np.linalg.norm(p, axis=-1)
    bad = d < 1e-12
    safe = np.where(bad, 1.0, d)
    g = np.where(bad[:, None], np.array([0.0, 0.0, 1.0]), p / safe[:, None])
    H = (np.eye(3) - g[:, :, None] * g[:, None, :]) / safe[:, None, None]
    H[bad] = 0.0
    return d - r, g, H, bad


def _box_local(p, size):
    s = np.where(p >= 0, 1.0, -1.0)
    q = np.abs(p) - size
    qmax = q.max(axis=-1)
    outside = qmax > 0
    u = np.maximum(q, 0.0)
    L = np.linalg.norm(u, axis=-1)
    Lsafe = np.where(outside, L, 1.0)
    g_out = s * u / Lsafe[:, None]
    act = (q > 0).astype(float)
    H_out = (act[:, :, None] * np.eye(3) - g_out[:, :, None] * g_out[:, None, :]) / Lsafe[:, None, None]

    k = np.argmax(q, axis=-1)
    g_in = np.zeros_like(p)
    g_in[np.arange(len(p)), k] = s[np.arange(len(p)), k]
    qs = np.sort(q, axis=-1)
    medial = (~outside) & (qs[:, 2] - qs[:, 1] < NONSMOOTH_TOL)

    phi = np.where(outside, L, qmax)
    g = np.where(outside[:, None], g_out, g_in)
    H = np.where(outside[:, None, None], H_out, 0.0)
    return phi, g, H, medial


def _cylinder_local(p, size):
    r, h = size
    rho = np.hypot(p[:, 0], p[:, 1])
    axis_pt = rho < 1e-12
    rsafe = np.where(axis_pt, 1.0, rho)
    e = np.zeros_like(p)
    e[:, 0] = np.where(axis_pt, 1.0, p[:, 0] / rsafe)
    e[:, 1] = np.where(axis_pt, 0.0, p[:, 1] / rsafe)
    sz = np.where(p[:, 2] >= 0, 1.0, -1.0)
    ez = np.zeros_like(p)
    ez[:, 2] = sz
    d0 = rho - r
    d1 = np.abs(p[:, 2]) - h
    outside = np.maximum(d0, d1) > 0

    Pxy = np.zeros((len(p), 3, 3))
    Pxy[:, 0, 0] = Pxy[:, 1, 1] = 1.0
    Pxy = (Pxy - e[:, :, None] * e[:, None, :]) / rsafe[:, None, None]

    u0 = np.maximum(d0, 0.0)
    u1 = np.maximum(d1, 0.0)
    L = np.hypot(u0, u1)
    Lsafe = np.where(outside, L, 1.0)
    g_out = (u0[:, None] * e + u1[:, None] * ez) / Lsafe[:, None]
    a0 = (d0 > 0).astype(float)[:, None, None]
    a1 = (d1 > 0).astype(float)[:, None, None]
    outer = a0 * e[:, :, None] * e[:, None, :] + a1 * ez[:, :, None] * ez[:, None, :]
    H_out = (u0 / Lsafe)[:, None, None] * Pxy + (outer - g_out[:, :, None] * g_out[:, None, :]) / Lsafe[:, None, None]

    radial = d0 > d1
    g_in = np.where(radial[:, None], e, ez)
    H_in = np.where(radial[:, None, None], Pxy, 0.0)

    phi = np.where(outside, L, np.maximum(d0, d1))
    g = np.where(outside[:, None], g_out, g_in)
    H = np.where(outside[:, None, None], H_out, H_in)
    nonsmooth = axis_pt | ((~outside) & (np.abs(d0 - d1) < NONSMOOTH_TOL))
    return phi, g, H, nonsmooth


_LOCAL = {"sphere": _sphere_local, "box": _box_local, "cylinder": _cylinder_local}


class SceneEval(NamedTuple):
    """Batched scene query result; shapes use ``(B, N)`` leading dims."""

    phi: np.ndarray  # (B, N)
    index: np.ndarray  # (B, N) active primitive
    grad: np.ndarray  # (B, N, 3) world-frame dphi/dp
    hess: np.ndarray  # (B, N, 3, 3) world-frame d2phi/dp2 (None if not requested)
    p_body: np.ndarray  # (B, N, 3)
    grad_body: np.ndarray  # (B, N, 3)
    hess_body: np.ndarray  # (B, N, 3, 3) (None if not requested)
    R: np.ndarray  # (B, 3, 3) object rotation
    nonsmooth: np.ndarray  # (B, N)

    @property
    def grad_x(self):
        return -self.grad

    @property
    def grad_theta(self):
        """Body-frame orientation gradient ``g_b x p_b``."""
        return np.cross(self.grad_body, self.p_body)

    @property
    def grad_pose(self):
        """(B, N, 6) gradient w.r.t. (position, body-frame rotation)."""
        return np.concatenate([self.grad_x, self.grad_theta], axis=-1)

    def grad_pose_of_grad(self):
        """d(world grad)/d(pose): (B, N, 3, 6); needs the Hessian."""
        dgx = -self.hess
        # d g_w / d delta = R (-[g_b]x + H_b [p_b]x)
        inner = -skew(self.grad_body) + self.hess_body @ skew(self.p_body)
        dgt = np.einsum("bij,bnjk->bnik", self.R, inner)
        return np.concatenate([dgx, dgt], axis=-1)


def evaluate_scene(points, scene, x, R, hessian=True):
    """Query the union SDF at world points ``(B, N, 3)`` for poses ``x (B,3)``, ``R (B,3,3)``."""
    points = np.asarray(points, dtype=float)
    B, N, _ = points.shape
    p_obj = np.einsum("bji,bnj->bni", R, points - x[:, None, :])
    flat = p_obj.reshape(-1, 3)
    K = len(scene)
    phis = np.empty((K, B * N))
    grads = np.empty((K, B * N, 3))
    hesses = np.empty((K, B * N, 3, 3)) if hessian else None
    ns = np.empty((K, B * N), dtype=bool)
    for k, prim in enumerate(scene.primitives):
        Rk = prim.rotation
        pk = (flat - prim.position) @ Rk
        phi, g, H, bad = _LOCAL[prim.kind](pk, prim.size)
        phis[k] = phi
        grads[k] = g @ Rk.T
        if hessian:
            hesses[k] = Rk @ H @ Rk.T
        ns[k] = bad
    idx = np.argmin(phis, axis=0)
    cols = np.arange(B * N)
    phi = phis[idx, cols]
    if K > 1:
        part = np.partition(phis, 1, axis=0)
        tie = part[1] - part[0] < NONSMOOTH_TOL
    else:
        tie = np.zeros(B * N, dtype=bool)
    g_b = grads[idx, cols].reshape(B, N, 3)
    H_b = hesses[idx, cols].reshape(B, N, 3, 3) if hessian else None
    nonsmooth = (ns[idx, cols] | tie).reshape(B, N)
    g_w = np.einsum("bij,bnj->bni", R, g_b)
    H_w = np.einsum("bij,bnjk,blk->bnil", R, H_b, R) if hessian else None
    return SceneEval(phi.reshape(B, N), idx.reshape(B, N), g_w, H_w, p_obj, g_b, H_b, R, nonsmooth)


def _single_query(p, scene, pose, hessian=False):
    p = np.asarray(p, dtype=float)
    pts = p.reshape(1, -1, 3)
    x = np.asarray(pose.x, float).reshape(1, 3)
    R = quat_to_matrix(np.asarray(pose.theta, float)).reshape(1, 3, 3)
    return evaluate_scene(pts, scene, x, R, hessian=hessian), p.shape[:-1]


def primitive_sdf(p, prim, pose):
    """Signed distance (m) from world point(s) ``p`` to a single primitive."""
    ev, shape = _single_query(p, SdfScene([prim]), pose)
    return ev.phi.reshape(shape)[()]


def scene_sdf(p, scene, pose):
    """Composite distance and index of the active (nearest) primitive."""
    ev, shape = _single_query(p, scene, pose)
    return ev.phi.reshape(shape)[()], ev.index.reshape(shape)[()]


class SdfGradients(NamedTuple):
    d_point: np.ndarray
    d_position: np.ndarray
    d_orientation: np.ndarray
    nonsmooth: np.ndarray


def scene_sdf_gradients(p, scene, pose):
    """Gradients of the composite SDF w.r.t. point, object position and orientation.

    At non-smooth loci (interior medial sets, primitive ties) the active-branch
    subgradient is returned and ``nonsmooth`` is set.
    """
    ev, shape = _single_query(p, scene, pose)
    return SdfGradients(
        ev.grad.reshape(shape + (3,)),
        ev.grad_x.reshape(shape + (3,)),
        ev.grad_theta.reshape(shape + (3,)),
        ev.nonsmooth.reshape(shape)[()],
    )
