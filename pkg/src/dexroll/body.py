"""Point-sampled finger geometry and softmin contact estimates.

A finger surface is represented by ``N`` points sampled uniformly on its mesh
in the owning link frame. Against an object SDF the points give, through a
softmin weighting, a differentiable distance, contact point, contact Jacobian
and contact normal. All derivatives w.r.t. joint angles and object pose are
assembled analytically by the chain rule.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .geometry import SdfScene, evaluate_scene
from .kinematics import forward_kinematics, link_points_world
from .rotations import quat_to_matrix

DEFAULT_DELTA = 1000.0
DEFAULT_POINTS = 512
MIN_POINTS = 32


class DegenerateNormalError(ValueError):
    """Softmin-averaged normal vanished (opposed normals cancelled)."""


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=int).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def areas(self):
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def without_degenerate(self, tol=1e-15):
        keep = self.areas() > tol
        return TriangleMesh(self.vertices, self.triangles[keep])

    def transformed(self, xyz=(0, 0, 0), quat=(1, 0, 0, 0)):
        R = quat_to_matrix(np.asarray(quat, float))
        return TriangleMesh(self.vertices @ R.T + np.asarray(xyz, float), self.triangles)


def load_obj(path):
    """Read the ``v``/``f`` records of a Wavefront OBJ file (polygons are fan-triangulated)."""
    verts, tris = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(c) for c in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            for k in range(1, len(idx) - 1):
                tris.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not tris:
        raise ValueError(f"{path}: no geometry found")
    return TriangleMesh(np.array(verts), np.array(tris)).without_degenerate()


def save_obj(mesh, path):
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def capsule_mesh(radius, half_length, n_seg=24, n_ring=8):
    """Closed capsule along the local x axis, centred at the origin."""
    verts = [[-half_length - radius, 0.0, 0.0]]
    rings = []
    # rear hemisphere, then front hemisphere; polar angle from -x to +x
    for side, sign in ((0, -1.0), (1, 1.0)):
        rng = range(1, n_ring + 1) if side == 0 else range(n_ring, 0, -1)
        for k in rng:
            a = 0.5 * np.pi * k / n_ring
            x0 = sign * (half_length + radius * np.cos(a))
            r = radius * np.sin(a)
            ring = []
            for s in range(n_seg):
                phi = 2 * np.pi * s / n_seg
                ring.append(len(verts))
                verts.append([x0, r * np.cos(phi), r * np.sin(phi)])
            rings.append(ring)
    verts.append([half_length + radius, 0.0, 0.0])
    tris = []
    for s in range(n_seg):
        tris.append([0, rings[0][(s + 1) % n_seg], rings[0][s]])
    for ra, rb in zip(rings[:-1], rings[1:]):
        for s in range(n_seg):
            t = (s + 1) % n_seg
            tris.append([ra[s], ra[t], rb[t]])
            tris.append([ra[s], rb[t], rb[s]])
    last = len(verts) - 1
    for s in range(n_seg):
        tris.append([last, rings[-1][s], rings[-1][(s + 1) % n_seg]])
    return TriangleMesh(np.array(verts), np.array(tris)).without_degenerate()


def sample_surface(mesh, n, seed):
    """``n`` area-uniform samples on a triangle mesh; deterministic per seed."""
    areas = mesh.areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def surface_samples_of_primitive(prim, n, seed):
    """Area-uniform samples on a primitive's surface, in the object body frame."""
    rng = np.random.default_rng(seed)
    if prim.kind == "sphere":
        v = rng.normal(size=(n, 3))
        pts = prim.size[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
    elif prim.kind == "box":
        hx, hy, hz = prim.size
        face_area = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
        face = rng.choice(6, size=n, p=face_area / face_area.sum())
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        ax = face // 2
        sgn = np.where(face % 2 == 0, 1.0, -1.0)
        for k in range(3):
            sel = ax == k
            o1, o2 = [i for i in range(3) if i != k]
            pts[sel, k] = sgn[sel] * prim.size[k]
            pts[sel, o1] = uv[sel, 0] * prim.size[o1]
            pts[sel, o2] = uv[sel, 1] * prim.size[o2]
    else:
        r, h = prim.size
        lateral = 2 * np.pi * r * 2 * h
        cap = np.pi * r * r
        part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
        ang = rng.uniform(0, 2 * np.pi, n)
        rad = np.where(part == 0, r, r * np.sqrt(rng.random(n)))
        z = np.where(part == 0, rng.uniform(-h, h, n), np.where(part == 1, h, -h))
        pts = np.stack([rad * np.cos(ang), rad * np.sin(ang), z], axis=1)
    return pts @ prim.rotation.T + prim.position


def _primitive_area(prim):
    if prim.kind == "sphere":
        return 4 * np.pi * prim.size[0] ** 2
    if prim.kind == "box":
        hx, hy, hz = prim.size
        return 8 * (hx * hy + hy * hz + hx * hz)
    r, h = prim.size
    return 2 * np.pi * r * 2 * h + 2 * np.pi * r * r


def surface_samples_of_scene(scene, n, seed):
    """Samples over all primitives of a scene, split in proportion to surface area."""
    areas = np.array([_primitive_area(p) for p in scene.primitives])
    counts = np.floor(n * areas / areas.sum()).astype(int)
    counts[np.argmax(areas)] += n - counts.sum()
    parts = [surface_samples_of_primitive(p, c, seed + 7919 * k) for k, (p, c) in enumerate(zip(scene.primitives, counts))]
    return np.concatenate(parts, axis=0)


@dataclass(frozen=True)
class FingerSamples:
    """Sampled surface of one finger: link-frame points and their owning link."""

    finger: int
    points: np.ndarray  # (N, 3) link frame
    links: np.ndarray  # (N,) global link index

    @property
    def n(self):
        return len(self.points)


class SampledBody:
    """Per-finger point sets, immutable after construction."""

    def __init__(self, fingers: Sequence[FingerSamples]):
        self.fingers: List[FingerSamples] = list(fingers)
        for fs in self.fingers:
            if fs.n < MIN_POINTS:
                raise ValueError(f"finger {fs.finger}: need at least {MIN_POINTS} points")
            fs.points.setflags(write=False)
            fs.links.setflags(write=False)

    def __len__(self):
        return len(self.fingers)

    @classmethod
    def from_meshes(cls, chain, bindings, n=DEFAULT_POINTS, seed=0):
        """``bindings``: list of (finger_index, link_index, TriangleMesh in link frame)."""
        out = []
        for k, (finger, link, mesh) in enumerate(bindings):
            if chain.link_finger[link] != finger:
                raise ValueError(f"link {link} does not belong to finger {finger}")
            pts = sample_surface(mesh, n, seed + 1009 * k)
            out.append(FingerSamples(finger, pts, np.full(n, link, dtype=int)))
        return cls(out)


def world_points(body, chain, q, finger=None, fk=None):
    """World-frame sample points; (B, N, 3) per finger, or a list over fingers."""
    q = np.asarray(q, float)
    if q.shape[-1] != chain.n_q:
        raise ValueError(f"expected {chain.n_q} joint values, got {q.shape[-1]}")
    single = q.ndim == 1
    if fk is None:
        fk = forward_kinematics(chain, q.reshape(-1, chain.n_q))
    sel = range(len(body)) if finger is None else [finger]
    out = [link_points_world(fk, body.fingers[i].links, body.fingers[i].points) for i in sel]
    if single:
        out = [o[0] for o in out]
    return out if finger is None else out[0]


def softmin_weights(distances, delta):
    """``h_j = exp(-delta d_j) / sum_k exp(-delta d_k)`` along the last axis."""
    if not delta > 0:
        raise ValueError("temperature must be positive")
    d = np.asarray(distances, dtype=float)
    z = -delta * (d - np.min(d, axis=-1, keepdims=True))
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class ContactEstimate:
    """Softmin contact quantities for one finger over a batch of states.

    Attribute shapes use a leading batch dimension ``B``. Derivatives w.r.t.
    the object pose are 6-vectors ``(dx, dtheta_body)``.
    """

    def __init__(self, n_q, cols, delta, h, phi, pts, J, dJ, dphi, g, dg, nonsmooth_pts):
        B = h.shape[0]
        nf = cols.stop - cols.start
        self.delta = delta
        self.cols = cols
        self.n_q = n_q
        self._nf = nf
        self._h = h
        self._phi = phi
        self._J = J  # (B,N,3,nf)
        self._dJ = dJ  # (B,N,3,nf,nf)
        self._dphi = dphi  # (B,N,V) V = nf + 6
        self.weights = h
        self.hard_min = phi.min(axis=1)
        self.hard_index = phi.argmin(axis=1)
        self.distance = np.einsum("bn,bn->b", h, phi)
        self.nonsmooth = np.any(nonsmooth_pts & (h > 1e-8), axis=1)
        self.jacobian = self._scatter_q(np.einsum("bn,bnik->bik", h, J))
        if dphi is None:
            self._values_only(pts, g)
            return
        # softmin derivative factor h_j (1 - delta (phi_j - Phi))
        self._dh = -delta * h[:, :, None] * (dphi - np.einsum("bn,bnv->bv", h, dphi)[:, None, :])
        dPhi = np.einsum("bn,bnv->bv", h, dphi) + np.einsum("bn,bnv->bv", phi, self._dh)
        self.point = np.einsum("bn,bni->bi", h, pts)
        dpts = np.zeros((B, pts.shape[1], 3, nf + 6))
        dpts[..., :nf] = J
        dc = np.einsum("bn,bniv->biv", h, dpts) + np.einsum("bni,bnv->biv", pts, self._dh)
        raw = np.einsum("bn,bni->bi", h, g)
        draw = np.einsum("bn,bniv->biv", h, dg) + np.einsum("bni,bnv->biv", g, self._dh)
        norm = np.linalg.norm(raw, axis=-1)
        if np.any(norm < 1e-6):
            raise DegenerateNormalError("softmin-averaged contact normal has vanishing norm")
        n = raw / norm[:, None]
        P = (np.eye(3) - n[:, :, None] * n[:, None, :]) / norm[:, None, None]
        dn = P @ draw
        self.raw_normal = raw
        self.normal = n
        self.d_distance_dq = self._scatter_q(dPhi[:, :nf])
        self.d_distance_do = dPhi[:, nf:]
        self.d_point_dq = self._scatter_q(dc[..., :nf])
        self.d_point_do = dc[..., nf:]
        self.d_normal_dq = self._scatter_q(dn[..., :nf])
        self.d_normal_do = dn[..., nf:]

    def _values_only(self, pts, g):
        """Fill values and zero derivatives (residual-only evaluations)."""
        h = self._h
        B = h.shape[0]
        self._dh = None
        self.point = np.einsum("bn,bni->bi", h, pts)
        raw = np.einsum("bn,bni->bi", h, g)
        norm = np.linalg.norm(raw, axis=-1)
        if np.any(norm < 1e-6):
            raise DegenerateNormalError("softmin-averaged contact normal has vanishing norm")
        self.raw_normal = raw
        self.normal = raw / norm[:, None]
        self.d_distance_dq = np.zeros((B, self.n_q))
        self.d_distance_do = np.zeros((B, 6))
        self.d_point_dq = np.zeros((B, 3, self.n_q))
        self.d_point_do = np.zeros((B, 3, 6))
        self.d_normal_dq = np.zeros((B, 3, self.n_q))
        self.d_normal_do = np.zeros((B, 3, 6))

    def subset(self, index):
        """Estimate restricted to a slice/index array of the batch dimension."""
        out = object.__new__(ContactEstimate)
        B = self._h.shape[0]
        for k, v in self.__dict__.items():
            if isinstance(v, np.ndarray) and v.ndim and v.shape[0] == B:
                v = v[index]
            setattr(out, k, v)
        return out

    def _scatter_q(self, a):
        out = np.zeros(a.shape[:-1] + (self.n_q,))
        out[..., self.cols] = a
        return out

    def _local_q(self, v):
        return np.asarray(v, float)[..., self.cols]

    def jv(self, v):
        """Contact-point velocity ``J_c v`` and its derivatives w.r.t. q and pose.

        ``v`` has shape (B, n_q). Returns (Jv (B,3), d/dq (B,3,n_q), d/do (B,3,6)).
        """
        vl = self._local_q(v)
        if self._dh is None:
            B = vl.shape[0]
            return np.einsum("bik,bk->bi", self.jacobian, np.asarray(v, float)), np.zeros((B, 3, self.n_q)), np.zeros((B, 3, 6))
        Jv_j = np.einsum("bnik,bk->bni", self._J, vl)
        Jv = np.einsum("bn,bni->bi", self._h, Jv_j)
        d = np.einsum("bni,bnv->biv", Jv_j, self._dh)
        d[..., : self._nf] += np.einsum("bn,bnikm,bk->bim", self._h, self._dJ, vl)
        return Jv, self._scatter_q(d[..., : self._nf]), d[..., self._nf :]

    def jtf(self, f):
        """Joint torque ``J_c^T f`` and derivatives; ``f`` has shape (B, 3).

        Returns (J^T f (B,n_q), d/dq (B,n_q,n_q), d/do (B,n_q,6)).
        """
        f = np.asarray(f, float)
        if self._dh is None:
            B = f.shape[0]
            return np.einsum("bik,bi->bk", self.jacobian, f), np.zeros((B, self.n_q, self.n_q)), np.zeros((B, self.n_q, 6))
        Jtf_j = np.einsum("bnik,bi->bnk", self._J, f)
        Jtf = np.einsum("bn,bnk->bk", self._h, Jtf_j)
        d = np.einsum("bnk,bnv->bkv", Jtf_j, self._dh)
        d[..., : self._nf] += np.einsum("bn,bnikm,bi->bkm", self._h, self._dJ, f)
        full = np.zeros(f.shape[:1] + (self.n_q, self.n_q))
        full[:, self.cols, self.cols] = d[..., : self._nf]
        do = np.zeros(f.shape[:1] + (self.n_q, 6))
        do[:, self.cols] = d[..., self._nf :]
        return self._scatter_q(Jtf), full, do


def _finger_jacobians(chain, fk, links, cols, p_world, second=True):
    """Finger-local point Jacobians (B,N,3,nf) and their q-derivatives (B,N,3,nf,nf).

    With ``second=False`` the derivatives are skipped and returned as None.
    """
    w = fk.joint_axis[:, cols]  # (B,nf,3)
    o = fk.joint_pos[:, cols]
    nf = w.shape[1]
    local_link = np.asarray(links) - cols.start  # (N,)
    on_path = np.arange(nf)[None, :] <= local_link[:, None]  # (N, nf)
    cols_v = np.cross(w[:, None], p_world[:, :, None, :] - o[:, None])  # (B,N,nf,3)
    cols_v = cols_v * on_path[None, :, :, None]
    if not second:
        return np.swapaxes(cols_v, -1, -2), None
    A = np.cross(w[:, None, None, :, :], cols_v[:, :, :, None, :])  # [k,m] w_m x J_k
    Bt = np.cross(w[:, None, :, None, :], cols_v[:, :, None, :, :])  # [k,m] w_k x J_m
    m_le_k = np.tril(np.ones((nf, nf), dtype=bool))
    dJ = np.where(m_le_k[None, None, :, :, None], A, Bt)
    dJ = dJ * (on_path[:, None, :] & on_path[:, :, None])[None, :, :, :, None]
    return np.swapaxes(cols_v, -1, -2), np.moveaxis(dJ, -1, 2)


def contact_estimate(body, finger, chain, q, scene, pose, delta=DEFAULT_DELTA, fk=None, derivatives=True):
    """Softmin distance, contact point, Jacobian and normal of ``finger`` against ``scene``.

    ``q`` is (n_q,) or (B, n_q); ``pose`` an :class:`~dexroll.geometry.ObjectPose`
    with matching batch shape. With ``derivatives=False`` only values are
    computed and every ``d_*`` attribute (and the derivative parts of
    :meth:`ContactEstimate.jv` / :meth:`ContactEstimate.jtf`) is zero.
    """
    q = np.asarray(q, float)
    qb = q.reshape(-1, chain.n_q)
    B = qb.shape[0]
    x = np.asarray(pose.x, float).reshape(-1, 3)
    R = quat_to_matrix(np.asarray(pose.theta, float)).reshape(-1, 3, 3)
    if len(x) != B:
        x = np.broadcast_to(x, (B, 3))
        R = np.broadcast_to(R, (B, 3, 3))
    if fk is None:
        fk = forward_kinematics(chain, qb)
    fs = body.fingers[finger]
    cols = chain.finger_slices[fs.finger]
    pts = link_points_world(fk, fs.links, fs.points)
    J, dJ = _finger_jacobians(chain, fk, fs.links, cols, pts, second=derivatives)
    ev = evaluate_scene(pts, scene, x, R, hessian=derivatives)
    if not derivatives:
        h = softmin_weights(ev.phi, delta)
        return ContactEstimate(chain.n_q, cols, delta, h, ev.phi, pts, J, None, None, ev.grad, None, ev.nonsmooth)
    nf = cols.stop - cols.start
    dphi = np.concatenate([np.einsum("bni,bnik->bnk", ev.grad, J), ev.grad_pose], axis=-1)
    dg = np.concatenate([ev.hess @ J, ev.grad_pose_of_grad()], axis=-1)
    h = softmin_weights(ev.phi, delta)
    return ContactEstimate(chain.n_q, cols, delta, h, ev.phi, pts, J, dJ, dphi, ev.grad, dg, ev.nonsmooth)


def hard_contacts(body, chain, q, scene, pose, fk=None):
    """Hard-min contact per finger: distance, world point, link, link-frame point, normal.

    Used by the rollout plant; ``q`` is a single configuration.
    """
    q = np.asarray(q, float).reshape(1, -1)
    if fk is None:
        fk = forward_kinematics(chain, q)
    x = np.asarray(pose.x, float).reshape(1, 3)
    R = quat_to_matrix(np.asarray(pose.theta, float)).reshape(1, 3, 3)
    out = []
    for fs in body.fingers:
        pts = link_points_world(fk, fs.links, fs.points)
        ev = evaluate_scene(pts, scene, x, R, hessian=False)
        j = int(np.argmin(ev.phi[0]))
        out.append(
            {
                "distance": float(ev.phi[0, j]),
                "point": pts[0, j],
                "link": int(fs.links[j]),
                "local": fs.points[j],
                "normal": ev.grad[0, j],
                "grad_pose": ev.grad_pose[0, j],
            }
        )
    return out
