"""Quaternion and SO(3) helpers.

Quaternions are stored scalar-first (w, x, y, z). All functions broadcast over
leading dimensions. Orientation perturbations are body-frame: a tangent vector
``d`` acts as ``R -> R @ expm(skew(d))``.
"""

import numpy as np

_EPS = 1e-12


def skew(v):
    """Cross-product matrix ``[v]x`` for vectors of shape (..., 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a, b):
    """Hamilton product ``a ⊗ b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q):
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion with non-negative scalar part."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for k, m in enumerate(flat):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            out[k] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        else:
            i = int(np.argmax(np.diag(m)))
            j, l = (i + 1) % 3, (i + 2) % 3
            s = 2.0 * np.sqrt(1.0 + m[i, i] - m[j, j] - m[l, l])
            v = np.empty(3)
            v[i] = 0.25 * s
            v[j] = (m[j, i] + m[i, j]) / s
            v[l] = (m[l, i] + m[i, l]) / s
            out[k] = [(m[l, j] - m[j, l]) / s, *v]
        if out[k, 0] < 0:
            out[k] = -out[k]
    return quat_normalize(out.reshape(R.shape[:-2] + (4,)))


def quat_exp(v):
    """Unit quaternion of the rotation vector ``v``."""
    v = np.asarray(v, dtype=float)
    a = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * a
    # sin(a/2)/a, series near zero
    k = np.where(a > 1e-8, np.sin(half) / np.where(a > 1e-8, a, 1.0), 0.5 - a * a / 48.0)
    return np.concatenate([np.cos(half), k * v], axis=-1)


def quat_log(q):
    """Rotation vector of a unit quaternion, on the branch with angle <= pi."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0, -q, q)
    w = np.clip(q[..., :1], -1.0, 1.0)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    ang = 2.0 * np.arctan2(s, w)
    k = np.where(s > 1e-12, ang / np.where(s > 1e-12, s, 1.0), 2.0 / np.maximum(w, _EPS))
    return k * v


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    return quat_exp(axis * np.asarray(angle, dtype=float)[..., None])


def quat_rotate(q, v):
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), v)


def retract(theta, d):
    """Body-frame retraction ``theta ⊗ exp(d)``, renormalized."""
    return quat_normalize(quat_mul(theta, quat_exp(d)))


def rotation_angle(q):
    """Angle (rad) of the rotation represented by ``q``, in [0, pi]."""
    return np.linalg.norm(quat_log(q), axis=-1)


def relative_angle(a, b):
    """Geodesic angle between two orientations, ``|log(a^-1 ⊗ b)|``."""
    return rotation_angle(quat_mul(quat_conj(a), b))


def slerp(a, b, s):
    """Spherical interpolation from ``a`` (s=0) to ``b`` (s=1) along the short arc."""
    a = quat_normalize(a)
    b = quat_normalize(b)
    rel = quat_mul(quat_conj(a), b)
    s = np.asarray(s, dtype=float)[..., None]
    return quat_normalize(quat_mul(a, quat_exp(s * quat_log(rel))))


def _small_angle_coeffs(a):
    """(1 - cos a)/a^2 and (a - sin a)/a^3 with series fallbacks."""
    small = a < 1e-4
    safe = np.where(small, 1.0, a)
    c1 = np.where(small, 0.5 - a * a / 24.0, (1.0 - np.cos(safe)) / safe**2)
    c2 = np.where(small, 1.0 / 6.0 - a * a / 120.0, (safe - np.sin(safe)) / safe**3)
    return c1, c2


def right_jacobian(phi):
    """Right Jacobian of SO(3): ``log(exp(phi + e)) ≈ exp(phi) exp(J_r e)``."""
    phi = np.asarray(phi, dtype=float)
    a = np.linalg.norm(phi, axis=-1)[..., None, None]
    c1, c2 = _small_angle_coeffs(a)
    K = skew(phi)
    return np.eye(3) - c1 * K + c2 * (K @ K)


def right_jacobian_inv(phi):
    """Inverse right Jacobian: ``log(exp(phi) exp(e)) ≈ phi + J_r^-1(phi) e``."""
    phi = np.asarray(phi, dtype=float)
    a = np.linalg.norm(phi, axis=-1)[..., None, None]
    small = a < 1e-4
    safe = np.where(small, 1.0, a)
    coef = np.where(
        small,
        1.0 / 12.0 + a * a / 720.0,
        1.0 / safe**2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    K = skew(phi)
    return np.eye(3) + 0.5 * K + coef * (K @ K)


def left_jacobian_inv(phi):
    """Inverse left Jacobian: ``log(exp(e) exp(phi)) ≈ phi + J_l^-1(phi) e``."""
    return right_jacobian_inv(-np.asarray(phi, dtype=float))
