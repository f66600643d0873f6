"""Rotation helpers: axis-angle maps, SO(3) Jacobians and quaternion algebra.

Everything is vectorized over leading dimensions. Quaternions are stored
scalar-first, ``(w, x, y, z)``.
"""
import numpy as np

_SMALL = 1e-4


def skew(v):
    """Cross-product matrices ``[v]x`` for ``v`` of shape (..., 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _coefficients(theta):
    # sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with Taylor branches near zero
    t2 = theta * theta
    small = theta < _SMALL
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(safe)) / safe**2)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (safe - np.sin(safe)) / safe**3)
    return a, b, c


def rodrigues(aa):
    """Rotation matrices from axis-angle vectors, shape (..., 3) -> (..., 3, 3)."""
    aa = np.asarray(aa, dtype=float)
    theta = np.linalg.norm(aa, axis=-1)
    a, b, _ = _coefficients(theta)
    K = skew(aa)
    K2 = K @ K
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def right_jacobian(aa):
    """Right Jacobian of SO(3): ``R(a + da) ~= R(a) exp(J_r(a) da)``."""
    aa = np.asarray(aa, dtype=float)
    theta = np.linalg.norm(aa, axis=-1)
    _, b, c = _coefficients(theta)
    K = skew(aa)
    return np.eye(3) - b[..., None, None] * K + c[..., None, None] * (K @ K)


def left_jacobian(aa):
    """Left Jacobian of SO(3): ``R(a + da) ~= exp(J_l(a) da) R(a)``."""
    aa = np.asarray(aa, dtype=float)
    theta = np.linalg.norm(aa, axis=-1)
    _, b, c = _coefficients(theta)
    K = skew(aa)
    return np.eye(3) + b[..., None, None] * K + c[..., None, None] * (K @ K)


def rotate_jacobian(aa, p):
    """Derivative of ``R(aa) @ p`` with respect to ``aa``; shape (..., 3, 3)."""
    R = rodrigues(aa)
    return -R @ skew(p) @ right_jacobian(aa)


def axis_rotation(axis, angle):
    axis = np.asarray(axis, dtype=float)
    return rodrigues(axis * np.asarray(angle, dtype=float)[..., None])


def log_rotation(R):
    """Axis-angle vector of rotation matrices (angle in [0, pi])."""
    R = np.asarray(R, dtype=float)
    q = quat_from_matrix(R)
    return quat_log(q) * 2.0


# -- quaternions ---------------------------------------------------------------

def quat_mul(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pw, pv = p[..., :1], p[..., 1:]
    qw, qv = q[..., :1], q[..., 1:]
    w = pw * qw - np.sum(pv * qv, axis=-1, keepdims=True)
    v = pw * qv + qw * pv + np.cross(pv, qv)
    return np.concatenate([w, v], axis=-1)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_axis_angle(aa):
    aa = np.asarray(aa, dtype=float)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < _SMALL
    safe = np.where(small, 1.0, theta)
    s = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), s * aa], axis=-1)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
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


def quat_from_matrix(R):
    """Unit quaternions (w >= 0) from rotation matrices, Shepperd's method."""
    R = np.asarray(R, dtype=float)
    shape = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    tr = np.trace(R, axis1=1, axis2=2)
    diag = np.stack([R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    choice = np.argmax(np.concatenate([tr[:, None], diag], axis=1), axis=1)
    q = np.empty((R.shape[0], 4))
    for n in range(R.shape[0]):
        m = R[n]
        c = choice[n]
        if c == 0:
            s = 2.0 * np.sqrt(1.0 + tr[n])
            q[n] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif c == 1:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q[n] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif c == 2:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q[n] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q[n] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q[q[:, 0] < 0] *= -1.0
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(shape + (4,))


def quat_log(q):
    """Logarithm of unit quaternions as a pure 3-vector (half the rotation vector)."""
    q = np.asarray(q, dtype=float)
    w = np.clip(q[..., 0], -1.0, 1.0)
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1)
    half = np.arctan2(n, w)
    scale = np.where(n < 1e-12, 1.0, half / np.where(n < 1e-12, 1.0, n))
    return v * scale[..., None]


def quat_exp(v):
    """Exponential of pure quaternions given as 3-vectors."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    s = np.where(n < 1e-12, 1.0, np.sin(n) / np.where(n < 1e-12, 1.0, n))
    return np.concatenate([np.cos(n), s * v], axis=-1)


def euler_to_matrix(angles, order="xyz"):
    from scipy.spatial.transform import Rotation

    return Rotation.from_euler(order, np.asarray(angles, dtype=float)).as_matrix()


def matrix_to_euler(R, order="xyz"):
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_euler(order)
