"""Quaternion, rotation and 3D line algebra.

Conventions
-----------
Quaternions are JPL, scalar-last numpy arrays ``[x, y, z, w]``.  A quaternion
``q_GtoI`` describes the *frame* rotation from G to I, so that
``quat_to_rot(q_GtoI) @ p_G`` expresses a G-frame vector in I.  Products
compose like rotation matrices::

    quat_to_rot(quat_multiply(a, b)) == quat_to_rot(a) @ quat_to_rot(b)

Orientation errors are applied on the left, ``q = dq (x) q_hat`` with
``dq ~ [dtheta / 2, 1]``, which gives ``R ~ (I - [dtheta x]) R_hat``.

The JPL rotation matrix of ``q`` is the transpose of the Hamilton rotation
matrix built from the same four numbers; code that talks to libraries using
the Hamilton convention (scipy, TUM files) relies on that identity.

Every function that returns a quaternion normalizes it and flips its sign so
that ``w >= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLine

EPS_DEGENERATE = 1e-8

_I3 = np.eye(3)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def omega_matrix(w) -> np.ndarray:
    """4x4 matrix with ``q_dot = 0.5 * omega_matrix(w) @ q``."""
    w = np.asarray(w, dtype=float)
    out = np.zeros((4, 4))
    out[:3, :3] = -skew(w)
    out[:3, 3] = w
    out[3, :3] = -w
    return out


def quat_identity() -> np.ndarray:
    return np.array([0.0, 0.0, 0.0, 1.0])


def _unit_positive(x, y, z, w) -> np.ndarray:
    n = math.sqrt(x * x + y * y + z * z + w * w)
    if w < 0:
        n = -n
    return np.array([x / n, y / n, z / n, w / n])


def quat_normalize(q) -> np.ndarray:
    x, y, z, w = (float(v) for v in q)
    return _unit_positive(x, y, z, w)


def quat_multiply(a, b) -> np.ndarray:
    # scalar floats are much cheaper than numpy ops on 4-vectors
    ax, ay, az, aw = a.tolist() if isinstance(a, np.ndarray) else a
    bx, by, bz, bw = b.tolist() if isinstance(b, np.ndarray) else b
    return _unit_positive(aw * bx + bw * ax - (ay * bz - az * by),
                          aw * by + bw * ay - (az * bx - ax * bz),
                          aw * bz + bw * az - (ax * by - ay * bx),
                          aw * bw - (ax * bx + ay * by + az * bz))


def quat_inverse(q) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_to_rot(q) -> np.ndarray:
    x, y, z, w = q.tolist() if isinstance(q, np.ndarray) else q
    # (2w^2 - 1) I - 2w [v x] + 2 v v^T, expanded
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y + z * w), 2 * (x * z - y * w)],
        [2 * (x * y - z * w), 1 - 2 * (x * x + z * z), 2 * (y * z + x * w)],
        [2 * (x * z + y * w), 2 * (y * z - x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_to_rot_batch(Q) -> np.ndarray:
    """Rotation matrices (n,3,3) for stacked quaternions (n,4)."""
    x, y, z, w = np.asarray(Q, dtype=float).T
    R = np.empty((len(x), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y + z * w)
    R[:, 0, 2] = 2 * (x * z - y * w)
    R[:, 1, 0] = 2 * (x * y - z * w)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z + x * w)
    R[:, 2, 0] = 2 * (x * z + y * w)
    R[:, 2, 1] = 2 * (y * z - x * w)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rot_to_quat(R) -> np.ndarray:
    """JPL quaternion ``q`` with ``quat_to_rot(q) == R``."""
    # Shepperd's method on R^T, whose Hamilton quaternion is our JPL one.
    m = np.asarray(R, dtype=float).T
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
             (m[1, 0] - m[0, 1]) / s, 0.25 * s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s,
             (m[2, 1] - m[1, 2]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s,
             (m[0, 2] - m[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s,
             (m[1, 0] - m[0, 1]) / s]
    return quat_normalize(q)


def small_angle_quat(dtheta) -> np.ndarray:
    """First-order error quaternion ``[dtheta / 2, 1]``, renormalized."""
    x, y, z = (0.5 * float(v) for v in dtheta)
    return _unit_positive(x, y, z, 1.0)


def small_angle_from_quat(dq) -> np.ndarray:
    """Exact inverse of :func:`small_angle_quat`."""
    dq = quat_normalize(dq)
    return 2.0 * dq[:3] / dq[3]


def quat_from_rotvec(phi) -> np.ndarray:
    """Exact JPL quaternion with ``quat_to_rot(q) == expm(-[phi x])``."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    if angle < 1e-12:
        return small_angle_quat(phi)
    out = np.empty(4)
    out[:3] = np.sin(0.5 * angle) * phi / angle
    out[3] = np.cos(0.5 * angle)
    return quat_normalize(out)


def quat_to_rotvec(q) -> np.ndarray:
    q = quat_normalize(q)
    sin_half = np.linalg.norm(q[:3])
    if sin_half < 1e-12:
        return 2.0 * q[:3]
    angle = 2.0 * np.arctan2(sin_half, q[3])
    return angle * q[:3] / sin_half


def rotation_angle(R) -> float:
    """Angle in radians of a rotation matrix."""
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# --------------------------------------------------------------------------
# lines


@dataclass(frozen=True)
class PluckerLine:
    """Line with normal ``n = p x v`` of its plane through the origin."""

    n: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float)
        v = np.asarray(self.v, dtype=float)
        vn = np.linalg.norm(v)
        if vn <= EPS_DEGENERATE:
            raise DegenerateLine("zero line direction")
        if abs(n @ v) > 1e-9 * max(np.linalg.norm(n) * vn, 1e-12):
            raise DegenerateLine("normal not perpendicular to direction")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "v", v)

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.n) / np.linalg.norm(self.v))

    def normalized(self) -> "PluckerLine":
        """Scale so that ``|v| = 1``; then ``n = d * n_e``."""
        s = np.linalg.norm(self.v)
        return PluckerLine(self.n / s, self.v / s)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.n, self.v])


@dataclass(frozen=True)
class CPLine:
    """Closest-Point line ``d * q``.

    ``quat_to_rot(q)`` has columns ``[n_e, v_e, n_e x v_e]``.  ``flagged``
    marks a line whose distance had to be clamped at zero by a retraction;
    such lines should be rejected by the caller.
    """

    q: np.ndarray
    d: float
    flagged: bool = False

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "d", float(self.d))

    @property
    def x(self) -> np.ndarray:
        """Stored product form ``d * q``."""
        return self.d * self.q

    @classmethod
    def from_vector(cls, x) -> "CPLine":
        x = np.asarray(x, dtype=float)
        d = float(np.linalg.norm(x))
        if d == 0.0:
            raise DegenerateLine("product form cannot encode a zero-distance line")
        return cls(x / d, d)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.q)

    @property
    def n_e(self) -> np.ndarray:
        return self.rotation[:, 0]

    @property
    def v_e(self) -> np.ndarray:
        return self.rotation[:, 1]

    def point(self) -> np.ndarray:
        """Closest point of the line to the origin, ``v_e x (d n_e)``."""
        M = self.rotation
        return -self.d * M[:, 2]


def plucker_from_points(p1, p2, eps=EPS_DEGENERATE) -> PluckerLine:
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    v = p2 - p1
    if np.linalg.norm(v) <= eps:
        raise DegenerateLine("line endpoints coincide")
    return PluckerLine(np.cross(p1, p2), v)


def _perpendicular_unit(v_e) -> np.ndarray:
    # first canonical axis not parallel to v_e
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        c = np.cross(v_e, e)
        if np.linalg.norm(c) > 1e-6:
            return c / np.linalg.norm(c)
    raise DegenerateLine("no perpendicular axis")  # unreachable for unit v_e


def cp_from_plucker(L: PluckerLine) -> CPLine:
    vn = np.linalg.norm(L.v)
    if vn <= EPS_DEGENERATE:
        raise DegenerateLine("zero line direction")
    v_e = L.v / vn
    nn = np.linalg.norm(L.n)
    if nn <= 1e-12 * vn:
        n_e = _perpendicular_unit(v_e)
        d = 0.0
    else:
        n_e = L.n / nn
        d = nn / vn
    # re-orthogonalize so the triad is a rotation to machine precision
    n_e = n_e - (n_e @ v_e) * v_e
    n_e /= np.linalg.norm(n_e)
    M = np.column_stack([n_e, v_e, np.cross(n_e, v_e)])
    return CPLine(rot_to_quat(M), d)


def plucker_from_cp(c: CPLine) -> PluckerLine:
    M = quat_to_rot(c.q)
    return PluckerLine(c.d * M[:, 0], M[:, 1])


def cp_boxplus(c: CPLine, e) -> CPLine:
    """Retract a 4-vector ``[dtheta, dd]`` onto ``c``.

    Negative distances are clamped to zero and the result is flagged.
    """
    e = np.asarray(e, dtype=float)
    q = quat_multiply(small_angle_quat(e[:3]), c.q)
    d = c.d + e[3]
    if d < 0.0:
        return CPLine(q, 0.0, flagged=True)
    return CPLine(q, d, flagged=c.flagged)


_FLIP = np.diag([-1.0, -1.0, 1.0])


def cp_flip(c: CPLine) -> CPLine:
    """Same geometric line with the direction reversed."""
    return CPLine(rot_to_quat(quat_to_rot(c.q) @ _FLIP), c.d, c.flagged)


def cp_align(ref: CPLine, c: CPLine) -> CPLine:
    """Representation of ``c`` whose direction agrees in sign with ``ref``."""
    if ref.v_e @ c.v_e < 0:
        return cp_flip(c)
    return c


def cp_boxminus(a: CPLine, b: CPLine) -> np.ndarray:
    """``e`` with ``cp_boxplus(b, e) == a``.

    The direction sign of ``b`` is aligned with ``a`` first, so the result is
    a property of the two geometric lines.  Left-multiplicative errors mean
    the rotation part has the same meaning for both representations.
    """
    b = cp_align(a, b)
    dq = quat_multiply(a.q, quat_inverse(b.q))
    out = np.empty(4)
    out[:3] = small_angle_from_quat(dq)
    out[3] = a.d - b.d
    return out


def cp_plucker_jacobian(c: CPLine) -> np.ndarray:
    """6x4 Jacobian of the normalized Plucker vector ``[d n_e; v_e]``."""
    M = quat_to_rot(c.q)
    n_e, v_e = M[:, 0], M[:, 1]
    J = np.zeros((6, 4))
    J[:3, :3] = c.d * skew(n_e)
    J[:3, 3] = n_e
    J[3:, :3] = skew(v_e)
    return J
