"""Trajectory error metrics: absolute RMSE, relative errors and pose NEES.

Orientations are JPL ``q_GtoI`` quaternions, one row per frame.  No
trajectory alignment is applied: every robot starts from its true pose, so
errors are reported in the world frame directly.
"""

from __future__ import annotations

import numpy as np

from ..errors import LengthMismatch
from ..geom import quat_to_rot_batch

DEFAULT_SEGMENTS = (8.0, 16.0, 24.0, 32.0, 40.0, 48.0)


def _check(*arrays):
    n = {len(a) for a in arrays}
    if len(n) != 1:
        raise LengthMismatch(f"series lengths differ: {sorted(n)}")


def _quat_diff(q_a, q_b):
    """Vector part and scalar of ``q_a (x) q_b^-1`` for stacked unit quaternions."""
    va, wa = q_a[:, :3], q_a[:, 3]
    vb, wb = q_b[:, :3], q_b[:, 3]
    v = wb[:, None] * va - wa[:, None] * vb - np.cross(va, vb)
    w = np.einsum("ki,ki->k", q_a, q_b)
    return v, w


def rotation_angles(q_est, q_true) -> np.ndarray:
    """Angle (rad) of ``R_est^T R_true`` for each frame."""
    q_est = np.asarray(q_est, dtype=float)
    q_true = np.asarray(q_true, dtype=float)
    _check(q_est, q_true)
    v, w = _quat_diff(q_true, q_est)
    return 2.0 * np.arctan2(np.linalg.norm(v, axis=1), np.abs(w))


def position_errors(p_est, p_true) -> np.ndarray:
    p_est = np.asarray(p_est, dtype=float)
    p_true = np.asarray(p_true, dtype=float)
    _check(p_est, p_true)
    return np.linalg.norm(p_true - p_est, axis=1)


def rmse(q_est, p_est, q_true, p_true) -> tuple[float, float]:
    """Orientation RMSE in degrees and position RMSE in meters."""
    _check(q_est, p_est, q_true, p_true)
    if len(q_est) == 0:
        raise LengthMismatch("empty series")
    ang = rotation_angles(q_est, q_true)
    pos = position_errors(p_est, p_true)
    return float(np.degrees(np.sqrt(np.mean(ang ** 2)))), float(np.sqrt(np.mean(pos ** 2)))


def pose_errors(q_est, p_est, q_true, p_true) -> np.ndarray:
    """Error states ``[dtheta, dp]`` (n,6) with ``truth = estimate (+) error``."""
    _check(q_est, p_est, q_true, p_true)
    v, w = _quat_diff(np.asarray(q_true, dtype=float), np.asarray(q_est, dtype=float))
    # q_true = dq (x) q_est with dq ~ [dtheta / 2, 1]; the ratio is sign-free
    dtheta = 2.0 * v / w[:, None]
    return np.hstack([dtheta, np.asarray(p_true, dtype=float) - np.asarray(p_est, dtype=float)])


def nees_series(q_est, p_est, P_pose, q_true, p_true) -> np.ndarray:
    """Pose NEES per frame; ``P_pose`` holds the (n,6,6) orientation-position covariances."""
    _check(q_est, P_pose)
    e = pose_errors(q_est, p_est, q_true, p_true)
    return np.einsum("ki,ki->k", e, np.linalg.solve(np.asarray(P_pose, dtype=float), e[:, :, None])[:, :, 0])


def traveled_distance(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])


def relative_errors(q_est, p_est, q_true, p_true, segments=DEFAULT_SEGMENTS) -> dict:
    """Relative orientation (deg) and position (m) errors over traveled-distance segments.

    Every frame starts a segment that ends at the first frame at least
    ``L`` meters further along the true path.  Returns
    ``{L: {"roe": array, "rpe": array}}``; a segment length longer than the
    whole path gives empty arrays.
    """
    _check(q_est, p_est, q_true, p_true)
    q_est, p_est = np.asarray(q_est, dtype=float), np.asarray(p_est, dtype=float)
    q_true, p_true = np.asarray(q_true, dtype=float), np.asarray(p_true, dtype=float)
    dist = traveled_distance(p_true)
    R_est = quat_to_rot_batch(q_est) if len(q_est) else np.zeros((0, 3, 3))
    R_true = quat_to_rot_batch(q_true) if len(q_true) else np.zeros((0, 3, 3))
    out = {}
    for L in segments:
        i = np.arange(len(dist))
        j = np.searchsorted(dist, dist + float(L), side="left")
        ok = j < len(dist)
        i, j = i[ok], j[ok]
        # relative motion expressed in the start frame
        d_est = np.einsum("kab,kb->ka", R_est[i], p_est[j] - p_est[i])
        d_true = np.einsum("kab,kb->ka", R_true[i], p_true[j] - p_true[i])
        rel_est = R_est[j] @ np.transpose(R_est[i], (0, 2, 1))
        rel_true = R_true[j] @ np.transpose(R_true[i], (0, 2, 1))
        D = np.transpose(rel_est, (0, 2, 1)) @ rel_true
        c = np.clip((np.trace(D, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
        # the skew part keeps small angles accurate
        s = 0.5 * np.linalg.norm(np.stack([D[:, 2, 1] - D[:, 1, 2], D[:, 0, 2] - D[:, 2, 0],
                                           D[:, 1, 0] - D[:, 0, 1]], axis=1), axis=1)
        out[float(L)] = {"roe": np.degrees(np.arctan2(s, c)), "rpe": np.linalg.norm(d_est - d_true, axis=1)}
    return out
