"""Smooth ground-truth trajectories and IMU synthesis.

Positions use a cubic interpolating spline (C2), orientations scipy's
``RotationSpline``.  scipy represents the body-to-world rotation with a
Hamilton scalar-last quaternion, which has the same four components as the
JPL ``q_GtoI`` used by the filter.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation, RotationSpline

from ..errors import OutOfRange
from ..geom import quat_normalize
from ..propagate import NoiseConfig


def _rz(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class TrajectorySpline:
    """Pose trajectory with analytic velocity, acceleration and body rate.

    ``offset`` shifts positions by a constant vector in G; ``yaw_offset``
    (radians) rotates the body about its own z axis, so the orientation
    relative to the base trajectory is constant.
    """

    def __init__(self, times, positions, quats_GtoI, offset=(0.0, 0.0, 0.0), yaw_offset=0.0):
        self.times = np.asarray(times, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("control timestamps must increase")
        self.positions = np.asarray(positions, dtype=float)
        self.quats = np.asarray(quats_GtoI, dtype=float)
        self._pos = CubicSpline(self.times, self.positions, axis=0)
        self._rot = RotationSpline(self.times, Rotation.from_quat(self.quats))
        self.offset = np.asarray(offset, dtype=float)
        self.yaw_offset = float(yaw_offset)
        self._R_body = _rz(self.yaw_offset)

    @property
    def t_min(self) -> float:
        return float(self.times[0])

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def with_offset(self, offset, yaw_offset) -> "TrajectorySpline":
        return TrajectorySpline(self.times, self.positions, self.quats,
                                self.offset + np.asarray(offset, dtype=float), self.yaw_offset + yaw_offset)

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t_min - 1e-12) or np.any(t > self.t_max + 1e-12):
            raise OutOfRange(f"time outside trajectory support [{self.t_min}, {self.t_max}]")
        return np.clip(t, self.t_min, self.t_max)

    def position(self, t):
        return self._pos(self._check(t)) + self.offset

    def velocity(self, t):
        return self._pos(self._check(t), 1)

    def acceleration(self, t):
        return self._pos(self._check(t), 2)

    def R_ItoG(self, t):
        return self._rot(self._check(t)).as_matrix() @ self._R_body

    def q_GtoI(self, t):
        R = self.R_ItoG(t)
        q = Rotation.from_matrix(R).as_quat()
        if q.ndim == 1:
            return quat_normalize(q)
        return np.array([quat_normalize(x) for x in q])

    def omega(self, t):
        """Angular rate in the body frame."""
        w = self._rot(self._check(t), 1)
        return w @ self._R_body  # R_body^T w for each row


def figure_eight(duration=60.0, period=20.0, a=5.0, b=2.5, height=1.5, control_rate=20.0) -> TrajectorySpline:
    """Horizontal figure-eight with the body x axis along the direction of travel.

    Small roll and pitch oscillations keep all rotation axes excited.
    """
    w = 2 * np.pi / period
    # margin so the spline is well behaved at both ends
    t = np.arange(-1.0, duration + 1.0 + 1e-9, 1.0 / control_rate)
    p = np.column_stack([a * np.sin(w * t), b * np.sin(2 * w * t), height + 0.3 * np.sin(3 * w * t)])
    v = np.column_stack([a * w * np.cos(w * t), 2 * b * w * np.cos(2 * w * t), 0.9 * w * np.cos(3 * w * t)])
    yaw = np.unwrap(np.arctan2(v[:, 1], v[:, 0]))
    roll = 0.08 * np.sin(1.3 * w * t)
    pitch = 0.06 * np.sin(2.1 * w * t + 0.4)
    R_ItoG = Rotation.from_euler("ZYX", np.column_stack([yaw, pitch, roll]))
    return TrajectorySpline(t, p, R_ItoG.as_quat())


def load_tum(path) -> TrajectorySpline:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines (body-to-world orientation)."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.replace(",", " ").split()]
            if len(vals) != 8:
                raise ValueError(f"TUM line needs 8 values, got {len(vals)}")
            rows.append(vals)
    data = np.array(rows)
    data = data[np.argsort(data[:, 0])]
    keep = np.r_[True, np.diff(data[:, 0]) > 0]
    data = data[keep]
    q = data[:, 4:8]
    # keep consecutive quaternions in the same hemisphere
    for k in range(1, len(q)):
        if q[k] @ q[k - 1] < 0:
            q[k] = -q[k]
    return TrajectorySpline(data[:, 0] - data[0, 0], data[:, 1:4], q)


def write_tum(fh, times, positions, quats_GtoI, fmt=".9f"):
    for t, p, q in zip(times, positions, quats_GtoI):
        vals = [t, *p, *q]
        fh.write(" ".join(format(float(v), fmt) for v in vals) + "\n")


def build_trajectories(base: TrajectorySpline, offsets) -> list[TrajectorySpline]:
    """One trajectory per ``[x, y, z, yaw_deg]`` offset; robot 0 usually gets zeros."""
    out = []
    for off in offsets:
        off = np.asarray(off, dtype=float)
        if not np.all(np.isfinite(off)):
            raise ValueError("offsets must be finite")
        out.append(base.with_offset(off[:3], np.deg2rad(off[3])))
    return out


def sample_imu(traj: TrajectorySpline, t0, t1, rate, noise: NoiseConfig | None = None,
               rng_noise=None, rng_bias=None, bias0=None):
    """Synthesize IMU readings on ``[t0, t1]`` at ``rate``.

    Returns ``(t, w_m, a_m, bg, ba)`` where ``bg``/``ba`` are the true biases
    at each sample.  Without generators (or with zero sigmas) the readings are
    noiseless and the biases stay at ``bias0``.
    """
    if t0 < traj.t_min - 1e-12 or t1 > traj.t_max + 1e-12 or t1 < t0:
        raise OutOfRange(f"[{t0}, {t1}] outside trajectory support")
    n = int(round((t1 - t0) * rate)) + 1
    t = t0 + np.arange(n) / rate
    noise = noise or NoiseConfig(0.0, 0.0, 0.0, 0.0)
    g = noise.gravity
    R = traj.R_ItoG(t)  # (n,3,3)
    w = traj.omega(t)
    a = np.einsum("kji,kj->ki", R, traj.acceleration(t) + g)
    bg0, ba0 = (np.zeros(3), np.zeros(3)) if bias0 is None else (np.asarray(bias0[0]), np.asarray(bias0[1]))
    bg = np.tile(bg0, (n, 1))
    ba = np.tile(ba0, (n, 1))
    sq = np.sqrt(rate)
    if rng_bias is not None and (noise.sigma_wg > 0 or noise.sigma_wa > 0):
        steps_g = rng_bias.normal(size=(n - 1, 3)) * noise.sigma_wg / sq
        steps_a = rng_bias.normal(size=(n - 1, 3)) * noise.sigma_wa / sq
        bg[1:] += np.cumsum(steps_g, axis=0)
        ba[1:] += np.cumsum(steps_a, axis=0)
    w_m = w + bg
    a_m = a + ba
    if rng_noise is not None:
        w_m = w_m + rng_noise.normal(size=(n, 3)) * noise.sigma_g * sq
        a_m = a_m + rng_noise.normal(size=(n, 3)) * noise.sigma_a * sq
    return t, w_m, a_m, bg, ba
