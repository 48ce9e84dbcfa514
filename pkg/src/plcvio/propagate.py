"""IMU mean and covariance propagation.

The mean is integrated with RK4 over each IMU interval, with gyro and
accelerometer readings linearly interpolated between the two bounding
samples.  The error-state transition matrix is integrated alongside it from
``Phi_dot = F Phi`` using the same stages, so ``Phi`` is the sensitivity of
the discrete integrator.  The discrete noise is the midpoint approximation
``Phi(t1, tm) G Q G^T Phi(t1, tm)^T dt``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatch, NonMonotonicTime
from .geom import quat_multiply, quat_to_rot, skew, small_angle_quat
from .state import IMU_DIM, ImuState, RobotState, check_covariance

GRAVITY = np.array([0.0, 0.0, 9.81])
_I3 = np.eye(3)
_I15 = np.eye(IMU_DIM)


@dataclass(frozen=True)
class ImuSample:
    t: float
    w_m: np.ndarray
    a_m: np.ndarray


@dataclass(frozen=True)
class NoiseConfig:
    """Continuous-time noise densities; zero is allowed for noiseless runs."""

    sigma_g: float = 1.6968e-4
    sigma_a: float = 2.0e-3
    sigma_wg: float = 1.9393e-5
    sigma_wa: float = 3.0e-3
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_wg", "sigma_wa"):
            if not getattr(self, name) >= 0.0:
                raise ValueError(f"{name} must be non-negative")
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))

    @property
    def Qc(self) -> np.ndarray:
        """12x12 covariance of ``[n_g, n_wg, n_a, n_wa]``."""
        d = np.repeat([self.sigma_g, self.sigma_wg, self.sigma_a, self.sigma_wa], 3)
        return np.diag(d ** 2)


def as_arrays(samples):
    """Accept a list of :class:`ImuSample` or a ``(t, w, a)`` tuple of arrays."""
    if isinstance(samples, tuple):
        t, w, a = samples
        t = np.asarray(t, dtype=float)
        w = np.asarray(w, dtype=float).reshape(-1, 3)
        a = np.asarray(a, dtype=float).reshape(-1, 3)
    else:
        samples = list(samples)
        if not samples:
            raise EmptyBatch("no IMU samples")
        t = np.array([s.t for s in samples], dtype=float)
        w = np.array([s.w_m for s in samples], dtype=float).reshape(-1, 3)
        a = np.array([s.a_m for s in samples], dtype=float).reshape(-1, 3)
    if t.size == 0:
        raise EmptyBatch("no IMU samples")
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise NonMonotonicTime("IMU timestamps must be strictly increasing")
    return t, w, a


def select_interval(t, w, a, t0, t1):
    """Samples covering ``[t0, t1]``, with interpolated samples at both ends."""
    if t1 < t0:
        raise NonMonotonicTime(f"{t1} before {t0}")
    inner = (t > t0) & (t < t1)
    ts = np.concatenate([[t0], t[inner], [t1]]) if t1 > t0 else np.array([t0])
    ws = np.column_stack([np.interp(ts, t, w[:, k]) for k in range(3)])
    as_ = np.column_stack([np.interp(ts, t, a[:, k]) for k in range(3)])
    return ts, ws, as_


def build_F_G(imu: ImuState, sample: ImuSample):
    """Continuous error-state Jacobians at one bias-corrected reading."""
    R = quat_to_rot(imu.q_GtoI)
    return _F(R, sample.w_m - imu.bg, sample.a_m - imu.ba), _G(R)


def _F(R, w_hat, a_hat):
    # reference construction; the integrator fills the same entries in place
    F = np.zeros((15, 15))
    F[0:3, 0:3] = -skew(w_hat)
    F[0:3, 9:12] = -_I3
    F[3:6, 6:9] = _I3
    F[6:9, 0:3] = -R.T @ skew(a_hat)
    F[6:9, 12:15] = -R.T
    return F


def _G(R):
    G = np.zeros((15, 12))
    G[0:3, 0:3] = -_I3
    G[9:12, 3:6] = _I3
    G[6:9, 6:9] = -R.T
    G[12:15, 9:12] = _I3
    return G


def _deriv(q, v, w_hat, a_hat, g):
    # derivative of the mean; also returns R(q) for the error-state Jacobian
    out = np.empty(10)
    n = np.sqrt(q[0] ** 2 + q[1] ** 2 + q[2] ** 2 + q[3] ** 2)
    x, y, z, w = q[0] / n, q[1] / n, q[2] / n, q[3] / n
    R = np.empty((3, 3))
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y + z * w)
    R[0, 2] = 2 * (x * z - y * w)
    R[1, 0] = 2 * (x * y - z * w)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z + x * w)
    R[2, 0] = 2 * (x * z + y * w)
    R[2, 1] = 2 * (y * z - x * w)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    # 0.5 * Omega(w) q, written out
    out[0] = 0.5 * (q[3] * w_hat[0] - (w_hat[1] * q[2] - w_hat[2] * q[1]))
    out[1] = 0.5 * (q[3] * w_hat[1] - (w_hat[2] * q[0] - w_hat[0] * q[2]))
    out[2] = 0.5 * (q[3] * w_hat[2] - (w_hat[0] * q[1] - w_hat[1] * q[0]))
    out[3] = -0.5 * (w_hat[0] * q[0] + w_hat[1] * q[1] + w_hat[2] * q[2])
    out[4:7] = v
    out[7:10] = R.T @ a_hat - g
    return out, R


def _F_into(F, R, w_hat, a_hat):
    F[0, 1] = w_hat[2]
    F[0, 2] = -w_hat[1]
    F[1, 0] = -w_hat[2]
    F[1, 2] = w_hat[0]
    F[2, 0] = w_hat[1]
    F[2, 1] = -w_hat[0]
    Rt = R.T
    S = np.zeros((3, 3))
    S[0, 1] = -a_hat[2]
    S[0, 2] = a_hat[1]
    S[1, 0] = a_hat[2]
    S[1, 2] = -a_hat[0]
    S[2, 0] = -a_hat[1]
    S[2, 1] = a_hat[0]
    F[6:9, 0:3] = -(Rt @ S)
    F[6:9, 12:15] = -Rt


def _integrate_kernel(y0, bg, ba, t, w, a, g, Qc, with_phi):
    y = y0.copy()  # q (4), p (3), v (3)
    I15 = np.eye(15)
    Phi = np.eye(15)
    Qd = np.zeros((15, 15))
    F = np.zeros((15, 15))
    for k in range(3):
        F[k, 9 + k] = -1.0
        F[3 + k, 6 + k] = 1.0
    G = np.zeros((15, 12))
    for k in range(3):
        G[k, k] = -1.0
        G[9 + k, 3 + k] = 1.0
        G[12 + k, 9 + k] = 1.0
    for j in range(t.size - 1):
        h = t[j + 1] - t[j]
        w0 = w[j] - bg
        w1 = w[j + 1] - bg
        a0 = a[j] - ba
        a1 = a[j + 1] - ba
        wm = 0.5 * (w0 + w1)
        am = 0.5 * (a0 + a1)

        d1, R1 = _deriv(y[0:4], y[7:10], w0, a0, g)
        y2 = y + 0.5 * h * d1
        d2, R2 = _deriv(y2[0:4], y2[7:10], wm, am, g)
        y3 = y + 0.5 * h * d2
        d3, R3 = _deriv(y3[0:4], y3[7:10], wm, am, g)
        y4 = y + h * d3
        d4, R4 = _deriv(y4[0:4], y4[7:10], w1, a1, g)

        if with_phi:
            _F_into(F, R1, w0, a0)
            K1 = F.copy()
            _F_into(F, R2, wm, am)
            F2 = F.copy()
            K2 = F2 @ (I15 + 0.5 * h * K1)
            _F_into(F, R3, wm, am)
            K3 = F @ (I15 + 0.5 * h * K2)
            _F_into(F, R4, w1, a1)
            K4 = F @ (I15 + h * K3)
            Phi_j = I15 + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
            Fh = 0.5 * h * F2
            Phi_half = I15 + Fh + 0.5 * (Fh @ Fh)
            G[6:9, 6:9] = -R2.T
            Qd_j = (Phi_half @ (G @ Qc @ G.T) @ Phi_half.T) * h
            Qd = Phi_j @ Qd @ Phi_j.T + Qd_j
            Phi = Phi_j @ Phi

        y = y + (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
        n = np.sqrt(y[0] ** 2 + y[1] ** 2 + y[2] ** 2 + y[3] ** 2)
        y[0:4] = y[0:4] / n
    return y, Phi, Qd


try:
    import numba

    _deriv = numba.njit(cache=True)(_deriv)
    _F_into = numba.njit(cache=True)(_F_into)
    _integrate_kernel = numba.njit(cache=True)(_integrate_kernel)
except ImportError:  # pragma: no cover - numba is a declared dependency
    pass


def _integrate(imu: ImuState, t, w, a, g, Qc=None, with_phi=False):
    y0 = np.concatenate([imu.q_GtoI, imu.p_IinG, imu.v_IinG])
    if Qc is None:
        Qc = np.zeros((12, 12))
    y, Phi, Qd = _integrate_kernel(y0, imu.bg.astype(float), imu.ba.astype(float),
                                   np.ascontiguousarray(t, dtype=float),
                                   np.ascontiguousarray(w, dtype=float),
                                   np.ascontiguousarray(a, dtype=float),
                                   np.asarray(g, dtype=float), np.asarray(Qc, dtype=float),
                                   bool(with_phi))
    out = ImuState(y[0:4], y[4:7], y[7:10], imu.bg, imu.ba)
    if not with_phi:
        return out, None, None
    return out, Phi, Qd


def propagate_mean(imu: ImuState, samples, gravity=GRAVITY) -> ImuState:
    """Integrate from the first sample time to the last."""
    t, w, a = as_arrays(samples)
    out, _, _ = _integrate(imu, t, w, a, np.asarray(gravity, dtype=float))
    return out


def yaw_nullspace(q, p, v, gravity=GRAVITY) -> np.ndarray:
    """IMU error-state direction of a global rotation about gravity."""
    g = np.asarray(gravity, dtype=float)
    g = g / np.linalg.norm(g)
    n = np.zeros(IMU_DIM)
    n[0:3] = quat_to_rot(q) @ g
    n[3:6] = -skew(p) @ g
    n[6:9] = -skew(v) @ g
    return n


def fej_correction(imu: ImuState, fej, gravity=GRAVITY) -> np.ndarray:
    """Rank-one map taking the yaw nullspace at the first estimate to the
    one at the current estimate, and leaving global translations fixed.

    Right-multiplying the integrated transition matrix by it makes the
    propagation carry the unobservable directions evaluated at first
    estimates, which is what first-estimate Jacobians are for.
    """
    q0, p0, v0 = fej
    n_fej = yaw_nullspace(q0, p0, v0, gravity)
    n_cur = yaw_nullspace(imu.q_GtoI, imu.p_IinG, imu.v_IinG, gravity)
    a = np.zeros(IMU_DIM)
    a[0:3] = n_fej[0:3]  # unit norm, so a . n_fej = 1
    return _I15 + np.outer(n_cur - n_fej, a)


def propagate_covariance(state: RobotState, samples, noise: NoiseConfig, use_fej=False):
    """Propagate mean and covariance; returns ``(Phi, Qd, state')``.

    Clone and calibration cross-covariances are carried by ``Phi`` on the
    IMU side; clone-clone blocks are unchanged.
    """
    t, w, a = as_arrays(samples)
    imu_new, Phi, Qd = _integrate(state.imu, t, w, a, noise.gravity, noise.Qc, with_phi=True)
    if use_fej and "imu" in state.fej_values:
        Phi = Phi @ fej_correction(state.imu, state.fej_values["imu"], noise.gravity)
    out = state.copy()
    out.imu = imu_new
    P = state.cov
    n = P.shape[0]
    P_new = P.copy()
    P_new[:15, :15] = Phi @ P[:15, :15] @ Phi.T + Qd
    if n > 15:
        cross = Phi @ P[:15, 15:]
        P_new[:15, 15:] = cross
        P_new[15:, :15] = cross.T
    out.cov = check_covariance(P_new)
    out.fej_values["imu"] = (imu_new.q_GtoI.copy(), imu_new.p_IinG.copy(), imu_new.v_IinG.copy())
    return Phi, Qd, out


def error_between(a: ImuState, b: ImuState) -> np.ndarray:
    """15-vector ``e`` such that ``a = b (+) e`` (used by finite-difference checks)."""
    dq = quat_multiply(a.q_GtoI, np.array([-b.q_GtoI[0], -b.q_GtoI[1], -b.q_GtoI[2], b.q_GtoI[3]]))
    e = np.empty(15)
    e[0:3] = 2.0 * dq[:3] / dq[3]
    e[3:6] = a.p_IinG - b.p_IinG
    e[6:9] = a.v_IinG - b.v_IinG
    e[9:12] = a.bg - b.bg
    e[12:15] = a.ba - b.ba
    return e


def boxplus_imu(imu: ImuState, e) -> ImuState:
    e = np.asarray(e, dtype=float)
    return ImuState(quat_multiply(small_angle_quat(e[0:3]), imu.q_GtoI),
                    imu.p_IinG + e[3:6], imu.v_IinG + e[6:9], imu.bg + e[9:12], imu.ba + e[12:15])
