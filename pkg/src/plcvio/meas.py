"""Point and line measurement models, Jacobians and triangulation.

Points are measured in normalized image coordinates; lines by the signed
pixel distances of the two observed segment endpoints to the projected
infinite line.  Jacobians are derived by hand and checked against central
differences in the test suite.

The batch helpers (``*_batch``) take stacked clone rotations ``Rs`` (k,3,3)
and positions ``ps`` (k,3); the single-observation functions are thin
wrappers used by tests and external callers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import BehindCamera, DegenerateLine, DegenerateProjection, GateRejected, InsufficientParallax
from .geom import CPLine, PluckerLine, cp_boxplus, cp_from_plucker, quat_to_rot, skew

Z_MIN = 0.05
MIN_SEG_PX = 50.0
LINE_D_MIN = 0.1
LINE_D_MAX = 100.0
# reject a line when 1 - s2/s1 of the stacked plane matrix exceeds this
LINE_DISPARITY_GATE = 0.99
POINT_MAX_DEPTH = 200.0
PARALLAX_RATIO = 1e-9


@dataclass(frozen=True)
class CameraModel:
    fu: float = 458.0
    fv: float = 457.0
    cu: float = 367.0
    cv: float = 248.0
    width: int = 752
    height: int = 480
    sigma_px: float = 1.0

    def __post_init__(self):
        if not (self.fu > 0 and self.fv > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fu, 0.0, self.cu], [0.0, self.fv, self.cv], [0.0, 0.0, 1.0]])

    @property
    def K_line(self) -> np.ndarray:
        return np.array([
            [self.fv, 0.0, 0.0],
            [0.0, self.fu, 0.0],
            [-self.fv * self.cu, -self.fu * self.cv, self.fu * self.fv],
        ])

    def to_normalized(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cu) / self.fu, (uv[..., 1] - self.cv) / self.fv], axis=-1)

    def to_pixel(self, uv_n) -> np.ndarray:
        uv_n = np.asarray(uv_n, dtype=float)
        return np.stack([self.fu * uv_n[..., 0] + self.cu, self.fv * uv_n[..., 1] + self.cv], axis=-1)

    @property
    def sigma_normalized(self) -> float:
        return self.sigma_px / np.sqrt(self.fu * self.fv)


@dataclass(frozen=True)
class PointObservation:
    feature_id: int
    robot_id: int
    cam_timestamp: float
    uv_normalized: np.ndarray

    def __post_init__(self):
        uv = np.asarray(self.uv_normalized, dtype=float)
        if uv.shape != (2,) or not np.all(np.isfinite(uv)):
            raise ValueError("point observation must be a finite 2-vector")
        object.__setattr__(self, "uv_normalized", uv)


@dataclass(frozen=True)
class LineObservation:
    feature_id: int
    robot_id: int
    cam_timestamp: float
    x_s: np.ndarray
    x_e: np.ndarray

    def __post_init__(self):
        xs = _homogeneous(self.x_s)
        xe = _homogeneous(self.x_e)
        if np.allclose(xs, xe):
            raise ValueError("line endpoints coincide")
        object.__setattr__(self, "x_s", xs)
        object.__setattr__(self, "x_e", xe)

    @property
    def length_px(self) -> float:
        return float(np.linalg.norm(self.x_s[:2] - self.x_e[:2]))


def _homogeneous(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape == (2,):
        x = np.array([x[0], x[1], 1.0])
    if x.shape != (3,) or not np.all(np.isfinite(x)):
        raise ValueError("endpoint must be a finite (u, v[, 1]) vector")
    return x / x[2]


@dataclass
class TriangulatedFeature:
    kind: str  # "point" | "line"
    feature_id: int
    p_G: np.ndarray | None = None
    line_G: CPLine | None = None
    valid: bool = True
    reason: str | None = None
    timestamps: tuple = field(default_factory=tuple)

    @property
    def dim(self) -> int:
        return 3 if self.kind == "point" else 4

    def as_vector(self) -> np.ndarray:
        return self.p_G.copy() if self.kind == "point" else self.line_G.x


@dataclass
class Track:
    """Observations of one feature by one robot, stored as arrays.

    Points fill ``uv`` (k,2, normalized); lines fill ``xs`` and ``xe``
    (k,3, homogeneous pixels).
    """

    kind: str
    feature_id: int
    robot_id: int
    times: np.ndarray
    uv: np.ndarray | None = None
    xs: np.ndarray | None = None
    xe: np.ndarray | None = None

    def __len__(self):
        return len(self.times)

    @classmethod
    def from_observations(cls, observations) -> "Track":
        obs = list(observations)
        if not obs:
            raise ValueError("empty track")
        first = obs[0]
        if any(o.feature_id != first.feature_id for o in obs):
            raise ValueError("track mixes feature ids")
        times = np.array([o.cam_timestamp for o in obs])
        if isinstance(first, PointObservation):
            return cls("point", first.feature_id, first.robot_id, times,
                       uv=np.array([o.uv_normalized for o in obs]))
        return cls("line", first.feature_id, first.robot_id, times,
                   xs=np.array([o.x_s for o in obs]), xe=np.array([o.x_e for o in obs]))

    def observations(self) -> list:
        if self.kind == "point":
            return [PointObservation(self.feature_id, self.robot_id, t, uv) for t, uv in zip(self.times, self.uv)]
        return [LineObservation(self.feature_id, self.robot_id, t, a, b)
                for t, a, b in zip(self.times, self.xs, self.xe)]

    def subset(self, mask) -> "Track":
        pick = lambda a: None if a is None else a[mask]
        return Track(self.kind, self.feature_id, self.robot_id, self.times[mask],
                     pick(self.uv), pick(self.xs), pick(self.xe))


# --------------------------------------------------------------------------
# geometry helpers


def skew_batch(V) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    S = np.zeros(V.shape[:-1] + (3, 3))
    S[..., 0, 1] = -V[..., 2]
    S[..., 0, 2] = V[..., 1]
    S[..., 1, 0] = V[..., 2]
    S[..., 1, 2] = -V[..., 0]
    S[..., 2, 0] = -V[..., 1]
    S[..., 2, 1] = V[..., 0]
    return S


def camera_pose(clone, calib):
    """(R_GtoC, camera center in G) of a clone."""
    R = quat_to_rot(clone.q_GtoI)
    Rc = quat_to_rot(calib.q_ItoC)
    return Rc @ R, clone.p_IinG - R.T @ (Rc.T @ calib.p_IinC)


def project_point(p_C, z_min=Z_MIN) -> np.ndarray:
    p_C = np.asarray(p_C, dtype=float)
    if p_C[2] <= z_min:
        raise BehindCamera(f"depth {p_C[2]:.3g} <= {z_min}")
    return p_C[:2] / p_C[2]


def point_global_to_camera(p_G, clone, calib) -> np.ndarray:
    R = quat_to_rot(clone.q_GtoI)
    Rc = quat_to_rot(calib.q_ItoC)
    return Rc @ (R @ (np.asarray(p_G, dtype=float) - clone.p_IinG)) + calib.p_IinC


def line_global_to_camera(line_G: CPLine, clone, calib) -> np.ndarray:
    """Normalized Plucker vector ``[n; v]`` of the line in the camera frame."""
    R = quat_to_rot(clone.q_GtoI)
    Rc = quat_to_rot(calib.q_ItoC)
    L = plucker_6(line_G)
    T_GI = np.zeros((6, 6))
    T_GI[:3, :3] = R
    T_GI[:3, 3:] = -R @ skew(clone.p_IinG)
    T_GI[3:, 3:] = R
    T_IC = np.zeros((6, 6))
    T_IC[:3, :3] = Rc
    T_IC[:3, 3:] = skew(calib.p_IinC) @ Rc
    T_IC[3:, 3:] = Rc
    return T_IC @ (T_GI @ L)


def plucker_6(line: CPLine) -> np.ndarray:
    M = quat_to_rot(line.q)
    return np.concatenate([line.d * M[:, 0], M[:, 1]])


def project_line(line_G: CPLine, clone, calib, cam: CameraModel) -> np.ndarray:
    L_C = line_global_to_camera(line_G, clone, calib)
    l = cam.K_line @ L_C[:3]
    _check_line(l)
    return l


def _check_line(l):
    if l[0] ** 2 + l[1] ** 2 < 1e-12 * max(l @ l, 1e-300) or not np.any(l):
        raise DegenerateProjection("line passes through the optical center")


def line_residual(obs: LineObservation, l) -> np.ndarray:
    """Signed distances of the observed endpoints to the image line ``l``."""
    l = np.asarray(l, dtype=float)
    _check_line(l)
    s = np.hypot(l[0], l[1])
    return np.array([obs.x_s @ l, obs.x_e @ l]) / s


# --------------------------------------------------------------------------
# batched models and Jacobians


def point_predict_batch(Rs, ps, Rc, pc, p_G):
    """Normalized projections (k,2) and camera-frame points (k,3)."""
    u = np.einsum("kij,kj->ki", Rs, p_G - ps)
    pC = u @ Rc.T + pc
    return pC[:, :2] / pC[:, 2:3], pC


def point_jacobians_batch(Rs, ps, Rc, pc, p_G):
    """Jacobians of the normalized projection.

    Returns ``(H_clone (k,2,6), H_calib (k,2,6), H_f (k,2,3))`` with clone
    columns ``[dtheta, dp]`` and calibration columns ``[dtheta_c, dp_c]``.
    """
    u = np.einsum("kij,kj->ki", Rs, p_G - ps)
    pC = u @ Rc.T + pc
    z = pC[:, 2]
    k = pC.shape[0]
    dpi = np.zeros((k, 2, 3))
    dpi[:, 0, 0] = 1.0 / z
    dpi[:, 1, 1] = 1.0 / z
    dpi[:, 0, 2] = -pC[:, 0] / z ** 2
    dpi[:, 1, 2] = -pC[:, 1] / z ** 2
    RcR = np.einsum("ij,kjl->kil", Rc, Rs)
    H_clone = np.empty((k, 2, 6))
    H_clone[:, :, 0:3] = dpi @ (Rc @ skew_batch(u))
    H_clone[:, :, 3:6] = -(dpi @ RcR)
    H_calib = np.empty((k, 2, 6))
    H_calib[:, :, 0:3] = dpi @ skew_batch(pC - pc)
    H_calib[:, :, 3:6] = dpi
    H_f = dpi @ RcR
    return H_clone, H_calib, H_f


def _sk(v):
    S = np.zeros((3, 3))
    S[0, 1] = -v[2]
    S[0, 2] = v[1]
    S[1, 0] = v[2]
    S[1, 2] = -v[0]
    S[2, 0] = -v[1]
    S[2, 1] = v[0]
    return S


def _line_model(Rs, ps, Rc, pc, M, d, K_line, xs, xe, full):
    """Image lines, endpoint distances and Jacobians for every clone.

    Returns ``(ok, l, h, H_clone, H_calib, H_f)``; ``ok`` is False when some
    line passes through its optical center (distances are then undefined).
    """
    k = Rs.shape[0]
    n_e = M[:, 0].copy()
    v_e = M[:, 1].copy()
    n_G = d * n_e
    Jn = np.zeros((3, 4))
    Jn[:, :3] = d * _sk(n_e)
    Jn[:, 3] = n_e
    Jv = np.zeros((3, 4))
    Jv[:, :3] = _sk(v_e)
    Spc = _sk(pc)
    S_vG = _sk(v_e)
    ok = True
    L = np.zeros((k, 3))
    h = np.zeros((k, 2))
    Hc = np.zeros((k, 2, 6))
    Hk = np.zeros((k, 2, 6))
    Hf = np.zeros((k, 2, 4))
    dh_dl = np.zeros((2, 3))
    for j in range(k):
        R = Rs[j]
        m = n_G - np.cross(ps[j], v_e)
        n_I = R @ m
        v_I = R @ v_e
        v_C = Rc @ v_I
        n_C = Rc @ n_I + np.cross(pc, v_C)
        l = K_line @ n_C
        L[j] = l
        s2 = l[0] * l[0] + l[1] * l[1]
        if s2 < 1e-12 * max(l @ l, 1e-300) or s2 == 0.0:
            ok = False
            continue
        s = np.sqrt(s2)
        for row in range(2):
            x = xs[j] if row == 0 else xe[j]
            xl = x @ l
            h[j, row] = xl / s
            dh_dl[row] = x / s
            dh_dl[row, 0] -= xl * l[0] / s ** 3
            dh_dl[row, 1] -= xl * l[1] / s ** 3
        dh_dn = dh_dl @ K_line
        RcR = Rc @ R
        B = -RcR @ _sk(ps[j]) + Spc @ RcR
        Hf[j] = dh_dn @ (RcR @ Jn + B @ Jv)
        if full:
            Hc[j, :, 0:3] = dh_dn @ (Rc @ _sk(n_I) + Spc @ Rc @ _sk(v_I))
            Hc[j, :, 3:6] = dh_dn @ (RcR @ S_vG)
            Hk[j, :, 0:3] = dh_dn @ (_sk(Rc @ n_I) + Spc @ _sk(v_C))
            Hk[j, :, 3:6] = -(dh_dn @ _sk(v_C))
    return ok, L, h, Hc, Hk, Hf


try:
    import numba

    _sk = numba.njit(cache=True)(_sk)
    _line_model = numba.njit(cache=True)(_line_model)
except ImportError:  # pragma: no cover - numba is a declared dependency
    pass


def _line_args(Rs, ps, Rc, pc, line, K_line, xs, xe):
    f = lambda a: np.ascontiguousarray(a, dtype=float)
    k = len(Rs)
    xs = np.zeros((k, 3)) if xs is None else f(xs)
    xe = np.zeros((k, 3)) if xe is None else f(xe)
    return (f(Rs), f(ps), f(Rc), f(pc), quat_to_rot(line.q), float(line.d), f(K_line), xs, xe)


def line_predict_batch(Rs, ps, Rc, pc, line: CPLine, K_line):
    """Image lines (k,3) for each clone."""
    return _line_model(*_line_args(Rs, ps, Rc, pc, line, K_line, None, None), False)[1]


def line_distances_batch(l, xs, xe):
    s = np.hypot(l[:, 0], l[:, 1])
    if np.any(s ** 2 < 1e-12 * np.maximum(np.einsum("ki,ki->k", l, l), 1e-300)):
        raise DegenerateProjection("line passes through the optical center")
    return np.stack([np.einsum("ki,ki->k", xs, l) / s, np.einsum("ki,ki->k", xe, l) / s], axis=1)


def line_residuals_batch(Rs, ps, Rc, pc, line: CPLine, K_line, xs, xe, full=True):
    """Endpoint distances (k,2) with the Jacobians of :func:`line_jacobians_batch`."""
    ok, _, h, Hc, Hk, Hf = _line_model(*_line_args(Rs, ps, Rc, pc, line, K_line, xs, xe), full)
    if not ok:
        raise DegenerateProjection("line passes through the optical center")
    return h, Hc, Hk, Hf


def line_jacobians_batch(Rs, ps, Rc, pc, line: CPLine, K_line, xs, xe):
    """Jacobians of the endpoint distances (pixels).

    Returns ``(H_clone (k,2,6), H_calib (k,2,6), H_f (k,2,4))``; the feature
    columns are the Closest-Point error ``[dtheta, dd]``.
    """
    _, _, _, Hc, Hk, Hf = _line_model(*_line_args(Rs, ps, Rc, pc, line, K_line, xs, xe), True)
    return Hc, Hk, Hf


def _clone_arrays(clones):
    Rs = np.array([quat_to_rot(c.q_GtoI) for c in clones])
    ps = np.array([c.p_IinG for c in clones])
    return Rs, ps


def point_jacobians(obs: PointObservation, clone, calib, p_G):
    """Single-observation Jacobians ``(H_clone 2x6, H_calib 2x6, H_f 2x3)``."""
    Rs, ps = _clone_arrays([clone])
    Hc, Hk, Hf = point_jacobians_batch(Rs, ps, quat_to_rot(calib.q_ItoC), calib.p_IinC,
                                       np.asarray(p_G, dtype=float))
    return Hc[0], Hk[0], Hf[0]


def line_jacobians(obs: LineObservation, clone, calib, cam: CameraModel, line_G: CPLine):
    """Single-observation Jacobians ``(H_clone 2x6, H_calib 2x6, H_f 2x4)``."""
    Rs, ps = _clone_arrays([clone])
    Hc, Hk, Hf = line_jacobians_batch(Rs, ps, quat_to_rot(calib.q_ItoC), calib.p_IinC, line_G,
                                      cam.K_line, obs.x_s[None], obs.x_e[None])
    return Hc[0], Hk[0], Hf[0]


# --------------------------------------------------------------------------
# triangulation


def _point_gn(Rs, ps, Rc, pc, uv, max_iters, z_min):
    """Midpoint initialization plus Gauss-Newton; returns ``(status, p, pC)``.

    ``status`` is 0 on success, 1 for (nearly) parallel rays and 2 for
    singular normal equations.
    """
    k = Rs.shape[0]
    R_GC = np.empty((k, 3, 3))
    centers = np.empty((k, 3))
    off = Rc.T @ pc
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for j in range(k):
        R_GC[j] = Rc @ Rs[j]
        centers[j] = ps[j] - Rs[j].T @ off
        ray = R_GC[j].T @ np.array([uv[j, 0], uv[j, 1], 1.0])
        ray /= np.sqrt(ray @ ray)
        proj = np.eye(3) - np.outer(ray, ray)
        A += proj
        b += proj @ centers[j]
    ev = np.linalg.eigvalsh(A)
    p = np.zeros(3)
    pC = np.zeros((k, 3))
    if ev[0] <= PARALLAX_RATIO * ev[-1]:
        return 1, p, pC
    p = np.linalg.solve(A, b)
    for _ in range(max_iters):
        JtJ = np.zeros((3, 3))
        Jtr = np.zeros(3)
        behind = False
        for j in range(k):
            c = R_GC[j] @ (p - centers[j])
            if c[2] <= z_min:
                behind = True
                break
            z = c[2]
            J = np.zeros((2, 3))
            J[0] = (R_GC[j, 0] - c[0] / z * R_GC[j, 2]) / z
            J[1] = (R_GC[j, 1] - c[1] / z * R_GC[j, 2]) / z
            r = np.array([uv[j, 0] - c[0] / z, uv[j, 1] - c[1] / z])
            JtJ += J.T @ J
            Jtr += J.T @ r
        if behind:
            break
        ev = np.linalg.eigvalsh(JtJ)
        if ev[0] <= 1e-15 * max(ev[-1], 1e-300):
            return 2, p, pC
        step = np.linalg.solve(JtJ, Jtr)
        p = p + step
        if np.sqrt(step @ step) < 1e-12 * max(1.0, np.sqrt(p @ p)):
            break
    for j in range(k):
        pC[j] = R_GC[j] @ (p - centers[j])
    return 0, p, pC


try:
    import numba

    _point_gn = numba.njit(cache=True)(_point_gn)
except ImportError:  # pragma: no cover
    pass


def triangulate_point_arrays(Rs, ps, Rc, pc, uv, feature_id=-1, max_iters=5,
                             z_min=Z_MIN, max_depth=POINT_MAX_DEPTH):
    """Linear triangulation followed by Gauss-Newton on reprojection error."""
    if uv.shape[0] < 2:
        raise InsufficientParallax("need at least two observations")
    f = lambda a: np.ascontiguousarray(a, dtype=float)
    status, p, pC = _point_gn(f(Rs), f(ps), f(Rc), f(pc), f(uv), int(max_iters), float(z_min))
    if status == 1:
        raise InsufficientParallax("rays are (nearly) parallel")
    if status == 2:
        raise InsufficientParallax("singular normal equations")
    if np.any(pC[:, 2] <= z_min):
        raise GateRejected("depth", "point behind a camera")
    if np.any(pC[:, 2] > max_depth):
        raise GateRejected("depth", "point too far")
    return p


def _line_planes(R_GC, centers, bs, be):
    normals_C = np.cross(bs, be)
    normals_C /= np.linalg.norm(normals_C, axis=1, keepdims=True)
    a = np.einsum("kji,kj->ki", R_GC, normals_C)
    off = -np.einsum("ki,ki->k", a, centers)
    return np.column_stack([a, off])


def triangulate_line_arrays(Rs, ps, Rc, pc, xs, xe, cam: CameraModel, feature_id=-1,
                            max_iters=5, min_seg_px=MIN_SEG_PX,
                            d_range=(LINE_D_MIN, LINE_D_MAX)) -> CPLine:
    """Intersect the back-projected planes, then refine with Gauss-Newton."""
    if xs.shape[0] < 2:
        raise InsufficientParallax("need at least two line observations")
    seg = np.linalg.norm(xs[:, :2] - xe[:, :2], axis=1)
    if np.any(seg < min_seg_px):
        raise GateRejected("segment_length", f"shortest segment {seg.min():.1f} px")
    Kinv = np.linalg.inv(cam.K)
    R_GC = np.einsum("ij,kjl->kil", Rc, Rs)
    centers = ps - np.einsum("kji,kj->ki", Rs, np.broadcast_to(Rc.T @ pc, ps.shape))
    planes = _line_planes(R_GC, centers, xs @ Kinv.T, xe @ Kinv.T)
    _, sv, Vt = np.linalg.svd(planes)
    if 1.0 - sv[1] / sv[0] > LINE_DISPARITY_GATE:
        raise GateRejected("disparity", f"plane pencil ratio {sv[1] / sv[0]:.2e}")
    a1, b1, a2, b2 = Vt[0, :3], Vt[0, 3], Vt[1, :3], Vt[1, 3]
    v = np.cross(a1, a2)
    n = b1 * a2 - b2 * a1
    if np.linalg.norm(v) < 1e-12:
        raise InsufficientParallax("planes do not intersect in a line")
    n = n - (n @ v) / (v @ v) * v
    try:
        line = cp_from_plucker(PluckerLine(n, v))
    except DegenerateLine as exc:
        raise GateRejected("degenerate", str(exc)) from None
    K_line = cam.K_line
    for _ in range(max_iters):
        h, _, _, Hf = line_residuals_batch(Rs, ps, Rc, pc, line, K_line, xs, xe, full=False)
        h = h.reshape(-1)
        J = Hf.reshape(-1, 4)
        JtJ = J.T @ J
        ev = np.linalg.eigvalsh(JtJ)
        if ev[0] <= 1e-14 * ev[-1]:
            break
        step = np.linalg.solve(JtJ, -J.T @ h)
        line = cp_boxplus(line, step)
        if np.linalg.norm(step) < 1e-14:
            break
    if line.flagged or not d_range[0] <= line.d <= d_range[1]:
        raise GateRejected("distance", f"line distance {line.d:.3g} outside {d_range}")
    return line


def _clones_for(track, clones):
    by_time = {c.timestamp: c for c in clones}
    out = []
    for obs in track:
        try:
            out.append(by_time[obs.cam_timestamp])
        except KeyError:
            from .errors import MissingClone
            raise MissingClone(obs.cam_timestamp) from None
    return out


def triangulate_point(track: list[PointObservation], clones, calib) -> TriangulatedFeature:
    cl = _clones_for(track, clones)
    if len({(tuple(c.q_GtoI), tuple(c.p_IinG)) for c in cl}) < 2:
        raise InsufficientParallax("observations from a single pose")
    Rs, ps = _clone_arrays(cl)
    uv = np.array([o.uv_normalized for o in track])
    p = triangulate_point_arrays(Rs, ps, quat_to_rot(calib.q_ItoC), calib.p_IinC, uv)
    return TriangulatedFeature("point", track[0].feature_id, p_G=p,
                               timestamps=tuple(o.cam_timestamp for o in track))


def triangulate_line(track: list[LineObservation], clones, calib, cam: CameraModel) -> TriangulatedFeature:
    cl = _clones_for(track, clones)
    if len({(tuple(c.q_GtoI), tuple(c.p_IinG)) for c in cl}) < 2:
        raise InsufficientParallax("observations from a single pose")
    Rs, ps = _clone_arrays(cl)
    xs = np.array([o.x_s for o in track])
    xe = np.array([o.x_e for o in track])
    line = triangulate_line_arrays(Rs, ps, quat_to_rot(calib.q_ItoC), calib.p_IinC, xs, xe, cam)
    return TriangulatedFeature("line", track[0].feature_id, line_G=line,
                               timestamps=tuple(o.cam_timestamp for o in track))


# --------------------------------------------------------------------------
# feature-track interchange (JSON Lines)


def observation_to_record(obs) -> dict:
    if isinstance(obs, PointObservation):
        return {"feature_id": int(obs.feature_id), "robot_id": int(obs.robot_id),
                "t": float(obs.cam_timestamp), "kind": "point",
                "data": {"uv": obs.uv_normalized.tolist()}}
    return {"feature_id": int(obs.feature_id), "robot_id": int(obs.robot_id),
            "t": float(obs.cam_timestamp), "kind": "line",
            "data": {"x_s": obs.x_s.tolist(), "x_e": obs.x_e.tolist()}}


def observation_from_record(rec: dict):
    if rec["kind"] == "point":
        return PointObservation(rec["feature_id"], rec["robot_id"], rec["t"], np.array(rec["data"]["uv"]))
    if rec["kind"] == "line":
        return LineObservation(rec["feature_id"], rec["robot_id"], rec["t"],
                               np.array(rec["data"]["x_s"]), np.array(rec["data"]["x_e"]))
    raise ValueError(f"unknown observation kind {rec['kind']!r}")


def write_tracks(fh, observations: Iterable) -> int:
    n = 0
    for obs in observations:
        fh.write(json.dumps(observation_to_record(obs)) + "\n")
        n += 1
    return n


def read_tracks(fh) -> list:
    return [observation_from_record(json.loads(line)) for line in fh if line.strip()]
