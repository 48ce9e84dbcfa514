"""Per-robot MSCKF update: feature stacking, nullspace projection, EKF.

Residuals are whitened before they are stacked: every row of ``r``, ``H_x``
and ``H_f`` is divided by its noise sigma so the projected systems carry unit
noise.  Jacobians are kept compact, over the columns listed in ``cols``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import linalg as sla
from scipy.stats import chi2

from .errors import MissingClone, RankDeficientFeature
from .geom import quat_to_rot, quat_to_rot_batch
from .meas import (CameraModel, TriangulatedFeature, Track, line_jacobians_batch, line_residuals_batch,
                   point_jacobians_batch, point_predict_batch,
                   triangulate_line_arrays, triangulate_point_arrays)
from .state import CLONE_DIM, Layout, RobotState, apply_correction, check_covariance

RANK_TOL = 1e-8
CHI2_QUANTILE = 0.95


@dataclass
class StackedResidual:
    feature_id: int
    kind: str
    r: np.ndarray
    H_x: np.ndarray  # (2k, len(cols))
    H_f: np.ndarray
    cols: np.ndarray
    sigma: float  # pre-whitening sigma; rows are already divided by it
    times: tuple = ()

    def __post_init__(self):
        n = len(self.r)
        if self.H_x.shape[0] != n or self.H_f.shape[0] != n:
            raise ValueError("row counts of r, H_x and H_f disagree")

    def dense_H(self, dim: int) -> np.ndarray:
        H = np.zeros((len(self.r), dim))
        H[:, self.cols] = self.H_x
        return H


@dataclass
class ProjectedResidual:
    feature_id: int
    kind: str
    r1: np.ndarray
    H_x1: np.ndarray
    H_f1: np.ndarray
    r2: np.ndarray
    H_x2: np.ndarray
    cols: np.ndarray
    sigma: float
    times: tuple = ()
    # max-abs of the projected feature Jacobian below the top block
    bottom_feature_norm: float = 0.0
    feature: TriangulatedFeature | None = field(default=None, repr=False)

    @property
    def top(self):
        return self.r1, self.H_x1, self.H_f1


def measurement_columns(layout: Layout, clone_idx, estimate_calib: bool) -> tuple[np.ndarray, dict]:
    """Error-state columns touched by a track and each clone's offset in them."""
    uniq = sorted(set(int(j) for j in clone_idx))
    cols = []
    if estimate_calib:
        cols.extend(range(layout.calib_theta, layout.calib_theta + 6))
    offset = {}
    for j in uniq:
        offset[j] = len(cols)
        start = layout.clone(j)
        cols.extend(range(start, start + CLONE_DIM))
    return np.array(cols, dtype=int), offset


def _clone_indices(state: RobotState, times) -> np.ndarray:
    index = {c.timestamp: j for j, c in enumerate(state.clones)}
    try:
        return np.array([index[float(t)] for t in times], dtype=int)
    except KeyError as exc:
        raise MissingClone(exc.args[0]) from None


def clone_arrays(state: RobotState, idx, use_fej=False):
    """Stacked rotations and positions of the clones ``idx``."""
    qp = [state.clone_linearization(int(j), use_fej) for j in idx]
    return quat_to_rot_batch([q for q, _ in qp]), np.array([p for _, p in qp])


def triangulate_track(track: Track, state: RobotState, cam: CameraModel) -> TriangulatedFeature:
    """Triangulate a track against the robot's current clone estimates."""
    idx = _clone_indices(state, track.times)
    Rs, ps = clone_arrays(state, idx)
    Rc = quat_to_rot(state.calib.q_ItoC)
    pc = state.calib.p_IinC
    if track.kind == "point":
        p = triangulate_point_arrays(Rs, ps, Rc, pc, track.uv)
        return TriangulatedFeature("point", track.feature_id, p_G=p, timestamps=tuple(track.times))
    line = triangulate_line_arrays(Rs, ps, Rc, pc, track.xs, track.xe, cam)
    return TriangulatedFeature("line", track.feature_id, line_G=line, timestamps=tuple(track.times))


def stack_feature(track: Track, state: RobotState, feature: TriangulatedFeature, cam: CameraModel,
                  use_fej=False, estimate_calib=False) -> StackedResidual:
    """Whitened residual ``measured - predicted`` and its compact Jacobians."""
    idx = _clone_indices(state, track.times)
    Rs, ps = clone_arrays(state, idx)
    Rs_lin, ps_lin = clone_arrays(state, idx, use_fej) if use_fej else (Rs, ps)
    Rc = quat_to_rot(state.calib.q_ItoC)
    pc = state.calib.p_IinC
    if feature.kind == "point":
        h, _ = point_predict_batch(Rs, ps, Rc, pc, feature.p_G)
        r = (track.uv - h).reshape(-1)
        Hc, Hk, Hf = point_jacobians_batch(Rs_lin, ps_lin, Rc, pc, feature.p_G)
        sigma = cam.sigma_normalized
    else:
        h, Hc, Hk, Hf = line_residuals_batch(Rs, ps, Rc, pc, feature.line_G, cam.K_line, track.xs, track.xe)
        r = -h.reshape(-1)
        if use_fej:
            Hc, Hk, Hf = line_jacobians_batch(Rs_lin, ps_lin, Rc, pc, feature.line_G, cam.K_line,
                                              track.xs, track.xe)
        sigma = cam.sigma_px
    k = len(idx)
    cols, offset = measurement_columns(state.layout, idx, estimate_calib)
    H_x = np.zeros((2 * k, len(cols)))
    for i, j in enumerate(idx):
        o = offset[int(j)]
        H_x[2 * i:2 * i + 2, o:o + CLONE_DIM] = Hc[i]
        if estimate_calib:
            H_x[2 * i:2 * i + 2, 0:6] = Hk[i]
    H_f = Hf.reshape(2 * k, -1)
    return StackedResidual(track.feature_id, feature.kind, r / sigma, H_x / sigma, H_f / sigma,
                           cols, sigma, tuple(track.times))


def nullspace_project(s: StackedResidual, feature: TriangulatedFeature | None = None) -> ProjectedResidual:
    """Split a stacked residual into its feature-dependent and feature-free parts."""
    m = s.H_f.shape[1]
    n = len(s.r)
    if n < m:
        raise RankDeficientFeature(f"{n} rows cannot constrain a {m}-dim feature and the state")
    Q, Rf = np.linalg.qr(s.H_f, mode="complete")
    diag = np.abs(np.diag(Rf))
    if diag.min() < RANK_TOL * diag.max():
        raise RankDeficientFeature(f"feature Jacobian rank deficient (ratio {diag.min() / diag.max():.1e})")
    Qt = Q.T
    r = Qt @ s.r
    H = Qt @ s.H_x
    Hf_bottom = Qt[m:] @ s.H_f
    return ProjectedResidual(s.feature_id, s.kind, r[:m], H[:m], Rf[:m], r[m:], H[m:], s.cols,
                             s.sigma, s.times, float(np.abs(Hf_bottom).max(initial=0.0)), feature)


@lru_cache(maxsize=None)
def chi2_threshold(dof: int, quantile=CHI2_QUANTILE) -> float:
    return float(chi2.ppf(quantile, dof))


def chi2_statistic(state: RobotState, proj: ProjectedResidual) -> float:
    H = proj.H_x2
    P = state.cov[np.ix_(proj.cols, proj.cols)]
    S = H @ P @ H.T + np.eye(len(proj.r2))
    return float(proj.r2 @ np.linalg.solve(S, proj.r2))


def chi2_gate(state: RobotState, proj: ProjectedResidual, quantile=CHI2_QUANTILE) -> bool:
    return chi2_statistic(state, proj) < chi2_threshold(len(proj.r2), quantile)


def stack_projected(projected, dim: int):
    """Concatenate whitened ``(r2, H_x2)`` blocks over the union of their columns."""
    cols = np.unique(np.concatenate([p.cols for p in projected]))
    where = np.full(dim, -1)
    where[cols] = np.arange(len(cols))
    rows = sum(len(p.r2) for p in projected)
    H = np.zeros((rows, len(cols)))
    r = np.empty(rows)
    o = 0
    for p in projected:
        n = len(p.r2)
        H[o:o + n, where[p.cols]] = p.H_x2
        r[o:o + n] = p.r2
        o += n
    return r, H, cols


def compress(r, H):
    """Measurement compression: QR of ``H`` when it has more rows than columns."""
    if H.shape[0] <= H.shape[1]:
        return r, H
    Q, R = np.linalg.qr(H, mode="reduced")
    return Q.T @ r, R


def ekf_update(state: RobotState, r, H, cols) -> tuple[RobotState, np.ndarray]:
    """EKF update with unit measurement noise over compact columns ``cols``."""
    P = state.cov
    PHt = P[:, cols] @ H.T
    S = H @ PHt[cols] + np.eye(len(r))
    cho = sla.cho_factor(S, lower=True)
    K = sla.cho_solve(cho, PHt.T).T
    dx = K @ r
    new = apply_correction(state, dx)
    new.cov = check_covariance(P - K @ PHt.T)
    return new, dx


def independent_update(state: RobotState, projected) -> RobotState:
    """Single EKF update from the bottom blocks of every gated feature."""
    return independent_update_with_dx(state, projected)[0]


def independent_update_with_dx(state: RobotState, projected):
    projected = [p for p in projected if len(p.r2)]
    if not projected:
        return state, np.zeros(state.dim)
    r, H, cols = stack_projected(projected, state.dim)
    r, H = compress(r, H)
    return ekf_update(state, r, H, cols)
