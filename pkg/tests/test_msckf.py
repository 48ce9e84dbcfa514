import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import null_space

from helpers import line_track, point_track, window_state
from plcvio.errors import MissingClone, RankDeficientFeature
from plcvio.geom import cp_from_plucker, plucker_from_points
from plcvio.meas import CameraModel, TriangulatedFeature
from plcvio.msckf import (ProjectedResidual, StackedResidual, chi2_gate, independent_update,
                          nullspace_project, stack_feature, triangulate_track)

CAM = CameraModel()
TARGET = np.array([0.3, -0.2, 5.0])


def _point_feature(p):
    return TriangulatedFeature("point", 1, p_G=np.asarray(p, dtype=float))


def test_stack_point_dimensions_and_zero_residual():
    rng = np.random.default_rng(0)
    state = window_state(rng, n_clones=3)
    s = stack_feature(point_track(state, TARGET), state, _point_feature(TARGET), CAM)
    assert s.r.shape == (6,) and s.H_f.shape == (6, 3) and s.H_x.shape == (6, 18)
    assert np.linalg.norm(s.r) < 1e-8


def test_stack_line_dimensions_and_zero_residual():
    rng = np.random.default_rng(1)
    state = window_state(rng, n_clones=2)
    a, b = TARGET + [-1, 0.2, 0], TARGET + [1, -0.3, 0.5]
    line = cp_from_plucker(plucker_from_points(a, b))
    s = stack_feature(line_track(state, a, b, CAM), state, TriangulatedFeature("line", 2, line_G=line), CAM)
    assert s.r.shape == (4,) and s.H_f.shape == (4, 4)
    assert np.linalg.norm(s.r) < 1e-8


def test_stack_with_calibration_columns():
    rng = np.random.default_rng(2)
    state = window_state(rng, n_clones=3)
    s = stack_feature(point_track(state, TARGET), state, _point_feature(TARGET), CAM, estimate_calib=True)
    assert list(s.cols[:6]) == list(range(15, 21)) and s.H_x.shape == (6, 24)


def test_stack_missing_clone():
    rng = np.random.default_rng(3)
    state = window_state(rng, n_clones=3)
    track = point_track(state, TARGET)
    track.times[1] = 99.0
    with pytest.raises(MissingClone):
        stack_feature(track, state, _point_feature(TARGET), CAM)


def test_triangulate_track_against_window():
    rng = np.random.default_rng(4)
    state = window_state(rng, n_clones=5)
    feat = triangulate_track(point_track(state, TARGET), state, CAM)
    assert np.linalg.norm(feat.p_G - TARGET) < 1e-8


def _random_stack(rng, k, m=3, n_cols=12):
    return StackedResidual(0, "point" if m == 3 else "line", rng.normal(size=2 * k),
                           rng.normal(size=(2 * k, n_cols)), rng.normal(size=(2 * k, m)),
                           np.arange(21, 21 + n_cols), 1.0)


def test_nullspace_project_6x3():
    rng = np.random.default_rng(5)
    s = _random_stack(rng, 3)
    p = nullspace_project(s)
    assert len(p.r2) == 3 and len(p.r1) == 3
    assert p.bottom_feature_norm < 1e-10
    assert np.allclose(np.triu(p.H_f1), p.H_f1)
    assert abs(np.linalg.norm(np.r_[p.r1, p.r2]) - np.linalg.norm(s.r)) < 1e-10


def test_nullspace_matches_svd_kernel():
    rng = np.random.default_rng(6)
    s = _random_stack(rng, 5, m=4)
    p = nullspace_project(s)
    N = null_space(s.H_f.T)
    H2, r2 = N.T @ s.H_x, N.T @ s.r
    assert np.allclose(p.H_x2.T @ p.H_x2, H2.T @ H2, atol=1e-10)
    assert np.allclose(p.H_x2.T @ p.r2, H2.T @ r2, atol=1e-10)
    assert abs(p.r2 @ p.r2 - r2 @ r2) < 1e-10


@given(st.integers(0, 10_000), st.integers(2, 11), st.sampled_from([3, 4]))
@settings(max_examples=60, deadline=None)
def test_nullspace_exact_and_rows_conserved(seed, k, m):
    rng = np.random.default_rng(seed)
    s = _random_stack(rng, k, m=m)
    p = nullspace_project(s)
    assert p.bottom_feature_norm < 1e-10
    assert len(p.r1) + len(p.r2) == len(s.r)


def test_nullspace_rank_deficient():
    rng = np.random.default_rng(7)
    s = _random_stack(rng, 3)
    s.H_f[:, 2] = s.H_f[:, 0]
    with pytest.raises(RankDeficientFeature):
        nullspace_project(s)


def test_rotation_only_track_is_rank_deficient():
    rng = np.random.default_rng(8)
    state = window_state(rng, n_clones=4)
    for c in state.clones:
        c.p_IinG = state.clones[0].p_IinG.copy()
    s = stack_feature(point_track(state, TARGET), state, _point_feature(TARGET), CAM)
    with pytest.raises(RankDeficientFeature):
        nullspace_project(s)


def test_independent_update_empty_is_identity():
    rng = np.random.default_rng(9)
    state = window_state(rng)
    assert independent_update(state, []) is state


def test_independent_update_zero_residual_contracts():
    rng = np.random.default_rng(10)
    state = window_state(rng)
    p = nullspace_project(stack_feature(point_track(state, TARGET), state, _point_feature(TARGET), CAM))
    p.r2[:] = 0.0
    new = independent_update(state, [p])
    assert np.allclose(new.imu.p_IinG, state.imu.p_IinG, atol=0)
    assert np.trace(new.cov) < np.trace(state.cov)
    assert np.linalg.eigvalsh(new.cov).min() > -1e-12


def test_independent_update_scalar_kalman():
    rng = np.random.default_rng(11)
    state = window_state(rng)
    col = 21 + 3  # first clone position x
    h, z = 2.0, 0.7
    proj = ProjectedResidual(0, "point", np.zeros(0), np.zeros((0, 1)), np.zeros((0, 0)),
                             np.array([z]), np.array([[h]]), np.array([col]), 1.0)
    new = independent_update(state, [proj])
    P = state.cov
    k = P[:, col] * h / (h * h * P[col, col] + 1.0)
    assert np.allclose(new.clones[0].p_IinG[0] - state.clones[0].p_IinG[0], k[col] * z)
    assert np.allclose(new.cov, P - np.outer(k, h * P[col]), atol=1e-15)


def test_chi2_gate_rejects_outlier():
    rng = np.random.default_rng(12)
    state = window_state(rng, cov_scale=1e-8)
    track = point_track(state, TARGET, noise=1.0 / 458, rng=rng)
    feat = triangulate_track(track, state, CAM)
    good = nullspace_project(stack_feature(track, state, feat, CAM))
    assert chi2_gate(state, good)
    track.uv[2] += 0.05
    feat = triangulate_track(track, state, CAM)
    bad = nullspace_project(stack_feature(track, state, feat, CAM))
    assert not chi2_gate(state, bad)
