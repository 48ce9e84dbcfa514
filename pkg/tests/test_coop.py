import numpy as np
import pytest
from scipy.linalg import null_space

from helpers import line_track, point_track, window_state
from plcvio.coop import (CIWeights, CommonFeatureMessage, assemble, ci_update, cooperative_update,
                         make_message, project_common, select_weights, stack_common, trace_objective,
                         updated_trace)
from plcvio.errors import FeatureMismatch
from plcvio.geom import quat_inverse, quat_multiply, small_angle_from_quat
from plcvio.meas import CameraModel
from plcvio.msckf import ekf_update, nullspace_project, stack_feature, triangulate_track
from plcvio.state import apply_correction

CAM = CameraModel()
TARGET = np.array([0.3, -0.2, 5.0])


def _projected(state, track):
    feat = triangulate_track(track, state, CAM)
    return nullspace_project(stack_feature(track, state, feat, CAM), feat)


def _window_cols(state):
    return np.arange(state.layout.clones_start, state.layout.td)


def _pair(seed, kind="point"):
    rng = np.random.default_rng(seed)
    a = window_state(rng, n_clones=4, robot_id=0)
    b = window_state(rng, n_clones=4, robot_id=1)
    if kind == "point":
        ta, tb = point_track(a, TARGET, noise=1e-3, rng=rng), point_track(b, TARGET, noise=1e-3, rng=rng)
    else:
        p, q = TARGET + [-1, 0.2, 0], TARGET + [1, -0.3, 0.5]
        ta, tb = line_track(a, p, q, CAM, noise=0.5, rng=rng), line_track(b, p, q, CAM, noise=0.5, rng=rng)
    return a, b, _projected(a, ta), _projected(b, tb)


def test_own_only_stack_is_own_top_block():
    a, _, pa, _ = _pair(0)
    sys = stack_common(pa, [], own_id=0)
    assert np.array_equal(sys.r, pa.r1) and np.array_equal(sys.H_f, pa.H_f1)
    assert np.array_equal(sys.blocks[0].H, pa.H_x1)
    assert len(project_common(sys).r) == 0


def test_one_neighbor_point_dimensions():
    a, b, pa, pb = _pair(1)
    msg = make_message(b, pb)
    sys = stack_common(pa, [msg], own_id=0)
    assert sys.r.shape == (6,) and sys.H_f.shape == (6, 3) and len(sys.blocks) == 2
    # block-diagonal state Jacobian
    assert np.all(sys.blocks[0].H[3:] == 0) and np.all(sys.blocks[1].H[:3] == 0)


def test_stack_rejects_other_feature():
    a, b, pa, pb = _pair(2)
    msg = make_message(b, pb)
    pa.feature_id = 99
    with pytest.raises(FeatureMismatch):
        stack_common(pa, [msg], own_id=0)


def test_project_common_kernel_equivalence():
    a, b, pa, pb = _pair(3, kind="line")
    sys = stack_common(pa, [make_message(b, pb)], own_id=0)
    proj = project_common(sys)
    assert np.abs(proj.H_f).max() < 1e-10
    assert len(proj.r) == len(sys.r) - 4
    N = null_space(sys.H_f.T)
    for blk, pblk in zip(sys.blocks, proj.blocks):
        H2 = N.T @ blk.H
        assert np.allclose(pblk.H.T @ pblk.H, H2.T @ H2, atol=1e-10)
    assert abs(proj.r @ proj.r - (N.T @ sys.r) @ (N.T @ sys.r)) < 1e-10


def test_single_robot_unit_weight_is_ekf():
    rng = np.random.default_rng(4)
    state = window_state(rng)
    cols = np.arange(21, 33)
    H = rng.normal(size=(5, len(cols)))
    r = rng.normal(size=5) * 0.01
    ci, dx_ci = ci_update(state, r, H, cols, {}, CIWeights({0: 1.0}))
    ekf, dx_ekf = ekf_update(state, r, H, cols)
    assert np.allclose(dx_ci, dx_ekf, atol=1e-14) and np.allclose(ci.cov, ekf.cov, atol=1e-14)


def test_zero_residual_zero_correction():
    a, b, pa, pb = _pair(5)
    proj = project_common(stack_common(pa, [make_message(b, pb, _window_cols(b))], own_id=0))
    proj.r[:] = 0.0
    new, dx = cooperative_update(a, [proj])
    assert np.all(dx == 0)
    assert not np.allclose(new.cov, a.cov)


def test_symmetric_robots_identical_gains():
    rng = np.random.default_rng(6)
    state = window_state(rng)
    cols = np.arange(21, 33)
    H = rng.normal(size=(4, len(cols)))
    P = state.cov[np.ix_(cols, cols)]
    r = rng.normal(size=4) * 0.01
    w = CIWeights.equal([0, 1])
    other = state.copy()
    other.robot_id = 1
    _, dx0 = ci_update(state, r, H, cols, {1: (H, P)}, w)
    _, dx1 = ci_update(other, r, H, cols, {0: (H, P)}, w)
    assert np.allclose(dx0, dx1, atol=1e-15)


def test_neighbor_order_invariance():
    rng = np.random.default_rng(7)
    states = [window_state(rng, n_clones=4, robot_id=k) for k in range(3)]
    projs = [_projected(s, point_track(s, TARGET, noise=1e-3, rng=rng)) for s in states]
    msgs = [make_message(s, p, _window_cols(s)) for s, p in zip(states[1:], projs[1:])]
    outs = []
    for order in (msgs, msgs[::-1]):
        sys = project_common(stack_common(projs[0], order, own_id=0))
        outs.append(cooperative_update(states[0], [sys]))
    assert np.allclose(outs[0][1], outs[1][1], atol=1e-12)
    assert np.allclose(outs[0][0].cov, outs[1][0].cov, atol=1e-12)


def _clone_error(truth, est):
    """Error-state vector over the window with ``truth = est (+) e``."""
    e = np.zeros(est.dim)
    for j, (ct, ce) in enumerate(zip(truth.clones, est.clones)):
        o = est.layout.clone(j)
        e[o:o + 3] = small_angle_from_quat(quat_multiply(ct.q_GtoI, quat_inverse(ce.q_GtoI)))
        e[o + 3:o + 6] = ct.p_IinG - ce.p_IinG
    return e


@pytest.mark.parametrize("kind", ["point", "line"])
def test_neighbor_residual_moved_to_own_linearization_point(kind):
    rng = np.random.default_rng(8)
    truth_a = window_state(rng, n_clones=4, robot_id=0)
    truth_b = window_state(rng, n_clones=4, robot_id=1)
    if kind == "point":
        ta, tb = point_track(truth_a, TARGET), point_track(truth_b, TARGET)
    else:
        p, q = TARGET + [-1, 0.2, 0], TARGET + [1, -0.3, 0.5]
        ta, tb = line_track(truth_a, p, q, CAM), line_track(truth_b, p, q, CAM)
    # perturb the clones only; the extrinsics are not in the measurement columns
    def perturb(s):
        e = np.zeros(s.dim)
        e[s.layout.clones_start:s.layout.td] = rng.normal(scale=1e-4, size=s.layout.td - s.layout.clones_start)
        return apply_correction(s, e)
    est_a, est_b = perturb(truth_a), perturb(truth_b)
    pa, pb = _projected(est_a, ta), _projected(est_b, tb)
    cols_b = _window_cols(est_b)
    proj = project_common(stack_common(pa, [make_message(est_b, pb, cols_b)], own_id=0))
    ea, eb = _clone_error(truth_a, est_a), _clone_error(truth_b, est_b)
    predicted = proj.blocks[0].H @ ea[proj.blocks[0].cols] + proj.blocks[1].H @ eb[cols_b]
    assert np.linalg.norm(proj.r - predicted) < 1e-2 * np.linalg.norm(proj.r)


def test_select_weights_equal():
    w = select_weights([0, 1, 2])
    assert all(abs(w[k] - 1 / 3) < 1e-15 for k in range(3))
    assert select_weights([5])[5] == 1.0


def test_ci_weights_invariants():
    with pytest.raises(ValueError):
        CIWeights({0: 0.5, 1: 0.6})
    with pytest.raises(ValueError):
        CIWeights({0: 0.0, 1: 1.0})


def test_trace_weights_beat_grid():
    a, b, pa, pb = _pair(9)
    proj = project_common(stack_common(pa, [make_message(b, pb, _window_cols(b))], own_id=0))
    r, H, cols, nb = assemble([proj], 0, a.dim)
    obj = lambda w: updated_trace(a, H, cols, nb, w, 0)
    best = select_weights([0, 1], "trace", obj, own_id=0)
    grid = min(obj(CIWeights({0: wi, 1: 1 - wi})) for wi in np.arange(1, 1000) / 1000)
    assert obj(best) <= grid + 1e-12 * abs(grid)


@pytest.mark.parametrize("inflation", ["full", "subspace"])
def test_fast_trace_objective_matches_direct(inflation):
    a, b, pa, pb = _pair(11)
    proj = project_common(stack_common(pa, [make_message(b, pb, _window_cols(b))], own_id=0))
    r, H, cols, nb = assemble([proj], 0, a.dim)
    fast = trace_objective(a, H, cols, nb, 0, inflation)
    for wi in (0.05, 0.5, 0.97):
        w = CIWeights({0: wi, 1: 1 - wi})
        ref = updated_trace(a, H, cols, nb, w, 0, inflation)
        assert fast(w) == pytest.approx(ref, rel=1e-9)


def test_message_json_roundtrip_and_payload():
    a, b, pa, pb = _pair(10, kind="line")
    msg = make_message(b, pb, _window_cols(b))
    back = CommonFeatureMessage.from_json(msg.to_json())
    assert np.array_equal(back.H_x1, msg.H_x1) and np.array_equal(back.cols, msg.cols)
    assert back.feature.d == pytest.approx(pb.feature.line_G.d)
    k = len(msg.cols)
    assert msg.payload_floats() == 4 + 4 * k + 16 + 4 + k * (k + 1) // 2
