import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_quat
from plcvio.errors import ConsistencyError, DimensionMismatch, EmptyWindow, NonMonotonicTime, WindowFull
from plcvio.geom import quat_multiply, small_angle_quat
from plcvio.state import (CalibState, ImuState, Layout, RobotState, apply_correction, check_covariance,
                          clone_at, initial_state, marginalize_oldest)

seeds = st.integers(0, 2**32 - 1)


def random_state(rng, n_clones=0, max_clones=11):
    imu = ImuState(random_quat(rng), rng.normal(size=3), rng.normal(size=3),
                   rng.normal(scale=1e-3, size=3), rng.normal(scale=1e-2, size=3))
    st_ = RobotState(0, imu, CalibState(random_quat(rng, 0.2), rng.normal(scale=0.1, size=3)), [], 0.0,
                     np.zeros((22, 22)), max_clones)
    A = rng.normal(size=(22, 22))
    st_.cov = A @ A.T / 22 + 1e-3 * np.eye(22)
    for k in range(n_clones):
        st_ = clone_at(st_, 0.1 * (k + 1))
        st_.imu.p_IinG = st_.imu.p_IinG + rng.normal(scale=0.1, size=3)
    return st_


def test_layout_offsets():
    lay = Layout(3)
    blocks = lay.blocks()
    assert sum(n for _, n in blocks.values()) == lay.dim == 15 + 6 + 18 + 1
    starts = sorted(s for s, _ in blocks.values())
    assert starts[0] == 0
    ends = {s + n for s, n in blocks.values()}
    assert all(s in ends for s in starts[1:])
    assert lay.clone(-1) == lay.clone(2) == 21 + 12
    with pytest.raises(IndexError):
        lay.clone(3)


def test_initial_state_diagonal():
    s = initial_state(0, ImuState(), CalibState(), {"theta": 0.1, "p": 2.0, "td": 0.01})
    assert s.dim == 22
    assert np.allclose(np.diag(s.cov)[:6], [0.01] * 3 + [4.0] * 3)
    assert s.cov[21, 21] == pytest.approx(1e-4)


def test_clone_examples():
    rng = np.random.default_rng(1)
    s = random_state(rng)
    c = clone_at(s, 1.0)
    assert c.dim == 28
    assert np.array_equal(c.cov[21:27, 21:27], s.cov[:6, :6])
    # clone-velocity cross block is the pre-clone pose-velocity block
    assert np.array_equal(c.cov[21:27, 6:9], s.cov[:6, 6:9])
    # t_d moved to the end with its covariance intact
    assert c.cov[27, 27] == s.cov[21, 21]
    assert np.array_equal(c.clones[0].q_GtoI, s.imu.q_GtoI)
    with pytest.raises(NonMonotonicTime):
        clone_at(c, 1.0)


def test_window_full():
    rng = np.random.default_rng(2)
    s = random_state(rng, n_clones=2, max_clones=2)
    with pytest.raises(WindowFull):
        clone_at(s, 10.0)


def test_marginalize_examples():
    rng = np.random.default_rng(3)
    s = clone_at(random_state(rng), 1.0)
    m = marginalize_oldest(s)
    assert m.dim == 22 and not m.clones
    assert np.array_equal(m.cov, s.cov[np.ix_(np.r_[0:21, 27], np.r_[0:21, 27])])
    with pytest.raises(EmptyWindow):
        marginalize_oldest(m)


def test_marginalize_then_clone_keeps_blocks():
    rng = np.random.default_rng(4)
    s = random_state(rng, n_clones=3)
    m = clone_at(marginalize_oldest(s), 5.0)
    # IMU/calib with clones 1..2 are untouched
    keep = np.r_[0:21, 27:39]
    assert np.array_equal(m.cov[np.ix_(np.r_[0:33], np.r_[0:33])], s.cov[np.ix_(keep, keep)])


@settings(max_examples=30)
@given(seeds)
def test_marginal_eigenvalues_interlace(seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng, n_clones=2)
    m = marginalize_oldest(s)
    lam = np.linalg.eigvalsh(s.cov)
    mu = np.linalg.eigvalsh(m.cov)
    k = s.dim - m.dim
    # Cauchy interlacing for a principal submatrix of codimension k
    for i in range(m.dim):
        assert lam[i] - 1e-12 <= mu[i] <= lam[i + k] + 1e-12


def test_apply_correction_examples():
    rng = np.random.default_rng(5)
    s = random_state(rng, n_clones=2)
    z = apply_correction(s, np.zeros(s.dim))
    assert np.allclose(z.imu.q_GtoI, s.imu.q_GtoI) and np.array_equal(z.imu.p_IinG, s.imu.p_IinG)
    dx = np.zeros(s.dim)
    dx[:3] = [1e-3, 0, 0]
    a = apply_correction(s, dx)
    assert np.allclose(a.imu.q_GtoI, quat_multiply(small_angle_quat([1e-3, 0, 0]), s.imu.q_GtoI))
    for name in ("p_IinG", "v_IinG", "bg", "ba"):
        assert np.array_equal(getattr(a.imu, name), getattr(s.imu, name))
    with pytest.raises(DimensionMismatch):
        apply_correction(s, np.zeros(s.dim + 1))


@settings(max_examples=50)
@given(seeds)
def test_apply_correction_roundtrip(seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng, n_clones=2)
    dx = rng.normal(size=s.dim)
    dx *= 1e-3 / np.linalg.norm(dx)
    b = apply_correction(apply_correction(s, dx), -dx)
    assert np.abs(b.imu.q_GtoI - s.imu.q_GtoI).max() < 1e-9 or np.abs(b.imu.q_GtoI + s.imu.q_GtoI).max() < 1e-9
    assert np.abs(b.imu.p_IinG - s.imu.p_IinG).max() < 1e-9
    for c0, c1 in zip(s.clones, b.clones):
        assert np.abs(c0.p_IinG - c1.p_IinG).max() < 1e-9
    assert abs(b.t_d - s.t_d) < 1e-12


@settings(max_examples=30)
@given(seeds)
def test_covariance_psd_under_random_operations(seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng)
    t = 0.0
    for _ in range(15):
        op = rng.integers(3)
        if op == 0 and len(s.clones) < s.max_clones:
            t += 0.1
            s = clone_at(s, t)
        elif op == 1 and s.clones:
            s = marginalize_oldest(s)
        else:
            # a Joseph-free EKF update with a random measurement
            H = rng.normal(size=(2, s.dim))
            S = H @ s.cov @ H.T + 1e-2 * np.eye(2)
            K = s.cov @ H.T @ np.linalg.inv(S)
            s.cov = check_covariance(s.cov - K @ S @ K.T)
        assert np.abs(s.cov - s.cov.T).max() < 1e-9
        assert np.linalg.eigvalsh(s.cov).min() > -1e-9


def test_check_covariance_rejects_indefinite():
    P = np.diag([1.0, -1e-6])
    with pytest.raises(ConsistencyError):
        check_covariance(P)


def test_fej_values_are_write_once():
    rng = np.random.default_rng(6)
    s = random_state(rng, n_clones=2)
    t0 = s.clones[0].timestamp
    first = s.fej_values[t0]
    dx = rng.normal(scale=1e-2, size=s.dim)
    s2 = apply_correction(s, dx)
    assert s2.fej_values[t0] is first
    q, p = s2.clone_linearization(0, use_fej=True)
    assert np.array_equal(q, first[0]) and np.array_equal(p, first[1])
    q, p = s2.clone_linearization(0, use_fej=False)
    assert np.array_equal(p, s2.clones[0].p_IinG)
    with pytest.raises(ConsistencyError):
        s2.set_clone_fej(t0, s2.clones[0].q_GtoI, s2.clones[0].p_IinG)


def test_json_roundtrip():
    rng = np.random.default_rng(7)
    s = random_state(rng, n_clones=2)
    back = RobotState.from_json(s.to_json())
    assert back.dim == s.dim and np.array_equal(back.cov, s.cov)
    assert np.array_equal(back.clones[1].q_GtoI, s.clones[1].q_GtoI)
    assert set(back.fej_values) == set(s.fej_values)
