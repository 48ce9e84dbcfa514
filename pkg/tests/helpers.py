"""Random fixtures shared by the unit tests."""

import numpy as np

from plcvio.geom import plucker_from_points, cp_from_plucker, quat_from_rotvec, quat_to_rot
from plcvio.state import CalibState, ClonePose


def random_quat(rng, scale=np.pi):
    return quat_from_rotvec(rng.uniform(-1, 1, 3) * scale / np.sqrt(3))


def random_clone(rng, t=0.0):
    return ClonePose(t, random_quat(rng), rng.normal(size=3))


def random_calib(rng):
    return CalibState(random_quat(rng, 0.3), rng.normal(scale=0.1, size=3))


def point_in_front(rng, clone, calib, depth=(2.0, 8.0), spread=0.4):
    """Global point that projects in front of the camera of ``clone``."""
    z = rng.uniform(*depth)
    p_C = np.array([rng.uniform(-spread, spread) * z, rng.uniform(-spread, spread) * z, z])
    R = quat_to_rot(clone.q_GtoI)
    Rc = quat_to_rot(calib.q_ItoC)
    return clone.p_IinG + R.T @ (Rc.T @ (p_C - calib.p_IinC))


def perturb_clone(clone, e):
    from plcvio.geom import quat_multiply, small_angle_quat
    return ClonePose(clone.timestamp, quat_multiply(small_angle_quat(e[:3]), clone.q_GtoI), clone.p_IinG + e[3:])


def perturb_calib(calib, e):
    from plcvio.geom import quat_multiply, small_angle_quat
    return CalibState(quat_multiply(small_angle_quat(e[:3]), calib.q_ItoC), calib.p_IinC + e[3:])


def line_in_front(rng, clone, calib):
    a = point_in_front(rng, clone, calib)
    b = point_in_front(rng, clone, calib)
    return cp_from_plucker(plucker_from_points(a, b)), a, b


def numeric_jacobian(f, x0_dim, h=1e-6):
    cols = []
    for k in range(x0_dim):
        e = np.zeros(x0_dim)
        e[k] = h
        cols.append((f(e) - f(-e)) / (2 * h))
    return np.column_stack(cols)


def rel_err(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-12)


def window_state(rng, n_clones=5, robot_id=0, cov_scale=1e-3, target=None):
    """RobotState whose clones all look at ``target`` from an arc."""
    from plcvio.geom import rot_to_quat
    from plcvio.state import ImuState, RobotState, DEFAULT_WINDOW
    target = np.array([0.3, -0.2, 5.0]) if target is None else target
    # camera frame = IMU frame (identity extrinsics), so the clone rotation is R_GtoC
    clones = []
    for k in range(n_clones):
        ang = -0.3 + 0.6 * k / max(n_clones - 1, 1)
        c = target + 4.0 * np.array([np.sin(ang), 0.1 * rng.normal(), -np.cos(ang)])
        z = target - c
        z /= np.linalg.norm(z)
        x = np.cross([0, 1.0, 0], z)
        x /= np.linalg.norm(x)
        R = np.vstack([x, np.cross(z, x), z])
        clones.append(ClonePose(0.05 * k, rot_to_quat(R), c))
    imu = ImuState(clones[-1].q_GtoI, clones[-1].p_IinG)
    dim = 15 + 6 + 6 * n_clones + 1
    A = rng.normal(size=(dim, dim))
    cov = cov_scale * (A @ A.T / dim + 0.1 * np.eye(dim))
    state = RobotState(robot_id, imu, CalibState(), clones, 0.0, cov, DEFAULT_WINDOW)
    for c in clones:
        state.set_clone_fej(c.timestamp, c.q_GtoI, c.p_IinG)
    return state


def point_track(state, p_G, feature_id=1, noise=0.0, rng=None):
    from plcvio.meas import Track
    uv = []
    for c in state.clones:
        p_C = quat_to_rot(state.calib.q_ItoC) @ (quat_to_rot(c.q_GtoI) @ (p_G - c.p_IinG)) + state.calib.p_IinC
        uv.append(p_C[:2] / p_C[2])
    uv = np.array(uv)
    if noise:
        uv = uv + rng.normal(scale=noise, size=uv.shape)
    return Track("point", feature_id, state.robot_id, np.array([c.timestamp for c in state.clones]), uv=uv)


def line_track(state, a, b, cam, feature_id=2, noise=0.0, rng=None):
    from plcvio.meas import Track
    xs, xe = [], []
    Rc = quat_to_rot(state.calib.q_ItoC)
    for c in state.clones:
        for p, out in ((a, xs), (b, xe)):
            p_C = Rc @ (quat_to_rot(c.q_GtoI) @ (p - c.p_IinG)) + state.calib.p_IinC
            out.append([cam.fu * p_C[0] / p_C[2] + cam.cu, cam.fv * p_C[1] / p_C[2] + cam.cv, 1.0])
    xs, xe = np.array(xs), np.array(xe)
    if noise:
        xs[:, :2] += rng.normal(scale=noise, size=(len(xs), 2))
        xe[:, :2] += rng.normal(scale=noise, size=(len(xe), 2))
    return Track("line", feature_id, state.robot_id, np.array([c.timestamp for c in state.clones]), xs=xs, xe=xe)


# one "criterion N ...: PASS|FAIL (...)" line per acceptance test, printed by conftest
ACCEPTANCE = []


def acceptance_verdict(n, title, checks, elapsed, budget):
    """Record and print the verdict of one criterion; ``checks`` holds (ok, text) pairs."""
    ok = all(c for c, _ in checks) and elapsed < budget
    budget_text = f"budget {budget:.0f} s" if np.isfinite(budget) else "no time budget"
    detail = "; ".join(f"{'ok' if c else 'FAILED'}: {d}" for c, d in checks)
    line = f"criterion {n} {title}: {'PASS' if ok else 'FAIL'} ({detail}; {elapsed:.1f} s, {budget_text})"
    ACCEPTANCE.append(line)
    print(line)
    return ok, line
