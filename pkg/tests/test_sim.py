import numpy as np
import pytest

from plcvio.errors import ConfigError, OutOfRange
from plcvio.geom import cp_from_plucker, plucker_from_points, quat_from_rotvec, quat_to_rot
from plcvio.meas import line_residual, project_line, project_point, point_global_to_camera
from plcvio.propagate import GRAVITY, NoiseConfig
from plcvio.sim import SimConfig, SimWorld, TrajectorySpline, build_trajectories, figure_eight, generate_run, \
    load_tum, sample_imu, stream
from plcvio.sim.trajectory import write_tum
from plcvio.sim.world import CameraPose, default_calib, generate_features, project_lines, \
    synthesize_measurements
from plcvio.state import CalibState, ClonePose

CFG = SimConfig(duration=3.0)


def static_trajectory(q=(0, 0, 0, 1.0), p=(1.0, 2.0, 3.0), T=60.0):
    t = np.linspace(0, T, 7)
    return TrajectorySpline(t, np.tile(p, (7, 1)), np.tile(q, (7, 1)))


def circle_trajectory(r=2.0, rate=0.5, T=20.0):
    t = np.arange(0, T + 1e-9, 0.01)
    ang = rate * t
    pos = np.column_stack([r * np.cos(ang), r * np.sin(ang), np.zeros_like(t)])
    # body yaw follows the angle; as a Hamilton body-to-world quaternion its components equal JPL q_GtoI
    q = np.array([quat_from_rotvec([0, 0, a]) for a in ang])
    return TrajectorySpline(t, pos, q), r, rate


def cam_pose(traj, t, calib=None):
    calib = calib or default_calib()
    return CameraPose.from_body(traj.R_ItoG(t), traj.position(t), calib)


# ---------------------------------------------------------------- trajectories


def test_zero_offsets_identical():
    base = figure_eight(10.0)
    a, b = build_trajectories(base, [[0, 0, 0, 0], [0, 0, 0, 0]])
    t = np.linspace(0, 10, 50)
    assert np.array_equal(a.position(t), b.position(t)) and np.array_equal(a.q_GtoI(t), b.q_GtoI(t))


def test_position_offset_constant():
    base = figure_eight(10.0)
    a, b = build_trajectories(base, [[0, 0, 0, 0], [1, 0, 0, 0]])
    t = np.linspace(0, 10, 50)
    assert np.allclose(b.position(t) - a.position(t), [1, 0, 0], atol=1e-12)


def test_yaw_offset_relative_orientation_constant():
    base = figure_eight(10.0)
    a, b = build_trajectories(base, [[0, 0, 0, 0], [0, 0, 0, 10.0]])
    rel = [a.R_ItoG(t).T @ b.R_ItoG(t) for t in np.linspace(0, 10, 30)]
    for R in rel:
        assert np.allclose(R, rel[0], atol=1e-12)
    assert np.degrees(np.arccos((np.trace(rel[0]) - 1) / 2)) == pytest.approx(10.0)


def test_analytic_derivatives():
    traj = figure_eight(20.0)
    t = np.linspace(1, 19, 40)
    h = 1e-5
    assert np.allclose((traj.position(t + h) - traj.position(t - h)) / (2 * h), traj.velocity(t), atol=1e-6)
    assert np.allclose((traj.velocity(t + h) - traj.velocity(t - h)) / (2 * h), traj.acceleration(t), atol=1e-4)
    with pytest.raises(OutOfRange):
        traj.position(22.0)


def test_tum_roundtrip(tmp_path):
    traj = figure_eight(5.0)
    t = traj.times[traj.times >= 0]
    path = tmp_path / "traj.tum"
    with open(path, "w") as fh:
        write_tum(fh, t, traj.position(t), traj.q_GtoI(t), fmt=".17g")
    back = load_tum(path)
    s = np.linspace(0, 5, 17)
    assert np.allclose(back.position(s), traj.position(s), atol=1e-9)
    assert np.allclose(back.R_ItoG(s), traj.R_ItoG(s), atol=1e-9)


# ---------------------------------------------------------------- IMU synthesis


def test_stationary_imu():
    q = quat_from_rotvec([0.3, -0.2, 1.0])
    t, w, a, bg, ba = sample_imu(static_trajectory(q), 0.0, 2.0, 200.0)
    assert len(t) == 401
    assert np.allclose(w, 0, atol=1e-12)
    assert np.allclose(a, quat_to_rot(q) @ GRAVITY, atol=1e-9)
    assert np.array_equal(bg, np.zeros_like(bg))


def test_circular_motion_centripetal():
    traj, r, rate = circle_trajectory()
    _, w, a, _, _ = sample_imu(traj, 5.0, 15.0, 200.0)
    # body x points radially outward, so the centripetal term appears as -r w^2 on x
    assert np.allclose(w, [0, 0, rate], atol=1e-6)
    assert np.allclose(a, [-r * rate ** 2, 0, GRAVITY[2]], atol=1e-5)


def test_gyro_noise_statistics():
    noise = NoiseConfig(sigma_g=1e-3, sigma_a=2e-3, sigma_wg=0.0, sigma_wa=0.0)
    rate = 200.0
    t, w, a, _, _ = sample_imu(static_trajectory(T=600.0), 0.0, 1e5 / rate, rate, noise, np.random.default_rng(0))
    assert len(t) > 1e5
    assert np.std(w, axis=0) == pytest.approx(np.full(3, 1e-3 * np.sqrt(rate)), rel=0.05)
    assert np.std(a - a.mean(0), axis=0) == pytest.approx(np.full(3, 2e-3 * np.sqrt(rate)), rel=0.05)


def test_bias_random_walk():
    noise = NoiseConfig(sigma_g=0.0, sigma_a=0.0, sigma_wg=1e-3, sigma_wa=1e-2)
    rate = 200.0
    end = []
    for k in range(200):
        _, _, _, bg, _ = sample_imu(static_trajectory(), 0.0, 10.0, rate, noise, None, np.random.default_rng(k))
        end.append(bg[-1])
    # random-walk variance after T seconds is sigma^2 T
    assert np.std(end) == pytest.approx(1e-3 * np.sqrt(10.0), rel=0.15)


def test_sample_imu_range():
    with pytest.raises(OutOfRange):
        sample_imu(figure_eight(5.0), 0.0, 7.0, 200.0)


# ---------------------------------------------------------------- features


def test_empty_world_fills_budget():
    cfg = SimConfig(regime="rich")
    world = SimWorld()
    pose = cam_pose(figure_eight(5.0), 0.0)
    pid, lid = generate_features(world, pose, cfg, np.random.default_rng(0))
    assert len(pid) == 150 and len(lid) == 50
    obs = synthesize_measurements(world, pose, cfg.camera, 0.0, None, pid, lid, min_seg_px=cfg.min_seg_px)
    assert len(obs.point_ids) == 150 and len(obs.line_ids) == 50


def test_zero_budget_spawns_nothing():
    cfg = SimConfig(max_points_per_frame=0, max_lines_per_frame=0)
    world = SimWorld()
    pid, lid = generate_features(world, cam_pose(figure_eight(5.0), 0.0), cfg, np.random.default_rng(0))
    assert len(pid) == len(lid) == 0 and len(world.points) == len(world.lines) == 0


def test_identical_poses_see_identical_features():
    world = SimWorld()
    pose = cam_pose(figure_eight(5.0), 1.0)
    rng = np.random.default_rng(0)
    a = generate_features(world, pose, CFG, rng)
    b = generate_features(world, pose, CFG, rng)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_ids_unique_across_kinds():
    data = generate_run(CFG)
    ids = np.concatenate([data.world.point_ids, data.world.line_ids])
    assert len(np.unique(ids)) == len(ids)


def test_noiseless_measurements_are_self_consistent():
    cfg = SimConfig(duration=1.0, noiseless=True)
    data = generate_run(cfg)
    cam = cfg.camera
    worst_pt = worst_ln = 0.0
    for k in (0, 10, 19):
        for r, rt in enumerate(data.truth):
            clone = ClonePose(rt.cam_t[k], rt.q_GtoI[k], rt.p_IinG[k])
            fo = data.frames[k][r]
            pidx = np.searchsorted(data.world.point_ids, fo.point_ids)
            for p_G, uv in zip(data.world.points[pidx], fo.uv):
                worst_pt = max(worst_pt, np.abs(project_point(point_global_to_camera(p_G, clone, data.calib)) - uv).max())
            pts, lns = fo.observations()
            lidx = np.searchsorted(data.world.line_ids, fo.line_ids)
            for (A, B), obs in zip(data.world.lines[lidx], lns):
                line = cp_from_plucker(plucker_from_points(A, B))
                l = project_line(line, clone, data.calib, cam)
                worst_ln = max(worst_ln, np.abs(line_residual(obs, l)).max())
    assert worst_pt < 1e-10 and worst_ln < 1e-10


def test_point_behind_camera_not_observed():
    world = SimWorld()
    pose = CameraPose(np.eye(3), np.zeros(3))
    ids = world.add_points(np.array([[0, 0, -5.0], [0, 0, 5.0]]))
    obs = synthesize_measurements(world, pose, CFG.camera, 0.0, None, ids, np.empty(0, dtype=np.int64))
    assert obs.point_ids.tolist() == [ids[1]]


def test_partial_line_is_clipped_to_image():
    cam = CFG.camera
    pose = CameraPose(np.eye(3), np.zeros(3))
    # horizontal segment extending far past the right edge
    A = np.array([[0.0, 0.2, 4.0]])
    B = np.array([[40.0, 0.2, 4.0]])
    ca, cb, ok = project_lines(A, B, cam, 10.0)
    assert ok[0]
    assert 0 <= cb[0, 0] <= cam.width and 0 <= cb[0, 1] <= cam.height
    assert cb[0, 0] == pytest.approx(cam.width, abs=1e-6)
    # both clipped endpoints lie on the projected infinite line
    line = cp_from_plucker(plucker_from_points(A[0], B[0]))
    l = project_line(line, ClonePose(0.0, [0, 0, 0, 1.0], np.zeros(3)),
                     CalibState(), cam)
    s = np.hypot(l[0], l[1])
    for x in (ca[0], cb[0]):
        assert abs(np.r_[x, 1.0] @ l) / s < 1e-9


def test_short_segments_dropped():
    cam = CFG.camera
    A = np.array([[0.0, 0.0, 10.0]])
    B = np.array([[0.01, 0.0, 10.0]])
    _, _, ok = project_lines(A, B, cam, 50.0)
    assert not ok[0]


# ---------------------------------------------------------------- runs


def test_generation_is_deterministic():
    a, b = generate_run(CFG, 0), generate_run(CFG, 0)
    assert a.digest == b.digest
    assert np.array_equal(a.truth[1].w_m, b.truth[1].w_m)
    assert generate_run(CFG, 1).digest != a.digest
    assert generate_run(CFG.replace(seed=5), 0).digest != a.digest


def test_rng_streams_are_independent():
    a = stream(0, 0, 0, "imu").normal(size=5)
    assert np.array_equal(a, stream(0, 0, 0, "imu").normal(size=5))
    assert not np.array_equal(a, stream(0, 0, 1, "imu").normal(size=5))
    assert not np.array_equal(a, stream(0, 0, 0, "bias").normal(size=5))


def test_common_feature_coverage():
    data = generate_run(SimConfig(duration=5.0))
    fractions = []
    for frame in data.frames:
        ids = [set(fo.point_ids.tolist()) | {-1 - i for i in fo.line_ids.tolist()} for fo in frame]
        everything = set().union(*ids)
        common = {i for i in everything if sum(i in s for s in ids) >= 2}
        fractions.append(len(common) / len(everything))
    assert min(fractions) >= 0.3


def test_frame_budgets_respected():
    data = generate_run(CFG)
    for frame in data.frames:
        for fo in frame:
            assert len(fo.point_ids) <= CFG.max_points_per_frame
            assert len(fo.line_ids) <= CFG.max_lines_per_frame
            assert len(fo.uv) == len(fo.point_ids) and len(fo.xs) == len(fo.line_ids)


# ---------------------------------------------------------------- config


def test_regime_budgets():
    assert (SimConfig(regime="rich").max_points_per_frame, SimConfig(regime="rich").max_lines_per_frame) == (150, 50)
    assert (SimConfig(regime="low").max_points_per_frame, SimConfig(regime="low").max_lines_per_frame) == (50, 50)
    assert SimConfig(regime="rich").replace(regime="low").max_points_per_frame == 50


@pytest.mark.parametrize("bad", [{"regime": "medium"}, {"imu_rate": 0.0}, {"max_points_per_frame": -1},
                                 {"num_robots": 4}, {"imu_rate": 210.0}, {"ci_weight_mode": "max"},
                                 {"segment_lengths": []}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        SimConfig(**bad)


def test_config_yaml(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("duration: 5\nregime: rich\nvariants: [P-VIO]\n")
    cfg = SimConfig.from_yaml(p)
    assert cfg.duration == 5 and cfg.max_points_per_frame == 150
    p.write_text("durration: 5\n")
    with pytest.raises(ConfigError):
        SimConfig.from_yaml(p)
    with pytest.raises(ConfigError):
        SimConfig.from_yaml(tmp_path / "missing.yaml")
