"""Landmark world and per-frame measurement synthesis for a robot group.

Landmarks are spawned lazily: whenever a robot sees fewer features than its
budget, new ones are sampled in its viewing frustum.  They persist, so robots
with overlapping views observe the same ids.  A whole run (IMU streams,
ground truth and measurements of every robot) is generated up front and can
then be replayed by any number of filter variants.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..geom import quat_to_rot, rot_to_quat
from ..meas import CameraModel
from ..propagate import NoiseConfig
from ..state import CalibState
from .config import SimConfig
from .rng import stream
from .trajectory import TrajectorySpline, build_trajectories, figure_eight, load_tum, sample_imu

Z_NEAR = 0.2
VISIBLE_DEPTH_FACTOR = 2.0

# camera looks sideways along the body y axis (C-x = I-x, C-y = -I-z,
# C-z = I-y); travel along the optical axis would leave little parallax
R_ITOC_SIDE = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
P_CINI_DEFAULT = np.array([0.05, 0.0, 0.02])


def default_calib() -> CalibState:
    return CalibState(rot_to_quat(R_ITOC_SIDE), -R_ITOC_SIDE @ P_CINI_DEFAULT)


class SimWorld:
    """Point and line landmarks with ids unique across both kinds."""

    def __init__(self):
        self._pts = np.empty((0, 3))
        self._pid = np.empty(0, dtype=np.int64)
        self._lines = np.empty((0, 2, 3))
        self._lid = np.empty(0, dtype=np.int64)
        self._next = 0

    @property
    def points(self):
        return self._pts

    @property
    def point_ids(self):
        return self._pid

    @property
    def lines(self):
        return self._lines

    @property
    def line_ids(self):
        return self._lid

    def add_points(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float).reshape(-1, 3)
        ids = np.arange(self._next, self._next + len(P))
        self._next += len(P)
        self._pts = np.vstack([self._pts, P])
        self._pid = np.concatenate([self._pid, ids])
        return ids

    def add_lines(self, L) -> np.ndarray:
        L = np.asarray(L, dtype=float).reshape(-1, 2, 3)
        ids = np.arange(self._next, self._next + len(L))
        self._next += len(L)
        self._lines = np.concatenate([self._lines, L])
        self._lid = np.concatenate([self._lid, ids])
        return ids


@dataclass
class CameraPose:
    R_GtoC: np.ndarray
    center: np.ndarray

    @classmethod
    def from_body(cls, R_ItoG, p_IinG, calib: CalibState) -> "CameraPose":
        Rc = quat_to_rot(calib.q_ItoC)
        p_CinI = -Rc.T @ calib.p_IinC
        return cls(Rc @ R_ItoG.T, p_IinG + R_ItoG @ p_CinI)

    def to_camera(self, P):
        return (np.asarray(P) - self.center) @ self.R_GtoC.T


@dataclass
class FrameObservations:
    t: float
    robot_id: int
    point_ids: np.ndarray
    uv: np.ndarray  # (n,2) normalized
    line_ids: np.ndarray
    xs: np.ndarray  # (m,3) homogeneous pixels
    xe: np.ndarray

    def observations(self):
        """Per-observation objects, for export and tests."""
        from ..meas import LineObservation, PointObservation
        pts = [PointObservation(int(i), self.robot_id, self.t, uv) for i, uv in zip(self.point_ids, self.uv)]
        lns = [LineObservation(int(i), self.robot_id, self.t, a, b)
               for i, a, b in zip(self.line_ids, self.xs, self.xe)]
        return pts, lns


# --------------------------------------------------------------------------
# projection helpers


def _in_image(px, cam: CameraModel):
    return (px[:, 0] >= 0) & (px[:, 0] < cam.width) & (px[:, 1] >= 0) & (px[:, 1] < cam.height)


def project_points(P_C, cam: CameraModel):
    """Pixels (n,2) and a visibility mask for camera-frame points."""
    z = P_C[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.column_stack([cam.fu * P_C[:, 0] / z + cam.cu, cam.fv * P_C[:, 1] / z + cam.cv])
    ok = (z > Z_NEAR) & np.all(np.isfinite(px), axis=1)
    ok[ok] = _in_image(px[ok], cam)
    return px, ok


def _clip_near(A, B, z_near=Z_NEAR):
    """Clip camera-frame segments to ``z >= z_near``; returns (A', B', ok)."""
    za, zb = A[:, 2], B[:, 2]
    ok = (za >= z_near) | (zb >= z_near)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (z_near - za) / (zb - za)
        cut = A + s[:, None] * (B - A)
    A2 = np.where((ok & (za < z_near))[:, None], cut, A)
    B2 = np.where((ok & (zb < z_near))[:, None], cut, B)
    return A2, B2, ok


def clip_segments(pa, pb, cam: CameraModel):
    """Liang-Barsky clipping of pixel segments to the image rectangle."""
    d = pb - pa
    t0 = np.zeros(len(pa))
    t1 = np.ones(len(pa))
    ok = np.ones(len(pa), dtype=bool)
    lo = np.array([0.0, 0.0])
    hi = np.array([cam.width - 1e-9, cam.height - 1e-9])
    for axis in (0, 1):
        for p, q in ((-d[:, axis], pa[:, axis] - lo[axis]), (d[:, axis], hi[axis] - pa[:, axis])):
            par = p == 0
            ok &= ~(par & (q < 0))
            with np.errstate(divide="ignore", invalid="ignore"):
                r = q / p
            enter = ~par & (p < 0)
            leave = ~par & (p > 0)
            t0 = np.where(enter, np.maximum(t0, r), t0)
            t1 = np.where(leave, np.minimum(t1, r), t1)
    ok &= t0 <= t1
    return pa + t0[:, None] * d, pa + t1[:, None] * d, ok


def project_lines(A_C, B_C, cam: CameraModel, min_seg_px):
    """Clipped pixel endpoints of camera-frame segments and a visibility mask."""
    A, B, ok = _clip_near(A_C, B_C)
    pa, _ = project_points(np.where(ok[:, None], A, [[0, 0, 1.0]]), cam)
    pb, _ = project_points(np.where(ok[:, None], B, [[0, 0, 1.0]]), cam)
    ca, cb, inside = clip_segments(pa, pb, cam)
    ok &= inside
    ok &= np.linalg.norm(cb - ca, axis=1) >= min_seg_px
    return ca, cb, ok


# --------------------------------------------------------------------------
# landmark spawning


def _frustum_samples(rng, n, pose: CameraPose, cam: CameraModel, depth):
    u = rng.uniform(0, cam.width, n)
    v = rng.uniform(0, cam.height, n)
    z = rng.uniform(depth[0], depth[1], n)
    P_C = np.column_stack([(u - cam.cu) / cam.fu * z, (v - cam.cv) / cam.fv * z, z])
    return P_C @ pose.R_GtoC + pose.center


def spawn_points(world: SimWorld, rng, n, pose, cam, depth):
    if n <= 0:
        return np.empty(0, dtype=np.int64)
    return world.add_points(_frustum_samples(rng, n, pose, cam, depth))


def spawn_lines(world: SimWorld, rng, n, pose, cam, depth, length, min_seg_px, max_tries=20):
    """Lines through random frustum points that are visible from ``pose``."""
    if n <= 0:
        return np.empty(0, dtype=np.int64)
    out = []
    for _ in range(max_tries):
        need = n - len(out)
        if need <= 0:
            break
        m = 2 * need
        mid = _frustum_samples(rng, m, pose, cam, depth)
        d = rng.normal(size=(m, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        half = 0.5 * rng.uniform(length[0], length[1], m)[:, None]
        A, B = mid - half * d, mid + half * d
        _, _, ok = project_lines(pose.to_camera(A), pose.to_camera(B), cam, min_seg_px)
        for k in np.flatnonzero(ok)[:need]:
            out.append((A[k], B[k]))
    if not out:
        return np.empty(0, dtype=np.int64)
    return world.add_lines(np.array(out))


# --------------------------------------------------------------------------
# one robot frame


def _select(ids, tracked: set, budget):
    """Indices of ``ids`` to observe: tracked first, then older ids."""
    if len(ids) <= budget:
        return np.arange(len(ids))
    key = np.array([0 if i in tracked else 1 for i in ids])
    order = np.lexsort((ids, key))
    return np.sort(order[:budget])


def generate_features(world: SimWorld, pose: CameraPose, cfg: SimConfig, rng, tracked_pts=frozenset(),
                      tracked_lines=frozenset()):
    """Top up the landmarks visible from ``pose`` to the frame budgets.

    Returns the ids of the points and lines the robot observes this frame.
    """
    cam = cfg.camera
    depth = (cfg.depth_min, cfg.depth_max)
    far = VISIBLE_DEPTH_FACTOR * cfg.depth_max
    pts_ids = np.empty(0, dtype=np.int64)
    if cfg.max_points_per_frame > 0:
        if len(world.points):
            P_C = pose.to_camera(world.points)
            _, ok = project_points(P_C, cam)
            ok &= P_C[:, 2] < far
            vis = world.point_ids[ok]
            pts_ids = vis[_select(vis, tracked_pts, cfg.max_points_per_frame)]
        new = spawn_points(world, rng, cfg.max_points_per_frame - len(pts_ids), pose, cam, depth)
        pts_ids = np.concatenate([pts_ids, new])
    line_ids = np.empty(0, dtype=np.int64)
    if cfg.max_lines_per_frame > 0:
        if len(world.lines):
            L = world.lines
            _, _, ok = project_lines(pose.to_camera(L[:, 0]), pose.to_camera(L[:, 1]), cam, cfg.min_seg_px)
            mid_z = pose.to_camera(0.5 * (L[:, 0] + L[:, 1]))[:, 2]
            ok &= mid_z < far
            vis = world.line_ids[ok]
            line_ids = vis[_select(vis, tracked_lines, cfg.max_lines_per_frame)]
        new = spawn_lines(world, rng, cfg.max_lines_per_frame - len(line_ids), pose, cam, depth,
                          (cfg.line_length_min, cfg.line_length_max), cfg.min_seg_px)
        line_ids = np.concatenate([line_ids, new])
    return pts_ids, line_ids


def synthesize_measurements(world: SimWorld, pose: CameraPose, cam: CameraModel, sigma_px, rng,
                            point_ids, line_ids, t=0.0, robot_id=0, min_seg_px=50.0) -> FrameObservations:
    """Noisy observations of the given landmark ids from ``pose``.

    Landmarks that are not visible are skipped, as are segments whose noisy
    length falls below ``min_seg_px``.
    """
    pidx = np.searchsorted(world.point_ids, point_ids)
    P_C = pose.to_camera(world.points[pidx]) if len(pidx) else np.empty((0, 3))
    px, ok = project_points(P_C, cam)
    px = px[ok]
    if sigma_px > 0:
        px = px + rng.normal(scale=sigma_px, size=px.shape)
    uv = np.column_stack([(px[:, 0] - cam.cu) / cam.fu, (px[:, 1] - cam.cv) / cam.fv])
    pids = np.asarray(point_ids)[ok]

    lidx = np.searchsorted(world.line_ids, line_ids)
    if len(lidx):
        L = world.lines[lidx]
        ca, cb, lok = project_lines(pose.to_camera(L[:, 0]), pose.to_camera(L[:, 1]), cam, min_seg_px)
    else:
        ca = cb = np.empty((0, 2))
        lok = np.zeros(0, dtype=bool)
    ca, cb = ca[lok], cb[lok]
    if sigma_px > 0:
        ca = ca + rng.normal(scale=sigma_px, size=ca.shape)
        cb = cb + rng.normal(scale=sigma_px, size=cb.shape)
    long_enough = np.linalg.norm(cb - ca, axis=1) >= min_seg_px
    lids = np.asarray(line_ids)[lok][long_enough]
    ones = np.ones((int(long_enough.sum()), 1))
    xs = np.hstack([ca[long_enough], ones])
    xe = np.hstack([cb[long_enough], ones])
    return FrameObservations(float(t), robot_id, pids, uv, lids, xs, xe)


# --------------------------------------------------------------------------
# whole run


@dataclass
class RobotTruth:
    """Ground truth and IMU stream of one robot."""

    imu_t: np.ndarray
    w_m: np.ndarray
    a_m: np.ndarray
    cam_t: np.ndarray
    q_GtoI: np.ndarray  # (F,4) at camera times
    p_IinG: np.ndarray
    v_IinG: np.ndarray
    bg: np.ndarray
    ba: np.ndarray


@dataclass
class RunData:
    run: int
    config: SimConfig
    calib: CalibState
    truth: list  # RobotTruth per robot
    frames: list  # frames[k][robot] -> FrameObservations
    world: SimWorld = field(repr=False, default=None)
    digest: str = ""

    @property
    def num_robots(self):
        return len(self.truth)


def base_trajectory(cfg: SimConfig) -> TrajectorySpline:
    if cfg.trajectory == "figure8":
        return figure_eight(cfg.duration)
    traj = load_tum(cfg.trajectory)
    if traj.t_max < cfg.duration:
        from ..errors import ConfigError
        raise ConfigError(f"trajectory {cfg.trajectory} is shorter than duration {cfg.duration}")
    return traj


def stream_digest(frames, truth) -> str:
    h = hashlib.sha256()
    for rt in truth:
        for a in (rt.w_m, rt.a_m):
            h.update(np.ascontiguousarray(a).tobytes())
    for frame in frames:
        for fo in frame:
            for a in (fo.point_ids, fo.uv, fo.line_ids, fo.xs, fo.xe):
                h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def generate_run(cfg: SimConfig, run: int = 0) -> RunData:
    """Synthesize IMU data, ground truth and measurements for every robot."""
    trajs = build_trajectories(base_trajectory(cfg), cfg.robot_offsets[:cfg.num_robots])
    calib = default_calib()
    cam = cfg.camera
    t_end = (cfg.n_frames - 1) / cfg.cam_rate
    step = int(round(cfg.imu_rate / cfg.cam_rate))
    sim_noise = NoiseConfig(0.0, 0.0, 0.0, 0.0) if cfg.noiseless else cfg.noise
    truth = []
    for r, traj in enumerate(trajs):
        noisy = not cfg.noiseless
        t, w, a, bg, ba = sample_imu(traj, 0.0, t_end, cfg.imu_rate, sim_noise,
                                     stream(cfg.seed, run, r, "imu") if noisy else None,
                                     stream(cfg.seed, run, r, "bias") if noisy else None)
        idx = np.arange(0, len(t), step)
        ct = t[idx]
        truth.append(RobotTruth(t, w, a, ct, traj.q_GtoI(ct), traj.position(ct), traj.velocity(ct),
                                bg[idx], ba[idx]))

    world = SimWorld()
    rng_world = stream(cfg.seed, run, 0, "world")
    rng_pix = [stream(cfg.seed, run, r, "pixel") for r in range(len(trajs))]
    sigma = 0.0 if cfg.noiseless else cfg.pixel_sigma
    frames = []
    prev = [(frozenset(), frozenset()) for _ in trajs]
    for k in range(cfg.n_frames):
        frame = []
        for r, rt in enumerate(truth):
            pose = CameraPose.from_body(quat_to_rot(rt.q_GtoI[k]).T, rt.p_IinG[k], calib)
            pid, lid = generate_features(world, pose, cfg, rng_world, *prev[r])
            fo = synthesize_measurements(world, pose, cam, sigma, rng_pix[r], pid, lid, rt.cam_t[k], r,
                                         cfg.min_seg_px)
            prev[r] = (frozenset(fo.point_ids.tolist()), frozenset(fo.line_ids.tolist()))
            frame.append(fo)
        frames.append(frame)
    return RunData(run, cfg, calib, truth, frames, world, stream_digest(frames, truth))
