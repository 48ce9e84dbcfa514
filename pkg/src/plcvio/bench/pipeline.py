"""Per-robot filters and the synchronous multi-robot frame loop.

Each camera frame runs in three phases over the whole group:

1. every robot propagates, clones, collects its finished tracks and runs
   its independent update;
2. every robot publishes the top blocks of its common features, moved to
   its updated estimate, with its updated covariance;
3. every robot runs one covariance-intersection update over all common
   features of the frame.

A robot that finishes a common feature announces it; neighbors that track
that feature process it in the same frame so the observations overlap.
The participants then exchange their observations of it and all linearize
at one feature estimate triangulated from every robot's views.
"""

from __future__ import annotations

import dataclasses
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ..coop import (cooperative_update, make_message, project_common, share_track, stack_common,
                    triangulate_common)
from ..errors import ConsistencyError, PLCVIOError
from ..meas import Track
from ..msckf import chi2_gate, independent_update_with_dx, nullspace_project, stack_feature, triangulate_track
from ..propagate import propagate_covariance
from ..state import ImuState, apply_correction, clone_at, initial_state, marginalize_oldest
from ..sim.config import SimConfig
from ..sim.rng import stream
from ..sim.world import RobotTruth, RunData
from .variants import AlgorithmVariant


@dataclass
class UpdateCounters:
    point_updates: int = 0  # features in independent updates
    line_updates: int = 0
    ci_updates: int = 0  # cooperative updates performed
    ci_point_features: int = 0
    ci_line_features: int = 0
    messages_sent: int = 0
    triangulation_failures: int = 0
    gate_rejections: int = 0
    skipped_ci: int = 0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class _TrackBuffer:
    times: list = field(default_factory=list)
    data: list = field(default_factory=list)  # uv, or (xs, xe)


def _init_state(robot_id, truth: RobotTruth, calib, cfg: SimConfig, rng):
    imu = ImuState(truth.q_GtoI[0], truth.p_IinG[0], truth.v_IinG[0], truth.bg[0], truth.ba[0])
    std = {"theta": cfg.init_sigma_theta, "p": cfg.init_sigma_p, "v": cfg.init_sigma_v,
           "bg": cfg.init_sigma_bg, "ba": cfg.init_sigma_ba}
    if cfg.estimate_calib:
        std.update(calib_theta=cfg.init_sigma_calib_theta, calib_p=cfg.init_sigma_calib_p)
    state = initial_state(robot_id, imu, calib.copy(), std, max_clones=cfg.window)
    if cfg.perturb_init and not cfg.noiseless:
        e = rng.normal(size=state.dim) * np.sqrt(np.diag(state.cov))
        # truth = estimate (+) e
        state = apply_correction(state, -e)
    return state


class RobotFilter:
    """One robot's MSCKF with point and line tracks."""

    def __init__(self, robot_id, cfg: SimConfig, variant: AlgorithmVariant, truth: RobotTruth, calib, run=0):
        self.robot_id = robot_id
        self.cfg = cfg
        self.variant = variant
        self.truth = truth
        self.cam = cfg.camera
        self.noise = cfg.noise
        self.step = int(round(cfg.imu_rate / cfg.cam_rate))
        self.state = _init_state(robot_id, truth, calib, cfg, stream(cfg.seed, run, robot_id, "init"))
        self.counters = UpdateCounters()
        self.tracks = {"point": {}, "line": {}}
        n = len(truth.cam_t)
        self.q_est = np.zeros((n, 4))
        self.p_est = np.zeros((n, 3))
        self.P_pose = np.zeros((n, 6, 6))
        self.bytes = np.zeros(n, dtype=np.int64)
        self._k = -1

    # -- phase 1 -----------------------------------------------------------

    def advance(self, k, frame):
        """Propagate to frame ``k``, clone and add its observations.

        Returns the tracks that finished this frame, keyed by (kind, id).
        """
        t = self.truth
        if k > 0:
            sl = slice((k - 1) * self.step, k * self.step + 1)
            _, _, self.state = propagate_covariance(self.state, (t.imu_t[sl], t.w_m[sl], t.a_m[sl]),
                                                    self.noise, self.cfg.use_fej)
        if len(self.state.clones) >= self.cfg.window:
            self.state = marginalize_oldest(self.state)
        self.state = clone_at(self.state, float(t.cam_t[k]))
        self._k = k
        tk = float(t.cam_t[k])
        seen = {"point": frame.point_ids, "line": frame.line_ids if self.variant.uses_lines else ()}
        buf = self.tracks["point"]
        for fid, uv in zip(frame.point_ids, frame.uv):
            b = buf.setdefault(int(fid), _TrackBuffer())
            b.times.append(tk)
            b.data.append(uv)
        if self.variant.uses_lines:
            buf = self.tracks["line"]
            for fid, xs, xe in zip(frame.line_ids, frame.xs, frame.xe):
                b = buf.setdefault(int(fid), _TrackBuffer())
                b.times.append(tk)
                b.data.append((xs, xe))
        finished = {}
        for kind, seen_ids in seen.items():
            seen_set = set(int(i) for i in seen_ids)
            for fid, b in list(self.tracks[kind].items()):
                lost = fid not in seen_set
                if lost or len(b.times) >= self.cfg.window:
                    track = self._pop(kind, fid, drop_last=lost)
                    if track is not None:
                        finished[(kind, fid)] = track
        return finished

    def _pop(self, kind, fid, drop_last=False):
        b = self.tracks[kind].pop(fid)
        if len(b.times) < self.cfg.min_track_length:
            return None
        times = np.array(b.times)
        if kind == "point":
            return Track("point", fid, self.robot_id, times, uv=np.array(b.data))
        xs = np.array([d[0] for d in b.data])
        xe = np.array([d[1] for d in b.data])
        return Track("line", fid, self.robot_id, times, xs=xs, xe=xe)

    def take(self, kind, fid):
        """Finish an active track early because a neighbor announced it."""
        if fid in self.tracks[kind] and len(self.tracks[kind][fid].times) >= self.cfg.min_track_length:
            return self._pop(kind, fid)
        return None

    def independent(self, tracks, features=None):
        """Independent update; returns the gated projections valid for sharing.

        ``features`` maps (kind, id) to jointly triangulated estimates; only
        those features are offered for the cooperative update.
        """
        features = features or {}
        projected = []
        for key, track in tracks.items():
            try:
                feat = features.get(key) or triangulate_track(track, self.state, self.cam)
                s = stack_feature(track, self.state, feat, self.cam, self.cfg.use_fej, self.cfg.estimate_calib)
                proj = nullspace_project(s, feat)
            except ConsistencyError:
                raise
            except PLCVIOError:
                self.counters.triangulation_failures += 1
                continue
            if len(proj.r2) == 0 or not chi2_gate(self.state, proj):
                self.counters.gate_rejections += 1
                continue
            projected.append(proj)
        indep = [p for p in projected if p.kind == "point" or self.variant.use_lines_independent]
        self.counters.point_updates += sum(p.kind == "point" for p in indep)
        self.counters.line_updates += sum(p.kind == "line" for p in indep)
        self.state, dx = independent_update_with_dx(self.state, indep)
        common = self.variant.common_kinds()
        shared = []
        for p in projected:
            if p.kind in common and (p.kind, p.feature_id) in features:
                # move the top block onto the updated estimate
                shared.append(dataclasses.replace(p, r1=p.r1 - p.H_x1 @ dx[p.cols]))
        return shared

    # -- phase 2 -----------------------------------------------------------

    def window_cols(self):
        lay = self.state.layout
        return np.arange(lay.clones_start if not self.cfg.estimate_calib else lay.calib_theta, lay.td)

    def publish(self, shared):
        cols = self.window_cols()
        msgs = [make_message(self.state, p, cols) for p in shared]
        if msgs:
            k = len(cols)
            floats = sum(m.payload_floats(include_covariance=False) for m in msgs) + k * (k + 1) // 2
            self.bytes[self._k] += 8 * floats
            self.counters.messages_sent += len(msgs)
        return msgs

    # -- phase 3 -----------------------------------------------------------

    def cooperate(self, shared, inbox, coop_fn=None):
        by_feature = defaultdict(list)
        for m in inbox:
            by_feature[(m.kind, m.feature_id)].append(m)
        systems = []
        for p in shared:
            msgs = by_feature.get((p.kind, p.feature_id))
            if not msgs:
                continue
            try:
                sys = project_common(stack_common(p, msgs, self.robot_id))
            except ConsistencyError:
                raise
            except PLCVIOError:
                self.counters.skipped_ci += 1
                continue
            if len(sys.r):
                systems.append(sys)
        if not systems:
            return
        fn = coop_fn or (lambda st, sy: cooperative_update(st, sy, weight_mode=self.cfg.ci_weight_mode,
                                                              inflation=self.cfg.ci_inflation))
        try:
            self.state, _ = fn(self.state, systems)
        except ConsistencyError:
            raise
        except PLCVIOError:
            self.counters.skipped_ci += 1
            return
        self.counters.ci_updates += 1
        self.counters.ci_point_features += sum(s.kind == "point" for s in systems)
        self.counters.ci_line_features += sum(s.kind == "line" for s in systems)

    def record(self):
        k = self._k
        self.q_est[k] = self.state.imu.q_GtoI
        self.p_est[k] = self.state.imu.p_IinG
        self.P_pose[k] = self.state.cov[:6, :6]


def _joint_features(filters, finished, common):
    """Triangulate every feature finished by two or more robots from all their views.

    All participants would compute the same estimate from the exchanged
    tracks, so it is computed once here.
    """
    holders = defaultdict(list)
    for f, fin in zip(filters, finished):
        for key in fin:
            if key[0] in common:
                holders[key].append(f)
    out = {}
    for key, fs in holders.items():
        if len(fs) < 2:
            continue
        shares = [share_track(f.state, finished[f.robot_id][key]) for f in fs]
        try:
            out[key] = triangulate_common(shares, fs[0].cam)
        except ConsistencyError:
            raise
        except PLCVIOError:
            continue
        for f, sh in zip(fs, shares):
            f.bytes[f._k] += 8 * sh.payload_floats()
    return out


@dataclass
class RunResult:
    variant: str
    run: int
    digest: str
    filters: list


def run_variant(data: RunData, variant: AlgorithmVariant, coop_fn=None) -> RunResult:
    """Run one variant over a generated run.

    ``coop_fn(state, systems) -> (state, dx)`` replaces the cooperative
    update; tests use it to plug in a fusion rule that ignores correlations.
    """
    cfg = data.config
    filters = [RobotFilter(r, cfg, variant, data.truth[r], data.calib, data.run) for r in range(data.num_robots)]
    common = variant.common_kinds()
    # a lone robot still runs the cooperative phases; they must leave its state unchanged
    multi = bool(common)
    for k, frame in enumerate(data.frames):
        try:
            finished = [f.advance(k, frame[f.robot_id]) for f in filters]
            if multi:
                announced = {key for fin in finished for key in fin if key[0] in common}
                for f, fin in zip(filters, finished):
                    for kind, fid in announced - fin.keys():
                        track = f.take(kind, fid)
                        if track is not None:
                            fin[(kind, fid)] = track
            joint = _joint_features(filters, finished, common) if multi else {}
            shared = [f.independent(fin, joint) for f, fin in zip(filters, finished)]
            if multi:
                counts = defaultdict(int)
                for sh in shared:
                    for p in sh:
                        counts[(p.kind, p.feature_id)] += 1
                shared = [[p for p in sh if counts[(p.kind, p.feature_id)] > 1] for sh in shared]
                outbox = [f.publish(sh) for f, sh in zip(filters, shared)]
                for f, sh in zip(filters, shared):
                    inbox = [m for r, msgs in enumerate(outbox) if r != f.robot_id for m in msgs]
                    f.cooperate(sh, inbox, coop_fn)
            for f in filters:
                f.record()
        except ConsistencyError as exc:
            raise ConsistencyError(f"{variant.name} run {data.run} frame {k}: {exc}") from exc
    return RunResult(variant.name, data.run, data.digest, filters)
