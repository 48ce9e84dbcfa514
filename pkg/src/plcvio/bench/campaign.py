"""Monte-Carlo campaigns over runs and algorithm variants.

Every variant of a run consumes the same generated measurement stream; the
stream digest is recomputed after each variant and must not change.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConsistencyError
from ..sim.config import SimConfig
from ..sim.world import RunData, generate_run, stream_digest
from .metrics import DEFAULT_SEGMENTS
from .pipeline import run_variant
from .reports import PoseSeries, RunReport, make_report, write_series
from .variants import AlgorithmVariant, get_variant, resolve_variants

log = logging.getLogger(__name__)

DIVERGENCE_RMSE_M = 10.0
NEES_BOUNDS = (4.7, 7.4)


class StreamMismatch(ConsistencyError):
    """Two variants of one run saw different measurement streams."""


@dataclass
class CampaignResult:
    config: SimConfig
    variants: list
    reports: list = field(default_factory=list)
    digests: dict = field(default_factory=dict)  # run -> stream digest
    timings: dict = field(default_factory=dict)  # variant or "generate" -> wall seconds over all runs

    def by_variant(self, name) -> list[RunReport]:
        return [r for r in self.reports if r.variant == name]

    def mean_rmse_m(self, name) -> float:
        return float(np.mean([r.rmse_m for r in self.by_variant(name)]))

    def mean_nees(self, name) -> float:
        return float(np.mean([r.mean_nees for r in self.by_variant(name)]))

    def diverged(self, threshold=DIVERGENCE_RMSE_M) -> list[RunReport]:
        return [r for r in self.reports if not np.isfinite(r.rmse_m) or r.rmse_m > threshold]

    def nees_violations(self, bounds=NEES_BOUNDS) -> dict:
        """Variants whose mean pose NEES falls outside ``bounds``."""
        out = {}
        for v in self.variants:
            if self.by_variant(v.name):
                m = self.mean_nees(v.name)
                if not bounds[0] <= m <= bounds[1]:
                    out[v.name] = m
        return out


def reports_for(data: RunData, result, segments=DEFAULT_SEGMENTS, trajectories_dir=None) -> list[RunReport]:
    out = []
    for f, truth in zip(result.filters, data.truth):
        est = PoseSeries(truth.cam_t, f.q_est, f.p_est, f.P_pose, f.bytes)
        ref = PoseSeries(truth.cam_t, truth.q_GtoI, truth.p_IinG)
        if trajectories_dir is not None:
            write_series(trajectories_dir, result.variant, data.run, f.robot_id, est)
            write_series(trajectories_dir, "truth", data.run, f.robot_id, ref)
        out.append(make_report(result.variant, data.run, f.robot_id, est, ref, segments,
                               f.counters.as_dict(), result.digest))
    return out


def _run_one(cfg: SimConfig, run: int, variants, segments, trajectories_dir, coop_fn=None):
    t0 = time.perf_counter()
    data = generate_run(cfg, run)
    timings = {"generate": time.perf_counter() - t0}
    reports = []
    for v in variants:
        t0 = time.perf_counter()
        result = run_variant(data, v, coop_fn)
        timings[v.name] = time.perf_counter() - t0
        after = stream_digest(data.frames, data.truth)
        if after != data.digest:
            raise StreamMismatch(f"{v.name} run {run}: measurement stream changed during the run")
        reports.extend(reports_for(data, result, segments, trajectories_dir))
        log.info("run %d %s: rmse %.4f m", run, v.name, np.mean([r.rmse_m for r in reports[-data.num_robots:]]))
    return run, data.digest, reports, timings


def _run_packed(args):
    return _run_one(*args)


def run_campaign(cfg: SimConfig, variants=None, runs=None, segments=DEFAULT_SEGMENTS, trajectories_dir=None,
                 workers=1, coop_fn=None) -> CampaignResult:
    """Run ``runs`` (default ``cfg.mc_runs``) Monte-Carlo runs of each variant.

    ``variants`` holds names or :class:`AlgorithmVariant` objects; ``None``
    means all five.  With ``workers > 1`` runs execute in separate
    processes; results are identical to the serial order.
    """
    variants = [v if isinstance(v, AlgorithmVariant) else get_variant(v) for v in variants or []] \
        or resolve_variants([])
    n_runs = cfg.mc_runs if runs is None else int(runs)
    jobs = [(cfg, r, variants, segments, trajectories_dir, coop_fn) for r in range(n_runs)]
    if workers > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_run_packed, jobs))
    else:
        outs = [_run_one(*j) for j in jobs]
    res = CampaignResult(cfg, variants)
    for run, digest, reports, timings in sorted(outs, key=lambda o: o[0]):
        res.digests[run] = digest
        for k, v in timings.items():
            res.timings[k] = res.timings.get(k, 0.0) + v
        if len({r.digest for r in reports}) > 1:
            raise StreamMismatch(f"run {run}: variants consumed different streams")
        res.reports.extend(reports)
    return res
