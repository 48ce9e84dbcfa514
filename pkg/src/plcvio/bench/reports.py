"""Per-robot run reports and their CSV, JSON and trajectory files.

All floats are written with a fixed format so identical runs give
byte-identical files.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import LengthMismatch
from ..sim.trajectory import write_tum
from .metrics import DEFAULT_SEGMENTS, nees_series, position_errors, relative_errors, rmse, rotation_angles

RUN_COLUMNS = ["run", "robot", "rmse_deg", "rmse_m", "mean_nees", "bytes_per_frame"]
RELATIVE_COLUMNS = ["run", "robot", "segment_m", "count", "roe_mean_deg", "roe_median_deg",
                    "rpe_mean_m", "rpe_median_m"]


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".10g")


@dataclass
class PoseSeries:
    """Timestamps, JPL orientations, positions and optional pose covariances."""

    t: np.ndarray
    q: np.ndarray
    p: np.ndarray
    P: np.ndarray | None = None
    bytes: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.t)
        for name in ("q", "p", "P", "bytes"):
            a = getattr(self, name)
            if a is not None and len(a) != n:
                raise LengthMismatch(f"{name} has {len(a)} rows, expected {n}")


@dataclass
class RunReport:
    """Errors of one robot in one run of one variant."""

    variant: str
    run: int
    robot: int
    t: np.ndarray
    rot_err_deg: np.ndarray
    pos_err_m: np.ndarray
    rmse_deg: float
    rmse_m: float
    nees: np.ndarray
    bytes: np.ndarray
    relative: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    digest: str = ""

    @property
    def mean_nees(self) -> float:
        return float(np.mean(self.nees)) if len(self.nees) else float("nan")

    @property
    def bytes_per_frame(self) -> float:
        return float(np.mean(self.bytes)) if len(self.bytes) else 0.0


def make_report(variant, run, robot, est: PoseSeries, truth: PoseSeries, segments=DEFAULT_SEGMENTS,
                counters=None, digest="") -> RunReport:
    if len(est.t) != len(truth.t):
        raise LengthMismatch(f"estimate has {len(est.t)} frames, truth {len(truth.t)}")
    rmse_deg, rmse_m = rmse(est.q, est.p, truth.q, truth.p)
    nees = (nees_series(est.q, est.p, est.P, truth.q, truth.p) if est.P is not None
            else np.full(len(est.t), np.nan))
    return RunReport(
        variant, int(run), int(robot), np.asarray(est.t, dtype=float),
        np.degrees(rotation_angles(est.q, truth.q)), position_errors(est.p, truth.p),
        rmse_deg, rmse_m, nees,
        np.zeros(len(est.t)) if est.bytes is None else np.asarray(est.bytes, dtype=float),
        relative_errors(est.q, est.p, truth.q, truth.p, segments), dict(counters or {}), digest,
    )


# --------------------------------------------------------------------------
# aggregation


def _by_variant(reports, variants=None):
    names = list(variants or [])
    for r in reports:
        if r.variant not in names:
            names.append(r.variant)
    return {n: [r for r in reports if r.variant == n] for n in names}


def summarize(reports, variants=None) -> dict:
    """Means per variant and robot over runs, and over all robots."""
    out = {}
    for name, rs in _by_variant(reports, variants).items():
        robots = sorted({r.robot for r in rs})
        per_robot = {}
        for i in robots:
            sel = [r for r in rs if r.robot == i]
            per_robot[i] = {"rmse_deg": float(np.mean([r.rmse_deg for r in sel])),
                            "rmse_m": float(np.mean([r.rmse_m for r in sel])),
                            "mean_nees": float(np.mean([r.mean_nees for r in sel]))}
        counters = {}
        for r in rs:
            for k, v in r.counters.items():
                counters[k] = counters.get(k, 0) + int(v)
        relative = {}
        for L in sorted({L for r in rs for L in r.relative}):
            roe = np.concatenate([r.relative[L]["roe"] for r in rs if L in r.relative])
            rpe = np.concatenate([r.relative[L]["rpe"] for r in rs if L in r.relative])
            relative[L] = {"count": int(len(rpe)),
                           "roe_median_deg": float(np.median(roe)) if len(roe) else float("nan"),
                           "rpe_median_m": float(np.median(rpe)) if len(rpe) else float("nan")}
        empty = not rs
        out[name] = {
            "runs": len({r.run for r in rs}),
            "robots": per_robot,
            "avg_deg": float("nan") if empty else float(np.mean([r.rmse_deg for r in rs])),
            "avg_m": float("nan") if empty else float(np.mean([r.rmse_m for r in rs])),
            "mean_nees": float("nan") if empty else float(np.mean([r.mean_nees for r in rs])),
            "bytes_per_frame": float("nan") if empty else float(np.mean([r.bytes_per_frame for r in rs])),
            "relative": relative,
            "counters": counters,
            "digests": sorted({r.digest for r in rs if r.digest}),
        }
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float):
        return None if not np.isfinite(x) else float(fmt(x))
    return x


# --------------------------------------------------------------------------
# files


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])


def emit_reports(reports, out_dir, variants=None, num_robots=None) -> list[Path]:
    """Write per-variant CSVs, ``relative_errors.csv``, ``summary.csv`` and ``summary.json``.

    ``variants`` fixes the file set and row order even when some (or all)
    variants have no reports; those get header-only files.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        groups = _by_variant(reports, variants)
        paths = []
        for name, rs in groups.items():
            rs = sorted(rs, key=lambda r: (r.run, r.robot))
            p = out / f"{name}.csv"
            _write_csv(p, RUN_COLUMNS, [[r.run, r.robot, r.rmse_deg, r.rmse_m, r.mean_nees, r.bytes_per_frame]
                                        for r in rs])
            paths.append(p)
        rel_rows = []
        for name, rs in groups.items():
            for r in sorted(rs, key=lambda r: (r.run, r.robot)):
                for L in sorted(r.relative):
                    roe, rpe = r.relative[L]["roe"], r.relative[L]["rpe"]
                    if len(rpe) == 0:
                        continue
                    rel_rows.append([name, r.run, r.robot, L, len(rpe), np.mean(roe), np.median(roe),
                                     np.mean(rpe), np.median(rpe)])
        p = out / "relative_errors.csv"
        _write_csv(p, ["variant"] + RELATIVE_COLUMNS, rel_rows)
        paths.append(p)
        summary = summarize(reports, variants)
        n_rob = num_robots if num_robots is not None else max((r.robot + 1 for r in reports), default=0)
        header = ["variant"] + [f"R{i}_{u}" for i in range(n_rob) for u in ("deg", "m")]
        header += ["avg_deg", "avg_m", "mean_nees", "bytes_per_frame", "runs"]
        rows = []
        for name, s in summary.items():
            if not s["runs"]:
                continue
            row = [name]
            for i in range(n_rob):
                rb = s["robots"].get(i)
                row += [rb["rmse_deg"], rb["rmse_m"]] if rb else [float("nan")] * 2
            rows.append(row + [s["avg_deg"], s["avg_m"], s["mean_nees"], s["bytes_per_frame"], s["runs"]])
        p = out / "summary.csv"
        _write_csv(p, header, rows)
        paths.append(p)
        p = out / "summary.json"
        with open(p, "w") as fh:
            json.dump({"variants": _jsonable(summary)}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(p)
    except OSError as exc:
        raise IOError(f"cannot write reports to {out}: {exc}") from exc
    return paths


def read_run_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("run", "robot") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# stored trajectories


_TRIU = np.triu_indices(6)


def trajectory_paths(root, variant, run, robot):
    base = Path(root) / variant / f"run{run:03d}_robot{robot}"
    return base.with_suffix(".tum"), Path(str(base) + ".cov.txt")


def write_series(root, variant, run, robot, s: PoseSeries):
    """TUM pose file plus a sidecar with the pose covariance and message bytes."""
    tum, side = trajectory_paths(root, variant, run, robot)
    os.makedirs(tum.parent, exist_ok=True)
    with open(tum, "w") as fh:
        # TUM stores the body-to-world rotation; its Hamilton quaternion has
        # the same components as the JPL q_GtoI
        write_tum(fh, s.t, s.p, s.q, fmt=".17g")
    if s.P is not None or s.bytes is not None:
        with open(side, "w") as fh:
            fh.write("# t bytes P_upper(21, row-major over [dtheta, dp])\n")
            for k in range(len(s.t)):
                b = 0 if s.bytes is None else int(s.bytes[k])
                P = np.full(21, np.nan) if s.P is None else s.P[k][_TRIU]
                fh.write(" ".join([f"{s.t[k]:.9f}", str(b)] + [format(v, ".17g") for v in P]) + "\n")


def read_series(root, variant, run, robot) -> PoseSeries:
    tum, side = trajectory_paths(root, variant, run, robot)
    data = np.loadtxt(tum, ndmin=2)
    t, p, q = data[:, 0], data[:, 1:4], data[:, 4:8]
    P = B = None
    if side.exists():
        extra = np.loadtxt(side, ndmin=2, comments="#")
        if len(extra) != len(t):
            raise LengthMismatch(f"{side} has {len(extra)} rows, {tum} has {len(t)}")
        B = extra[:, 1]
        if np.all(np.isfinite(extra[:, 2:])):
            P = np.zeros((len(t), 6, 6))
            P[:, _TRIU[0], _TRIU[1]] = extra[:, 2:]
            P[:, _TRIU[1], _TRIU[0]] = extra[:, 2:]
    return PoseSeries(t, q, p, P, B)
