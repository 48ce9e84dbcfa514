"""Command-line entry point: ``plcvio-bench simulate | metrics | export-tracks``.

Exit codes: 0 success, 2 configuration error, 3 filter divergence (some robot
with position RMSE above 10 m, or a covariance that lost positive
definiteness), 4 NEES outside the consistency envelope with ``--strict``.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

import yaml

from ..errors import ConfigError, ConsistencyError, PLCVIOError
from ..meas import write_tracks
from ..sim.config import SimConfig
from ..sim.world import generate_run
from .campaign import DIVERGENCE_RMSE_M, NEES_BOUNDS, CampaignResult, run_campaign
from .reports import emit_reports, make_report, read_series
from .variants import resolve_variants

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INCONSISTENT = 0, 2, 3, 4
DESK_RUNS = 10  # campaign size unless the config file or --runs says otherwise

log = logging.getLogger("plcvio.bench")


def load_config(args) -> tuple[SimConfig, list[str]]:
    """Config file plus command-line overrides, and the requested variant names."""
    names = []
    raw = {}
    if args.config:
        cfg = SimConfig.from_yaml(args.config)
        with open(args.config) as fh:
            raw = yaml.safe_load(fh) or {}
        names = list(raw.get("variants") or [])
    else:
        cfg = SimConfig()
    over = {}
    if "mc_runs" not in raw:
        over["mc_runs"] = DESK_RUNS
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "regime", None):
        over["regime"] = args.regime
    if getattr(args, "runs", None) is not None:
        if args.runs < 1:
            raise ConfigError("--runs must be at least 1")
        over["mc_runs"] = args.runs
    if over:
        cfg = cfg.replace(**over)
    if getattr(args, "variant", None):
        names = args.variant
    resolve_variants(names)  # validate early
    return cfg, names


def _write_config(cfg: SimConfig, names, out: Path):
    d = cfg.to_dict()
    d["variants"] = [v.name for v in resolve_variants(names)]
    with open(out / "config.yaml", "w") as fh:
        yaml.safe_dump(d, fh, sort_keys=True)


def _status(result: CampaignResult, strict: bool) -> int:
    bad = result.diverged(DIVERGENCE_RMSE_M)
    for r in bad:
        log.error("%s run %d robot %d diverged: rmse %.3g m", r.variant, r.run, r.robot, r.rmse_m)
    if bad:
        return EXIT_DIVERGED
    if strict:
        viol = result.nees_violations(NEES_BOUNDS)
        for name, m in viol.items():
            log.error("%s mean NEES %.3f outside [%g, %g]", name, m, *NEES_BOUNDS)
        if viol:
            return EXIT_INCONSISTENT
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg, names = load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, names, out)
    result = run_campaign(cfg, names, segments=cfg.segment_lengths,
                          trajectories_dir=None if args.no_trajectories else out / "trajectories",
                          workers=args.workers)
    emit_reports(result.reports, out, [v.name for v in result.variants], cfg.num_robots)
    for v in result.variants:
        log.info("%-12s mean rmse %.4f m  mean NEES %.2f", v.name, result.mean_rmse_m(v.name),
                 result.mean_nees(v.name))
    return _status(result, args.strict)


_TRAJ = re.compile(r"run(\d+)_robot(\d+)\.tum$")


def cmd_metrics(args) -> int:
    src = Path(args.input or args.out)
    root = src / "trajectories"
    if not root.is_dir():
        raise ConfigError(f"no stored trajectories under {root}")
    cfg_path = src / "config.yaml"
    cfg = SimConfig.from_yaml(cfg_path) if cfg_path.exists() else SimConfig()
    names = args.variant or sorted(p.name for p in root.iterdir() if p.is_dir() and p.name != "truth")
    variants = resolve_variants(names)
    reports = []
    for v in variants:
        files = sorted((root / v.name).glob("run*_robot*.tum"))
        for f in files:
            run, robot = (int(x) for x in _TRAJ.search(f.name).groups())
            est = read_series(root, v.name, run, robot)
            truth = read_series(root, "truth", run, robot)
            reports.append(make_report(v.name, run, robot, est, truth, cfg.segment_lengths))
    out = Path(args.out)
    emit_reports(reports, out, [v.name for v in variants], cfg.num_robots)
    return _status(CampaignResult(cfg, variants, reports), args.strict)


def cmd_export_tracks(args) -> int:
    cfg, _ = load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for run in range(cfg.mc_runs):
        data = generate_run(cfg, run)
        for robot in range(data.num_robots):
            path = out / f"run{run:03d}_robot{robot}.jsonl"
            with open(path, "w") as fh:
                n = 0
                for frame in data.frames:
                    pts, lines = frame[robot].observations()
                    n += write_tracks(fh, pts + lines)
            log.info("wrote %d observations to %s", n, path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plcvio-bench", description="Cooperative point-line VIO benchmark.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, campaign=True):
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--out", metavar="DIR", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--regime", choices=["rich", "low"])
        sp.add_argument("--runs", type=int)
        if campaign:
            sp.add_argument("--variant", action="append", metavar="NAME")

    sp = sub.add_parser("simulate", help="run a Monte-Carlo campaign")
    common(sp)
    sp.add_argument("--strict", action="store_true", help="exit 4 when a variant's mean NEES is out of bounds")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--no-trajectories", action="store_true", help="skip the per-robot trajectory files")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("metrics", help="recompute reports from stored trajectories")
    sp.add_argument("--out", metavar="DIR", required=True)
    sp.add_argument("--input", metavar="DIR", help="campaign directory (default: --out)")
    sp.add_argument("--variant", action="append", metavar="NAME")
    sp.add_argument("--strict", action="store_true")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("export-tracks", help="write the JSON-Lines measurement stream")
    common(sp, campaign=False)
    sp.set_defaults(func=cmd_export_tracks)
    return p


def main(argv=None) -> int:
    p = build_parser()
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConsistencyError as exc:
        print(f"filter diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (PLCVIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
