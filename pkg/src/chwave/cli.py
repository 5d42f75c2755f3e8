"""Command line entry point.

    chwave profile    --kind accumulating --q 0.8 --segments 6 --out runs/p
    chwave simulate   --kind hat --grid 4096 --T 1 --out runs/s
    chwave predict    --slope -6 --energy 1
    chwave cuspon     --m 1 --s 3 --mmax 5 --out runs/c
    chwave accumulate --q 0.8 --segments 6 --grid 16384 --out runs/a1
    chwave audit      --run runs/s

Exit status: 0 all hard checks passed, 1 a check failed, 2 usage error,
3 input/output error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import breaking as brk
from . import cuspon as cus
from . import experiments as exp
from .coords import EulerianState, Grid, LagrangianState, graded_grid, profile_knots, to_lagrangian
from .dynamics import IntegratorOptions, Trajectory, evolve
from .profiles import (PiecewiseLinearProfile, ProfileError, accumulating_profile, h1_norm_sq,
                       piecewise_linear, steep_profile)

log = logging.getLogger("chwave")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
SUBCOMMANDS = ("profile", "simulate", "predict", "cuspon", "accumulate", "audit")


@dataclass
class RunConfig:
    subcommand: str
    params: dict = field(default_factory=dict)
    out: Path | None = None
    quiet: bool = False

    def __post_init__(self):
        if self.subcommand not in SUBCOMMANDS:
            raise ValueError(f"unknown subcommand {self.subcommand!r}")
        allowed = _ALLOWED[self.subcommand]
        unknown = sorted(set(self.params) - allowed)
        if unknown:
            raise ValueError(f"unknown keys for {self.subcommand}: {', '.join(unknown)}")


# ---------------------------------------------------------------------------
# argument types

def _typed(kind, check, what):
    def conv(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid value {text!r}") from None
        if not check(v):
            raise argparse.ArgumentTypeError(f"{text!r} must be {what}")
        return v
    return conv


_pos_float = _typed(float, lambda v: v > 0 and np.isfinite(v), "a positive number")
_finite = _typed(float, np.isfinite, "finite")
_unit = _typed(float, lambda v: 0 < v < 1, "in (0, 1)")
_grid_n = _typed(int, lambda v: v >= 16, "an integer >= 16")
_pos_int = _typed(int, lambda v: v >= 1, "a positive integer")
_snap = _typed(int, lambda v: v >= 2, "an integer >= 2")


def _points(text):
    try:
        pts = [tuple(float(c) for c in item.split(":")) for item in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid points {text!r}; expected x:u,x:u,...") from None
    if any(len(p) != 2 for p in pts):
        raise argparse.ArgumentTypeError("each point must be x:u")
    return pts


def _add_profile_args(sp):
    sp.add_argument("--kind", choices=["hat", "accumulating", "steep"], default="hat")
    sp.add_argument("--q", type=_unit, default=0.8)
    sp.add_argument("--segments", type=_pos_int, default=6, help="J for the accumulating profile")
    sp.add_argument("--slope", type=_finite, default=-6.0, help="steepest slope of the steep profile")
    sp.add_argument("--energy", type=_pos_float, default=1.0, help="energy of the steep profile")
    sp.add_argument("--points", type=_points, default=None, help="explicit profile x:u,x:u,...")
    sp.add_argument("--profile-json", type=Path, default=None, help="profile written by 'profile'")


def _add_integrator_args(sp, dt_max=0.05):
    sp.add_argument("--tol-step", type=_pos_float, default=1e-10)
    sp.add_argument("--tol-energy", type=_pos_float, default=1e-8)
    sp.add_argument("--dt-max", type=_pos_float, default=dt_max)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chwave", description="Conservative CH solutions in Lagrangian coordinates")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    sp = sub.add_parser("profile", help="build and export an initial profile")
    _add_profile_args(sp)
    sp.add_argument("--out", type=Path, default=None)

    sp = sub.add_parser("simulate", help="evolve a profile and detect breaking")
    _add_profile_args(sp)
    sp.add_argument("--grid", type=_grid_n, default=4096)
    sp.add_argument("--margin", type=_pos_float, default=10.0)
    sp.add_argument("--T", type=_finite, default=1.0, help="end time, may be negative")
    sp.add_argument("--snapshots", type=_snap, default=11)
    _add_integrator_args(sp, 0.01)
    sp.add_argument("--out", type=Path, default=None)

    sp = sub.add_parser("predict", help="a-priori breaking time bound")
    sp.add_argument("--slope", type=_finite, required=True)
    sp.add_argument("--energy", type=_pos_float, required=True)
    sp.add_argument("--backward", action="store_true")

    sp = sub.add_parser("cuspon", help="cuspon construction and dynamics checks")
    sp.add_argument("--m", type=_finite, default=1.0)
    sp.add_argument("--s", type=_finite, default=3.0)
    sp.add_argument("--mmax", type=_finite, default=5.0)
    sp.add_argument("--grid", type=_grid_n, default=8192)
    sp.add_argument("--T", type=_finite, default=0.5)
    sp.add_argument("--delta", type=_pos_float, default=0.05)
    sp.add_argument("--snapshots", type=_snap, default=51)
    _add_integrator_args(sp)
    sp.add_argument("--out", type=Path, default=None)

    sp = sub.add_parser("accumulate", help="accumulation of breaking times")
    sp.add_argument("--q", type=_unit, default=0.8)
    sp.add_argument("--segments", type=_pos_int, default=6)
    sp.add_argument("--grid", type=_grid_n, default=16384)
    sp.add_argument("--factor", type=_pos_float, default=2.0, help="window inflation")
    sp.add_argument("--no-backward", action="store_true")
    sp.add_argument("--snapshots", type=_snap, default=41)
    _add_integrator_args(sp, 0.02)
    sp.add_argument("--out", type=Path, default=None)

    sp = sub.add_parser("audit", help="y_xi > 0 audit of a simulate output directory")
    sp.add_argument("--run", type=Path, required=True)
    sp.add_argument("--threshold", type=_pos_float, default=None)
    sp.add_argument("--active-segments", type=_pos_int, default=1)
    sp.add_argument("--out", type=Path, default=None)
    return ap


_ALLOWED = {
    "profile": {"kind", "q", "segments", "slope", "energy", "points", "profile_json"},
    "simulate": {"kind", "q", "segments", "slope", "energy", "points", "profile_json", "grid", "margin",
                 "T", "snapshots", "tol_step", "tol_energy", "dt_max"},
    "predict": {"slope", "energy", "backward"},
    "cuspon": {"m", "s", "mmax", "grid", "T", "delta", "snapshots", "tol_step", "tol_energy", "dt_max"},
    "accumulate": {"q", "segments", "grid", "factor", "no_backward", "snapshots", "tol_step",
                   "tol_energy", "dt_max"},
    "audit": {"run", "threshold", "active_segments"},
}


def parse_args(argv: Sequence[str] | None = None) -> RunConfig:
    """Parse and validate; usage errors exit with status 2."""
    ap = build_parser()
    ns = ap.parse_args(argv)
    d = vars(ns).copy()
    sub = d.pop("subcommand")
    verbose = d.pop("verbose")
    out = d.pop("out", None)
    if sub == "cuspon" and not d["m"] < d["s"] < d["mmax"]:
        ap.error(f"argument --m/--s/--mmax: need m < s < mmax, got {d['m']}, {d['s']}, {d['mmax']}")
    if sub in ("cuspon", "accumulate", "simulate") and d.get("dt_max", 1) > 1:
        ap.error("argument --dt-max: must be <= 1")
    cfg = RunConfig(sub, d, out)
    cfg.quiet = not verbose
    return cfg


# ---------------------------------------------------------------------------
# output

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return json.dumps(exp._plain(v))
    return str(v)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    cols = list(rows[0].keys())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in cols])
    return buf.getvalue()


def write_outputs(report: exp.ExperimentReport | None, config: RunConfig,
                  extra: dict[str, str] | None = None) -> list[str]:
    """Write manifest.json, report.json and CSV tables under ``config.out``.

    Returns the written file names.  Raises OSError on IO failure.
    """
    if config.out is None:
        return []
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    if report is not None:
        files["report.json"] = report.to_json() + "\n"
        for name, rows in sorted(report.tables.items()):
            if rows:
                files[f"{name}.csv"] = rows_to_csv(rows)
        if report.events:
            files["events.csv"] = brk.events_to_csv(report.events)
        if report.timing:
            files["timing.json"] = json.dumps(report.timing, indent=1) + "\n"
    files.update(extra or {})
    manifest = {
        "schema": exp.SCHEMA,
        "subcommand": config.subcommand,
        "config": exp._plain({k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(config.params.items())}),
        "passed": None if report is None else report.passed,
        "files": sorted(files),
    }
    files["manifest.json"] = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8", newline="\n")
    return sorted(files)


# ---------------------------------------------------------------------------
# commands

def _profile(params) -> PiecewiseLinearProfile:
    if params.get("profile_json") is not None:
        return PiecewiseLinearProfile.from_json(Path(params["profile_json"]).read_text(encoding="utf-8"))
    if params.get("points") is not None:
        return piecewise_linear(params["points"])
    kind = params["kind"]
    if kind == "accumulating":
        return accumulating_profile(params["q"], params["segments"])
    if kind == "steep":
        return steep_profile(params["slope"], params["energy"])
    return piecewise_linear([(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)])


def _options(params) -> IntegratorOptions:
    dt_max = params["dt_max"]
    return IntegratorOptions(dt_init=min(1e-3, dt_max), dt_max=dt_max, tol_step=params["tol_step"],
                             tol_energy=params["tol_energy"])


def cmd_profile(cfg: RunConfig) -> tuple[exp.ExperimentReport | None, dict]:
    p = _profile(cfg.params)
    xb = p.breakpoints
    rows = [{"x": float(x), "u": float(p(x))} for x in xb]
    rep = exp.ExperimentReport("profile", {k: v for k, v in cfg.params.items() if k != "profile_json"})
    rep.tables["profile"] = rows
    rep.metadata.update(h1_norm_sq=h1_norm_sq(p), min_slope=float(p.slopes.min()),
                        max_slope=float(p.slopes.max()))
    rep.check("continuity", float(np.max(np.abs(p.continuity_defects()), initial=0.0)) <= 1e-12,
              float(np.max(np.abs(p.continuity_defects()), initial=0.0)), 1e-12, "continuous profile")
    if not cfg.quiet or cfg.out is None:
        print(f"segments={p.n_segments} support=[{xb[0]!r}, {xb[-1]!r}] energy={h1_norm_sq(p)!r}")
    return rep, {"profile.json": p.to_json() + "\n"}


def cmd_simulate(cfg: RunConfig):
    prm = cfg.params
    p = _profile(prm)
    e = EulerianState.from_profile(p)
    grid = graded_grid(profile_knots(e), prm["grid"], prm["margin"])
    X0 = to_lagrangian(e, grid)
    det = brk.BreakingDetector()
    T = prm["T"]
    traj = evolve(X0, T, _options(prm), t_out=np.linspace(0.0, T, prm["snapshots"]), observer=det)
    rep = exp.ExperimentReport("simulate", dict(prm, profile_json=None))
    rep.events = det.events()
    drift = traj.relative_energy_drift()
    cons = max(float(np.max(np.abs(s.constraint_residual()))) for s in traj.states)
    rep.metadata.update(energy=float(traj.energy[0]), n_events=len(rep.events),
                        min_slope=float(p.slopes.min()), max_slope=float(p.slopes.max()))
    rep.check("energy_drift", drift <= 1e-6, drift, 1e-6, "energy is conserved")
    rep.check("constraint", cons <= 1e-8, cons, 1e-8, "y_xi h = U_xi^2 is preserved")
    pred = brk.predict_forward(float(p.slopes.min()), h1_norm_sq(p)) if T > 0 else \
        brk.predict_backward(float(p.slopes.max()), h1_norm_sq(p))
    if pred is not None and abs(pred) <= abs(T):
        first = min((ev.t_hi for ev in rep.events), default=None) if T > 0 else \
            max((ev.t_lo for ev in rep.events), default=None)
        width = max((ev.width for ev in rep.events), default=0.0)
        ok = first is not None and abs(first) <= abs(pred) + width
        rep.check("predicted_breaking", ok, first, pred, "breaking no later than the a-priori bound")
    extra = {}
    if cfg.out is not None:
        traj.write(cfg.out / "trajectory")
    return rep, extra


def cmd_predict(cfg: RunConfig):
    s, en = cfg.params["slope"], cfg.params["energy"]
    t = brk.predict_backward(s, en) if cfg.params["backward"] else brk.predict_forward(s, en)
    if t is None:
        side = "backward" if cfg.params["backward"] else "forward"
        print(f"no {side} prediction available")
    else:
        print(repr(t))
    return None, {}


def cmd_cuspon(cfg: RunConfig):
    prm = cfg.params
    p = cus.CusponProfile(prm["m"], prm["s"], prm["mmax"])
    rep = exp.run_cuspon(p, n=prm["grid"], T=prm["T"], delta=prm["delta"], opts=_options(prm),
                         n_snapshots=prm["snapshots"])
    xs = np.concatenate([-np.geomspace(10.0, 1e-3, 200), [0.0], np.geomspace(1e-3, 10.0, 200)])
    extra = {"profile.csv": cus.profile_csv(xs, p), "profile.json": p.to_json() + "\n"}
    return rep, extra


def cmd_accumulate(cfg: RunConfig):
    prm = cfg.params
    rep = exp.run_accumulation(prm["q"], prm["segments"], n=prm["grid"], opts=_options(prm),
                               backward=not prm["no_backward"], factor=prm["factor"],
                               n_snapshots=prm["snapshots"])
    return rep, {}


def load_trajectory(directory: Path) -> Trajectory:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    grid = Grid(np.asarray(man["grid"], dtype=float))
    states = []
    for k in range(len(man["times"])):
        text = (d / f"snapshot_{k:04d}.csv").read_text(encoding="utf-8")
        states.append(LagrangianState.from_csv(text, faces=grid.faces, asymptote=man.get("asymptote", 0.0)))
    return Trajectory(np.asarray(man["times"]), states, np.asarray(man["energies"]))


def cmd_audit(cfg: RunConfig):
    run = Path(cfg.params["run"])
    tdir = run / "trajectory" if (run / "trajectory").is_dir() else run
    traj = load_trajectory(tdir)
    rep = exp.audit_positive_yxi(traj, cfg.params["threshold"], cfg.params["active_segments"])
    return rep, {}


COMMANDS = {"profile": cmd_profile, "simulate": cmd_simulate, "predict": cmd_predict,
            "cuspon": cmd_cuspon, "accumulate": cmd_accumulate, "audit": cmd_audit}


def _summary(rep: exp.ExperimentReport) -> str:
    lines = []
    for a in rep.assertions:
        tag = "PASS" if a.passed else ("FAIL" if a.hard else "warn")
        lines.append(f"{tag:4s} {a.name}")
    return "\n".join(lines)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cfg = parse_args(argv)
    except SystemExit as e:  # argparse: --help exits 0, errors exit 2
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING if cfg.quiet else logging.INFO, format="%(message)s")
    try:
        rep, extra = COMMANDS[cfg.subcommand](cfg)
    except OSError as e:
        print(f"chwave: {e}", file=sys.stderr)
        return EXIT_IO
    except (ProfileError, cus.CusponError, brk.BreakingError, ValueError) as e:
        print(f"chwave: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        write_outputs(rep, cfg, extra)
    except OSError as e:
        print(f"chwave: cannot write outputs: {e}", file=sys.stderr)
        return EXIT_IO
    if rep is None:
        return EXIT_OK
    if cfg.subcommand != "profile":
        print(_summary(rep))
    return EXIT_OK if rep.passed else EXIT_FAIL
