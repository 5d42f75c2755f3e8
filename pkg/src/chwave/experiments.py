"""The two headline runs (breaking-time accumulation, cuspon) and the audit
of y_xi > 0, packaged as deterministic reports.

A report holds the configuration, result tables and a list of assertions;
each assertion carries its value, tolerance and the property it checks.
Wall-clock timings are kept apart from the report body so that identical
configurations give byte-identical JSON.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import breaking as brk
from . import cuspon as cus
from .coords import EulerianState, LagrangianState, graded_grid, profile_knots, to_lagrangian
from .dynamics import IntegratorOptions, Kernel, Trajectory, compute_P, compute_Q, evolve, step, total_energy
from .profiles import accumulating_profile, plateau_segments, rising_segments

log = logging.getLogger(__name__)

SCHEMA = 1


@dataclass
class Assertion:
    name: str
    passed: bool
    value: Any
    tolerance: Any
    anchor: str
    hard: bool = True

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": _plain(self.value),
                "tolerance": _plain(self.tolerance), "anchor": self.anchor, "hard": self.hard}


@dataclass
class ExperimentReport:
    name: str
    config: dict
    tables: dict[str, list[dict]] = field(default_factory=dict)
    assertions: list[Assertion] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    events: list[brk.BreakingEvent] = field(default_factory=list)

    def check(self, name, passed, value, tolerance, anchor, hard=True) -> bool:
        self.assertions.append(Assertion(name, bool(passed), value, tolerance, anchor, hard))
        return bool(passed)

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions if a.hard)

    def assertion(self, name: str) -> Assertion:
        for a in self.assertions:
            if a.name == name:
                return a
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "name": self.name,
            "config": _plain(self.config),
            "passed": self.passed,
            "assertions": [a.as_dict() for a in self.assertions],
            "tables": _plain(self.tables),
            "metadata": _plain(self.metadata),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=1, sort_keys=True)


def _plain(v):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else repr(f)
    return v


# ---------------------------------------------------------------------------
# audit

def default_threshold(X0: LagrangianState) -> float:
    """y_xi level below which a node counts as broken in the audits."""
    return 1e-8 * float(np.median(X0.y_xi))


def audit_positive_yxi(traj: Trajectory, threshold: float | None = None,
                       active_segments: int = 1) -> ExperimentReport:
    """Fraction of nodes with y_xi below ``threshold`` at every snapshot;
    it must stay within ``2 * active_segments / N``."""
    n = traj.grid.n
    if threshold is None:
        threshold = default_threshold(traj.states[int(np.argmin(np.abs(traj.times)))])
    limit = 2.0 * active_segments / n
    rows = []
    worst = 0.0
    for t, X in zip(traj.times, traj.states):
        cnt = int(np.sum(X.y_xi < threshold))
        frac = cnt / n
        worst = max(worst, frac)
        rows.append({"t": float(t), "count": cnt, "fraction": frac})
    rep = ExperimentReport("audit", {"threshold": threshold, "active_segments": active_segments, "n": n})
    rep.tables["audit"] = rows
    rep.check("positive_y_xi", worst <= limit, worst, limit,
              "y_xi > 0 for almost every label at almost every time")
    return rep


# ---------------------------------------------------------------------------
# ratio identity

def ratio_rhs(X: LagrangianState, kernel: Kernel | None = None) -> np.ndarray:
    """Closed-form time derivative of ``U_xi / (y_xi + h)``."""
    a = X.U**2 - compute_P(X, kernel)
    S = X.y_xi + X.h
    return 0.5 + (a - 0.5) * X.y_xi / S - (2.0 * a + 1.0) * X.U_xi**2 / S**2


def ratio_identity_errors(X: LagrangianState, dts=(2e-3, 1e-3, 5e-4, 2.5e-4)) -> list[float]:
    """Max-norm error of the forward difference of ``U_xi/(y_xi+h)`` against
    :func:`ratio_rhs`, for each step in ``dts``."""
    kernel = Kernel.for_state(X)
    r0 = X.U_xi / (X.y_xi + X.h)
    exact = ratio_rhs(X, kernel)
    out = []
    for dt in dts:
        Y, _ = step(X, dt)
        fd = (Y.U_xi / (Y.y_xi + Y.h) - r0) / dt
        out.append(float(np.max(np.abs(fd - exact))))
    return out


# ---------------------------------------------------------------------------
# accumulation of breaking times

def _segment_nodes(y0: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.flatnonzero((y0 >= lo) & (y0 <= hi))


def _first_per_segment(fb: dict[int, brk.BreakingEvent], nodes: np.ndarray, forward: bool):
    evs = [fb[i] for i in nodes if i in fb]
    if not evs:
        return None
    # first breaking: earliest for t > 0, closest to zero for t < 0
    return min(evs, key=lambda e: e.t_lo) if forward else max(evs, key=lambda e: e.t_hi)


def _run_direction(X0, p, J, c_of_m, T, opts, factor, n_snap, forward, rep):
    det = brk.BreakingDetector()
    t_out = np.linspace(0.0, T, n_snap)
    traj = evolve(X0, T, opts, t_out=t_out, observer=det)
    events = det.events()
    fb = brk.first_breaking(events)
    segs = plateau_segments(J) if forward else rising_segments(J)
    label = "forward" if forward else "backward"
    rows = []
    for j, si in enumerate(segs):
        lo, hi = p.breakpoints[si], p.breakpoints[si + 1]
        nodes = _segment_nodes(X0.y, lo, hi)
        k = float(p.slopes[si])
        gamma = brk.segment_gamma(k)
        row = {"direction": label, "j": j, "segment": si, "x_lo": float(lo), "x_hi": float(hi),
               "slope": k, "gamma": gamma, "nodes": int(nodes.size)}
        try:
            w = brk.breaking_window(gamma, c_of_m)
            row["t2"], row["t1"] = w.t2, w.t1
        except brk.BreakingError:
            # 1/2 - C gamma <= 0: only the lower end of the window exists
            num = math.sqrt(gamma * (1.0 - gamma))
            row["t2"], row["t1"] = num / (0.5 + c_of_m * gamma), math.inf
        row["window_lo"], row["window_hi"] = row["t2"] / factor, row["t1"] * factor
        ev = _first_per_segment(fb, nodes, forward)
        if ev is None:
            row.update(status="unresolved", t_lo=None, t_hi=None, node=None, inside=None)
        else:
            a, b = (ev.t_lo, ev.t_hi) if forward else (-ev.t_hi, -ev.t_lo)
            row.update(status="resolved", t_lo=ev.t_lo, t_hi=ev.t_hi, node=ev.node,
                       inside=bool(a >= row["window_lo"] and b <= row["window_hi"]))
        rows.append(row)
    rep.tables[f"segments_{label}"] = rows
    rep.events.extend(events)
    res = [r for r in rows if r["status"] == "resolved"]
    rep.metadata[f"{label}_energy_drift"] = traj.relative_energy_drift()
    rep.metadata[f"{label}_steps"] = {"accepted": traj.n_accepted, "rejected": traj.n_rejected}

    if len(res) >= 2:
        if forward:
            ok = all(r2["t_hi"] <= r1["t_lo"] and r2["j"] > r1["j"] for r1, r2 in zip(res, res[1:]))
            vals = [r["t_lo"] for r in res]
            rep.check("forward_times_decreasing", ok, vals, "strict, disjoint brackets",
                      "first breaking times decrease toward 0 along steepening segments")
        else:
            ok = all(r2["t_lo"] >= r1["t_hi"] for r1, r2 in zip(res, res[1:]))
            vals = [r["t_hi"] for r in res]
            rep.check("backward_times_increasing", ok, vals, "strict, disjoint brackets",
                      "backward breaking times increase to 0 along steepening segments")
            rep.check("backward_times_negative", all(r["t_hi"] < 0 for r in res), vals, "< 0",
                      "breaking in the past for rising segments")
    rep.check(f"{label}_windows", all(r["inside"] for r in res),
              [[r["j"], r["window_lo"], r["window_hi"]] for r in res], f"window inflated x{factor:g}",
              "first breaking time lies between T2(gamma) and T1(gamma)")
    unresolved = [r["j"] for r in rows if r["status"] != "resolved"]
    rep.check(f"{label}_resolved", not unresolved, unresolved, "all segments", "grid resolution", hard=False)
    return traj, res


def _membership(X0, p, J, events):
    """For each plateau gamma: the largest horizon T such that every node
    breaking before T starts in the kappa set of that gamma."""
    rows = []
    forward = sorted((e for e in events if e.t_lo >= 0), key=lambda e: e.t_lo)
    for si in plateau_segments(J):
        gamma = brk.segment_gamma(float(p.slopes[si]))
        if gamma > 0.5:
            continue
        inside = brk.kappa_mask(X0, gamma)
        out = next((e for e in forward if not inside[e.node]), None)
        rows.append({"gamma": gamma, "kappa_nodes": int(inside.sum()),
                     "T_hat": math.inf if out is None else out.t_lo})
    return rows


def run_accumulation(q: float = 0.8, J: int = 6, n: int = 16384, opts: IntegratorOptions | None = None,
                     T_forward: float | None = None, T_backward: float | None = None,
                     backward: bool = True, factor: float = 2.0, margin: float = 10.0,
                     n_snapshots: int = 41) -> ExperimentReport:
    """Forward (and optionally backward) evolution of the steepening profile;
    events are attributed to segment j when y0 of the node lies on it."""
    p = accumulating_profile(q, J)
    opts = opts or IntegratorOptions(dt_max=0.02)
    e = EulerianState.from_profile(p)
    grid = graded_grid(profile_knots(e), n, margin)
    X0 = to_lagrangian(e, grid)
    c_of_m = brk.estimate_c_of_m(X0)
    k_neg = -p.slopes[plateau_segments(J)[0]]
    k_pos = p.slopes[rising_segments(J)[0]] if J >= 1 else k_neg
    T_forward = 1.4 * 2.0 / k_neg if T_forward is None else T_forward
    T_backward = -1.4 * 2.0 / k_pos if T_backward is None else -abs(T_backward)
    cfg = {"q": q, "J": J, "n": n, "margin": margin, "factor": factor, "backward": backward,
           "T_forward": T_forward, "T_backward": T_backward if backward else None,
           "options": opts.__dict__.copy(), "n_snapshots": n_snapshots}
    rep = ExperimentReport("accumulation", cfg)
    rep.metadata.update(c_of_m=c_of_m, c_of_m_heuristic=True, energy=total_energy(X0), grid_n=n)
    t0 = time.perf_counter()

    traj_f, res_f = _run_direction(X0, p, J, c_of_m, T_forward, opts, factor, n_snapshots, True, rep)
    if len(res_f) >= 2:
        first = res_f[0]
        jr = min(5, J)
        late = next((r for r in res_f if r["j"] == jr), res_f[-1])
        rep.check("accumulation_ratio", late["t_hi"] < first["t_lo"] / 4.0,
                  {f"t_{first['j']}": first["t_lo"], f"t_{late['j']}": late["t_hi"],
                   "ratio": late["t_hi"] / first["t_lo"]}, f"t_{late['j']} < t_{first['j']} / 4",
                  "breaking times accumulate at t = 0")
        valid = [r for r in res_f if math.isfinite(r["t1"])]
        t1s = [r["t1"] for r in valid]
        gstar = 1.0 / (2.0 * (1.0 + c_of_m))
        t2s = [r["t2"] for r in valid if r["gamma"] < gstar]
        ok = all(b < a for a, b in zip(t1s, t1s[1:])) and all(b < a for a, b in zip(t2s, t2s[1:]))
        rep.check("windows_shrink", ok, {"t1": t1s, "t2": t2s}, "strictly decreasing in j",
                  "T1(gamma), T2(gamma) -> 0 as gamma -> 0")
    active = len(plateau_segments(J)) + 1
    aud = audit_positive_yxi(traj_f, active_segments=active)
    rep.tables["audit_forward"] = aud.tables["audit"]
    rep.assertions.append(_renamed(aud.assertions[0], "audit_forward"))
    # ratio identity on a snapshot away from t = 0
    k = min(len(traj_f.states) - 1, max(1, len(traj_f.states) // 8))
    errs = ratio_identity_errors(traj_f.states[k])
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    rep.check("ratio_identity_first_order", all(1.8 <= r <= 2.2 for r in ratios),
              {"t": float(traj_f.times[k]), "errors": errs, "ratios": ratios}, "ratio in [1.8, 2.2]",
              "(U_xi/(y_xi+h))_t closed form")
    rep.tables["membership"] = _membership(X0, p, J, rep.events)
    sep = brk.check_separation(rep.events, 0.0)
    rep.metadata["separation"] = {"min_gap": sep.min_gap, "nodes_with_repeats": sep.nodes_with_repeats}
    rep.check("separation", sep.min_gap is None or sep.min_gap > 0, sep.min_gap, "> 0",
              "breaking times at one label do not accumulate", hard=False)

    if backward:
        traj_b, res_b = _run_direction(X0, p, J, c_of_m, T_backward, opts, factor, n_snapshots, False, rep)
        aud_b = audit_positive_yxi(traj_b, active_segments=len(rising_segments(J)) + 1)
        rep.tables["audit_backward"] = aud_b.tables["audit"]
        rep.assertions.append(_renamed(aud_b.assertions[0], "audit_backward"))
    rep.timing["seconds"] = time.perf_counter() - t0
    return rep


def _renamed(a: Assertion, name: str) -> Assertion:
    return Assertion(name, a.passed, a.value, a.tolerance, a.anchor, a.hard)


# ---------------------------------------------------------------------------
# cuspon

def plateau_runs(y: np.ndarray) -> int:
    """Number of maximal runs of two or more nodes with equal y."""
    eq = np.diff(y) <= 0.0
    return int(np.sum(eq[1:] & ~eq[:-1]) + (1 if eq.size and eq[0] else 0))


def _cusp_qt(p: cus.CusponProfile, X0: LagrangianState, k0: int, dt: float) -> float:
    """Central difference of Q at the cusp node, which meets the cusp at t = 0."""
    kernel = Kernel.for_state(X0)
    Xp, _ = step(X0, dt)
    Xm, _ = step(X0, -dt)
    return float((compute_Q(Xp, kernel)[k0] - compute_Q(Xm, kernel)[k0]) / (2.0 * dt))


def run_cuspon(p: cus.CusponProfile, n: int = 8192, T: float = 0.5, delta: float = 0.05,
               opts: IntegratorOptions | None = None, n_snapshots: int = 51,
               translation_tol: float | None = None, qt_dt: float = 1e-4) -> ExperimentReport:
    opts = opts or IntegratorOptions()
    translation_tol = 1e-3 if translation_tol is None else translation_tol
    cfg = {"m": p.m, "s": p.s, "M_max": p.M_max, "n": n, "T": T, "delta": delta,
           "options": opts.__dict__.copy(), "n_snapshots": n_snapshots, "translation_tol": translation_tol}
    rep = ExperimentReport("cuspon", cfg)
    rep.metadata.update(kappa=p.kappa, speed=p.speed, asymptote=p.asymptote,
                        xi_bar=cus.xi_bar(p), energy_half=cus.energy_half(p))
    t0 = time.perf_counter()

    # profile
    rep.check("phi_at_crest", cus.phi(0.0, p) == p.s, cus.phi(0.0, p), "exact", "phi(0) = s")
    xs = np.linspace(0.01, 10.0, 1000)
    res = float(np.max(cus.ode_residual(xs, p)))
    rep.check("profile_ode_residual", res <= 1e-9, res, 1e-9, "phi_x^2 = (M-phi)(phi-m)^2/(s-phi)")
    xh = np.linspace(1e-3, 20.0, 1000)
    slack = float(np.min(cus.holder_bound(xh, p) - (p.s - cus.phi(xh, p))))
    rep.check("holder_bound", slack >= 0, slack, ">= 0", "s - phi(x) <= (M-m)(3x/2)^(2/3)")
    e0 = cus.energy_to(0.0, p)
    rep.check("energy_bound", e0 <= cus.energy_bound(p), e0, cus.energy_bound(p),
              "int_{-inf}^0 phi_x^2 <= 2 sqrt((M-m)(s-m)) (s-m)")

    # dynamics
    grid, k0 = cus.cuspon_grid(p, n)
    X0, k0 = cus.cuspon_lagrangian_state(p, grid, k0)
    thr = default_threshold(X0)
    traj = evolve(X0, T, opts, t_out=np.linspace(0.0, T, n_snapshots))
    rep.metadata["energy_drift"] = traj.relative_energy_drift()
    rows = []
    worst_tr = 0.0
    single = True
    for t, X in zip(traj.times, traj.states):
        below = np.flatnonzero(X.y_xi < thr)
        kmin = int(np.argmin(X.y_xi))
        c = p.speed * t
        near = X.y[max(kmin - 1, 0)] <= c <= X.y[min(kmin + 1, X.grid.n - 1)]
        z = X.y - c
        mask = np.abs(z) > delta
        err = float(np.max(np.abs(X.U[mask] - (cus.phi(z[mask], p) + p.kappa)))) if np.any(mask) else 0.0
        worst_tr = max(worst_tr, err)
        single &= below.size <= 2 and bool(near)
        # Q = P_x is continuous and vanishes at the crest; read it off at x = speed * t
        q_cusp = float(np.interp(c, X.y, compute_Q(X)))
        rows.append({"t": float(t), "below": int(below.size), "argmin": kmin, "argmin_near_cusp": bool(near),
                     "translation_error": err, "plateaus": plateau_runs(X.y), "Q_at_cusp": q_cusp})
    rep.tables["snapshots"] = rows
    rep.check("singleton_breaking", single, max(r["below"] for r in rows), "<= 2 nodes, at the cusp",
              "the breaking set is the single cusp label")
    rep.check("translation", worst_tr <= translation_tol, worst_tr, translation_tol,
              "u(t, x) = phi(x - (s + kappa) t) + kappa away from the cusp")
    rep.check("absolutely_continuous", all(r["plateaus"] == 0 for r in rows), max(r["plateaus"] for r in rows),
              "0 plateaus", "the energy measure has no atoms")
    q_sym = max(abs(r["Q_at_cusp"]) for r in rows)
    rep.check("q_symmetry", q_sym <= 16.0 / n, q_sym, 16.0 / n,
              "P_x vanishes at the crest for all times (first-order interpolation error)")
    slow = cus.characteristic_slowdown_check(traj, p)
    rep.check("characteristic_slowdown", slow.max_z_t <= slow.tol, slow.max_z_t, slow.tol,
              "(y - (s + kappa) t)_t = phi(y - (s + kappa) t) - s <= 0")
    if T > 0:
        rep.check("cusp_overtakes", bool(slow.overtaken_nodes), len(slow.overtaken_nodes), ">= 1 node",
                  "the cusp passes from one characteristic to the next")
    qt = _cusp_qt(p, X0, k0, qt_dt)
    target = cus.qt_at_cusp(p)
    rep.check("qt_at_cusp", abs(qt - target) <= 0.1 * target, qt, {"target": target, "rtol": 0.1},
              "Q_t = (M - s)(s - m)^2 where a characteristic meets the cusp")
    rep.check("qt_limit", abs(qt - cus.qt_limit(p)) <= 0.1 * cus.qt_limit(p), qt,
              {"target": cus.qt_limit(p), "rtol": 0.1},
              "Q_t = (M - s)(s - m)^2 / 2 from P - P_xx = u^2 + u_x^2 / 2", hard=False)
    aud = audit_positive_yxi(traj, thr, active_segments=1)
    rep.tables["audit"] = aud.tables["audit"]
    rep.assertions.append(_renamed(aud.assertions[0], "audit"))
    rep.timing["seconds"] = time.perf_counter() - t0
    return rep
