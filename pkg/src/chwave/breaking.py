"""Wave breaking: a-priori predictors, the kappa sets, breaking-time windows
and detection of breaking events in computed trajectories.

Breaking at a label xi means y_xi(t, xi) = 0 with h > 0; since
y_xi h = U_xi^2 this happens exactly when U_xi vanishes, and U_xi changes
sign from negative to positive there.  Detection therefore looks for upward
zero crossings of U_xi and confirms each with the minimum of y_xi over the
bracket, estimated by cubic Hermite interpolation (y_xi_t = U_xi is known at
both ends).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .coords import LagrangianState
from .dynamics import Trajectory, compute_P


class BreakingError(ValueError):
    """Parameters outside the range where a formula applies."""


# ---------------------------------------------------------------------------
# a-priori predictor

def predict_forward(slope: float, energy: float) -> float | None:
    """Latest possible first breaking time for an initial slope ``slope``.

    With ``C = 2 * energy`` breaking happens in ``[0, T]`` where
    ``(slope + sqrt(2C)) / (slope - sqrt(2C)) = exp(-sqrt(2C) T)``.  Returns
    ``None`` when ``slope >= -sqrt(2C)``: then no forward prediction exists.
    """
    if not energy > 0:
        raise BreakingError(f"energy must be positive, got {energy}")
    r = math.sqrt(4.0 * energy)
    if not slope < -r:
        return None
    # log((s - r)/(s + r)) written with log1p for slopes far below -r
    return math.log1p(-2.0 * r / (slope + r)) / r


def predict_backward(slope: float, energy: float) -> float | None:
    """Mirror of :func:`predict_forward`: a time ``T < 0`` with breaking in
    ``[T, 0]`` when ``slope > sqrt(2C)``, else ``None``."""
    t = predict_forward(-slope, energy)
    return None if t is None else -t


# ---------------------------------------------------------------------------
# kappa sets and the breaking-time window

@dataclass(frozen=True)
class KappaSet:
    gamma: float
    intervals: list[tuple[int, int]]  # inclusive node index ranges

    @property
    def nodes(self) -> np.ndarray:
        if not self.intervals:
            return np.zeros(0, dtype=int)
        return np.concatenate([np.arange(a, b + 1) for a, b in self.intervals])

    def __contains__(self, i: int) -> bool:
        return any(a <= i <= b for a, b in self.intervals)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]]).astype(np.int8)
    d = np.diff(m)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    return [(int(a), int(b)) for a, b in zip(starts, ends)]


def kappa_mask(X0: LagrangianState, gamma: float, rtol: float = 1e-12) -> np.ndarray:
    ratio = X0.h / np.maximum(X0.y_xi + X0.h, 1e-300)
    # a small tolerance so that segments sitting exactly on 1 - gamma count
    return (ratio >= 1.0 - gamma - rtol) & (X0.U_xi <= 0.0)


def kappa_set(X0: LagrangianState, gamma: float) -> KappaSet:
    """Nodes where ``h/(y_xi + h) >= 1 - gamma`` and ``U_xi <= 0``."""
    if not 0.0 < gamma <= 0.5:
        raise BreakingError(f"gamma must lie in (0, 1/2], got {gamma}")
    return KappaSet(float(gamma), _runs(kappa_mask(X0, gamma)))


def segment_gamma(slope: float) -> float:
    """Smallest gamma for which a segment of the given (negative) slope
    belongs to the kappa set: ``1 / (1 + slope^2)``."""
    return 1.0 / (1.0 + slope * slope)


@dataclass(frozen=True)
class WindowParams:
    gamma: float
    c_of_m: float
    t1: float
    t2: float

    def inflated(self, factor: float = 2.0) -> tuple[float, float]:
        """``[t2 / factor, t1 * factor]``."""
        return self.t2 / factor, self.t1 * factor


def breaking_window(gamma: float, c_of_m: float) -> WindowParams:
    """Bracket ``[t2, t1]`` for the first breaking time of nodes whose
    ratio ``h/(y_xi+h)`` starts at ``1 - gamma``."""
    if not 0.0 < gamma < 1.0:
        raise BreakingError(f"gamma must lie in (0, 1), got {gamma}")
    if not c_of_m >= 0:
        raise BreakingError(f"c_of_m must be nonnegative, got {c_of_m}")
    den = 0.5 - c_of_m * gamma
    if not den > 0:
        raise BreakingError(
            f"window needs 1/2 - c_of_m * gamma > 0, got 1/2 - {c_of_m:g} * {gamma:g} = {den:g}")
    num = math.sqrt(gamma * (1.0 - gamma))
    return WindowParams(float(gamma), float(c_of_m), num / den, num / (0.5 + c_of_m * gamma))


def estimate_c_of_m(X0: LagrangianState) -> float:
    """Heuristic stand-in for the constant C(M): ``2 sup|U^2 - P| + 1`` at t = 0.

    Only the existence of such a constant is known; this value is used for
    window brackets that are then checked against detected events.
    """
    a = X0.U**2 - compute_P(X0)
    return float(2.0 * np.max(np.abs(a)) + 1.0)


# ---------------------------------------------------------------------------
# detection

@dataclass(frozen=True)
class BreakingEvent:
    node: int
    xi: float
    t_lo: float
    t_hi: float
    ordinal: int
    min_y_xi: float
    u_xi_before: float
    u_xi_after: float
    confidence: str = "high"

    def __post_init__(self):
        if not self.t_lo < self.t_hi:
            raise ValueError(f"event bracket must satisfy t_lo < t_hi, got [{self.t_lo}, {self.t_hi}]")
        if not (self.u_xi_before <= 0.0 < self.u_xi_after):
            raise ValueError("U_xi must change sign from negative to positive across the bracket")

    @property
    def width(self) -> float:
        return self.t_hi - self.t_lo

    @property
    def t_mid(self) -> float:
        return 0.5 * (self.t_lo + self.t_hi)


def hermite_min(p0, p1, m0, m1, dt):
    """Minimum over ``[0, dt]`` of the cubic with values p0, p1 and slopes m0, m1."""
    p0, p1, m0, m1 = (np.asarray(v, dtype=float) for v in (p0, p1, m0, m1))
    dt = np.broadcast_to(np.asarray(dt, dtype=float), p0.shape)
    # p(s) = p0 + a1 s + a2 s^2 + a3 s^3 on s in [0, 1]
    a1 = dt * m0
    a2 = 3.0 * (p1 - p0) - dt * (2.0 * m0 + m1)
    a3 = -2.0 * (p1 - p0) + dt * (m0 + m1)
    best = np.minimum(p0, p1)
    # stationary points: a1 + 2 a2 s + 3 a3 s^2 = 0
    A, B, C = 3.0 * a3, 2.0 * a2, a1
    disc = B * B - 4.0 * A * C
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        big = np.abs(A) > 1e-14 * (np.abs(B) + np.abs(C) + 1e-300)
        # numerically stable pair of roots
        qq = -0.5 * (B + np.copysign(sq, B))
        r1 = np.where(big, qq / A, -C / np.where(B == 0, np.inf, B))
        r2 = np.where(big, C / np.where(qq == 0, np.inf, qq), r1)
        cand = [r1, r2]
    for s in cand:
        good = ok & np.isfinite(s) & (s > 0) & (s < 1)
        val = p0 + s * (a1 + s * (a2 + s * a3))
        best = np.where(good, np.minimum(best, val), best)
    return best


def default_eps_break(X0: LagrangianState) -> float:
    return 1e-6 * float(np.median(X0.y_xi))


class BreakingDetector:
    """Streaming detector; pass as ``observer`` to :func:`evolve`.

    Every pair of consecutive samples is ordered by time, so forward and
    backward runs are handled identically.  Call :meth:`events` at the end.
    """

    def __init__(self, eps_break: float | None = None):
        self.eps_break = eps_break
        self._prev: tuple[float, np.ndarray, np.ndarray, np.ndarray] | None = None
        self._raw: list[tuple] = []
        self._xi: np.ndarray | None = None

    def __call__(self, t: float, X: LagrangianState) -> None:
        if self._prev is None:
            self._xi = X.xi
            if self.eps_break is None:
                self.eps_break = default_eps_break(X)
        cur = (float(t), X.U_xi.copy(), X.y_xi.copy(), X.h.copy())
        if self._prev is not None:
            self._compare(self._prev, cur)
        self._prev = cur

    def _compare(self, a, b) -> None:
        if b[0] < a[0]:
            a, b = b, a
        t0, ux0, yx0, h0 = a
        t1, ux1, yx1, h1 = b
        dt = t1 - t0
        if not dt > 0:
            return
        cross = (ux0 <= 0.0) & (ux1 > 0.0) & (np.maximum(h0, h1) > 0.0)
        idx = np.flatnonzero(cross)
        if idx.size == 0:
            return
        ymin = hermite_min(yx0[idx], yx1[idx], ux0[idx], ux1[idx], dt)
        scale = 0.5 * (yx0[idx] + h0[idx] + yx1[idx] + h1[idx])
        conf = ymin <= self.eps_break * np.maximum(scale, 1e-300)
        for i, m, c in zip(idx, ymin, conf):
            if c:
                self._raw.append((int(i), t0, t1, float(max(m, 0.0)), float(ux0[i]), float(ux1[i])))

    def events(self) -> list[BreakingEvent]:
        return _finalise(self._raw, self._xi)


def _finalise(raw, xi) -> list[BreakingEvent]:
    raw = sorted(raw, key=lambda r: (r[0], r[1]))
    out: list[BreakingEvent] = []
    ordinal: dict[int, int] = {}
    for i, t0, t1, m, u0, u1, *rest in raw:
        ordinal[i] = ordinal.get(i, 0) + 1
        conf = rest[0] if rest else "high"
        out.append(BreakingEvent(i, float(xi[i]), t0, t1, ordinal[i], m, u0, u1, conf))
    return out


def detect_breaking(traj: Trajectory, eps_break: float | None = None,
                    ambiguity: int = 2) -> list[BreakingEvent]:
    """Breaking events between consecutive snapshots of ``traj``.

    ``eps_break`` defaults to 1e-6 times the median initial y_xi.  An
    event whose sign change is preceded by more than ``ambiguity`` samples
    with U_xi exactly zero cannot be localised and is marked ``"low"``.
    """
    t = traj.times
    if t.size < 2:
        return []
    Ux = traj.stack("U_xi")
    Yx = traj.stack("y_xi")
    H = traj.stack("h")
    if eps_break is None:
        eps_break = default_eps_break(traj.states[int(np.argmin(np.abs(t)))])
    xi = traj.grid.nodes
    raw = []
    for k in range(t.size - 1):
        cross = (Ux[k] <= 0.0) & (Ux[k + 1] > 0.0) & (np.maximum(H[k], H[k + 1]) > 0.0)
        idx = np.flatnonzero(cross)
        if idx.size == 0:
            continue
        dt = t[k + 1] - t[k]
        ymin = hermite_min(Yx[k, idx], Yx[k + 1, idx], Ux[k, idx], Ux[k + 1, idx], dt)
        scale = 0.5 * (Yx[k, idx] + H[k, idx] + Yx[k + 1, idx] + H[k + 1, idx])
        for i, m, s in zip(idx, ymin, scale):
            if m > eps_break * max(s, 1e-300):
                continue
            # how long has U_xi been sitting at exactly zero?
            k0 = k
            while k0 > 0 and Ux[k0, i] == 0.0 and Ux[k0 - 1, i] <= 0.0:
                k0 -= 1
            conf = "low" if (k - k0) >= ambiguity else "high"
            raw.append((int(i), float(t[k0] if conf == "low" else t[k]), float(t[k + 1]),
                        float(max(m, 0.0)), float(Ux[k, i]), float(Ux[k + 1, i]), conf))
    return _finalise(raw, xi)


def first_breaking(events: Iterable[BreakingEvent]) -> dict[int, BreakingEvent]:
    """Earliest event per node."""
    out: dict[int, BreakingEvent] = {}
    for ev in events:
        if ev.node not in out or ev.t_lo < out[ev.node].t_lo:
            out[ev.node] = ev
    return out


@dataclass
class SeparationReport:
    passed: bool
    t_hat: float
    min_gap: float | None
    nodes_with_repeats: int
    violations: list[tuple[int, float]] = field(default_factory=list)


def check_separation(events: Sequence[BreakingEvent], t_hat: float) -> SeparationReport:
    """Check that successive breaking times at each node are more than
    ``t_hat`` apart (gap measured between bracket midpoints)."""
    by_node: dict[int, list[float]] = {}
    for ev in events:
        by_node.setdefault(ev.node, []).append(ev.t_mid)
    gaps = []
    violations = []
    repeats = 0
    for node, ts in sorted(by_node.items()):
        if len(ts) < 2:
            continue
        repeats += 1
        for g in np.diff(sorted(ts)):
            gaps.append(float(g))
            if not g > t_hat:
                violations.append((node, float(g)))
    return SeparationReport(not violations, float(t_hat), min(gaps) if gaps else None, repeats, violations)


# ---------------------------------------------------------------------------
# CSV

EVENT_COLUMNS = ["node", "xi", "t_lo", "t_hi", "ordinal", "min_y_xi", "confidence"]


def events_to_csv(events: Sequence[BreakingEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVENT_COLUMNS)
    for ev in events:
        w.writerow([ev.node, repr(ev.xi), repr(ev.t_lo), repr(ev.t_hi), ev.ordinal,
                    repr(ev.min_y_xi), ev.confidence])
    return buf.getvalue()


def events_from_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        for k in ("node", "ordinal"):
            r[k] = int(r[k])
        for k in ("xi", "t_lo", "t_hi", "min_y_xi"):
            r[k] = float(r[k])
    return rows
