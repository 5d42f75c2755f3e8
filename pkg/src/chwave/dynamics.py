"""Lagrangian ODE system for conservative CH solutions and its time stepping.

The kernel integrals

    P(xi) =  1/4 int exp(-|y(xi) - y(eta)|) f(eta) d eta
    Q(xi) = -1/4 int sign(xi - eta) exp(-|y(xi) - y(eta)|) f(eta) d eta,
    f = 2 U^2 y_xi + h,

are evaluated cell by cell.  Inside each cell ``f`` and ``y_xi`` are
replaced by quadratics fitted to neighbouring nodes, never across a face
where the data is only piecewise smooth (a "break"), and the exponential
is integrated against them through its moments.  Because ``y`` is
nondecreasing the kernel factorises and both sums are two O(N) prefix
recursions.  Outside the grid the state is the constant
``U = c, y_xi = 1, h = 0``, whose contribution is added in closed form;
the constant state is then an exact steady solution of the discrete
system.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from .coords import CoordinateError, Grid, LagrangianState

log = logging.getLogger(__name__)


class IntegrationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# piecewise-smooth reconstruction

# stencil codes: quadratic through (i-1, i, i+1), (i-2, i-1, i), (i, i+1, i+2);
# linear through (i-1, i) or (i, i+1); constant
CENTRED, LEFT, RIGHT, LIN_LEFT, LIN_RIGHT, CONST = 0, 1, 2, 3, 4, 5


def find_breaks(X: LagrangianState, ratio: float = 4.0, floor: float = 1e-10) -> np.ndarray:
    """Faces between nodes k and k+1 across which y_xi, h or U_xi jump.

    A jump counts when it exceeds ``ratio`` times both neighbouring
    increments: on a smooth field increments are O(cell width), across a
    kink of the initial data they stay O(1) for all time.
    """
    n = X.grid.n
    brk = np.zeros(max(n - 1, 0), dtype=bool)
    if n < 2:
        return brk
    for v in (X.y_xi, X.h, X.U_xi):
        d = np.abs(np.diff(v))
        nb = np.zeros_like(d)
        nb[1:] = d[:-1]
        nb[:-1] = np.maximum(nb[:-1], d[1:])
        scale = max(float(np.max(np.abs(v))), 1e-300)
        brk |= (d > floor * scale) & (d > ratio * nb)
    return brk


def choose_stencils(breaks: np.ndarray, n: int) -> np.ndarray:
    """Per-node stencil code avoiding every break face."""
    b = np.concatenate([[True], np.asarray(breaks, dtype=bool), [True]])
    # ok(k): nodes k and k+1 exist and are joined smoothly; b index k+1
    def ok(k):
        return ~b[np.clip(k + 1, 0, n)] & (k >= 0) & (k <= n - 2)
    i = np.arange(n)
    code = np.full(n, CONST, dtype=np.int64)
    code = np.where(ok(i), LIN_RIGHT, code)
    code = np.where(ok(i - 1), LIN_LEFT, code)
    code = np.where(ok(i) & ok(i + 1), RIGHT, code)
    code = np.where(ok(i - 2) & ok(i - 1), LEFT, code)
    code = np.where(ok(i - 1) & ok(i), CENTRED, code)
    return code


@numba.njit(cache=True)
def _reconstruct(x, v, code):
    """Coefficients of v(x_i + s) ~ v_i + d1 s + d2 s^2 at every node."""
    n = v.size
    d1 = np.zeros(n)
    d2 = np.zeros(n)
    for i in range(n):
        c = code[i]
        if c <= 2:
            p = i - 1 if c == 0 else (i - 2 if c == 1 else i)
            q, r = p + 1, p + 2
            a = (v[q] - v[p]) / (x[q] - x[p])
            b = (v[r] - v[q]) / (x[r] - x[q])
            dd = (b - a) / (x[r] - x[p])
            d1[i] = a + dd * ((x[i] - x[p]) + (x[i] - x[q]))
            d2[i] = dd
        elif c == 3:
            d1[i] = (v[i] - v[i - 1]) / (x[i] - x[i - 1])
        elif c == 4:
            d1[i] = (v[i + 1] - v[i]) / (x[i + 1] - x[i])
    return d1, d2


# ---------------------------------------------------------------------------
# kernel

@numba.njit(cache=True)
def _moments(a, hw):
    """m_k = int_{-hw}^{hw} s^k e^{a s} ds and n_k = int_{-hw}^0 s^k e^{a s} ds, k <= 4."""
    m = np.zeros(5)
    nh = np.zeros(5)
    x = a * hw
    if abs(x) <= 1.0:
        # power series of the exponential, 30 terms is far below round-off
        t = 1.0  # a^p / p!
        for p in range(30):
            for k in range(5):
                e = k + p + 1
                hp = hw ** e / e
                if e % 2 == 1:
                    m[k] += t * 2.0 * hp
                    nh[k] += t * hp
                else:
                    nh[k] -= t * hp
            t *= a / (p + 1)
    else:
        # integration by parts on [-hw, 0] and [0, hw]
        em = np.exp(-x)
        ep = np.exp(x)
        lo = (1.0 - em) / a
        hi = (ep - 1.0) / a
        nh[0] = lo
        m[0] = lo + hi
        sk = 1.0  # hw^k
        for k in range(1, 5):
            sk *= hw
            sgn = -1.0 if k % 2 == 1 else 1.0
            lo = -(sgn * sk * em) / a - k / a * lo
            hi = sk * ep / a - k / a * hi
            nh[k] = lo
            m[k] = lo + hi
    return m, nh


@numba.njit(cache=True)
def _cell_integrals(y_xi, d1y, d2y, f, d1f, d2f, w):
    """Per-cell exponential moments of the reconstructed density.

    full_l[j] = int_cell e^{+(y(s) - y_j)} f(s) ds   (seen from the right)
    full_r[j] = int_cell e^{-(y(s) - y_j)} f(s) ds   (seen from the left)
    half_l[j] = same as full_l over the left half-cell
    half_r[j] = same as full_r over the right half-cell
    jl[j], jr[j] = y(face) - y_j at the left and right faces
    """
    n = f.size
    full_l = np.empty(n)
    full_r = np.empty(n)
    half_l = np.empty(n)
    half_r = np.empty(n)
    jl = np.empty(n)
    jr = np.empty(n)
    for j in range(n):
        hw = 0.5 * w[j]
        a = y_xi[j]
        # y(s) - y_j = a s + be s^2 + ga s^3
        be = 0.5 * d1y[j]
        ga = d2y[j] / 3.0
        f0, f1, f2 = f[j], d1f[j], d2f[j]
        m, nh = _moments(a, hw)
        # e^{+(..)} ~ e^{a s} (1 + be s^2 + ga s^3 + be^2 s^4 / 2)
        c0 = f0
        c1 = f1
        c2 = f2 + be * f0
        c3 = ga * f0 + be * f1
        c4 = 0.5 * be * be * f0 + be * f2
        full_l[j] = c0 * m[0] + c1 * m[1] + c2 * m[2] + c3 * m[3] + c4 * m[4]
        half_l[j] = c0 * nh[0] + c1 * nh[1] + c2 * nh[2] + c3 * nh[3] + c4 * nh[4]
        # e^{-(..)} ~ e^{-a s} (1 - be s^2 - ga s^3 + be^2 s^4 / 2); moments of
        # e^{-a s} are (-1)^k times those of e^{a s} after s -> -s
        d2 = f2 - be * f0
        d3 = -ga * f0 - be * f1
        d4 = 0.5 * be * be * f0 - be * f2
        full_r[j] = c0 * m[0] - c1 * m[1] + d2 * m[2] - d3 * m[3] + d4 * m[4]
        half_r[j] = c0 * nh[0] - c1 * nh[1] + d2 * nh[2] - d3 * nh[3] + d4 * nh[4]
        jl[j] = -a * hw + be * hw * hw - ga * hw ** 3
        jr[j] = a * hw + be * hw * hw + ga * hw ** 3
    return full_l, full_r, half_l, half_r, jl, jr


@numba.njit(cache=True)
def _prefix_sums(y, full_l, full_r, half_l, half_r, jl, jr, tail):
    """left[i]  = int_{eta < xi_i} exp(-(y_i - y(eta))) f d eta
    right[i] = int_{eta > xi_i} exp(-(y(eta) - y_i)) f d eta"""
    n = y.size
    left = np.empty(n)
    right = np.empty(n)
    # constant tail beyond the outer faces: y_xi = 1, f = tail
    acc = tail * np.exp(jl[0])
    left[0] = acc + half_l[0]
    for i in range(1, n):
        acc = np.exp(-(y[i] - y[i - 1])) * (acc + full_l[i - 1])
        left[i] = acc + half_l[i]
    acc = tail * np.exp(-jr[n - 1])
    right[n - 1] = acc + half_r[n - 1]
    for i in range(n - 2, -1, -1):
        acc = np.exp(-(y[i + 1] - y[i])) * (acc + full_r[i + 1])
        right[i] = acc + half_r[i]
    return left, right


class Kernel:
    """Kernel sums on a fixed grid with a fixed choice of stencils."""

    def __init__(self, grid: Grid, asymptote: float, stencils: np.ndarray):
        self.x = grid.nodes
        self.w = grid.widths
        self.tail = 2.0 * asymptote**2
        self.stencils = np.asarray(stencils, dtype=np.int64)

    @classmethod
    def for_state(cls, X: LagrangianState) -> "Kernel":
        return cls(X.grid, X.asymptote, choose_stencils(find_breaks(X), X.grid.n))

    def cells(self, f: np.ndarray, y_xi: np.ndarray):
        d1f, d2f = _reconstruct(self.x, f, self.stencils)
        d1y, d2y = _reconstruct(self.x, y_xi, self.stencils)
        return _cell_integrals(y_xi, d1y, d2y, f, d1f, d2f, self.w)

    def sums(self, y, y_xi, f):
        return _prefix_sums(y, *self.cells(f, y_xi), self.tail)

    def integral(self, g: np.ndarray) -> float:
        """Cellwise-quadratic quadrature of a node function."""
        _, d2 = _reconstruct(self.x, g, self.stencils)
        return float(np.sum(self.w * g + d2 * self.w**3 / 12.0))


def kernel_density(X: LagrangianState) -> np.ndarray:
    return 2.0 * X.U**2 * X.y_xi + X.h


def _check_monotone(y: np.ndarray) -> None:
    dy = np.diff(y)
    if dy.size and dy.min() < -1e-9 * max(1.0, float(np.max(np.abs(y)))):
        raise CoordinateError(f"y must be nondecreasing (min increment {dy.min():.3e})")


def compute_PQ(X: LagrangianState, kernel: Kernel | None = None) -> tuple[np.ndarray, np.ndarray]:
    _check_monotone(X.y)
    kernel = kernel or Kernel.for_state(X)
    left, right = kernel.sums(X.y, X.y_xi, kernel_density(X))
    return 0.25 * (left + right), 0.25 * (right - left)


def compute_P(X: LagrangianState, kernel: Kernel | None = None) -> np.ndarray:
    return compute_PQ(X, kernel)[0]


def compute_Q(X: LagrangianState, kernel: Kernel | None = None) -> np.ndarray:
    return compute_PQ(X, kernel)[1]


@dataclass(frozen=True)
class Derivative:
    """Time derivative of the five Lagrangian unknowns (``zeta_t = y_t``)."""
    zeta: np.ndarray
    zeta_xi: np.ndarray
    U: np.ndarray
    U_xi: np.ndarray
    h: np.ndarray


def rhs(X: LagrangianState, kernel: Kernel | None = None) -> Derivative:
    P, Q = compute_PQ(X, kernel)
    a = X.U**2 - P
    return Derivative(X.U.copy(), X.U_xi.copy(), -Q, 0.5 * X.h + a * X.y_xi, 2.0 * a * X.U_xi)


def total_energy(X: LagrangianState, kernel: Kernel | None = None) -> float:
    """``int ((U - c)^2 y_xi + h) d xi``, i.e. ``||u - c||^2 + mu(R)``."""
    kernel = kernel or Kernel.for_state(X)
    return kernel.integral((X.U - X.asymptote) ** 2 * X.y_xi + X.h)


# ---------------------------------------------------------------------------
# packed form used by the integrator: rows y, U, h, y_xi, U_xi

def _pack(X: LagrangianState) -> np.ndarray:
    return np.stack([X.y, X.U, X.h, X.y_xi, X.U_xi])


def _unpack(Z: np.ndarray, like: LagrangianState) -> LagrangianState:
    return LagrangianState(like.grid, Z[0].copy(), Z[1].copy(), Z[2].copy(), Z[3].copy(),
                           Z[4].copy(), like.asymptote)


class _System:
    def __init__(self, kernel: Kernel, asymptote: float):
        self.kernel = kernel
        self.c = asymptote
        self.nfev = 0

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        y, U, h, yx, Ux = Z
        self.nfev += 1
        left, right = self.kernel.sums(y, yx, 2.0 * U * U * yx + h)
        P = 0.25 * (left + right)
        a = U * U - P
        out = np.empty_like(Z)
        out[0] = U
        out[1] = 0.25 * (left - right)
        out[2] = 2.0 * a * Ux
        out[3] = Ux
        out[4] = 0.5 * h + a * yx
        return out

    def energy(self, Z: np.ndarray) -> float:
        y, U, h, yx, Ux = Z
        return self.kernel.integral((U - self.c) ** 2 * yx + h)


# Dormand-Prince 5(4)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B_LOW = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B - _B_LOW


def _dp_step(sys: _System, Z: np.ndarray, k0: np.ndarray, dt: float):
    """One Dormand-Prince step; returns (Z_new, k_last, error_estimate)."""
    K = [k0]
    for s in range(1, 7):
        Zs = Z.copy()
        for j, a in enumerate(_A[s]):
            if a:
                Zs += (dt * a) * K[j]
        if s == 6:
            Znew = Zs
        K.append(sys(Zs))
    err = np.zeros_like(Z)
    for j in range(7):
        if _E[j]:
            err += (dt * _E[j]) * K[j]
    return Znew, K[6], err


@dataclass
class IntegratorOptions:
    dt_init: float = 1e-3
    dt_min: float = 1e-10
    dt_max: float = 0.05
    tol_step: float = 1e-10
    tol_energy: float = 1e-8

    def __post_init__(self):
        vals = (self.dt_init, self.dt_min, self.dt_max, self.tol_step, self.tol_energy)
        if any(not v > 0 for v in vals):
            raise ValueError("integrator options must all be positive")
        if not self.dt_min <= self.dt_init <= self.dt_max:
            raise ValueError("need dt_min <= dt_init <= dt_max")


def _error_norm(err: np.ndarray, Z0: np.ndarray, Z1: np.ndarray, tol: float) -> float:
    scale = tol * (1.0 + np.maximum(np.abs(Z0), np.abs(Z1)))
    return float(np.max(np.abs(err) / scale))


def step(X: LagrangianState, dt: float, opts: IntegratorOptions | None = None) -> tuple[LagrangianState, float]:
    """Advance by exactly ``dt`` with one Dormand-Prince step.

    Returns the new state and the scaled local error estimate (<= 1 means
    the step meets ``opts.tol_step``).
    """
    opts = opts or IntegratorOptions()
    sys = _System(Kernel.for_state(X), X.asymptote)
    Z = _pack(X)
    Znew, _, err = _dp_step(sys, Z, sys(Z), dt)
    return _unpack(Znew, X), _error_norm(err, Z, Znew, opts.tol_step)


@dataclass
class Trajectory:
    """Snapshots of one run, stored in increasing time order."""
    times: np.ndarray
    states: list[LagrangianState]
    energy: np.ndarray
    step_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    step_energy: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_accepted: int = 0
    n_rejected: int = 0
    nfev: int = 0
    options: IntegratorOptions | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.energy = np.asarray(self.energy, dtype=float)
        if len(self.states) != self.times.size or self.energy.size != self.times.size:
            raise ValueError("times, states and energy must have equal length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if any(s.grid is not self.states[0].grid and not np.array_equal(s.grid.faces, self.states[0].grid.faces)
               for s in self.states):
            raise ValueError("all states must share one grid")

    @property
    def grid(self) -> Grid:
        return self.states[0].grid

    def stack(self, name: str) -> np.ndarray:
        """``(n_times, n_nodes)`` array of one field."""
        return np.stack([getattr(s, name) for s in self.states])

    def relative_energy_drift(self) -> float:
        e0 = self.energy[np.argmin(np.abs(self.times))]
        e = np.concatenate([self.energy, self.step_energy])
        return float(np.max(np.abs(e - e0)) / max(abs(e0), 1e-300))

    def manifest(self) -> dict:
        return {
            "times": [float(t) for t in self.times],
            "energies": [float(e) for e in self.energy],
            "options": asdict(self.options) if self.options else None,
            "grid": [float(f) for f in self.grid.faces],
            "asymptote": float(self.states[0].asymptote),
            "n_accepted": self.n_accepted,
            "n_rejected": self.n_rejected,
        }

    def write(self, directory) -> None:
        from pathlib import Path
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k, s in enumerate(self.states):
            (d / f"snapshot_{k:04d}.csv").write_text(s.to_csv(), encoding="utf-8")
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=1), encoding="utf-8")


Observer = Callable[[float, LagrangianState], None]


def evolve(X0: LagrangianState, T_end: float, opts: IntegratorOptions | None = None,
           t_out: Sequence[float] | None = None, observer: Observer | None = None) -> Trajectory:
    """Integrate from t = 0 to ``T_end`` (which may be negative).

    Steps are adapted to ``opts.tol_step`` (mixed absolute/relative, max
    norm) and additionally rejected and halved whenever the energy changes
    by more than ``opts.tol_energy`` (relative) in one step.  Snapshots are
    taken at ``t_out`` (default: start and end); ``observer`` is called
    after every accepted step, in integration order.
    """
    opts = opts or IntegratorOptions()
    direction = 1.0 if T_end >= 0 else -1.0
    if t_out is None:
        t_out = [0.0, T_end]
    outs = sorted({float(t) for t in t_out}, key=lambda t: direction * t)
    if any(direction * t < 0 or direction * t > direction * T_end for t in outs):
        raise ValueError("output times must lie between 0 and T_end")
    # the break faces of the initial data are fixed in xi for all time
    sys = _System(Kernel.for_state(X0), X0.asymptote)
    Z = _pack(X0)
    e0 = sys.energy(Z)
    e_scale = max(abs(e0), 1e-300)

    snaps_t, snaps_X, snaps_e = [], [], []
    step_t, step_e = [], []

    def record(t, Zc, e):
        snaps_t.append(t)
        snaps_X.append(_unpack(Zc, X0))
        snaps_e.append(e)

    t = 0.0
    out_i = 0
    while out_i < len(outs) and outs[out_i] == 0.0:
        record(0.0, Z, e0)
        out_i += 1
    if observer is not None:
        observer(0.0, X0)
    k0 = sys(Z)
    e_cur = e0
    dt = opts.dt_init
    n_acc = n_rej = 0
    while direction * (T_end - t) > 0:
        target = outs[out_i] if out_i < len(outs) else T_end
        h = min(dt, direction * (target - t))
        landing = h == direction * (target - t)
        Znew, knew, err = _dp_step(sys, Z, k0, direction * h)
        en = _error_norm(err, Z, Znew, opts.tol_step)
        e_new = sys.energy(Znew)
        drift = abs(e_new - e_cur) / e_scale
        if not np.isfinite(en):
            en = np.inf
        if en <= 1.0 and drift <= opts.tol_energy:
            t = target if landing else t + direction * h
            Z, k0, e_cur = Znew, knew, e_new
            n_acc += 1
            step_t.append(t)
            step_e.append(e_new)
            if landing and out_i < len(outs):
                record(t, Z, e_new)
                out_i += 1
            if observer is not None:
                observer(t, _unpack(Z, X0))
            fac = 5.0 if en == 0 else min(5.0, 0.9 * en ** (-0.2))
            proposal = min(opts.dt_max, h * fac)
            # a step shortened to hit an output time says little about dt
            dt = max(proposal, dt) if landing else proposal
        else:
            n_rej += 1
            if en > 1.0:
                dt = h * max(0.2, 0.9 * en ** (-0.2)) if np.isfinite(en) else 0.5 * h
            else:
                dt = 0.5 * h
            if dt < opts.dt_min:
                raise IntegrationError(
                    f"step size {dt:.3e} fell below dt_min={opts.dt_min:.1e} at t={t:.6g} "
                    f"(error norm {en:.3e}, energy drift per step {drift:.3e})")
    log.debug("evolve: %d accepted, %d rejected, %d rhs calls", n_acc, n_rej, sys.nfev)

    order = np.argsort(snaps_t) if direction < 0 else np.arange(len(snaps_t))
    st = np.asarray(step_t)
    se = np.asarray(step_e)
    if direction < 0:
        st, se = st[::-1], se[::-1]
    return Trajectory(np.asarray(snaps_t)[order], [snaps_X[i] for i in order],
                      np.asarray(snaps_e)[order], st, se, n_acc, n_rej, sys.nfev, opts)
