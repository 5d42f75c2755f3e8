"""Cuspon travelling wave with exponential decay.

For ``m < s < M`` the profile phi is even, equals ``s`` at the origin,
decreases to ``m`` at infinity and solves

    phi_x^2 = (M - phi) (phi - m)^2 / (s - phi).

``u(t, x) = phi(x - (s + kappa) t) + kappa`` with ``kappa = (s - 2m - M)/2``
is then a conservative solution whose only breaking point is the cusp.

Everything is written in the variables ``theta = phi - m`` and
``d = s - phi`` (so ``theta + d = s - m``) so that neither the cusp
(``d -> 0``) nor the tail (``theta -> 0``) loses precision.  ``x(phi)`` and
the energy ``int phi_x^2`` have closed forms; ``phi(x)`` is their inverse,
found by bisection in ``sigma = log(d / theta)``.
"""

from __future__ import annotations

import io
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .coords import Grid, LagrangianState
from .dynamics import Trajectory


class CusponError(ValueError):
    pass


@dataclass(frozen=True)
class CusponProfile:
    m: float
    s: float
    M_max: float
    kappa: float = field(init=False)
    speed: float = field(init=False)
    table: tuple[np.ndarray, np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("m", "s", "M_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.m < self.s < self.M_max):
            raise CusponError(f"need m < s < M_max, got ({self.m}, {self.s}, {self.M_max})")
        kappa, speed = cuspon_params(self.m, self.s, self.M_max)
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "speed", speed)
        sig = np.linspace(-40.0, 60.0, 401)
        object.__setattr__(self, "table", (sig, _x_sigma(self, sig)))

    @property
    def A(self) -> float:
        return self.s - self.m

    @property
    def B(self) -> float:
        return self.M_max - self.m

    @property
    def K(self) -> float:
        return self.M_max - self.s

    @property
    def asymptote(self) -> float:
        return self.m + self.kappa

    def to_json(self) -> str:
        return json.dumps({"m": self.m, "s": self.s, "M_max": self.M_max,
                           "kappa": self.kappa, "speed": self.speed})


def cuspon_params(m: float, s: float, M_max: float) -> tuple[float, float]:
    """``(kappa, speed)``."""
    if not (m < s < M_max):
        raise CusponError(f"need m < s < M_max, got ({m}, {s}, {M_max})")
    kappa = 0.5 * (s - 2.0 * m - M_max)
    return kappa, s + kappa


# ---------------------------------------------------------------------------
# x as a function of (theta, d)

def _x_theta_d(p: CusponProfile, theta, d):
    A, B, K = p.A, p.B, p.K
    shape = np.broadcast(np.asarray(theta), np.asarray(d)).shape
    theta = np.broadcast_to(np.asarray(theta, dtype=float), shape).ravel()
    d = np.broadcast_to(np.asarray(d, dtype=float), shape).ravel()
    bt = B - theta
    tau2 = d / bt
    v2 = tau2 * (B / A)
    with np.errstate(divide="ignore", invalid="ignore"):
        # artanh(v) = log1p(v) - log(1 - v^2)/2 with 1 - v^2 = theta K / ((B - theta) A)
        atv = np.log1p(np.sqrt(v2)) - 0.5 * np.log(theta * K / (bt * A))
        att = np.log1p(np.sqrt(tau2)) - 0.5 * np.log(K / bt)
        out = 2.0 * math.sqrt(A / B) * atv - 2.0 * att
    # near the cusp the two logarithms cancel; sum the series instead
    small = v2 < 1e-3
    if np.any(small):
        r = B / A
        t2 = tau2[small]
        term = t2 * np.sqrt(t2)  # tau^(2n+3)
        acc = np.zeros_like(t2)
        rn = r
        for n in range(14):
            acc += (rn - 1.0) / (r - 1.0) * term / (2 * n + 3)
            term = term * t2
            rn *= r
        out[small] = (2.0 * K / A) * acc
    out[d <= 0] = 0.0
    out[theta <= 0] = np.inf
    return out.reshape(shape)


def _theta_d(p: CusponProfile, sigma):
    sigma = np.asarray(sigma, dtype=float)
    return p.A * expit(-sigma), p.A * expit(sigma)


def _x_sigma(p: CusponProfile, sigma):
    return _x_theta_d(p, *_theta_d(p, sigma))


def x_of_phi(phi_val, p: CusponProfile):
    """Distance ``x >= 0`` from the crest at which the profile takes the
    value ``phi_val``, for ``m < phi_val <= s``."""
    phi_val = np.asarray(phi_val, dtype=float)
    if np.any(phi_val <= p.m) or np.any(phi_val > p.s):
        raise CusponError(f"phi value must lie in (m, s] = ({p.m}, {p.s}]")
    out = _x_theta_d(p, phi_val - p.m, p.s - phi_val)
    return float(out) if out.ndim == 0 else out


def _sigma_of_x(p: CusponProfile, ax: np.ndarray, iters: int = 200) -> np.ndarray:
    """Bisection for ``x(sigma) = ax`` (``ax > 0``), bracketed from the table."""
    sig, xt = p.table
    k = np.searchsorted(xt, ax)
    lo = np.where(k > 0, sig[np.clip(k - 1, 0, sig.size - 1)], -800.0)
    hi = np.where(k < sig.size, sig[np.clip(k, 0, sig.size - 1)], 800.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        done = (mid == lo) | (mid == hi)
        if np.all(done):
            break
        below = _x_sigma(p, mid) < ax
        lo = np.where(below & ~done, mid, lo)
        hi = np.where(~below & ~done, mid, hi)
    return 0.5 * (lo + hi)


def theta_d_of_x(x, p: CusponProfile) -> tuple[np.ndarray, np.ndarray]:
    """``(phi - m, s - phi)`` at ``x``, both to full relative precision."""
    ax = np.abs(np.atleast_1d(np.asarray(x, dtype=float)))
    theta = np.full(ax.shape, p.A)
    d = np.zeros(ax.shape)
    nz = ax > 0
    if np.any(nz):
        th, dd = _theta_d(p, _sigma_of_x(p, ax[nz]))
        theta[nz], d[nz] = th, dd
    return theta, d


def phi(x, p: CusponProfile):
    """The profile; ``phi(0) = s`` exactly and ``phi(-x) = phi(x)``."""
    scalar = np.ndim(x) == 0
    theta, d = theta_d_of_x(x, p)
    # pick the representation that does not round away the small part
    out = np.where(d <= theta, p.s - d, p.m + theta)
    return float(out[0]) if scalar else out.reshape(np.shape(x))


def phi_x(x, p: CusponProfile):
    """``-sign(x) sqrt((M - phi)(phi - m)^2 / (s - phi))``; undefined at the cusp."""
    scalar = np.ndim(x) == 0
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(xa == 0):
        raise CusponError("phi_x is undefined at the cusp x = 0")
    theta, d = theta_d_of_x(xa, p)
    with np.errstate(divide="ignore"):
        out = -np.sign(xa) * theta * np.sqrt((p.B - theta) / d)
    return float(out[0]) if scalar else out.reshape(np.shape(x))


def _energy_theta_d(p: CusponProfile, theta, d):
    """``int_{-inf}^{x} phi_x^2`` for x <= 0, as a function of the local (theta, d)."""
    A, K = p.A, p.K
    rk = math.sqrt(K)

    def F(w):
        root = np.sqrt(K + w * w)
        ash = np.arcsinh(w / rk)
        i0 = 0.5 * (w * root + K * ash)
        i2 = w * (2.0 * w * w + K) * root / 8.0 - K * K * ash / 8.0
        return 2.0 * (A * i0 - i2)

    return F(math.sqrt(A)) - F(np.sqrt(np.asarray(d, dtype=float)))


def energy_half(p: CusponProfile) -> float:
    """``int_{-inf}^0 phi_x^2``."""
    return float(_energy_theta_d(p, 0.0, 0.0))


def energy_bound(p: CusponProfile) -> float:
    return 2.0 * math.sqrt(p.B * p.A) * p.A


def energy_to(x, p: CusponProfile):
    """``int_{-inf}^x phi_x^2``; for ``x > 0`` by symmetry."""
    scalar = np.ndim(x) == 0
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    theta, d = theta_d_of_x(xa, p)
    e = _energy_theta_d(p, theta, d)
    e = np.where(xa > 0, 2.0 * energy_half(p) - e, e)
    return float(e[0]) if scalar else e.reshape(np.shape(x))


def holder_bound(x, p: CusponProfile):
    """``(M - m) (3|x|/2)^(2/3)``, an upper bound for ``s - phi(x)``."""
    return p.B * (1.5 * np.abs(x)) ** (2.0 / 3.0)


def ode_residual(x, p: CusponProfile, step: float | None = None):
    """Relative residual of ``phi_x^2 = (M-phi)(phi-m)^2/(s-phi)`` with phi_x
    taken from a 7-point central difference of :func:`phi`."""
    x = np.asarray(x, dtype=float)
    hstep = np.minimum(np.abs(x) / 50.0, 0.01) if step is None else np.full(x.shape, step)
    c = [(-1.0 / 60, -3), (3.0 / 20, -2), (-3.0 / 4, -1), (3.0 / 4, 1), (-3.0 / 20, 2), (1.0 / 60, 3)]
    theta, d = theta_d_of_x(x, p)
    # difference whichever of theta = phi - m, d = s - phi is small: it
    # carries the digits that phi itself rounds away
    use_d = d <= theta
    deriv = np.zeros(x.shape)
    for w, k in c:
        th_k, d_k = theta_d_of_x(x + k * hstep, p)
        deriv += w * np.where(use_d, -d_k, th_k)
    deriv /= hstep
    rhs = (p.B - theta) * theta**2 / d
    return np.abs(deriv**2 - rhs) / rhs


# ---------------------------------------------------------------------------
# Lagrangian data

def xi_bar(p: CusponProfile) -> float:
    """Label of the cusp: ``g(0)`` with ``g(x) = x + int_{-inf}^x phi_x^2``."""
    return energy_half(p)


def _g_of_sigma(p: CusponProfile, sigma, side):
    theta, d = _theta_d(p, sigma)
    x = _x_theta_d(p, theta, d)
    e = _energy_theta_d(p, theta, d)
    if side < 0:
        return -x + e
    return x + 2.0 * energy_half(p) - e


def _solve_side(p: CusponProfile, xi: np.ndarray, side: int, iters: int = 200) -> np.ndarray:
    """sigma with g(side * x(sigma)) = xi; g is monotone in sigma on each side."""
    lo = np.full(xi.shape, -800.0)
    hi = np.full(xi.shape, 800.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        done = (mid == lo) | (mid == hi)
        if np.all(done):
            break
        g = _g_of_sigma(p, mid, side)
        # on the left g decreases with sigma, on the right it increases
        go_right = (g > xi) if side < 0 else (g < xi)
        lo = np.where(go_right & ~done, mid, lo)
        hi = np.where(~go_right & ~done, mid, hi)
    return 0.5 * (lo + hi)


def cuspon_grid(p: CusponProfile, n: int, half_width: float = 18.0) -> tuple[Grid, int]:
    """Uniform grid in xi covering ``x in [-half_width, half_width]`` with one
    node exactly on the cusp label.  Returns the grid and that node index."""
    if n < 3:
        raise CusponError("need at least 3 cells")
    e2 = 2.0 * energy_half(p)
    xb = xi_bar(p)
    lo = -half_width + float(energy_to(-half_width, p))
    hi = half_width + e2 - float(energy_to(-half_width, p))
    dxi = (hi - lo) / n
    k0 = int(round((xb - lo) / dxi - 0.5))
    k0 = min(max(k0, 1), n - 2)
    nodes = xb + dxi * (np.arange(n) - k0)
    faces = np.concatenate([nodes - 0.5 * dxi, [nodes[-1] + 0.5 * dxi]])
    return Grid(faces), k0


def cuspon_lagrangian_state(p: CusponProfile, grid: Grid, cusp_index: int | None = None
                            ) -> tuple[LagrangianState, int]:
    """Lagrangian initial data of the cuspon on ``grid``.

    Returns the state and the index of the node nearest the cusp label
    ``xi_bar``; that node gets ``y = 0, y_xi = 0, h = 1, U_xi = 0`` exactly.
    """
    xi = grid.nodes
    xb = xi_bar(p)
    if not (grid.faces[0] < xb < grid.faces[-1]):
        raise CusponError(f"grid [{grid.faces[0]}, {grid.faces[-1]}] does not straddle the cusp label {xb}")
    k0 = int(np.argmin(np.abs(xi - xb))) if cusp_index is None else int(cusp_index)
    n = xi.size
    theta = np.full(n, p.A)
    d = np.zeros(n)
    sign = np.zeros(n)
    left = np.arange(n) < k0
    right = np.arange(n) > k0
    for mask, side in ((left, -1), (right, 1)):
        if np.any(mask):
            th, dd = _theta_d(p, _solve_side(p, xi[mask], side))
            theta[mask], d[mask] = th, dd
            sign[mask] = side
    x = sign * _x_theta_d(p, theta, np.where(sign == 0, 1.0, d))
    x[k0] = 0.0
    den = d + (p.B - theta) * theta**2
    y_xi = d / den
    h = (p.B - theta) * theta**2 / den
    U_xi = -sign * theta * np.sqrt((p.B - theta) * d) / den
    phi_v = np.where(d <= theta, p.s - d, p.m + theta)
    U = phi_v + p.kappa
    X = LagrangianState(grid, x, U, h, y_xi, U_xi, p.asymptote)
    return X, k0


# ---------------------------------------------------------------------------
# cusp quantities and checks

def qt_at_cusp(p: CusponProfile) -> float:
    """``(M - s)(s - m)^2``, the value quoted for Q_t where a characteristic meets the cusp."""
    return p.K * p.A**2


def qt_limit(p: CusponProfile) -> float:
    """Limit of Q_t along a characteristic as it meets the cusp.

    With ``P - P_xx = u^2 + u_x^2 / 2`` the singular part of ``P_xx`` is
    ``-phi_x^2 / 2``; multiplying by ``z_t = phi - s`` gives
    ``(M - s)(s - m)^2 / 2``.
    """
    return 0.5 * p.K * p.A**2


@dataclass
class SlowdownReport:
    passed: bool
    max_z_t: float
    tol: float
    overtaken_nodes: list[int]
    violations: list[tuple[int, float, float]]


def characteristic_slowdown_check(traj: Trajectory, p: CusponProfile, tol: float = 1e-8) -> SlowdownReport:
    """z = y - speed t must be nonincreasing along every characteristic
    (difference quotients between snapshots <= tol), and some node that
    starts ahead of the cusp must be overtaken (z changes sign)."""
    t = traj.times
    Y = traj.stack("y")
    Z = Y - p.speed * t[:, None]
    zt = np.diff(Z, axis=0) / np.diff(t)[:, None]
    bad = np.argwhere(zt > tol)
    violations = [(int(j), float(t[k]), float(zt[k, j])) for k, j in bad[:50]]
    overtaken = np.flatnonzero((Z[0] > 0) & (Z[-1] < 0))
    passed = not violations and (t[-1] <= 0 or overtaken.size > 0)
    return SlowdownReport(passed, float(zt.max()) if zt.size else 0.0, tol,
                          [int(i) for i in overtaken[:20]], violations)


def profile_csv(x, p: CusponProfile) -> str:
    """CSV ``x,phi,phi_x``; phi_x is left empty at the cusp."""
    x = np.asarray(x, dtype=float)
    ph = phi(x, p)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "phi", "phi_x"])
    for xv, pv in zip(x, np.atleast_1d(ph)):
        px = "" if xv == 0 else repr(float(phi_x(float(xv), p)))
        w.writerow([repr(float(xv)), repr(float(pv)), px])
    return buf.getvalue()
