"""Eulerian and Lagrangian descriptions of a conservative CH state.

Grids are cell based: a :class:`Grid` is defined by its cell faces, the
Lagrangian unknowns live at cell centres, and quadrature weights are the
cell widths.  Discontinuities of the initial data (kinks of ``u``, edges
of atoms) are placed on faces, so that each cell sees smooth data.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .profiles import PiecewiseLinearProfile


class CoordinateError(ValueError):
    pass


class ResolutionWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# grids

@dataclass(frozen=True)
class Grid:
    faces: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.faces, dtype=float)
        if f.ndim != 1 or f.size < 2:
            raise CoordinateError("a grid needs at least two faces")
        if np.any(np.diff(f) <= 0):
            raise CoordinateError("grid faces must be strictly increasing")
        object.__setattr__(self, "faces", f)

    @property
    def nodes(self) -> np.ndarray:
        return 0.5 * (self.faces[1:] + self.faces[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.faces)

    @property
    def n(self) -> int:
        return self.faces.size - 1

    def cell_of(self, s) -> np.ndarray:
        """Cell index containing ``s``; points outside map to the end cells."""
        k = np.searchsorted(self.faces, s, side="right") - 1
        return np.clip(k, 0, self.n - 1)

    @classmethod
    def uniform(cls, lo: float, hi: float, n: int) -> "Grid":
        return cls(np.linspace(lo, hi, n + 1))

    @classmethod
    def from_nodes(cls, nodes: Sequence[float]) -> "Grid":
        """Dual grid whose faces are the midpoints between ``nodes``."""
        c = np.asarray(nodes, dtype=float)
        if c.size < 2:
            raise CoordinateError("need at least two nodes")
        mid = 0.5 * (c[1:] + c[:-1])
        faces = np.concatenate([[c[0] - (mid[0] - c[0])], mid, [c[-1] + (c[-1] - mid[-1])]])
        return cls(faces)


def graded_grid(knots: Iterable[float], n: int, margin: float,
                tail_fraction: float = 0.12, min_per_interval: int = 8,
                growth_limit: float = 1.03) -> Grid:
    """Grid with faces on every knot and geometrically graded tails.

    The interior ``[min(knots), max(knots)]`` receives about
    ``(1 - tail_fraction) * n`` cells distributed by length (each knot
    interval gets at least ``min_per_interval``); each tail of length
    ``margin`` gets the rest, growing away from the interior.
    """
    k = np.unique(np.asarray(list(knots), dtype=float))
    if k.size < 2:
        raise CoordinateError("need at least two distinct knots")
    n_tail = max(4, int(round(0.5 * tail_fraction * n)))
    n_in = n - 2 * n_tail
    lengths = np.diff(k)
    if n_in < min_per_interval * lengths.size:
        raise CoordinateError(
            f"{n} cells cannot give {min_per_interval} cells to each of {lengths.size} knot intervals")
    counts = np.full(lengths.size, min_per_interval)
    spare = n_in - counts.sum()
    share = lengths / lengths.sum() * spare
    extra = np.floor(share).astype(int)
    # largest remainders get the leftover cells
    left = spare - extra.sum()
    extra[np.argsort(-(share - extra), kind="stable")[:left]] += 1
    counts += extra
    pieces = [np.linspace(a, b, c + 1)[:-1] for a, b, c in zip(k[:-1], k[1:], counts)]
    inner = np.concatenate(pieces + [[k[-1]]])
    h_left = inner[1] - inner[0]
    h_right = inner[-1] - inner[-2]
    left_tail = _tail(h_left, margin, n_tail, growth_limit)
    right_tail = _tail(h_right, margin, n_tail, growth_limit)
    faces = np.concatenate([k[0] - left_tail[::-1], inner, k[-1] + right_tail])
    return Grid(faces)


def _tail(h0: float, length: float, n: int, growth_limit: float) -> np.ndarray:
    """``n`` positive offsets ending at ``length``, spacing growing from ~h0."""
    if n * h0 >= length:
        return np.linspace(length / n, length, n)
    # solve h0 * (r^n - 1)/(r - 1) = length for r
    lo, hi = 1.0, 2.0
    while h0 * (hi**n - 1) / (hi - 1) < length:
        hi *= 2
    for _ in range(200):
        r = 0.5 * (lo + hi)
        if h0 * (r**n - 1) / (r - 1) < length:
            lo = r
        else:
            hi = r
    if r > growth_limit:
        warnings.warn(f"tail spacing grows by {r:.3f} per cell; add cells or shrink the margin",
                      ResolutionWarning, stacklevel=3)
    steps = h0 * r ** np.arange(n)
    off = np.cumsum(steps)
    return off * (length / off[-1])


# ---------------------------------------------------------------------------
# Eulerian states

@dataclass(frozen=True)
class EulerianState:
    """``u`` as linear pieces plus a measure with piecewise-constant density.

    Piece ``i`` covers ``[x_lo[i], x_hi[i]]`` where
    ``u = u_mid[i] + slope[i] * (x - mid)`` and the absolutely continuous
    part of the measure has density ``density[i]``.  Outside all pieces
    ``u`` equals ``asymptote`` and the density is 0.
    """
    x_lo: np.ndarray
    x_hi: np.ndarray
    u_mid: np.ndarray
    slope: np.ndarray
    density: np.ndarray
    atoms_x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    atoms_mass: np.ndarray = field(default_factory=lambda: np.zeros(0))
    asymptote: float = 0.0

    def __post_init__(self):
        for name in ("x_lo", "x_hi", "u_mid", "slope", "density", "atoms_x", "atoms_mass"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.x_hi < self.x_lo):
            raise CoordinateError("pieces must have x_hi >= x_lo")
        if np.any(self.density < 0):
            raise CoordinateError("density must be nonnegative")
        if np.any(self.atoms_mass <= 0):
            raise CoordinateError("atom masses must be strictly positive")
        order = np.argsort(self.atoms_x, kind="stable")
        object.__setattr__(self, "atoms_x", self.atoms_x[order])
        object.__setattr__(self, "atoms_mass", self.atoms_mass[order])

    @classmethod
    def from_profile(cls, p: PiecewiseLinearProfile, atoms: Iterable[tuple[float, float]] = (),
                     asymptote: float = 0.0) -> "EulerianState":
        """``u = asymptote + p`` with ``mu = u_x^2 dx + atoms``."""
        x0, x1 = p.breakpoints[:-1], p.breakpoints[1:]
        mid = 0.5 * (x0 + x1)
        atoms = list(atoms)
        ax = np.array([a[0] for a in atoms], dtype=float)
        am = np.array([a[1] for a in atoms], dtype=float)
        return cls(x0, x1, asymptote + p.slopes * mid + p.intercepts, p.slopes.copy(),
                   p.slopes**2, ax, am, asymptote)

    @classmethod
    def zero(cls, atoms: Iterable[tuple[float, float]] = (), asymptote: float = 0.0) -> "EulerianState":
        atoms = list(atoms)
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0),
                   np.array([a[0] for a in atoms], dtype=float),
                   np.array([a[1] for a in atoms], dtype=float), asymptote)

    @property
    def n_pieces(self) -> int:
        return self.x_lo.size

    def _piece(self, x):
        """Nearest piece to each x, and whether x lies within the covered hull."""
        x = np.asarray(x, dtype=float)
        if self.n_pieces == 0:
            return np.zeros(x.shape, dtype=int), np.zeros(x.shape, dtype=bool)
        i = np.clip(np.searchsorted(self.x_lo, x, side="right") - 1, 0, self.n_pieces - 1)
        j = np.clip(i + 1, 0, self.n_pieces - 1)
        di = np.maximum(np.maximum(self.x_lo[i] - x, x - self.x_hi[i]), 0.0)
        dj = np.maximum(np.maximum(self.x_lo[j] - x, x - self.x_hi[j]), 0.0)
        k = np.where(dj < di, j, i)
        inside = (x >= self.x_lo[0]) & (x <= self.x_hi[-1])
        return k, inside

    def u(self, x):
        x = np.asarray(x, dtype=float)
        k, inside = self._piece(x)
        if self.n_pieces == 0:
            out = np.full(x.shape, self.asymptote)
        else:
            mid = 0.5 * (self.x_lo[k] + self.x_hi[k])
            out = np.where(inside, self.u_mid[k] + self.slope[k] * (x - mid), self.asymptote)
        return out if out.ndim else float(out)

    def u_x(self, x):
        x = np.asarray(x, dtype=float)
        k, inside = self._piece(x)
        out = np.where(inside, self.slope[k], 0.0) if self.n_pieces else np.zeros(x.shape)
        return out if out.ndim else float(out)

    def density_at(self, x):
        x = np.asarray(x, dtype=float)
        k, inside = self._piece(x)
        if self.n_pieces == 0:
            out = np.zeros(x.shape)
        else:
            covered = inside & (x >= self.x_lo[k]) & (x <= self.x_hi[k])
            out = np.where(covered, self.density[k], 0.0)
        return out if out.ndim else float(out)

    def ac_mass(self) -> float:
        return float(np.sum(self.density * (self.x_hi - self.x_lo)))

    def total_mass(self) -> float:
        return self.ac_mass() + float(np.sum(self.atoms_mass))

    def l2_sq(self) -> float:
        """``||u - c||_{L^2}^2`` integrated exactly piece by piece."""
        w = self.x_hi - self.x_lo
        a = self.u_mid - self.asymptote
        return float(np.sum(w * a * a + self.slope**2 * w**3 / 12.0))

    def energy(self) -> float:
        return self.l2_sq() + self.total_mass()

    def density_defect(self) -> float:
        """max |density - u_x^2| over pieces (zero for valid Eulerian data)."""
        if self.n_pieces == 0:
            return 0.0
        return float(np.max(np.abs(self.density - self.slope**2)))


def tv_distance(a: EulerianState, b: EulerianState, atom_tol: float = 1e-9) -> float:
    """Total variation distance between the two measures.

    Densities are compared exactly on the common refinement of the piece
    boundaries; atoms closer than ``atom_tol`` are matched.
    """
    edges = np.unique(np.concatenate([a.x_lo, a.x_hi, b.x_lo, b.x_hi]))
    dist = 0.0
    if edges.size >= 2:
        mid = 0.5 * (edges[1:] + edges[:-1])
        dist += float(np.sum(np.abs(a.density_at(mid) - b.density_at(mid)) * np.diff(edges)))
    xa, ma = list(a.atoms_x), list(a.atoms_mass)
    xb, mb = list(b.atoms_x), list(b.atoms_mass)
    for x, m in zip(xa, ma):
        hit = [i for i, z in enumerate(xb) if abs(z - x) <= atom_tol]
        if hit:
            i = hit[0]
            dist += abs(m - mb[i])
            del xb[i], mb[i]
        else:
            dist += m
    return dist + float(sum(mb))


# ---------------------------------------------------------------------------
# Lagrangian states

_CSV_COLUMNS = ("xi", "y", "U", "h", "y_xi", "U_xi")


@dataclass(frozen=True)
class LagrangianState:
    grid: Grid
    y: np.ndarray
    U: np.ndarray
    h: np.ndarray
    y_xi: np.ndarray
    U_xi: np.ndarray
    asymptote: float = 0.0

    def __post_init__(self):
        n = self.grid.n
        for name in ("y", "U", "h", "y_xi", "U_xi"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (n,):
                raise CoordinateError(f"{name} must have one value per cell ({n}), got {v.shape}")
            object.__setattr__(self, name, v)

    @property
    def xi(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def zeta(self) -> np.ndarray:
        return self.y - self.xi

    def replace(self, **changes) -> "LagrangianState":
        return replace(self, **changes)

    def constraint_residual(self) -> np.ndarray:
        """``y_xi * h - U_xi**2`` at every node."""
        return self.y_xi * self.h - self.U_xi**2

    def invariant_report(self, tol: float = 1e-10) -> dict:
        scale = max(1.0, float(np.max(self.y_xi + self.h)))
        return {
            "min_y_xi": float(np.min(self.y_xi)),
            "min_h": float(np.min(self.h)),
            "min_y_xi_plus_h": float(np.min(self.y_xi + self.h)),
            "max_constraint": float(np.max(np.abs(self.constraint_residual()))),
            "y_nondecreasing": bool(np.all(np.diff(self.y) >= -tol * scale)),
        }

    def is_valid(self, tol: float = 1e-10) -> bool:
        r = self.invariant_report(tol)
        return (r["min_y_xi"] >= -tol and r["min_h"] >= -tol and r["min_y_xi_plus_h"] > 0
                and r["max_constraint"] <= tol and r["y_nondecreasing"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_CSV_COLUMNS)
        for row in zip(self.xi, self.y, self.U, self.h, self.y_xi, self.U_xi):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, faces: Sequence[float] | None = None,
                 asymptote: float = 0.0) -> "LagrangianState":
        """Read the CSV written by :meth:`to_csv`.

        Faces are not part of the CSV; pass them when the grid is not the
        dual grid of its nodes.
        """
        rows = list(csv.reader(io.StringIO(text)))
        if tuple(rows[0]) != _CSV_COLUMNS:
            raise CoordinateError(f"unexpected CSV header {rows[0]}")
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        grid = Grid(np.asarray(faces, dtype=float)) if faces is not None else Grid.from_nodes(data[:, 0])
        if not np.array_equal(grid.nodes, data[:, 0]) and faces is not None:
            if np.max(np.abs(grid.nodes - data[:, 0])) > 1e-12 * max(1.0, np.max(np.abs(data[:, 0]))):
                raise CoordinateError("faces do not match the xi column")
        return cls(grid, data[:, 1], data[:, 2], data[:, 3], data[:, 4], data[:, 5], asymptote)


# ---------------------------------------------------------------------------
# the maps L and M

def _cumulative_table(e: EulerianState):
    """Breaks b_k, constant density on [b_k, b_{k+1}], and G(b_k -) and G(b_k +)
    for G(x) = x + mu((-inf, x))."""
    b = np.unique(np.concatenate([e.x_lo, e.x_hi, e.atoms_x]))
    if b.size == 0:
        return b, np.zeros(0), np.zeros(0), np.zeros(0)
    mid = 0.5 * (b[1:] + b[:-1])
    g = e.density_at(mid) if mid.size else np.zeros(0)
    atom_at = np.zeros(b.size)
    if e.atoms_x.size:
        np.add.at(atom_at, np.searchsorted(b, e.atoms_x), e.atoms_mass)
    mass_between = g * np.diff(b)
    # G(b_k-) = b_k + sum_{i<k}(mass_between_i + atom_i)
    before = np.concatenate([[0.0], np.cumsum(mass_between + atom_at[:-1])])
    g_minus = b + before
    g_plus = g_minus + atom_at
    return b, g, g_minus, g_plus


def invert_cumulative(e: EulerianState, xi) -> tuple[np.ndarray, np.ndarray]:
    """``y(xi) = sup{y : y + mu((-inf, y)) < xi}``, exactly.

    Returns ``(y, on_atom)`` where ``on_atom`` flags labels strictly inside
    the plateau created by an atom.
    """
    xi = np.asarray(xi, dtype=float)
    b, g, gm, gp = _cumulative_table(e)
    if b.size == 0:
        return xi.copy(), np.zeros(xi.shape, dtype=bool)
    total = gp[-1] - b[-1]
    y = np.empty_like(xi)
    on_atom = np.zeros(xi.shape, dtype=bool)
    left = xi <= gm[0]
    right = xi > gp[-1]
    y[left] = xi[left]
    y[right] = xi[right] - total
    mid = ~(left | right)
    if np.any(mid):
        s = xi[mid]
        # k: last break with G(b_k -) < s  (plateau [gm, gp] or linear run after gp)
        k = np.searchsorted(gm, s, side="left") - 1
        k = np.clip(k, 0, b.size - 1)
        plateau = s <= gp[k]
        ym = np.empty_like(s)
        ym[plateau] = b[k[plateau]]
        run = ~plateau
        kr = np.minimum(k[run], g.size - 1)
        ym[run] = b[kr] + (s[run] - gp[kr]) / (1.0 + g[kr])
        y[mid] = ym
        on_atom[mid] = plateau & (s > gm[k]) & (s < gp[k])
    return y, on_atom


def to_lagrangian(e: EulerianState, grid: Grid) -> LagrangianState:
    """The map L onto the canonical representative (``y_xi + h = 1``)."""
    xi = grid.nodes
    y, on_atom = invert_cumulative(e, xi)
    g = e.density_at(y)
    s = e.u_x(y)
    y_xi = np.where(on_atom, 0.0, 1.0 / (1.0 + g))
    h = 1.0 - y_xi
    U_xi = np.where(on_atom, 0.0, s * y_xi)
    U = e.u(y)
    _resolution_check(e, grid)
    return LagrangianState(grid, y, U, h, y_xi, U_xi, e.asymptote)


def _resolution_check(e: EulerianState, grid: Grid) -> None:
    b, g, gm, gp = _cumulative_table(e)
    if b.size < 2:
        return
    starts, ends = gp[:-1], gm[1:]
    lo = np.searchsorted(grid.nodes, starts, side="left")
    hi = np.searchsorted(grid.nodes, ends, side="right")
    empty = (hi - lo <= 0) & (ends - starts > 0)
    if np.any(empty):
        warnings.warn(f"{int(empty.sum())} profile pieces contain no grid node",
                      ResolutionWarning, stacklevel=3)


def degenerate_threshold(X: LagrangianState) -> float:
    return 1e-10 * max(1.0, float(np.max(X.y_xi + X.h)))


def to_eulerian(X: LagrangianState, threshold: float | None = None) -> EulerianState:
    """The map M: ``u(y(xi)) = U(xi)``, ``mu = y_#(h dxi)``.

    Cells with ``y_xi`` at or below ``threshold`` are collapsed; their
    ``h``-mass goes to an atom at ``y``.  Consecutive collapsed cells with
    the same image merge into one atom.
    """
    thr = degenerate_threshold(X) if threshold is None else threshold
    w = X.grid.widths
    good = X.y_xi > thr
    half = 0.5 * X.y_xi * w
    ys, ws = X.y[good], half[good]
    pieces = EulerianState(
        ys - ws, ys + ws, X.U[good], X.U_xi[good] / X.y_xi[good], X.h[good] / X.y_xi[good],
        asymptote=X.asymptote)
    bad = np.flatnonzero(~good & (X.h > 0))
    ax, am = [], []
    if bad.size:
        scale = max(1.0, float(np.max(np.abs(X.y))))
        start = 0
        for i in range(1, bad.size + 1):
            if (i == bad.size or bad[i] != bad[i - 1] + 1
                    or abs(X.y[bad[i]] - X.y[bad[i - 1]]) > 1e-9 * scale):
                run = bad[start:i]
                m = X.h[run] * w[run]
                ax.append(float(np.sum(X.y[run] * m) / np.sum(m)))
                am.append(float(np.sum(m)))
                start = i
    return replace(pieces, atoms_x=np.array(ax), atoms_mass=np.array(am))


# ---------------------------------------------------------------------------
# relabelling

@dataclass(frozen=True)
class Relabeling:
    f: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def identity(cls) -> "Relabeling":
        return cls(lambda s: np.asarray(s, dtype=float).copy(),
                   lambda s: np.ones_like(np.asarray(s, dtype=float)))

    def check(self, xi: np.ndarray, bound: float = 1e6) -> None:
        fx = np.asarray(self.f(xi), dtype=float)
        dfx = np.asarray(self.df(xi), dtype=float)
        if np.any(dfx <= 0) or np.any(np.diff(fx) <= 0):
            raise CoordinateError("relabeling must be strictly increasing")
        if np.max(np.abs(fx - xi)) > bound:
            raise CoordinateError("relabeling must stay within bounded distance of the identity")


def relabel(X: LagrangianState, f: Relabeling) -> LagrangianState:
    """``X o f`` sampled on the same grid.

    Off-grid values use the cell-wise linear reconstruction of ``y`` and
    ``U`` and the cell values of the derivative quantities.
    """
    xi = X.xi
    f.check(xi)
    s = np.asarray(f.f(xi), dtype=float)
    ds = np.asarray(f.df(xi), dtype=float)
    k = X.grid.cell_of(s)
    off = s - xi[k]
    return X.replace(
        y=X.y[k] + X.y_xi[k] * off,
        U=X.U[k] + X.U_xi[k] * off,
        h=X.h[k] * ds,
        y_xi=X.y_xi[k] * ds,
        U_xi=X.U_xi[k] * ds,
    )


def profile_knots(e: EulerianState) -> np.ndarray:
    """Labels of all kinks and atom edges of ``e``: the faces a grid for
    ``to_lagrangian(e, grid)`` should contain."""
    b, g, gm, gp = _cumulative_table(e)
    return np.unique(np.concatenate([gm, gp]))
