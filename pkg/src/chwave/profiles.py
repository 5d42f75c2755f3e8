"""Piecewise-linear initial profiles with compact support.

A profile is ``k_j * x + d_j`` on ``[x_j, x_{j+1}]`` and zero outside the
outermost breakpoints.  Everything here is exact arithmetic on the segment
data; no sampling is involved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ProfileError(ValueError):
    """Invalid profile parameters or data."""


@dataclass(frozen=True)
class PiecewiseLinearProfile:
    breakpoints: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.breakpoints, dtype=float)
        k = np.asarray(self.slopes, dtype=float)
        d = np.asarray(self.intercepts, dtype=float)
        if x.ndim != 1 or x.size < 2:
            raise ProfileError("need at least two breakpoints")
        if k.shape != (x.size - 1,) or d.shape != k.shape:
            raise ProfileError("need one slope and one intercept per segment")
        if np.any(np.diff(x) <= 0):
            raise ProfileError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", x)
        object.__setattr__(self, "slopes", k)
        object.__setattr__(self, "intercepts", d)

    @property
    def n_segments(self) -> int:
        return self.slopes.size

    @property
    def support(self) -> tuple[float, float]:
        return float(self.breakpoints[0]), float(self.breakpoints[-1])

    def segment_index(self, x):
        """Index of the segment containing ``x`` (right-continuous), -1 or
        ``n_segments`` outside the support."""
        return np.searchsorted(self.breakpoints, x, side="right") - 1

    def __call__(self, x):
        return eval_profile(self, x)

    def continuity_defects(self) -> np.ndarray:
        """Jump of the two one-sided values at every interior breakpoint."""
        xb = self.breakpoints[1:-1]
        left = self.slopes[:-1] * xb + self.intercepts[:-1]
        right = self.slopes[1:] * xb + self.intercepts[1:]
        return right - left

    def end_values(self) -> tuple[float, float]:
        x0, x1 = self.breakpoints[0], self.breakpoints[-1]
        return (float(self.slopes[0] * x0 + self.intercepts[0]),
                float(self.slopes[-1] * x1 + self.intercepts[-1]))

    def to_json(self) -> str:
        # repr of a Python float is the shortest round-trip decimal
        return json.dumps({
            "breakpoints": [float(v) for v in self.breakpoints],
            "slopes": [float(v) for v in self.slopes],
            "intercepts": [float(v) for v in self.intercepts],
        })

    @classmethod
    def from_json(cls, text: str) -> "PiecewiseLinearProfile":
        data = json.loads(text)
        return cls(np.array(data["breakpoints"], dtype=float),
                   np.array(data["slopes"], dtype=float),
                   np.array(data["intercepts"], dtype=float))


def eval_profile(p: PiecewiseLinearProfile, x):
    x = np.asarray(x, dtype=float)
    idx = p.segment_index(x)
    inside = (idx >= 0) & (idx < p.n_segments)
    # the right endpoint belongs to the last segment (value 0 there anyway)
    inside |= x == p.breakpoints[-1]
    j = np.clip(idx, 0, p.n_segments - 1)
    out = np.where(inside, p.slopes[j] * x + p.intercepts[j], 0.0)
    return out if out.ndim else float(out)


def eval_derivative(p: PiecewiseLinearProfile, x):
    """Derivative of the profile, right limit at breakpoints."""
    x = np.asarray(x, dtype=float)
    idx = p.segment_index(x)
    inside = (idx >= 0) & (idx < p.n_segments)
    j = np.clip(idx, 0, p.n_segments - 1)
    out = np.where(inside, p.slopes[j], 0.0)
    return out if out.ndim else float(out)


def piecewise_linear(points: Sequence[tuple[float, float]]) -> PiecewiseLinearProfile:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ProfileError("points must be a sequence of at least two (x, u) pairs")
    x, u = pts[:, 0], pts[:, 1]
    if np.any(np.diff(x) <= 0):
        raise ProfileError("x values must be strictly increasing")
    if u[0] != 0.0 or u[-1] != 0.0:
        raise ProfileError("first and last values must be 0 (compact support)")
    k = np.diff(u) / np.diff(x)
    d = u[:-1] - k * x[:-1]
    return PiecewiseLinearProfile(x, k, d)


def accumulating_profile(q: float, J: int) -> PiecewiseLinearProfile:
    """Profile whose negative-slope segments steepen geometrically.

    Segments ``0 .. 2J`` follow the closed-form construction; segment ``2J``
    is followed by one connector that returns linearly to zero at
    ``x_{2J+2}``.  The ramp on ``[-2/(1-q^4), 0]`` is prepended.
    """
    if not (0.0 < q < 1.0):
        raise ProfileError(f"q must lie in (0, 1), got {q}")
    if int(J) != J or J < 1:
        raise ProfileError(f"J must be a positive integer, got {J}")
    J = int(J)
    q4 = q**4
    if q ** (4 * J) < 1e-13:
        raise ProfileError(f"segment widths q^(4j) underflow for q={q}, J={J}")
    xs = [0.0]
    for j in range(J + 1):
        w = q ** (4 * j)
        xs.append(xs[-1] + w)
        xs.append(xs[-1] + w)
    # xs = x_0 .. x_{2J+2}
    slopes, intercepts = [], []
    left = -2.0 / (1.0 - q4)
    slopes.append(0.25 * q * (1.0 - q4))
    intercepts.append(0.5 * q)
    for j in range(J + 1):
        qj = q ** (j - 1)
        slopes.append(-1.0 / qj)
        intercepts.append(0.5 / (qj * (1 - q4)) * (4 - 3 * q ** (4 * j) - q ** (4 * (j + 1))))
        if j < J:
            slopes.append(0.5 * (q + q4) / q**j)
            intercepts.append(-0.5 / (qj * (1 - q4)) * (
                2 + 2 * q**3 - q ** (4 * j + 3) - 2 * q ** (4 * j + 4) - q ** (4 * j + 7)))
    # connector from x_{2J+1} down to 0 at x_{2J+2}
    xa, xb = xs[2 * J + 1], xs[2 * J + 2]
    va = slopes[-1] * xa + intercepts[-1]
    kc = -va / (xb - xa)
    slopes.append(kc)
    intercepts.append(-kc * xb)
    return PiecewiseLinearProfile(np.array([left] + xs), np.array(slopes), np.array(intercepts))


def plateau_segments(J: int) -> list[int]:
    """Segment positions (in ``slopes``) of the negative-slope pieces k_{2j}."""
    return [1 + 2 * j for j in range(J + 1)]


def rising_segments(J: int) -> list[int]:
    """Segment positions of the positive-slope pieces k_{2j+1}, j < J."""
    return [2 + 2 * j for j in range(J)]


def h1_norm_sq(p: PiecewiseLinearProfile) -> float:
    """``||u||_{L^2}^2 + ||u_x||_{L^2}^2`` from exact per-segment integrals."""
    x0, x1 = p.breakpoints[:-1], p.breakpoints[1:]
    k, d = p.slopes, p.intercepts
    u0, u1 = k * x0 + d, k * x1 + d
    w = x1 - x0
    l2 = w * (u0 * u0 + u0 * u1 + u1 * u1) / 3.0
    return float(np.sum(l2) + np.sum(k * k * w))


def steep_profile(slope: float, energy: float, core: float = 0.01) -> PiecewiseLinearProfile:
    """Odd profile whose steepest descent is ``slope`` on ``[-core, core]``.

    The two flanks of length ``L`` join the core to zero and ``L`` is chosen
    so that ``h1_norm_sq`` equals ``energy`` exactly.
    """
    if not slope < 0:
        raise ProfileError(f"slope must be negative, got {slope}")
    if not core > 0:
        raise ProfileError(f"core must be positive, got {core}")
    k2 = slope * slope
    rest = energy - k2 * (2.0 * core**3 / 3.0 + 2.0 * core)
    v2 = k2 * core * core
    # each flank contributes v^2 L / 3 + v^2 / L = rest / 2
    disc = rest * rest / 4.0 - 4.0 * v2 * v2 / 3.0
    if not (rest > 0 and disc >= 0):
        raise ProfileError(f"energy {energy} too small for slope {slope} with core {core}")
    flank = (rest / 2.0 - np.sqrt(disc)) / (2.0 * v2 / 3.0)
    v = -slope * core
    return piecewise_linear([(-core - flank, 0.0), (-core, v), (core, -v), (core + flank, 0.0)])
