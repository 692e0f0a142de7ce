"""Convex interaction potentials with derivative evaluators and growth metadata.

Built-in families:

* ``gaussian``     V(x) = x^2/2.  Constant curvature; excluded from the
  power-growth class (r = 2) and supported only to anchor the exact oracle.
* ``power``        V(x) = |x|^r / r with r > 2.  V'' = (r-1)|x|^(r-2).
* ``flat_bottom``  V(x) = ((|x|-b)_+)^4, optionally plus an asymmetric term
  eps*((x-b)_+)^4.  C^2, convex, curvature identically zero on [-b, b].
* ``user_table``   cubic interpolation of a two-column (x, V) text file.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline


class Potential:
    """Base class: evaluators for V, V', V'' plus growth metadata.

    Subclasses set `family`, `r` (growth exponent, None for gaussian) and
    implement v/dv/d2v as numpy-vectorized callables.  Instances are
    immutable and freely shareable.
    """

    family = "abstract"
    r = None

    def v(self, x):
        raise NotImplementedError

    def dv(self, x):
        raise NotImplementedError

    def d2v(self, x):
        raise NotImplementedError

    _r_v_cache = None

    @property
    def r_v(self):
        """Twice the smallest radius >= 1 beyond which the curvature stays >= 1."""
        if self._r_v_cache is None:
            self._r_v_cache = compute_r_v(self)
        return self._r_v_cache

    def describe(self):
        return {"family": self.family}

    def __repr__(self):
        params = ", ".join(f"{k}={v}" for k, v in self.describe().items() if k != "family")
        return f"{type(self).__name__}({params})"


class GaussianPotential(Potential):
    """V(x) = scale * x^2 / 2."""

    family = "gaussian"

    def __init__(self, scale=1.0):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = float(scale)

    def v(self, x):
        return 0.5 * self.scale * np.square(x)

    def dv(self, x):
        return self.scale * np.asarray(x, dtype=float)

    def d2v(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.scale)

    def describe(self):
        return {"family": self.family, "scale": self.scale}


class PowerPotential(Potential):
    """V(x) = |x|^r / r, convex with power-law curvature growth.

    The quartic case avoids pow/sign calls; it sits in every sampler inner
    loop.
    """

    family = "power"

    def __init__(self, r=4.0):
        if r <= 2:
            raise ValueError("power family requires growth exponent r > 2")
        self.r = float(r)

    def v(self, x):
        if self.r == 4.0:
            sq = np.square(x)
            return 0.25 * np.square(sq)
        return np.abs(x) ** self.r / self.r

    def dv(self, x):
        x = np.asarray(x, dtype=float)
        if self.r == 4.0:
            return np.square(x) * x
        return np.sign(x) * np.abs(x) ** (self.r - 1)

    def d2v(self, x):
        if self.r == 4.0:
            return 3.0 * np.square(x)
        return (self.r - 1) * np.abs(x) ** (self.r - 2)

    def describe(self):
        return {"family": self.family, "r": self.r}


class FlatBottomPotential(Potential):
    """V(x) = ((|x|-b)_+)^4 + eps*((x-b)_+)^4.

    The curvature vanishes identically on [-b, b] and grows like 12 x^2
    (r = 4) outside, which is the regime the whole pipeline is built to
    exercise.  eps > 0 breaks the x -> -x symmetry on the right branch only.
    """

    family = "flat_bottom"
    r = 4.0

    def __init__(self, b=1.0, eps=0.0):
        if b <= 0:
            raise ValueError("flat half-width b must be positive")
        if eps < 0:
            raise ValueError("asymmetry eps must be >= 0")
        self.b = float(b)
        self.eps = float(eps)

    def _excess(self, x):
        return np.maximum(np.abs(x) - self.b, 0.0)

    def v(self, x):
        x = np.asarray(x, dtype=float)
        out = self._excess(x) ** 4
        if self.eps:
            out = out + self.eps * np.maximum(x - self.b, 0.0) ** 4
        return out

    def dv(self, x):
        x = np.asarray(x, dtype=float)
        out = 4.0 * np.sign(x) * self._excess(x) ** 3
        if self.eps:
            out = out + 4.0 * self.eps * np.maximum(x - self.b, 0.0) ** 3
        return out

    def d2v(self, x):
        x = np.asarray(x, dtype=float)
        out = 12.0 * self._excess(x) ** 2
        if self.eps:
            out = out + 12.0 * self.eps * np.maximum(x - self.b, 0.0) ** 2
        return out

    def describe(self):
        return {"family": self.family, "b": self.b, "eps": self.eps}


class TablePotential(Potential):
    """Potential read from a two-column (x, V(x)) text file, cubic-interpolated.

    Derivatives come from the spline; the growth exponent is estimated from
    the curvature's log-log slope on the outer part of the table.
    """

    family = "user_table"

    def __init__(self, path=None, xs=None, vs=None):
        if path is not None:
            data = np.loadtxt(path)
            if data.ndim != 2 or data.shape[1] < 2:
                raise ValueError("user_table file must have two numeric columns (x, V)")
            xs, vs = data[:, 0], data[:, 1]
        xs = np.asarray(xs, dtype=float)
        vs = np.asarray(vs, dtype=float)
        order = np.argsort(xs)
        xs, vs = xs[order], vs[order]
        if len(xs) < 8:
            raise ValueError("user_table needs at least 8 points")
        self.x_min, self.x_max = float(xs[0]), float(xs[-1])
        self._spline = CubicSpline(xs, vs)
        self._d1 = self._spline.derivative(1)
        self._d2 = self._spline.derivative(2)
        self.r = self._estimate_r(xs)

    def _estimate_r(self, xs):
        span = self.x_max - self.x_min
        probe = np.linspace(self.x_max - 0.4 * span / 2, self.x_max - 0.02 * span, 64)
        d2 = self._d2(probe)
        if np.any(d2 <= 0):
            return None
        slope = np.polyfit(np.log(probe - probe.mean() + probe.mean()), np.log(d2), 1)[0]
        return float(slope + 2.0) if slope > 0 else None

    def v(self, x):
        return self._spline(np.clip(x, self.x_min, self.x_max))

    def dv(self, x):
        return self._d1(np.clip(x, self.x_min, self.x_max))

    def d2v(self, x):
        return self._d2(np.clip(x, self.x_min, self.x_max))

    def describe(self):
        return {"family": self.family, "x_min": self.x_min, "x_max": self.x_max}


_FAMILIES = {
    "gaussian": GaussianPotential,
    "power": PowerPotential,
    "flat_bottom": FlatBottomPotential,
    "user_table": TablePotential,
}


def make_potential(family, **params):
    """Construct a potential from a family tag and keyword parameters."""
    if family not in _FAMILIES:
        raise ValueError(f"unknown potential family {family!r}; choose from {sorted(_FAMILIES)}")
    return _FAMILIES[family](**params)


def evaluate(V, x):
    """(V(x), V'(x), V''(x)) at a single point."""
    x = float(x)
    if not np.isfinite(x):
        raise ValueError("evaluation point must be finite")
    return float(V.v(x)), float(V.dv(x)), float(V.d2v(x))


def compute_r_v(V, search_bound=1e4, tol=1e-8):
    """2 * inf{R >= 1 : V'' >= 1 outside [-R, R]}, located by bisection.

    The curvature is probed on dense grids over [1, search_bound] on both
    sides; beyond the bound the power-law tail from (r, c) certifies the
    condition when the family carries growth metadata.
    """
    if hasattr(V, "x_max"):
        search_bound = min(search_bound, 0.98 * max(abs(V.x_min), abs(V.x_max)))

    n_probe = 20001
    grid = np.linspace(1.0, search_bound, n_probe)
    suffix = np.minimum(
        _suffix_min(V.d2v(grid)),
        _suffix_min(V.d2v(-grid)),
    )

    # certify the region beyond search_bound
    tail_ok = suffix[-1] >= 1.0
    if tail_ok and V.r is not None and V.r > 2:
        far = np.geomspace(search_bound, 10 * search_bound, 200)
        tail_ok = bool(np.all(V.d2v(far) >= 1.0) and np.all(V.d2v(-far) >= 1.0))
    if not tail_ok:
        raise ValueError(
            f"curvature is not eventually >= 1 within search_bound={search_bound}"
        )

    ok = suffix >= 1.0
    if ok[0]:
        return 2.0

    def holds(R):
        # V'' >= 1 on [R, first grid point past R], then the suffix table
        j = int(np.searchsorted(grid, R))
        j = min(j, n_probe - 1)
        local = np.linspace(R, grid[j], 64)
        lo = min(float(np.min(V.d2v(local))), float(np.min(V.d2v(-local))))
        return lo >= 1.0 and suffix[j] >= 1.0

    first = int(np.argmax(ok))
    lo, hi = grid[first - 1], grid[first]
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if holds(mid):
            hi = mid
        else:
            lo = mid
    return 2.0 * hi


def _suffix_min(values):
    return np.minimum.accumulate(values[::-1])[::-1]


@dataclass
class AssumptionReport:
    """Outcome of probing a potential against the convexity/growth clauses."""

    convex: bool
    smooth: bool
    growth: bool
    r_estimate: float | None
    c_minus: float | None
    c_plus: float | None
    flags: list = field(default_factory=list)
    notes: str = ""

    @property
    def passed(self):
        return self.convex and self.smooth and self.growth


def validate_assumption(V, x_max=None, n_points=20000):
    """Probe convexity, C^2 smoothness, and the curvature growth clause.

    The growth constants (c_minus, c_plus) are estimated from V''/|x|^(r-2)
    over the outer half of the probe window; the verdict necessarily
    certifies behavior on that finite window only.
    """
    flags = []
    if x_max is None:
        try:
            x_max = max(20.0, 5.0 * V.r_v)
        except ValueError:
            x_max = 20.0
    if hasattr(V, "x_max"):
        x_max = min(x_max, 0.98 * max(abs(V.x_min), abs(V.x_max)))
    grid = np.linspace(-x_max, x_max, n_points)
    d2 = np.asarray(V.d2v(grid), dtype=float)

    convex = bool(np.all(d2 >= -1e-9))
    if not convex:
        flags.append("curvature negative on probe grid (clause i)")

    # a C^2 potential has no curvature jump at grid resolution: spikes in
    # the second difference of V'' flag a discontinuity
    second = np.abs(np.diff(d2, 2))
    scale = max(1e-6, 20.0 * float(np.median(second)) + 1e-6)
    smooth = bool(np.max(second) <= max(scale, 1e-4 * np.max(np.abs(d2)) + 1e-6))
    if not smooth:
        flags.append("curvature jump beyond grid tolerance (clause i)")

    r = V.r
    if V.family == "gaussian":
        flags.append("gaussian-special: r=2 excluded by the growth clause, "
                     "supported only for the exact oracle")
        return AssumptionReport(convex, smooth, False, 2.0, None, None, flags,
                                notes=f"window [-{x_max}, {x_max}]")
    if r is None or r <= 2:
        flags.append("no growth exponent r > 2 available (clause ii)")
        return AssumptionReport(convex, smooth, False, r, None, None, flags,
                                notes=f"window [-{x_max}, {x_max}]")

    outer = np.abs(grid) >= 0.5 * x_max
    ratio = d2[outer] / np.abs(grid[outer]) ** (r - 2)
    c_minus, c_plus = float(np.min(ratio)), float(np.max(ratio))
    growth = c_minus > 0 and np.isfinite(c_plus)
    if not growth:
        flags.append("curvature/growth ratio not bounded away from 0 on outer window (clause ii)")
    return AssumptionReport(convex, smooth, growth, float(r), c_minus, c_plus, flags,
                            notes=f"window [-{x_max}, {x_max}], outer half used for (c-, c+)")
