"""Numerical verifiers for the functional inequalities behind the variance bound.

Each checker returns an empirical constant (the inequality's left side over
its right side without the unknown prefactor) or a monotonicity verdict;
"verification" means boundedness and stability of those ratios across a
corpus, never a proof.
"""

from dataclasses import dataclass, field

import numpy as np

from .lattice import EdgeField, gradient_field, lp_norm
from .moderation import m_pprime_of_w


@dataclass(frozen=True)
class ExponentTable:
    """Interpolation and Nash exponents for dimension d and weights (p, p')."""

    d: int
    p: float
    pprime: float
    lam: float
    kappa: float
    sigma: float
    tau: float
    lam2: float
    tau2: float
    theta_d: float
    theta_c: float
    alpha: float
    beta: float
    gamma: float


def exponent_table(d, p=None, pprime=None):
    """Build the exponent table and verify its defining identities to 1e-12."""
    if p is None:
        p = d + 1.0
    if pprime is None:
        pprime = d + 1.0
    if p <= d or pprime <= d:
        raise ValueError("weight exponents must satisfy p, p' > d")
    lam = (2.0 * d + 2.0) / (d + 2.0)
    kappa = d * lam / (d - lam)
    sigma = 2.0 * kappa / (kappa - 2.0)
    tau = 2.0 * lam / (2.0 - lam)
    lam2 = (2.0 * d + 3.0) / (d + 2.0)
    tau2 = 2.0 * lam2 / (2.0 - lam2)
    theta_d = (2.0 / 3.0) * (2.0 * d + 3.0) / (2.0 * d + 2.0)
    theta_c = 1.0 / (1.0 + (d * p + 2.0 * p) / (d * p + 2.0 * d) * (pprime / d - 1.0))
    alpha = (1.0 - theta_c) * d / (d + 2.0) + theta_c * p / (p + 2.0)
    beta = (1.0 - theta_c) * 2.0 / (d + 2.0)
    gamma = theta_c * 2.0 / (p + 2.0)
    table = ExponentTable(d, p, pprime, lam, kappa, sigma, tau, lam2, tau2,
                          theta_d, theta_c, alpha, beta, gamma)
    _verify_identities(table)
    return table


def _verify_identities(t):
    checks = {
        "1/tau + 1/2 = 1/lambda": 1.0 / t.tau + 0.5 - 1.0 / t.lam,
        "1/kappa + 1/sigma = 1/2": 1.0 / t.kappa + 1.0 / t.sigma - 0.5,
        "1/sigma + 1/tau = 1/d": 1.0 / t.sigma + 1.0 / t.tau - 1.0 / t.d,
        "1/tau' + 1/2 = 1/lambda'": 1.0 / t.tau2 + 0.5 - 1.0 / t.lam2,
        "alpha + beta + gamma = 1": t.alpha + t.beta + t.gamma - 1.0,
        "alpha - (p-d)gamma/2 = (d/2)(1-alpha)":
            t.alpha - (t.p - t.d) * t.gamma / 2.0 - 0.5 * t.d * (1.0 - t.alpha),
    }
    for name, err in checks.items():
        if abs(err) > 1e-12:
            raise AssertionError(f"exponent identity failed: {name} (residual {err:.2e})")


def check_gns(f, kappa, lam, mu, theta):
    """Empirical constant of the interpolation inequality for a mean-zero field.

    Returns ||f||_kappa / (L^theta ||grad f||_lam^theta ||f||_mu^(1-theta))
    in normalized norms; the exponent relation
    1/kappa = theta (1/lam - 1/d) + (1-theta)/mu must hold.
    """
    torus = f.torus
    rel = 1.0 / kappa - theta * (1.0 / lam - 1.0 / torus.d) - (1.0 - theta) / mu
    if abs(rel) > 1e-10:
        raise ValueError(f"exponent relation violated (residual {rel:.2e})")
    if abs(f.values.sum()) > 1e-10 * torus.vertex_count:
        raise ValueError("field must have zero spatial mean")
    if np.all(f.values == 0.0):
        raise ValueError("zero field is rejected")
    grad = EdgeField(torus, gradient_field(torus, f.values))
    denom = (torus.L ** theta
             * lp_norm(grad, lam, normalized=True) ** theta
             * lp_norm(f, mu, normalized=True) ** (1.0 - theta))
    return lp_norm(f, kappa, normalized=True) / denom


def check_anchored_nash(f, w, table):
    """Empirical constant of the anchored Nash estimate on the torus.

    ||f||_2 over (M_p'(w)^(1/2) ||w grad f||_2)^alpha ||f||_1^beta
    |||x|_*^(p/2) f||_2^gamma, plain norms, with the maximal factor
    recomputed from the supplied weight field.
    """
    torus = f.torus
    if np.any(w.values <= 0):
        raise ValueError("weight field must be positive on every edge")
    if abs(f.values.sum()) > 1e-10 * torus.vertex_count:
        raise ValueError("field must have zero spatial mean")
    if np.all(f.values == 0.0):
        raise ValueError("zero field is rejected")
    m_factor = m_pprime_of_w(torus, w.values, table)
    grad = gradient_field(torus, f.values)
    weighted_grad = float(np.sqrt(np.sum((w.values * grad) ** 2)))
    anchored = float(np.sqrt(np.sum(torus.dist_star**table.p * f.values**2)))
    l1 = float(np.sum(np.abs(f.values)))
    l2 = float(np.sqrt(np.sum(f.values**2)))
    denom = ((np.sqrt(m_factor) * weighted_grad) ** table.alpha
             * l1 ** table.beta * anchored ** table.gamma)
    if denom == 0.0:
        raise ValueError("degenerate right-hand side")
    return l2 / denom


@dataclass
class ModerationCheck:
    ratios: np.ndarray
    max: float
    median: float
    q99: float
    zero_pairs: int


def check_moderation(traj, solve, w_nodes, node_indices, weights, samples):
    """Ratio statistics for the pointwise moderation inequality.

    For sampled (grid position, edge) pairs, compares
    w(t,e)^2 (grad u(t,e))^2 against
    sum_(e'~e) int_t^inf K_(s-t) a(s,e') (grad u(s,e'))^2 ds
    with u the heat kernel of the supplied solve (edge_sq recorded).
    Both-zero pairs score 0; a vanishing right side against a nonzero left
    side flags a quadrature failure.
    """
    if solve.edge_sq is None:
        raise ValueError("solve must record edge gradient squares")
    node_indices = np.asarray(node_indices)
    closure = traj.torus.edge_closure
    dt = traj.node_dt
    all_times = np.arange(solve.edge_sq.shape[0]) * dt
    ratios = np.empty(len(samples))
    zero_pairs = 0
    for i, (pos, e) in enumerate(samples):
        node = int(node_indices[pos])
        lhs = w_nodes[pos, e] ** 2 * solve.edge_sq[node, e]
        nb = closure[e]
        gaps = all_times[node:] - all_times[node]
        integrand = (traj.a[node:node + len(gaps), nb]
                     * solve.edge_sq[node:, nb]).sum(axis=1)
        rhs = float(np.trapezoid(weights.K(gaps) * integrand, dx=dt))
        if rhs <= 1e-300:
            if lhs > 1e-14:
                raise FloatingPointError(
                    f"vanishing right side with nonzero left side at node {node}, edge {e}")
            ratios[i] = 0.0
            zero_pairs += 1
        else:
            ratios[i] = lhs / rhs
    finite = ratios[np.isfinite(ratios)]
    return ModerationCheck(ratios, float(np.max(finite)), float(np.median(finite)),
                           float(np.quantile(finite, 0.99)), zero_pairs)


@dataclass
class EfronReport:
    s_values: np.ndarray
    g_values: np.ndarray
    nondecreasing: bool
    tolerance: float
    worst_drop: float


def check_efron(x, fx, fy, psi, s_grid=None):
    """Conditional-expectation monotonicity for independent log-concave densities.

    Computes g(s) = E[psi(X, Y) | X + Y = s] by trapezoid quadrature along
    anti-diagonals and reports whether g is nondecreasing within
    1e-6 * range(g).  Densities must pass a midpoint log-concavity check on
    the (uniform) grid; psi must be nondecreasing in each argument.
    """
    x = np.asarray(x, dtype=float)
    h = x[1] - x[0]
    if np.max(np.abs(np.diff(x) - h)) > 1e-9 * h:
        raise ValueError("density grid must be uniform")
    for name, f in (("X", fx), ("Y", fy)):
        _require_log_concave(np.asarray(f, dtype=float), name)
    fx = np.asarray(fx, dtype=float)
    fy = np.asarray(fy, dtype=float)

    if s_grid is None:
        s_grid = np.linspace(2 * x[0], 2 * x[-1], 4 * len(x) - 3)
    g = np.full(len(s_grid), np.nan)
    den_all = np.empty(len(s_grid))
    for j, s in enumerate(s_grid):
        fy_at = np.interp(s - x, x, fy, left=0.0, right=0.0)
        wgt = fx * fy_at
        den = np.trapezoid(wgt, dx=h)
        den_all[j] = den
        if den > 0.0:
            g[j] = np.trapezoid(wgt * psi(x, s - x), dx=h) / den
    keep = den_all > 1e-8 * np.max(den_all)
    s_used, g_used = s_grid[keep], g[keep]
    diffs = np.diff(g_used)
    tol = 1e-6 * (np.max(g_used) - np.min(g_used) + 1e-300)
    worst = float(np.min(diffs)) if len(diffs) else 0.0
    return EfronReport(s_used, g_used, bool(worst >= -tol), tol, worst)


def _require_log_concave(f, name):
    if np.any(f < 0):
        raise ValueError(f"density {name} is negative on the grid")
    pos = f > 1e-300
    idx = np.flatnonzero(pos)
    if len(idx) < 3:
        raise ValueError(f"density {name} has too little support")
    if not np.all(pos[idx[0]:idx[-1] + 1]):
        raise ValueError(f"density {name} has disconnected support")
    lf = np.log(f[idx[0]:idx[-1] + 1])
    mid = 2.0 * lf[1:-1] - lf[:-2] - lf[2:]
    if np.min(mid) < -1e-9:
        raise ValueError(f"density {name} fails log-concavity check "
                         f"(worst midpoint deficit {np.min(mid):.2e})")


@dataclass
class KPropertyReport:
    passed: bool
    integral: float
    integral_margin: float
    worst_ratio: float
    worst_gap: float
    grid: np.ndarray = field(repr=False, default=None)


def check_k_properties(weights, n_grid=97):
    """Re-verify both kernel properties on an independent, finer log grid."""
    grid = np.geomspace(1.5e-3, 1.5e4, n_grid)
    ratios = np.array([weights.convolution(u) / weights.K(u) for u in grid])
    worst = int(np.argmax(ratios))
    integral = weights.K_integral(0.0)
    passed = bool(integral <= 1.0 and ratios[worst] <= 1.0)
    return KPropertyReport(passed, integral, 1.0 - integral,
                           float(ratios[worst]), float(grid[worst]), grid)
