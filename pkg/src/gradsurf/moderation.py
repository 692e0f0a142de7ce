"""Weight kernels, the moderated environment, and the maximal-quantity stack.

The weight pair is

    k_t = delta (1+t)^(-(p+3)),     K_t = k_t + int_t^inf s k_s ds,

with delta calibrated numerically so that K integrates to at most one and
dominates its own convolution.  The moderated environment squares to

    w(t,e)^2 = int_t^inf k_(s-t) (a(s,e) ^ 1)
               / ((s-t)^(-1) sum_(e' ~ e) int_t^s a(s',e') v 1) ds,

where e' ~ e runs over the 4d-1 edges sharing an endpoint with e, e
included.  Temporal integrals use the trapezoid rule on the trajectory
grid with analytic tail bounds from the kernel decay.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid, quad


@dataclass(frozen=True)
class ModerationWeights:
    """Closed-form evaluators for the weight pair (k, K)."""

    p: float
    delta: float

    def k(self, t):
        return self.delta * (1.0 + np.asarray(t, dtype=float)) ** (-(self.p + 3))

    def K(self, t):
        u = 1.0 + np.asarray(t, dtype=float)
        p = self.p
        return self.delta * (u ** (-(p + 3))
                             + u ** (-(p + 1)) / (p + 1)
                             - u ** (-(p + 2)) / (p + 2))

    def k_integral(self, lo=0.0):
        """int_lo^inf k_s ds = delta (1+lo)^(-(p+2)) / (p+2)."""
        return self.delta * (1.0 + lo) ** (-(self.p + 2)) / (self.p + 2)

    def K_integral(self, lo=0.0):
        """Closed-form int_lo^inf K_s ds."""
        u = 1.0 + lo
        p = self.p
        return self.delta * (u ** (-(p + 2)) / (p + 2)
                             + u ** (-p) / (p * (p + 1))
                             - u ** (-(p + 1)) / ((p + 1) * (p + 2)))

    def convolution(self, u, epsrel=1e-8):
        """(K * K)(u) = int_0^u K_v K_(u-v) dv by adaptive quadrature."""
        if u <= 0:
            return 0.0
        pts = sorted({min(1.0, u / 2), u / 2, max(u - 1.0, u / 2)})
        val, _ = quad(lambda v: self.K(v) * self.K(u - v), 0.0, u,
                      points=pts, epsrel=epsrel, limit=200)
        return float(val)


_CALIBRATION_GRID = None


def _calibration_grid():
    global _CALIBRATION_GRID
    if _CALIBRATION_GRID is None:
        _CALIBRATION_GRID = np.geomspace(1e-3, 2e4, 48)
    return _CALIBRATION_GRID


def calibrate_delta(p, margin=0.9, grid=None):
    """Largest delta = 2^-k making both K-properties hold with 10% headroom.

    The convolution bound is checked on a log-spaced grid of time gaps
    (both properties are translation invariant, so only the gap matters).
    """
    if p <= 1:
        raise ValueError("p must exceed the dimension, in particular p > 1")
    if grid is None:
        grid = _calibration_grid()
    for k in range(61):
        w = ModerationWeights(p, 2.0 ** (-k))
        if w.K_integral(0.0) > margin:
            continue
        if all(w.convolution(u) <= margin * w.K(u) for u in grid):
            return w.delta
    raise RuntimeError(f"kernel calibration failed for p={p} down to delta=2^-60")


def default_weights(p):
    return ModerationWeights(p, calibrate_delta(p))


def moderated_environment(traj, t, e, horizon, weights, rtol=1e-6, atol=1e-10):
    """w(t, e) from one trajectory window; returns (w, truncation bound).

    The analytic tail bound delta * int_horizon^inf (1+s)^(-(p+3)) ds must
    fall below rtol times the running squared value (or atol); otherwise
    the horizon is too short for the requested tolerance.
    """
    m0 = traj.node_at(t)
    delta_t = traj.node_dt
    n_h = int(round(horizon / delta_t))
    if m0 + n_h > traj.node_count - 1:
        raise ValueError("horizon extends beyond the trajectory")
    idx = traj.torus.edge_closure[e]
    window = traj.a[m0:m0 + n_h + 1]
    s = np.arange(n_h + 1) * delta_t
    capped = np.minimum(window[:, e], 1.0)
    floored_sum = np.maximum(window[:, idx], 1.0).sum(axis=1)
    cum = cumulative_trapezoid(floored_sum, dx=delta_t, initial=0.0)
    denom = np.empty(n_h + 1)
    denom[0] = floored_sum[0]
    denom[1:] = cum[1:] / s[1:]
    w2 = float(np.trapezoid(weights.k(s) * capped / denom, dx=delta_t))
    bound = weights.k_integral(horizon)
    if bound > max(rtol * w2, atol):
        raise ValueError(
            f"horizon {horizon} too short: tail bound {bound:.3e} exceeds tolerance")
    return math.sqrt(max(w2, 0.0)), bound


def moderated_environment_sketch(traj, t, e, horizon):
    """Simpler introductory variant w = int_t^inf a(s,e) (1+s-t)^-4 ds.

    Exposed for comparison only; the pipeline uses moderated_environment.
    """
    m0 = traj.node_at(t)
    delta_t = traj.node_dt
    n_h = int(round(horizon / delta_t))
    if m0 + n_h > traj.node_count - 1:
        raise ValueError("horizon extends beyond the trajectory")
    s = np.arange(n_h + 1) * delta_t
    vals = traj.a[m0:m0 + n_h + 1, e]
    w = float(np.trapezoid(vals * (1.0 + s) ** -4, dx=delta_t))
    bound = float(np.max(vals) * (1.0 + horizon) ** -3 / 3.0)
    return w, bound


def moderated_field(traj, weights, node_indices, horizon, rtol=1e-6, atol=1e-10):
    """w at the requested nodes for every edge: (len(nodes), edge_count).

    Same quadrature as moderated_environment, vectorized over edges; the
    shared truncation bound is returned alongside.
    """
    torus = traj.torus
    delta_t = traj.node_dt
    n_h = int(round(horizon / delta_t))
    closure = torus.edge_closure
    s = np.arange(n_h + 1) * delta_t
    kvals = weights.k(s)[:, None]
    out = np.empty((len(node_indices), torus.edge_count))
    for row, m0 in enumerate(node_indices):
        if m0 + n_h > traj.node_count - 1:
            raise ValueError("horizon extends beyond the trajectory for node "
                             f"{m0} (need {n_h} more nodes)")
        window = traj.a[m0:m0 + n_h + 1]
        capped = np.minimum(window, 1.0)
        floored = np.maximum(window, 1.0)
        cum = cumulative_trapezoid(floored, dx=delta_t, initial=0.0, axis=0)
        summed = cum[:, closure].sum(axis=2)
        denom = np.empty_like(summed)
        denom[0] = floored[0][closure].sum(axis=1)
        denom[1:] = summed[1:] / s[1:, None]
        w2 = np.trapezoid(kvals * capped / denom, dx=delta_t, axis=0)
        out[row] = np.sqrt(np.maximum(w2, 0.0))
    bound = weights.k_integral(horizon)
    return out, bound


def _box_tables(torus):
    """(edge mask matrix, box vertex counts) for r = 0..L, cached on the torus."""
    cache = getattr(torus, "_moderation_box_tables", None)
    if cache is None:
        masks = np.stack([torus.box_edge_mask(r) for r in range(torus.L + 1)])
        sizes = np.array([int(torus.box_mask(r).sum()) for r in range(torus.L + 1)],
                         dtype=float)
        cache = (masks.astype(float), sizes)
        torus._moderation_box_tables = cache
    return cache


def _box_norms(torus, values_abs, q):
    """Normalized L^q edge norms over all boxes Lambda_0..Lambda_L at once."""
    masks, sizes = _box_tables(torus)
    sums = masks @ (values_abs ** q)
    return (sums / sizes) ** (1.0 / q)


def _norm(values_abs, q, size):
    return float((np.sum(values_abs ** q) / size) ** (1.0 / q))


def m_pprime_of_w(torus, w_values, table):
    """The spatial maximal factor entering the torus anchored Nash estimate."""
    if np.any(w_values <= 0):
        raise ValueError("moderated environment must be positive")
    inv = 1.0 / w_values
    N = torus.vertex_count
    prod = _norm(w_values, table.sigma, N) * _norm(inv, table.tau, N)
    sup_r = float(np.max(_box_norms(torus, inv, table.pprime)[1:]))
    return 1.0 + (1.0 + prod) ** 2 * sup_r**2


@dataclass
class MaximalDiagnostics:
    """Per-node maximal functionals and the run-level aggregates."""

    times: np.ndarray
    m_pprime: np.ndarray
    m0: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray
    m4: np.ndarray
    script_m1: float
    script_m2: float
    script_m3: float
    script_m4: float
    m_script: float
    m_prime: float
    table: object
    truncation: dict = field(default_factory=dict)

    def as_dict(self, with_nodes=True):
        out = {
            "script_m1": self.script_m1, "script_m2": self.script_m2,
            "script_m3": self.script_m3, "script_m4": self.script_m4,
            "m_script": self.m_script, "m_prime": self.m_prime,
            "truncation": self.truncation,
        }
        if with_nodes:
            out["per_node"] = {
                "t": self.times.tolist(),
                "m_pprime": self.m_pprime.tolist(),
                "m0": self.m0.tolist(), "m1": self.m1.tolist(),
                "m2": self.m2.tolist(), "m3": self.m3.tolist(),
                "m4": self.m4.tolist(),
            }
        return out


def maximal_quantities(traj, w_nodes, node_indices, table, weights):
    """Evaluate the maximal-quantity stack on a uniform node subgrid.

    node_indices must start at 0 and be uniformly spaced so the running
    time averages reproduce the defining sup/inf over t >= 1.  w_nodes
    holds the moderated environment at those nodes.  Temporal integrals
    against K are truncated at the window end; the reported truncation
    entry bounds the dropped mass by the final integrand level times the
    kernel tail.
    """
    if w_nodes.shape[0] != len(node_indices):
        raise ValueError("w grid does not match the requested nodes")
    node_indices = np.asarray(node_indices)
    if node_indices[0] != 0:
        raise ValueError("node subgrid must start at 0 for the running averages")
    torus = traj.torus
    times = node_indices * traj.node_dt
    dt = float(times[1] - times[0]) if len(times) > 1 else traj.node_dt
    n_t = len(times)
    N = torus.vertex_count

    m_pp = np.empty(n_t)
    m0 = np.empty(n_t)
    m2 = np.empty(n_t)
    inv_d_norm_sq = np.empty(n_t)
    rho_q = torus.dist_star ** ((table.p - 2.0) / (table.p - 1.0))
    for i, node in enumerate(node_indices):
        w = w_nodes[i]
        if np.any(w <= 0):
            raise ValueError("moderated environment must be positive on the grid")
        inv = 1.0 / w
        a = traj.a[node]
        m_pp[i] = m_pprime_of_w(torus, w, table)
        half_norms = _box_norms(torus, np.sqrt(a), table.sigma) ** 2
        inv_norms = _box_norms(torus, inv, table.tau2) ** 2
        m0[i] = 1.0 + float(np.max(half_norms * (1.0 + inv_norms)))
        row = a[torus.incident_edges].sum(axis=1)
        m2[i] = 1.0 + float(np.max(row / rho_q))
        inv_d_norm_sq[i] = _norm(inv, torus.d, N) ** 2

    # kernel-weighted integrals over [t, window end], truncated
    exp1 = table.p / (2.0 * (1.0 - table.theta_d))
    exp3 = table.alpha / table.beta
    f1 = m0 ** exp1
    f3 = m_pp ** exp3
    m1 = np.empty(n_t)
    m3 = np.empty(n_t)
    for i in range(n_t):
        gaps = times[i:] - times[i]
        kv = weights.K(gaps)
        m1[i] = 1.0 + float(np.trapezoid(kv * f1[i:], dx=dt)) if len(gaps) > 1 else 1.0 + 0.0
        m3[i] = 1.0 + float(np.trapezoid(kv * f3[i:], dx=dt)) ** table.beta if len(gaps) > 1 else 1.0

    span = max(1, int(round(1.0 / dt)))
    m4 = np.empty(n_t)
    for i in range(n_t):
        m4[i] = 1.0 + float(np.max(inv_d_norm_sq[i:i + span + 1]))

    trunc = {
        "m1_tail": float(f1[-1] * weights.K_integral(times[-1] - times[0])),
        "m3_tail": float(f3[-1] * weights.K_integral(times[-1] - times[0])),
        "window_end": float(times[-1]),
    }

    run1 = _running_mean(times, m1 ** (2.0 / table.p))
    run2 = _running_mean(times, m2)
    run3 = _running_mean(times, m3 ** (-1.0 / table.alpha))
    run4 = _running_mean(times, 1.0 / m4)
    sel = times >= 1.0 - 1e-12
    if not np.any(sel):
        raise ValueError("window must extend to t >= 1 for the maximal quantities")
    s1 = float(np.max(run1[sel])) ** (table.p / 2.0)
    s2 = float(np.max(run2[sel])) ** (table.p - 1.0)
    s3 = float(np.min(run3[sel])) ** (-table.alpha / table.gamma)
    s4 = 1.0 / float(np.min(run4[sel]))
    gamma, alpha, beta, d, p = table.gamma, table.alpha, table.beta, table.d, table.p
    m_script = ((s1 + s2) * s3) ** (gamma / (1.0 - alpha - gamma))
    m_prime = s3 ** (2.0 * gamma / (d * beta + p * gamma) + gamma / alpha) * s4
    return MaximalDiagnostics(times, m_pp, m0, m1, m2, m3, m4,
                              s1, s2, s3, s4, m_script, m_prime, table, trunc)


def _running_mean(times, values):
    """(1/t) int_0^t values ds on the grid; first entry copies the second."""
    cum = cumulative_trapezoid(values, times, initial=0.0)
    out = np.empty_like(cum)
    out[1:] = cum[1:] / times[1:]
    out[0] = values[0]
    return out


def smoothed_functionals(times, values, weights, tail_rate=None, eval_indices=None):
    """K-smoothed series f_bar(t) = int_t^inf K_(s-t) f_s ds.

    Evaluated at eval_indices of the grid (default: every node).  Beyond the
    grid end the series is closed with f_end exp(-rate (s-end)) when a
    fitted rate is supplied; otherwise the dropped mass is only bounded.
    Returns (smoothed, tail contribution, tail bound) arrays.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if eval_indices is None:
        eval_indices = np.arange(len(times))
    eval_indices = np.asarray(eval_indices)
    n = len(eval_indices)
    out = np.empty(n)
    tail_contrib = np.empty(n)
    tail_bound = np.empty(n)
    f_end = float(values[-1])
    t_end = times[-1]
    for row, i in enumerate(eval_indices):
        gaps = times[i:] - times[i]
        out[row] = (float(np.trapezoid(weights.K(gaps) * values[i:], times[i:]))
                    if len(gaps) > 1 else 0.0)
        bound = abs(f_end) * weights.K_integral(t_end - times[i])
        if tail_rate is not None and tail_rate > 0 and f_end > 0:
            val, _ = quad(lambda s: weights.K(s - times[i]) * f_end
                          * math.exp(-tail_rate * (s - t_end)),
                          t_end, np.inf, epsrel=1e-8, limit=200)
            tail_contrib[row] = val
        else:
            tail_contrib[row] = 0.0
        tail_bound[row] = bound
    return out + tail_contrib, tail_contrib, tail_bound
