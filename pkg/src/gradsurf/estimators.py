"""Headline statistical pipelines: variance two ways, tail fits, exit times.

The variance of the height at the origin is estimated along two independent
routes: direct sampling of the Gibbs measure (batched means over the
spatially averaged squared height) and the dynamic route that averages the
time integral of the on-diagonal heat kernel over stationary environment
trajectories.  Their agreement is the strongest oracle in the suite.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import LatticeField, _chain_rng, evolve_trajectory, run_chain
from .heat_kernel import solve_on_trajectory
from .lattice import gradient_field


@dataclass
class EstimateReport:
    """Point estimate with uncertainty, sample bookkeeping, and side curves."""

    estimate: float
    stderr: float
    n: int
    method: str
    truncation_bound: float = 0.0
    curves: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stderr < 0:
            raise ValueError("standard error must be >= 0")
        if self.stderr > 0 and self.n < 2:
            raise ValueError("a standard error needs at least 2 samples")

    def agrees_with(self, other, n_sigma=3.0):
        comb = math.hypot(self.stderr, other.stderr)
        return abs(self.estimate - other.estimate) <= n_sigma * comb


def derive_seed(seed, *key):
    """Deterministic 64-bit child seed for a named stream."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def batch_means(series, min_batches=10):
    """(mean, stderr) by nonoverlapping batch means, sqrt(n) batch length."""
    series = np.asarray(series, dtype=float)
    n = len(series)
    b = max(1, int(math.floor(math.sqrt(n))))
    a = n // b
    if a < min_batches:
        raise ValueError(f"fewer than {min_batches} effective batches (got {a})")
    used = series[: a * b].reshape(a, b)
    means = used.mean(axis=1)
    se = float(means.std(ddof=1) / math.sqrt(a))
    return float(used.mean()), se


def _pool_map(fn, args_list, workers):
    if workers <= 1 or len(args_list) <= 1:
        return [fn(a) for a in args_list]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, args_list))


def _height_obs(phi):
    return np.array([phi[0], float(phi @ phi) / len(phi)])


def _mc_chain_worker(args):
    torus, V, cfg, chain_index, n_samples, state = args
    run = run_chain(torus, V, cfg, chain_index, n_samples, obs=_height_obs, state=state)
    return run.obs, run.acceptance_rate, run.state


def mc_variance(torus, V, cfg, workers=1, chain_states=None, prior_obs=None,
                keep_states=False):
    """Var[phi(0)] by direct sampling with autocorrelation-aware errors.

    The per-sample observable is the site average of phi^2, an unbiased
    estimator of the common single-site variance by translation invariance.
    Chains are independent; their batch-means errors combine in quadrature.
    Resumed runs pass the checkpointed chain states plus the prior retained
    series, and the report is recomputed on the full concatenation, so a
    resumed run reproduces an uninterrupted one bit for bit.
    """
    args = [(torus, V, cfg, c, cfg.n_samples,
             None if chain_states is None else chain_states[c])
            for c in range(cfg.chain_count)]
    results = _pool_map(_mc_chain_worker, args, workers)
    ests, ses, heights, acc = [], [], [], []
    states, series = [], []
    n_total = 0
    for c, (obs, rate, state) in enumerate(results):
        if prior_obs is not None:
            obs = np.vstack([prior_obs[c], obs])
        m, se = batch_means(obs[:, 1])
        ests.append(m)
        ses.append(se)
        heights.append(obs[:, 0])
        acc.append(rate)
        states.append(state)
        series.append(obs)
        n_total += len(obs)
    C = len(ests)
    estimate = float(np.mean(ests))
    stderr = float(np.sqrt(np.sum(np.square(ses))) / C)
    h = np.concatenate(heights)
    hm, hse = batch_means(h)
    report = EstimateReport(
        estimate, stderr, n=n_total, method="mc_batched_means",
        extras={"chain_estimates": ests, "chain_stderrs": ses,
                "acceptance_rates": acc, "height_mean": hm, "height_mean_stderr": hse},
    )
    if keep_states:
        report.extras["chain_states"] = states
        report.extras["chain_obs"] = series
    return report


@dataclass
class PdeConfig:
    """Controls for the dynamic-route solve."""

    t_max: float | None = None
    node_dt: float = 0.25
    dt_target: float | None = 0.05
    refine: int = 1
    n_trajectories: int = 8
    start_thinning: float | None = None

    def resolved_t_max(self, L):
        t = max(20.0, 8.0 * L * L) if self.t_max is None else self.t_max
        n = max(1, round(t / self.node_dt))
        return n * self.node_dt


def _stationary_starts(torus, V, cfg, n_starts, thinning):
    sampler_cfg = replace(cfg, correction="metropolis_adjusted", thinning=thinning,
                          n_samples=n_starts, chain_count=1)
    run = run_chain(torus, V, sampler_cfg, 0, n_starts)
    return run.obs


def _hs_traj_worker(args):
    torus, V, cfg, pde, start, seed, t_max = args
    phi0 = LatticeField(torus, start, mean_zero=True)
    traj = evolve_trajectory(phi0, V, cfg.dt, t_max, seed, node_dt=pde.node_dt)
    coarse = solve_on_trajectory(traj, 0, t_max, substep_refine=pde.refine,
                                 dt_target=pde.dt_target, check_invariants=False)
    fine = solve_on_trajectory(traj, 0, t_max, substep_refine=2 * pde.refine,
                               dt_target=pde.dt_target, check_invariants=False)
    i_coarse = coarse.integral + coarse.tail_estimate
    i_fine = fine.integral + fine.tail_estimate
    integral = 2.0 * i_fine - i_coarse
    trunc = abs(i_fine - i_coarse) + fine.tail_bound
    return integral, trunc, fine.times, fine.diag


def hs_variance(torus, V, cfg, pde=None, workers=1):
    """Var[phi(0)] via the dynamic route: E[int_0^inf P(t, 0) dt].

    Each stationary start spawns an environment trajectory; the solve runs
    at two sub-step resolutions and the pair is Richardson-extrapolated.
    Monte Carlo error (spread across trajectories) and the worst
    refinement-plus-tail truncation bound are reported separately.
    """
    if pde is None:
        pde = PdeConfig()
    deterministic = V.family == "gaussian"
    n_traj = 1 if (deterministic and pde.n_trajectories <= 8) else pde.n_trajectories
    if not deterministic and n_traj < 8:
        raise ValueError("insufficient trajectories (<8) for a stochastic environment")
    t_max = pde.resolved_t_max(torus.L)
    thinning = pde.start_thinning
    if thinning is None:
        thinning = max(2.0, 0.5 * torus.L**2)
    starts = _stationary_starts(torus, V, cfg, n_traj, thinning)
    args = [(torus, V, cfg, pde, starts[j], derive_seed(cfg.seed, 7, j), t_max)
            for j in range(n_traj)]
    results = _pool_map(_hs_traj_worker, args, workers)
    integrals = np.array([r[0] for r in results])
    truncs = np.array([r[1] for r in results])
    diag_mean = np.mean([r[3] for r in results], axis=0)
    estimate = float(integrals.mean())
    stderr = float(integrals.std(ddof=1) / math.sqrt(n_traj)) if n_traj > 1 else 0.0
    return EstimateReport(
        estimate, stderr, n=n_traj, method="hs_time_integral",
        truncation_bound=float(truncs.max()),
        curves={"diag_mean": np.column_stack([results[0][2], diag_mean])},
        extras={"per_trajectory": integrals.tolist(), "t_max": t_max},
    )


def gather_gradient_samples(torus, V, cfg, workers=1):
    """Pooled signed gradients over all edges of retained stationary samples."""

    args = [(torus, V, cfg, c) for c in range(cfg.chain_count)]
    chunks = _pool_map(_grad_chain_worker, args, workers)
    return np.concatenate([c.ravel() for c in chunks])


def _grad_chain_worker(args):
    torus, V, cfg, chain_index = args
    run = run_chain(torus, V, cfg, chain_index,
                    obs=lambda phi: gradient_field(torus, phi))
    return run.obs


def _rate_exponent(ks, neg_log_s, bracket=None):
    """Exponent of -log S = a K^s + b by profiled least squares over s.

    The free offset absorbs the slowly varying polynomial prefactor of the
    survival function, so the fitted s tracks the stretched-exponential
    rate rather than the band-local log-log slope.
    """
    ones = np.ones_like(ks)

    def sse(s):
        A = np.column_stack([ks**s, ones])
        coef, *_ = np.linalg.lstsq(A, neg_log_s, rcond=None)
        r = neg_log_s - A @ coef
        return float(r @ r)

    if bracket is None:
        grid = np.geomspace(0.5, 10.0, 96)
        i = int(np.argmin([sse(s) for s in grid]))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    else:
        lo, hi = bracket
    for _ in range(50):
        m1 = lo + 0.382 * (hi - lo)
        m2 = lo + 0.618 * (hi - lo)
        if sse(m1) < sse(m2):
            hi = m2
        else:
            lo = m1
    return 0.5 * (lo + hi)


def gradient_tail(samples, band=(0.90, 0.999), n_points=40, n_boot=200, seed=0,
                  min_samples=10_000):
    """Survival-curve tail fit over the [90%, 99.9%] quantile band.

    The headline exponent is the stretched-exponential rate (profiled fit
    of -log S = a K^s + b); the raw slope of log(-log S) against log K is
    also reported, but for light-tailed laws it sits systematically below
    the rate exponent because of the survival function's polynomial
    prefactor (1.58 for an exactly Gaussian marginal).  The bootstrap
    resamples the binned survival counts.  Refuses degenerate inputs with
    too few points beyond the 99% quantile.
    """
    samples = np.abs(np.asarray(samples, dtype=float).ravel())
    n = len(samples)
    if n < min_samples:
        raise ValueError(f"need at least {min_samples} stationary samples, got {n}")
    q99 = np.quantile(samples, 0.99)
    n_beyond = int(np.sum(samples > q99))
    if n_beyond < 30:
        raise ValueError(f"too few tail points ({n_beyond} beyond 99%)")
    k_lo, k_hi = np.quantile(samples, band)
    if k_lo <= 0:
        raise ValueError("too few tail points (band quantile is not positive)")
    ks = np.geomspace(k_lo, k_hi, n_points)
    sorted_samples = np.sort(samples)
    tail_counts = n - np.searchsorted(sorted_samples, ks, side="right")
    keep = (tail_counts > 0) & (tail_counts < n)
    ks, tail_counts = ks[keep], tail_counts[keep]
    if len(ks) < 5:
        raise ValueError("too few usable grid points in the fit band")
    surv = tail_counts / n

    slope = float(_rate_exponent(ks, -np.log(surv)))
    loglog = float(np.polyfit(np.log(ks), np.log(-np.log(surv)), 1)[0])

    # multinomial bootstrap over the binned tail counts
    edges = np.concatenate([[-np.inf], ks, [np.inf]])
    bin_counts = np.histogram(samples, bins=edges)[0]
    rng = np.random.default_rng(derive_seed(seed, 11))
    bracket = (slope / 2.0, slope * 2.0)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        resampled = rng.multinomial(n, bin_counts / n)
        counts = np.cumsum(resampled[::-1])[::-1][1:]
        ok = (counts > 0) & (counts < n)
        boots[b] = _rate_exponent(ks[ok], -np.log(counts[ok] / n), bracket=bracket)
    lo, hi = np.percentile(boots, [2.5, 97.5])
    return EstimateReport(
        slope, float(np.std(boots, ddof=1)), n, "stretched_exp_rate_fit",
        curves={"survival": np.column_stack([ks, surv])},
        extras={"ci95": (float(lo), float(hi)), "band": band,
                "loglog_slope": loglog},
    )


def _probe_worker(args):
    """Exit times or running sups of |grad phi| at a probe edge, one chain.

    Starts are thinned at a few time units: the probe statistics are
    gradient functionals, which mix on an O(1) time scale, unlike heights.
    All trajectories of the chain evolve in one vectorized batch from the
    chain's own stream, so the result is independent of worker scheduling.
    """
    torus, V, cfg, chain_index, n_traj, horizon, probe, mode, R = args
    sampler_cfg = replace(cfg, correction="metropolis_adjusted", thinning=4.0,
                          n_samples=n_traj, chain_count=1,
                          seed=derive_seed(cfg.seed, 3, chain_index))
    starts = run_chain(torus, V, sampler_cfg, 0, n_traj).obs
    rng = _chain_rng(derive_seed(cfg.seed, 5, chain_index), 0)
    return _batch_probe(torus, V, starts, rng, cfg.dt, horizon, probe, mode, R,
                        cfg.dt_policy)


def _batch_gradient(torus, phis):
    """(B, d) + grid gradients of a (B, N) batch of fields."""
    g = phis.reshape((len(phis),) + torus.shape)
    out = np.empty((len(phis), torus.d) + torus.shape)
    for i in range(torus.d):
        out[:, i] = np.roll(g, -1, axis=1 + i) - g
    return out


def _batch_drift(torus, flux):
    """Batch divergence of a (B, d) + grid edge flux, flattened to (B, N)."""
    out = np.zeros((len(flux),) + torus.shape)
    for i in range(torus.d):
        out += flux[:, i] - np.roll(flux[:, i], 1, axis=1 + i)
    return out.reshape(len(flux), -1)


def _batch_probe(torus, V, starts, rng, dt, horizon, probe, mode, R, dt_policy):
    """Evolve a batch of plain trajectories, tracking one probe edge.

    Each trajectory carries its own clock and its own adaptive micro step
    from the curvature policy, so one stiff realization never slows the
    rest; the probe value is checked after every micro step.
    """
    from .dynamics import UnstableStepError

    phis = np.array(starts, dtype=float)
    B, N = phis.shape
    tail, axis = torus.edge_of(probe)
    grid_idx = np.unravel_index(tail, torus.shape)
    sqrt2 = math.sqrt(2.0)

    g = _batch_gradient(torus, phis)
    probe_abs = np.abs(g[(slice(None), axis) + grid_idx])
    if mode == "exit":
        times = np.full(B, np.inf)
        times[probe_abs > R] = 0.0
        live = probe_abs <= R
    else:
        result_sups = np.empty(B)
        live = np.ones(B, dtype=bool)

    # compact working set: arrays shrink only when trajectories finish
    work_idx = np.flatnonzero(live)
    work_phi = phis[work_idx]
    work_g = g[work_idx]
    clocks = np.zeros(len(work_idx))
    sups = probe_abs[work_idx].copy()

    while len(work_idx):
        top = V.d2v(work_g).reshape(len(work_idx), -1).max(axis=1)
        with np.errstate(divide="ignore"):
            allowed = np.where(top > 0, 0.25 / (2 * torus.d * top), np.inf)
        if dt_policy == "fixed":
            if np.any(dt > allowed):
                raise UnstableStepError(
                    f"fixed dt {dt:g} exceeds stability bound {allowed.min():g}")
            h = np.full(len(work_idx), dt)
        else:
            h = np.minimum(dt, allowed)
        h = np.minimum(h, horizon - clocks)
        work_phi += h[:, None] * _batch_drift(torus, V.dv(work_g))
        work_phi += sqrt2 * np.sqrt(h)[:, None] * rng.standard_normal(work_phi.shape)
        work_phi -= work_phi.mean(axis=1, keepdims=True)
        clocks += h
        work_g = _batch_gradient(torus, work_phi)
        probe_abs = np.abs(work_g[(slice(None), axis) + grid_idx])
        np.maximum(sups, probe_abs, out=sups)
        if mode == "exit":
            done = probe_abs > R
            times[work_idx[done]] = clocks[done]
        else:
            done = np.zeros(len(work_idx), dtype=bool)
        expired = clocks >= horizon - 1e-12
        if mode == "sup":
            result_sups[work_idx[expired]] = sups[expired]
        drop = done | expired
        if drop.any():
            keep = ~drop
            work_idx = work_idx[keep]
            work_phi = work_phi[keep]
            work_g = work_g[keep]
            clocks = clocks[keep]
            sups = sups[keep]
    return times if mode == "exit" else result_sups


def confinement_probability(torus, V, cfg, R, T_grid, n_traj=1000, probe_edge=0,
                            workers=1):
    """Empirical probability the probe gradient stays inside [-R, R] on [0, T].

    One set of independent trajectories serves the whole T grid (the events
    are nested), so consecutive decreases are exit fractions with their own
    binomial errors.
    """
    T_grid = np.asarray(sorted(T_grid), dtype=float)
    per_chain = _split_budget(n_traj, cfg.chain_count)
    args = [(torus, V, cfg, c, per_chain[c], float(T_grid[-1]), probe_edge, "exit", R)
            for c in range(cfg.chain_count) if per_chain[c] > 0]
    exits = np.concatenate(_pool_map(_probe_worker, args, workers))
    n = len(exits)
    probs = np.array([(exits > T).mean() for T in T_grid])
    sigmas = np.sqrt(probs * (1.0 - probs) / n)
    return EstimateReport(
        float(probs[-1]), float(sigmas[-1]), n, "confinement_survival",
        curves={"survival_T": np.column_stack([T_grid, probs, sigmas])},
        extras={"exit_times": exits, "R": R},
    )


def supremum_tail(torus, V, cfg, T, K_grid, n_traj=1000, probe_edge=0, workers=1):
    """Empirical tail of the running supremum of |grad phi| at horizon T."""
    K_grid = np.asarray(K_grid, dtype=float)
    per_chain = _split_budget(n_traj, cfg.chain_count)
    args = [(torus, V, cfg, c, per_chain[c], float(T), probe_edge, "sup", None)
            for c in range(cfg.chain_count) if per_chain[c] > 0]
    sups = np.concatenate(_pool_map(_probe_worker, args, workers))
    n = len(sups)
    probs = np.array([(sups >= K).mean() for K in K_grid])
    sigmas = np.sqrt(probs * (1.0 - probs) / n)
    return EstimateReport(
        float(probs[-1]), float(sigmas[-1]), n, "running_sup_tail",
        curves={"sup_tail": np.column_stack([K_grid, probs, sigmas])},
        extras={"sups": sups, "T": T},
    )


def _split_budget(total, parts):
    base = total // parts
    out = [base] * parts
    for i in range(total - base * parts):
        out[i] += 1
    return out
