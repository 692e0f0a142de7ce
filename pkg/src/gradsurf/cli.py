"""Experiment driver: configuration, orchestration, persistence, plots.

Configs are YAML trees validated field by field; every run directory gets
the resolved config, CSV data files, a machine-readable summary.json (no
wall-clock entries, so identical seeds give bit-identical summaries), a
generated plot script, and, for sampling experiments, a resumable
checkpoint.  Wall-clock timing goes to run.log only.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import yaml

from . import estimators as est
from . import inequalities as ineq
from . import moderation as mo
from . import spectral_oracle as oracle
from .dynamics import LangevinConfig, LatticeField, evolve_trajectory
from .estimators import PdeConfig, derive_seed
from .heat_kernel import solve_on_trajectory
from .lattice import EdgeField, Torus
from .potential import make_potential

EXPERIMENTS = ("variance_sweep", "hs_check", "heatkernel_decay", "tails",
               "exit_time", "inequalities", "oracle")

WORKERS_ENV = "GRADSURF_WORKERS"


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    output: str = "runs/out"
    torus: dict = field(default_factory=lambda: {"d": 2, "L": 4})
    potential: dict = field(default_factory=lambda: {"family": "gaussian"})
    langevin: dict = field(default_factory=dict)
    pde: dict = field(default_factory=dict)
    moderation: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def canonical(self):
        """Physics-identifying subtree: budgets and output location excluded."""
        d = self.to_dict()
        d.pop("output", None)
        d.get("langevin", {}).pop("n_samples", None)
        d.get("pde", {}).pop("n_trajectories", None)
        return d

    def config_hash(self):
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def l_values(self):
        if "L_list" in self.torus and self.torus["L_list"] is not None:
            return list(self.torus["L_list"])
        return [self.torus["L"]]

    def build_torus(self, L=None):
        return Torus(self.torus["d"], self.torus["L"] if L is None else L)

    def build_potential(self):
        spec = dict(self.potential)
        family = spec.pop("family")
        return make_potential(family, **spec)

    def langevin_config(self):
        return LangevinConfig(seed=self.seed, **self.langevin)

    def pde_config(self):
        return PdeConfig(**self.pde)


_LANGEVIN_KEYS = {"dt": float, "burn_in": float, "thinning": float,
                  "chain_count": int, "n_samples": int, "correction": str,
                  "dt_policy": str, "blowup_guard": float, "tune": bool,
                  "target_acceptance": float}
_PDE_KEYS = {"t_max": float, "node_dt": float, "dt_target": float, "refine": int,
             "n_trajectories": int, "start_thinning": float}
_MODERATION_KEYS = {"p": float, "pprime": float, "horizon": float}


def load_config(path):
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return parse_config(raw)


def parse_config(raw):
    errors = []
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a mapping"])
    known = {"experiment", "seed", "output", "torus", "potential", "langevin",
             "pde", "moderation", "options"}
    for key in raw:
        if key not in known:
            errors.append(f"{key}: unknown top-level field")

    exp = raw.get("experiment")
    if exp not in EXPERIMENTS:
        errors.append(f"experiment: must be one of {', '.join(EXPERIMENTS)} (got {exp!r})")

    torus = dict(raw.get("torus") or {})
    d = torus.get("d")
    if not isinstance(d, int) or d < 1:
        errors.append("torus.d: must be an integer >= 1")
    has_list = torus.get("L_list") is not None
    if has_list:
        ls = torus["L_list"]
        if (not isinstance(ls, list) or not ls
                or any(not isinstance(x, int) or x < 1 for x in ls)):
            errors.append("torus.L_list: must be a nonempty list of integers >= 1")
        torus.setdefault("L", ls[0] if isinstance(ls, list) and ls else 1)
    else:
        L = torus.get("L")
        if not isinstance(L, int) or L < 1:
            errors.append("torus.L: must be an integer >= 1")

    pot = dict(raw.get("potential") or {})
    if "family" not in pot:
        errors.append("potential.family: required")
    else:
        try:
            spec = dict(pot)
            make_potential(spec.pop("family"), **spec)
        except (ValueError, TypeError) as exc:
            errors.append(f"potential: {exc}")

    lang = _check_section(raw.get("langevin") or {}, _LANGEVIN_KEYS, "langevin", errors)
    pde = _check_section(raw.get("pde") or {}, _PDE_KEYS, "pde", errors)
    mod = _check_section(raw.get("moderation") or {}, _MODERATION_KEYS, "moderation", errors)

    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        errors.append("seed: must be an integer")

    if errors:
        raise ConfigError(errors)
    cfg = ExperimentConfig(exp, seed, raw.get("output", "runs/out"), torus, pot,
                           lang, pde, mod, dict(raw.get("options") or {}))
    try:
        cfg.langevin_config()
    except ValueError as exc:
        raise ConfigError([f"langevin: {exc}"])
    return cfg


def _check_section(section, schema, name, errors):
    out = {}
    for key, value in section.items():
        if key not in schema:
            errors.append(f"{name}.{key}: unknown field")
            continue
        if value is None:
            out[key] = None
            continue
        want = schema[key]
        if want is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, want):
            errors.append(f"{name}.{key}: expected {want.__name__}")
            continue
        out[key] = value
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


_STREAM_TREE = {
    "root": "SeedSequence(seed)",
    "chains": "SeedSequence(seed, spawn_key=(chain,))",
    "hs_trajectories": "derive_seed(seed, 7, trajectory) -> spawn_key=(0,)",
    "probe_starts": "derive_seed(seed, 3, chain)",
    "probe_batches": "derive_seed(seed, 5, chain)",
    "sweep_levels": "derive_seed(seed, 21, L) per torus size",
    "bootstrap": "derive_seed(seed, 11)",
}


def _write_summary(outdir, cfg, results, partial=False):
    summary = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "streams": {"root_entropy": cfg.seed, "tree": _STREAM_TREE},
        "partial": partial,
        "results": _jsonable(results),
    }
    with open(os.path.join(outdir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def _report_entry(report):
    return {"estimate": report.estimate, "stderr": report.stderr, "n": report.n,
            "method": report.method, "truncation_bound": report.truncation_bound}


_PLOT_TEMPLATE = """\
#!/usr/bin/env python3
# Renders the figures for this run from the CSV data files next to it.
import csv, os, sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))

def load(name):
    with open(os.path.join(HERE, name)) as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]
    cols = {h: [float(r[i]) for r in data] for i, h in enumerate(header)}
    return cols

def main():
    for name, spec in PLOTS:
        cols = load(name)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(cols[spec["x"]], cols[spec["y"]], marker="o", ms=3, lw=1)
        if spec.get("yerr") and spec["yerr"] in cols:
            ax.errorbar(cols[spec["x"]], cols[spec["y"]], yerr=cols[spec["yerr"]],
                        fmt="none", ecolor="gray", capsize=2)
        ax.set_xlabel(spec["x"]); ax.set_ylabel(spec["y"])
        ax.set_xscale(spec.get("xscale", "linear"))
        ax.set_yscale(spec.get("yscale", "linear"))
        ax.set_title(spec.get("title", name))
        fig.tight_layout()
        out = os.path.join(HERE, spec["out"])
        fig.savefig(out, dpi=150)
        print("wrote", out)

PLOTS = @PLOTS@

if __name__ == "__main__":
    sys.exit(main())
"""


def _emit_plot_script(outdir, plots):
    path = os.path.join(outdir, "plot.py")
    with open(path, "w") as fh:
        fh.write(_PLOT_TEMPLATE.replace("@PLOTS@", json.dumps(plots, indent=2)))
    os.chmod(path, 0o755)


# ---------------------------------------------------------------- experiments


def _run_oracle(cfg, outdir, workers):
    d = cfg.torus["d"]
    ls = cfg.l_values()
    variances = [oracle.gaussian_variance(d, L) for L in ls]
    _write_csv(os.path.join(outdir, "data_oracle.csv"), ["L", "variance"],
               list(zip(ls, variances)))
    results = {"variances": dict(zip(map(str, ls), variances))}
    if d == 2 and len(ls) >= 3:
        a, b, r2 = oracle.log_fit(ls, variances)
        results["log_fit"] = {"slope": a, "intercept": b, "r_squared": r2,
                              "stderr": 0.0}
    plots = [["data_oracle.csv", {"x": "L", "y": "variance", "xscale": "log",
                                  "out": "oracle_variance.png",
                                  "title": "spectral variance vs L"}]]
    _emit_plot_script(outdir, plots)
    return _write_summary(outdir, cfg, results)


def _run_hs_check(cfg, outdir, workers):
    torus = cfg.build_torus()
    V = cfg.build_potential()
    lcfg = cfg.langevin_config()
    pde = cfg.pde_config()
    hs = est.hs_variance(torus, V, lcfg, pde, workers=workers)
    results = {"hs": _report_entry(hs)}
    if V.family == "gaussian":
        ref = oracle.gaussian_variance(torus.d, torus.L)
        results["oracle"] = {"estimate": ref, "stderr": 0.0, "truncation_bound": 0.0}
        results["abs_difference"] = abs(hs.estimate - ref)
    else:
        mc = est.mc_variance(torus, V, lcfg, workers=workers)
        results["mc"] = _report_entry(mc)
        results["abs_difference"] = abs(hs.estimate - mc.estimate)
        results["combined_sigma"] = float(np.hypot(hs.stderr, mc.stderr))
        results["agree_3sigma"] = bool(hs.agrees_with(mc))
    trace = hs.curves["diag_mean"]
    keep = _geometric_keep(trace[:, 0])
    _write_csv(os.path.join(outdir, "data_diag.csv"), ["t", "P_diag"],
               trace[keep].tolist())
    _emit_plot_script(outdir, [["data_diag.csv", {
        "x": "t", "y": "P_diag", "xscale": "log", "out": "hs_diag.png",
        "title": "on-diagonal heat kernel"}]])
    return _write_summary(outdir, cfg, results)


def _geometric_keep(times, per_decade=24):
    """Indices of a geometric subsample of a uniform time grid (plus t=0)."""
    keep = [0]
    next_t = times[1] if len(times) > 1 else 0.0
    ratio = 10.0 ** (1.0 / per_decade)
    for i, t in enumerate(times[1:], start=1):
        if t >= next_t - 1e-12:
            keep.append(i)
            next_t = max(t * ratio, t + (times[1] - times[0]) * 0.5)
    if keep[-1] != len(times) - 1:
        keep.append(len(times) - 1)
    return np.asarray(keep)


def _run_variance_sweep(cfg, outdir, workers, resume_state=None):
    d = cfg.torus["d"]
    V = cfg.build_potential()
    lcfg = cfg.langevin_config()
    rows = []
    results = {"per_L": {}}
    state_blobs = {}
    for L in cfg.l_values():
        torus = Torus(d, L)
        seed_L = derive_seed(cfg.seed, 21, L)
        run_cfg = replace(lcfg, seed=seed_L)
        prior = None if resume_state is None else resume_state.get(str(L))
        rep = est.mc_variance(
            torus, V, run_cfg, workers=workers, keep_states=True,
            chain_states=None if prior is None else prior["states"],
            prior_obs=None if prior is None else prior["obs"])
        state_blobs[str(L)] = {"states": rep.extras.pop("chain_states"),
                               "obs": rep.extras.pop("chain_obs")}
        rows.append([L, rep.estimate, rep.stderr, rep.n])
        results["per_L"][str(L)] = _report_entry(rep)
    _write_csv(os.path.join(outdir, "data_variance.csv"),
               ["L", "variance", "stderr", "n"], rows)
    if d == 2 and len(rows) >= 3:
        results["increments"] = _increment_analysis(rows)
    _emit_plot_script(outdir, [["data_variance.csv", {
        "x": "L", "y": "variance", "yerr": "stderr", "xscale": "log",
        "out": "variance_sweep.png", "title": "variance vs L"}]])
    _save_checkpoint(outdir, cfg, state_blobs)
    return _write_summary(outdir, cfg, results)


def _increment_analysis(rows):
    ls = [r[0] for r in rows]
    vs = [r[1] for r in rows]
    ses = [r[2] for r in rows]
    incs = []
    for i in range(1, len(rows)):
        delta = vs[i] - vs[i - 1]
        sigma = float(np.hypot(ses[i], ses[i - 1]))
        incs.append({"from_L": ls[i - 1], "to_L": ls[i], "increment": delta,
                     "sigma": sigma, "resolved_3sigma": bool(delta > 3 * sigma)})
    out = {"steps": incs}
    if len(incs) >= 2 and incs[-2]["increment"] > 0:
        out["increment_ratio"] = incs[-1]["increment"] / incs[-2]["increment"]
    return out


def _run_heatkernel_decay(cfg, outdir, workers):
    torus = cfg.build_torus()
    V = cfg.build_potential()
    lcfg = cfg.langevin_config()
    pde = cfg.pde_config()
    n_traj = pde.n_trajectories
    t_max = pde.resolved_t_max(torus.L)
    starts = est._stationary_starts(torus, V, lcfg, n_traj,
                                    pde.start_thinning or max(2.0, torus.L**2 / 4))
    diags = []
    traj_last = None
    for j in range(n_traj):
        phi0 = LatticeField(torus, starts[j], mean_zero=True)
        traj = evolve_trajectory(phi0, V, lcfg.dt, t_max,
                                 derive_seed(cfg.seed, 31, j), node_dt=pde.node_dt)
        sol = solve_on_trajectory(traj, 0, t_max, dt_target=pde.dt_target,
                                  check_invariants=False)
        diags.append(sol.diag)
        traj_last = traj
        times = sol.times
    keep_f = _geometric_keep(times)
    _write_csv(os.path.join(outdir, "data_functionals.csv"),
               ["t", "P_diag", "energy", "dirichlet", "weighted_energy"],
               np.column_stack([sol.times, sol.diag, sol.energy, sol.dirichlet,
                                sol.weighted])[keep_f].tolist())
    mean_diag = np.mean(diags, axis=0)
    lo, hi = 1.0, torus.L**2 / 4.0
    sel = (times >= lo) & (times <= hi) & (mean_diag > 0)
    slope = float(np.polyfit(np.log(times[sel]), np.log(mean_diag[sel]), 1)[0])

    mod = cfg.moderation
    p = mod.get("p") or float(torus.d + 1)
    pprime = mod.get("pprime") or float(torus.d + 1)
    horizon = mod.get("horizon") or 30.0
    table = ineq.exponent_table(torus.d, p, pprime)
    weights = mo.default_weights(p)
    stride = max(1, int(round(1.0 / traj_last.node_dt)))
    nodes = np.arange(0, traj_last.node_count - int(horizon / traj_last.node_dt), stride)
    w_nodes, _ = mo.moderated_field(traj_last, weights, nodes, horizon)
    diag = mo.maximal_quantities(traj_last, w_nodes, nodes, table, weights)

    keep = _geometric_keep(times)
    _write_csv(os.path.join(outdir, "data_decay.csv"), ["t", "P_diag_mean"],
               np.column_stack([times[keep], mean_diag[keep]]).tolist())
    results = {"loglog_slope": {"estimate": slope, "stderr": 0.0,
                                "fit_window": [lo, hi]},
               "n_trajectories": n_traj,
               "maximal_quantities": diag.as_dict()}
    _emit_plot_script(outdir, [["data_decay.csv", {
        "x": "t", "y": "P_diag_mean", "xscale": "log", "yscale": "log",
        "out": "decay.png", "title": "trajectory-averaged on-diagonal decay"}]])
    return _write_summary(outdir, cfg, results)


def _run_tails(cfg, outdir, workers):
    torus = cfg.build_torus()
    V = cfg.build_potential()
    lcfg = cfg.langevin_config()
    samples = est.gather_gradient_samples(torus, V, lcfg, workers=workers)
    tail = est.gradient_tail(samples, seed=cfg.seed)
    _write_csv(os.path.join(outdir, "data_gradient_tail.csv"),
               ["K", "survival"], tail.curves["survival"].tolist())

    T = float(cfg.options.get("sup_T", 4.0))
    qs = np.quantile(np.abs(samples), [0.5, 0.9, 0.99])
    K_grid = np.geomspace(max(qs[0], 1e-3), qs[2] * 1.5, 12)
    n_traj = int(cfg.options.get("n_trajectories", 1000))
    sup1 = est.supremum_tail(torus, V, lcfg, T, K_grid, n_traj=n_traj, workers=workers)
    sup2 = est.supremum_tail(torus, V, replace(lcfg, seed=derive_seed(cfg.seed, 41)),
                             2 * T, K_grid, n_traj=n_traj, workers=workers)
    _write_csv(os.path.join(outdir, "data_sup_tail.csv"),
               ["K", "p_T", "sigma_T", "p_2T", "sigma_2T"],
               np.column_stack([K_grid, sup1.curves["sup_tail"][:, 1:],
                                sup2.curves["sup_tail"][:, 1:]]).tolist())
    results = {"gradient_tail": {**_report_entry(tail), "ci95": tail.extras["ci95"]},
               "sup_tail_T": _report_entry(sup1),
               "sup_tail_2T": _report_entry(sup2)}
    _emit_plot_script(outdir, [["data_gradient_tail.csv", {
        "x": "K", "y": "survival", "xscale": "log", "yscale": "log",
        "out": "gradient_tail.png", "title": "gradient survival"}]])
    return _write_summary(outdir, cfg, results)


def _run_exit_time(cfg, outdir, workers):
    torus = cfg.build_torus()
    V = cfg.build_potential()
    lcfg = cfg.langevin_config()
    R = float(cfg.options.get("R", V.r_v))
    T_grid = cfg.options.get("T_grid", [1, 2, 4, 8, 16])
    n_traj = int(cfg.options.get("n_trajectories", 1000))
    rep = est.confinement_probability(torus, V, lcfg, R, T_grid,
                                      n_traj=n_traj, workers=workers)
    curve = rep.curves["survival_T"]
    _write_csv(os.path.join(outdir, "data_exit.csv"),
               ["T", "probability", "sigma"], curve.tolist())
    decs = np.diff(-curve[:, 1])
    results = {"confinement": _report_entry(rep), "R": R,
               "strictly_decreasing": bool(np.all(decs > 0))}
    _emit_plot_script(outdir, [["data_exit.csv", {
        "x": "T", "y": "probability", "yerr": "sigma", "xscale": "log",
        "out": "exit.png", "title": "confinement probability"}]])
    return _write_summary(outdir, cfg, results)


def _run_inequalities(cfg, outdir, workers):
    torus = cfg.build_torus()
    d = torus.d
    mod = cfg.moderation
    p = mod.get("p") or float(d + 1)
    pprime = mod.get("pprime") or float(d + 1)
    table = ineq.exponent_table(d, p, pprime)
    weights = mo.default_weights(p)
    rng = np.random.default_rng(derive_seed(cfg.seed, 51))
    rows = []

    kprops = ineq.check_k_properties(weights)
    rows.append(["k_properties", "calibrated", 1.0 if kprops.passed else 0.0,
                 f"worst_ratio={kprops.worst_ratio:.6f}"])

    if d >= 2:
        for i in range(int(cfg.options.get("gns_corpus", 25))):
            f = rng.standard_normal(torus.vertex_count)
            f -= f.mean()
            ratio = ineq.check_gns(LatticeField(torus, f, mean_zero=True),
                                   table.kappa, table.lam, 2.0,
                                   _gns_theta(table, d))
            rows.append(["gns", f"gaussian_field_{i}", ratio, f"L={torus.L}"])
        for i in range(int(cfg.options.get("nash_corpus", 25))):
            f = rng.standard_normal(torus.vertex_count)
            f -= f.mean()
            w = EdgeField(torus, rng.uniform(0.3, 2.0, torus.edge_count))
            ratio = ineq.check_anchored_nash(LatticeField(torus, f, mean_zero=True),
                                             w, table)
            rows.append(["anchored_nash", f"pair_{i}", ratio, f"L={torus.L}"])

    x = np.linspace(-8, 8, 2048)
    fx = np.exp(-0.5 * x**2)
    rep = ineq.check_efron(x, fx, fx, lambda a, b: a + b)
    rows.append(["efron", "gaussian_sum", 1.0 if rep.nondecreasing else 0.0,
                 "psi=x+y"])
    _write_csv(os.path.join(outdir, "data_inequalities.csv"),
               ["checker", "instance", "ratio_or_verdict", "context"], rows)
    ratios = [r[2] for r in rows if r[0] == "anchored_nash"]
    results = {"k_properties_passed": kprops.passed,
               "nash_ratio_max": max(ratios) if ratios else None,
               "exponents": {"theta_c": table.theta_c, "alpha": table.alpha,
                             "beta": table.beta, "gamma": table.gamma}}
    _emit_plot_script(outdir, [])
    return _write_summary(outdir, cfg, results)


def _gns_theta(table, d):
    # theta solving 1/kappa = theta (1/lam - 1/d) + (1-theta)/2
    return (0.5 - 1.0 / table.kappa) / (0.5 - (1.0 / table.lam - 1.0 / d))


_RUNNERS = {
    "oracle": _run_oracle,
    "hs_check": _run_hs_check,
    "variance_sweep": _run_variance_sweep,
    "heatkernel_decay": _run_heatkernel_decay,
    "tails": _run_tails,
    "exit_time": _run_exit_time,
    "inequalities": _run_inequalities,
}


# -------------------------------------------------------- checkpoint / resume


def _save_checkpoint(outdir, cfg, state_blobs):
    path = os.path.join(outdir, "checkpoint.npz")
    arrays = {}
    meta = {"config_hash": cfg.config_hash(), "keys": {}}
    for L, blob in state_blobs.items():
        meta["keys"][L] = len(blob["states"])
        for c, st in enumerate(blob["states"]):
            arrays[f"phi_{L}_{c}"] = st["phi"]
            arrays[f"obs_{L}_{c}"] = blob["obs"][c]
            arrays[f"dt_{L}_{c}"] = np.float64(st["dt"])
            arrays[f"ctr_{L}_{c}"] = np.array(
                [st["accepted"], st["proposed"], st["samples_done"]], dtype=np.int64)
            key = st["rng_state"]["state"]
            arrays[f"rngc_{L}_{c}"] = np.asarray(key["counter"], dtype=np.uint64)
            arrays[f"rngk_{L}_{c}"] = np.asarray(key["key"], dtype=np.uint64)
            arrays[f"rngb_{L}_{c}"] = np.array(
                [st["rng_state"]["buffer_pos"],
                 st["rng_state"]["has_uint32"], st["rng_state"]["uinteger"]],
                dtype=np.uint64)
            arrays[f"rngf_{L}_{c}"] = np.asarray(st["rng_state"]["buffer"],
                                                 dtype=np.uint64)
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    with open(path + ".manifest.txt", "w") as fh:
        fh.write(f"config_hash: {cfg.config_hash()}\n")
        fh.write(f"levels: {','.join(state_blobs)}\n")


def _load_checkpoint(outdir):
    path = os.path.join(outdir, "checkpoint.npz")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint in {outdir}")
    data = np.load(path)
    meta = json.loads(bytes(data["meta_json"]).decode())
    states = {}
    for L, count in meta["keys"].items():
        chain_states = []
        chain_obs = []
        for c in range(count):
            ctr = data[f"ctr_{L}_{c}"]
            buf = data[f"rngb_{L}_{c}"]
            rng_state = {
                "bit_generator": "Philox",
                "state": {"counter": data[f"rngc_{L}_{c}"],
                          "key": data[f"rngk_{L}_{c}"]},
                "buffer": data[f"rngf_{L}_{c}"],
                "buffer_pos": int(buf[0]),
                "has_uint32": int(buf[1]),
                "uinteger": int(buf[2]),
            }
            chain_states.append({
                "phi": data[f"phi_{L}_{c}"], "dt": float(data[f"dt_{L}_{c}"]),
                "accepted": int(ctr[0]), "proposed": int(ctr[1]),
                "samples_done": int(ctr[2]), "rng_state": rng_state,
            })
            chain_obs.append(data[f"obs_{L}_{c}"])
        states[L] = {"states": chain_states, "obs": chain_obs}
    return meta["config_hash"], states


# ------------------------------------------------------------------- commands


def run(config_path, workers=None):
    cfg = load_config(config_path)
    workers = _resolve_workers(workers)
    outdir = cfg.output
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "config.yaml"), "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
    t0 = time.time()
    try:
        _RUNNERS[cfg.experiment](cfg, outdir, workers)
    except Exception as exc:
        _write_summary(outdir, cfg, {"error": str(exc)}, partial=True)
        raise
    with open(os.path.join(outdir, "run.log"), "a") as fh:
        fh.write(f"experiment={cfg.experiment} workers={workers} "
                 f"wall_seconds={time.time() - t0:.2f}\n")
    return 0


def resume(run_dir, workers=None):
    cfg_path = os.path.join(run_dir, "config.yaml")
    cfg = load_config(cfg_path)
    if cfg.experiment != "variance_sweep":
        raise ConfigError([f"experiment: resume supports variance_sweep runs, "
                           f"not {cfg.experiment}"])
    workers = _resolve_workers(workers)
    saved_hash, states = _load_checkpoint(run_dir)
    if saved_hash != cfg.config_hash():
        raise ConfigError([f"config_hash: checkpoint {saved_hash} does not match "
                           f"current config {cfg.config_hash()}"])
    t0 = time.time()
    _run_variance_sweep(cfg, run_dir, workers, resume_state=states)
    with open(os.path.join(run_dir, "run.log"), "a") as fh:
        fh.write(f"resumed workers={workers} wall_seconds={time.time() - t0:.2f}\n")
    return 0


def validate(config_path):
    load_config(config_path)
    print("config ok")
    return 0


def _resolve_workers(workers):
    if workers is not None:
        return int(workers)
    return int(os.environ.get(WORKERS_ENV, "1"))


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="gradsurf",
        description="Experiment driver for the random-surface laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--workers", type=int, default=None)
    p_res = sub.add_parser("resume", help="resume a checkpointed run directory")
    p_res.add_argument("rundir")
    p_res.add_argument("--workers", type=int, default=None)
    p_val = sub.add_parser("validate", help="validate a config without running")
    p_val.add_argument("config")
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return run(args.config, args.workers)
        if args.command == "resume":
            return resume(args.rundir, args.workers)
        return validate(args.config)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
