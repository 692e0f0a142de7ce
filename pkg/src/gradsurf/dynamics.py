"""Discretized Langevin dynamics sampling the gradient Gibbs measure.

Two stepping modes:

* ``plain``: explicit Euler-Maruyama with mean re-projection.  This is the
  flow whose gradient field defines the conductance environment, so it is
  used unadjusted when recording trajectories.
* ``metropolis_adjusted``: each proposal passes an accept/reject test so the
  invariant law is exactly the Gibbs measure up to Monte Carlo error; used
  for initial conditions and static sampling.

All randomness flows through counter-based Philox streams keyed by
(seed, chain index); lattice noise is drawn in one vectorized call per step
in fixed site order, so retained samples are bit-identical regardless of
how chains are scheduled across workers.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeField, Torus, gradient_field, _flux_divergence

_TRAJ_MAGIC = b"GSTRJ001"


class UnstableStepError(RuntimeError):
    """A gradient exceeded the blow-up guard, or a fixed dt violates the policy."""


@dataclass
class LangevinConfig:
    """Sampler parameters; burn_in defaults to 10 L^2 time units."""

    dt: float = 0.05
    burn_in: float | None = None
    thinning: float = 1.0
    chain_count: int = 4
    seed: int = 0
    n_samples: int = 1000
    correction: str = "metropolis_adjusted"  # or "plain"
    dt_policy: str = "adaptive"  # or "fixed"
    blowup_guard: float = 1e6
    tune: bool = True
    target_acceptance: float = 0.574

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.burn_in is not None and self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.chain_count < 1:
            raise ValueError("chain_count must be >= 1")
        if self.correction not in ("plain", "metropolis_adjusted"):
            raise ValueError(f"unknown correction mode {self.correction!r}")
        if self.dt_policy not in ("fixed", "adaptive"):
            raise ValueError(f"unknown dt policy {self.dt_policy!r}")


def _chain_rng(seed, chain_index):
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(chain_index,))
    return np.random.Generator(np.random.Philox(ss))


def _drift_energy(torus, V, phi):
    """(gradient field, drift = div V'(grad phi), energy sum V(grad phi))."""
    g = gradient_field(torus, phi)
    return g, _flux_divergence(torus, V.dv(g)), float(np.sum(V.v(g)))


def max_stable_dt(torus, V, grad_values):
    """Curvature-scaled explicit-step bound 0.25 / (2d max V'')."""
    top = float(np.max(V.d2v(grad_values)))
    if top <= 0.0:
        return np.inf
    return 0.25 / (2 * torus.d * top)


def langevin_step(f, V, dt, noise, blowup_guard=1e6, project_mean=True):
    """One explicit Euler-Maruyama step with mean re-projection.

    noise holds one standard normal per vertex; the projection removes the
    spatial mean of the updated field, which leaves every gradient
    untouched and keeps samples in the mean-zero configuration space.
    """
    torus = f.torus
    noise = np.asarray(noise, dtype=float)
    _, drift, _ = _drift_energy(torus, V, f.values)
    out = f.values + dt * drift + math.sqrt(2.0 * dt) * noise
    if project_mean:
        out = out - out.mean()
    g = gradient_field(torus, out)
    if np.max(np.abs(g)) > blowup_guard:
        raise UnstableStepError(f"gradient exceeded blow-up guard {blowup_guard:g}")
    return LatticeField(torus, out)


def _plain_advance(torus, V, phi, rng, time_span, dt_target, dt_policy,
                   blowup_guard, noise_scale=1.0, on_substep=None):
    """Advance the unadjusted dynamics over time_span; returns (phi, t_used).

    Adaptive policy shrinks the micro step per substep from the current
    curvature; fixed policy raises instead.  on_substep(phi, grad, t) is
    called after every micro step with the freshly computed gradient.
    """
    t = 0.0
    sqrt2 = math.sqrt(2.0)
    g = gradient_field(torus, phi)
    while t < time_span - 1e-12:
        allowed = max_stable_dt(torus, V, g)
        if dt_policy == "fixed":
            if dt_target > allowed:
                raise UnstableStepError(
                    f"fixed dt {dt_target:g} exceeds stability bound {allowed:g}")
            h = dt_target
        else:
            h = min(dt_target, allowed)
        h = min(h, time_span - t)
        drift = _flux_divergence(torus, V.dv(g))
        noise = rng.standard_normal(torus.vertex_count)
        if noise_scale != 1.0:
            noise *= noise_scale
        phi = phi + h * drift + sqrt2 * math.sqrt(h) * noise
        phi -= phi.mean()
        t += h
        g = gradient_field(torus, phi)
        if np.max(np.abs(g)) > blowup_guard:
            raise UnstableStepError(f"gradient exceeded blow-up guard {blowup_guard:g}")
        if on_substep is not None:
            on_substep(phi, g, t)
    return phi, t


class _MalaState:
    """Mutable per-chain state; cached drift/energy follow the current field."""

    def __init__(self, torus, V, phi, rng, dt):
        self.torus = torus
        self.V = V
        self.phi = phi
        self.rng = rng
        self.dt = dt
        self.accepted = 0
        self.proposed = 0
        self._refresh()

    def _refresh(self):
        self.grad, self.drift, self.energy = _drift_energy(self.torus, self.V, self.phi)

    def steps(self, n):
        torus, V, rng = self.torus, self.V, self.rng
        N = torus.vertex_count
        for _ in range(n):
            dt = self.dt
            xi = rng.standard_normal(N)
            xi -= xi.mean()
            prop = self.phi + dt * self.drift + math.sqrt(2.0 * dt) * xi
            gp = gradient_field(torus, prop)
            drift_p = _flux_divergence(torus, V.dv(gp))
            energy_p = float(np.sum(V.v(gp)))
            fwd = prop - self.phi - dt * self.drift
            rev = self.phi - prop - dt * drift_p
            log_alpha = (self.energy - energy_p) + (fwd @ fwd - rev @ rev) / (4.0 * dt)
            self.proposed += 1
            if math.log(rng.random()) < log_alpha:
                self.phi, self.grad, self.drift, self.energy = prop, gp, drift_p, energy_p
                self.accepted += 1

    @property
    def acceptance_rate(self):
        return self.accepted / self.proposed if self.proposed else 0.0


@dataclass
class ChainRun:
    """Retained output of one chain: observables, diagnostics, final state."""

    obs: np.ndarray
    acceptance_rate: float
    dt: float
    state: dict


def _snapshot(st, samples_done):
    rng_state = st.rng.bit_generator.state
    return {
        "phi": st.phi.copy(),
        "rng_state": rng_state,
        "dt": st.dt,
        "accepted": st.accepted,
        "proposed": st.proposed,
        "samples_done": samples_done,
    }


def _restore_rng(state_dict):
    bg = np.random.Philox()
    bg.state = state_dict
    return np.random.Generator(bg)


def run_chain(torus, V, cfg, chain_index, n_samples=None, obs=None, state=None):
    """Burn in (with optional dt tuning) and retain n_samples observations.

    obs maps the field array to a float or array; default returns the field
    itself.  Passing a snapshot from a previous ChainRun resumes sampling
    bit-exactly where it stopped.
    """
    if cfg.correction != "metropolis_adjusted":
        return _run_chain_plain(torus, V, cfg, chain_index, n_samples, obs, state)
    n_samples = cfg.n_samples if n_samples is None else n_samples
    if state is None:
        rng = _chain_rng(cfg.seed, chain_index)
        phi = np.zeros(torus.vertex_count)
        st = _MalaState(torus, V, phi, rng, cfg.dt)
        burn = 10.0 * torus.L**2 if cfg.burn_in is None else cfg.burn_in
        _burn_in_mala(st, burn, cfg)
        samples_done = 0
    else:
        rng = _restore_rng(state["rng_state"])
        st = _MalaState(torus, V, state["phi"].copy(), rng, state["dt"])
        st.accepted = state["accepted"]
        st.proposed = state["proposed"]
        samples_done = state["samples_done"]

    steps_per_sample = max(1, round(cfg.thinning / st.dt))
    out = []
    for _ in range(n_samples):
        st.steps(steps_per_sample)
        out.append(obs(st.phi) if obs is not None else st.phi.copy())
        samples_done += 1
    return ChainRun(np.asarray(out), st.acceptance_rate, st.dt, _snapshot(st, samples_done))


def _burn_in_mala(st, burn, cfg):
    t = 0.0
    window = 50
    while t < burn:
        a0, p0 = st.accepted, st.proposed
        st.steps(window)
        t += window * st.dt
        if cfg.tune:
            rate = (st.accepted - a0) / (st.proposed - p0)
            st.dt = float(np.clip(st.dt * math.exp(0.5 * (rate - cfg.target_acceptance)),
                                  1e-6, 1.0))


def _run_chain_plain(torus, V, cfg, chain_index, n_samples, obs, state):
    n_samples = cfg.n_samples if n_samples is None else n_samples
    if state is None:
        rng = _chain_rng(cfg.seed, chain_index)
        phi = np.zeros(torus.vertex_count)
        burn = 10.0 * torus.L**2 if cfg.burn_in is None else cfg.burn_in
        phi, _ = _plain_advance(torus, V, phi, rng, burn, cfg.dt, cfg.dt_policy,
                                cfg.blowup_guard)
        samples_done = 0
        dt = cfg.dt
    else:
        rng = _restore_rng(state["rng_state"])
        phi = state["phi"].copy()
        dt = state["dt"]
        samples_done = state["samples_done"]
    out = []
    for _ in range(n_samples):
        phi, _ = _plain_advance(torus, V, phi, rng, cfg.thinning, dt, cfg.dt_policy,
                                cfg.blowup_guard)
        out.append(obs(phi) if obs is not None else phi.copy())
        samples_done += 1
    snap = {"phi": phi.copy(), "rng_state": rng.bit_generator.state, "dt": dt,
            "accepted": 0, "proposed": 0, "samples_done": samples_done}
    return ChainRun(np.asarray(out), 0.0, dt, snap)


class GibbsStream:
    """Iterable of retained samples with per-chain acceptance diagnostics.

    Iterates (chain index, LatticeField) in chain-major order; after each
    chain completes, its acceptance rate and tuned step size appear in
    .acceptance_rates and .step_sizes.
    """

    def __init__(self, torus, V, cfg, n_samples=None):
        self.torus = torus
        self.V = V
        self.cfg = cfg
        self.n_samples = cfg.n_samples if n_samples is None else n_samples
        self.acceptance_rates = []
        self.step_sizes = []

    def __iter__(self):
        for c in range(self.cfg.chain_count):
            run = run_chain(self.torus, self.V, self.cfg, c, self.n_samples)
            self.acceptance_rates.append(run.acceptance_rate)
            self.step_sizes.append(run.dt)
            for row in run.obs:
                yield c, LatticeField(self.torus, row, mean_zero=True)


def sample_gibbs(torus, V, cfg, n_samples=None):
    """Stream of retained LatticeField samples after burn-in, thinned."""
    return GibbsStream(torus, V, cfg, n_samples)


@dataclass
class EnvironmentTrajectory:
    """Edge conductances a(t, e) = V''(grad phi(t, e)) on a uniform time grid.

    a[m] holds the environment at node time m * node_dt.  The PDE solver
    treats each interval with the average of its endpoint slices, which
    makes time reversal an exact mirror at the discrete level.  grad_nodes
    and grad_max carry signed node values and within-interval sup of
    |grad phi| at the probe edges.
    """

    torus: Torus
    node_dt: float
    a: np.ndarray
    potential_tag: str = ""
    seed: int = 0
    probe_edges: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    grad_nodes: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    grad_max: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def node_count(self):
        return self.a.shape[0]

    @property
    def horizon(self):
        return (self.node_count - 1) * self.node_dt

    def times(self):
        return np.arange(self.node_count) * self.node_dt

    def node_at(self, t):
        m = round(t / self.node_dt)
        if abs(t - m * self.node_dt) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not aligned to the node grid")
        if not 0 <= m < self.node_count:
            raise ValueError(f"time {t} outside trajectory horizon {self.horizon}")
        return int(m)


def evolve_trajectory(phi0, V, dt, horizon, seed, node_dt=None, probe_edges=None,
                      dt_policy="adaptive", blowup_guard=1e6, noise_scale=1.0):
    """Evolve the plain dynamics from a stationary start, recording a(t, e).

    dt is the target micro step; within each recording interval the step may
    shrink further under the adaptive stability policy.  Probe edges get a
    signed gradient trace at nodes plus the running sup within intervals.
    """
    torus = phi0.torus
    if node_dt is None:
        node_dt = max(dt, horizon / 2048.0)
    n_nodes = int(round(horizon / node_dt)) + 1
    if abs((n_nodes - 1) * node_dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("horizon must be a multiple of node_dt")
    if probe_edges is None:
        probe_edges = np.arange(min(torus.d, torus.edge_count), dtype=np.int64)
    probe_edges = np.asarray(probe_edges, dtype=np.int64)

    rng = _chain_rng(seed, 0)
    phi = phi0.values.copy()
    a = np.empty((n_nodes, torus.edge_count))
    grad_nodes = np.empty((n_nodes, len(probe_edges)))
    grad_max = np.empty((n_nodes, len(probe_edges)))

    g = gradient_field(torus, phi)
    a[0] = V.d2v(g)
    grad_nodes[0] = g[probe_edges]
    grad_max[0] = np.abs(g[probe_edges])

    for m in range(1, n_nodes):
        running = np.zeros(len(probe_edges))

        def track(_phi, gn, _t, running=running):
            np.maximum(running, np.abs(gn[probe_edges]), out=running)

        phi, _ = _plain_advance(torus, V, phi, rng, node_dt, dt, dt_policy,
                                blowup_guard, noise_scale, on_substep=track)
        g = gradient_field(torus, phi)
        a[m] = V.d2v(g)
        grad_nodes[m] = g[probe_edges]
        grad_max[m] = running
    return EnvironmentTrajectory(torus, node_dt, a, V.family, seed,
                                 probe_edges, grad_nodes, grad_max)


@dataclass
class NoiseDecomposition:
    """Unit-window increments and bridges of per-site driving paths."""

    times: np.ndarray         # sub-grid over [0, window_count]
    increments: np.ndarray    # (window_count, n_sites)
    bridges: np.ndarray       # (window_count, points_per_window + 1, n_sites)
    points_per_window: int

    def reconstruct(self):
        """Driving path on the original sub-grid from increments and bridges."""
        n_windows, m1, n_sites = self.bridges.shape
        m = m1 - 1
        out = np.empty((n_windows * m + 1, n_sites))
        base = np.zeros(n_sites)
        tau = np.linspace(0.0, 1.0, m1)[:, None]
        for n in range(n_windows):
            seg = base + tau * self.increments[n] + self.bridges[n]
            out[n * m:(n + 1) * m + 1] = seg
            base = base + self.increments[n]
        return out


def decompose_noise(times, path, window_count):
    """Split a driving path into unit-window increments and bridges.

    The sub-grid must refine the unit windows exactly (window endpoints
    present at uniform spacing); paths are assumed to start at 0, matching
    the reconstruction identity B_t = sum_{k<n} X_k + (t-n) X_n + W_n(t-n).
    """
    times = np.asarray(times, dtype=float)
    path = np.asarray(path, dtype=float)
    if path.ndim == 1:
        path = path[:, None]
    n_t = len(times)
    if n_t < window_count + 1 or (n_t - 1) % window_count != 0:
        raise ValueError("sub-grid is not aligned to unit windows")
    m = (n_t - 1) // window_count
    expected = np.linspace(0.0, window_count, n_t)
    if np.max(np.abs(times - expected)) > 1e-9:
        raise ValueError("sub-grid is not aligned to unit windows")
    if np.max(np.abs(path[0])) > 1e-12:
        raise ValueError("driving path must start at 0")

    endpoints = path[::m]
    increments = np.diff(endpoints, axis=0)
    tau = np.linspace(0.0, 1.0, m + 1)[:, None]
    bridges = np.empty((window_count, m + 1, path.shape[1]))
    for n in range(window_count):
        seg = path[n * m:(n + 1) * m + 1]
        bridges[n] = seg - seg[0] - tau * increments[n]
    return NoiseDecomposition(times, increments, bridges, m)


def save_trajectory(traj, path):
    """Write the binary node record plus a text manifest alongside it.

    Layout (all little-endian): 8-byte magic, int64 d, L, node_count,
    n_probe, edge_count, seed, float64 node_dt, 32-byte potential tag,
    int64 probe indices, then the a / grad_nodes / grad_max arrays as
    float64 in C order.
    """
    t = traj.torus
    header = np.array([t.d, t.L, traj.node_count, len(traj.probe_edges),
                       t.edge_count, traj.seed], dtype="<i8")
    tag = traj.potential_tag.encode()[:32].ljust(32, b"\0")
    with open(path, "wb") as fh:
        fh.write(_TRAJ_MAGIC)
        fh.write(header.tobytes())
        fh.write(np.float64(traj.node_dt).astype("<f8").tobytes())
        fh.write(tag)
        fh.write(traj.probe_edges.astype("<i8").tobytes())
        fh.write(traj.a.astype("<f8").tobytes())
        fh.write(traj.grad_nodes.astype("<f8").tobytes())
        fh.write(traj.grad_max.astype("<f8").tobytes())
    with open(str(path) + ".manifest.txt", "w") as fh:
        fh.write(f"format: {_TRAJ_MAGIC.decode()}\n")
        fh.write(f"d: {t.d}\nL: {t.L}\nnode_count: {traj.node_count}\n")
        fh.write(f"node_dt: {traj.node_dt!r}\nedge_count: {t.edge_count}\n")
        fh.write(f"potential: {traj.potential_tag}\nseed: {traj.seed}\n")
        fh.write(f"probe_edges: {','.join(map(str, traj.probe_edges.tolist()))}\n")


def load_trajectory(path):
    """Read a binary trajectory record written by save_trajectory."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _TRAJ_MAGIC:
            raise ValueError(f"not a trajectory record (magic {magic!r})")
        d, L, n_nodes, n_probe, n_edges, seed = np.frombuffer(fh.read(48), dtype="<i8")
        node_dt = float(np.frombuffer(fh.read(8), dtype="<f8")[0])
        tag = fh.read(32).rstrip(b"\0").decode()
        probe = np.frombuffer(fh.read(8 * n_probe), dtype="<i8").astype(np.int64)
        torus = Torus(int(d), int(L))
        if torus.edge_count != n_edges:
            raise ValueError("edge count in record does not match torus geometry")
        a = np.frombuffer(fh.read(8 * n_nodes * n_edges), dtype="<f8")
        a = a.reshape(n_nodes, n_edges).copy()
        gn = np.frombuffer(fh.read(8 * n_nodes * n_probe), dtype="<f8")
        gm = np.frombuffer(fh.read(8 * n_nodes * n_probe), dtype="<f8")
    return EnvironmentTrajectory(torus, node_dt, a, tag, int(seed), probe,
                                 gn.reshape(n_nodes, n_probe).copy(),
                                 gm.reshape(n_nodes, n_probe).copy())
