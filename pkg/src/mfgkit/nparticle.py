"""N-agent controlled simulation and its convergence diagnostics.

Three layers: a trajectory-level simulator with one RNG stream per agent
(exchangeable and bit-reproducible), a replica-vectorized engine for
finite-state ensembles used by the law-of-large-numbers and Nash-gap
studies, and the exact generator-expansion check that isolates the 1/N
correction terms functional by functional.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .generators import (
    ClassSpec,
    CompoundPoisson,
    ControlledGenerator,
    ControlledRateMatrix,
    GeneratorError,
    LevyTriple,
    RateMatrix,
    derive_stream,
    sample_increment,
)
from .kinetic import KineticProblem, _proportional_counts, _rate_generator_matrix
from .measures import FiniteState, Measure, MeasurePath, Particles, pairing
from .registry import Coefficient

__all__ = [
    "AgentSystem",
    "SimulationResult",
    "simulate_agents",
    "PayoffSpec",
    "payoff",
    "MeasureFunctional",
    "linear_functional",
    "quadratic_functional",
    "constant_functional",
    "ExpansionReport",
    "generator_expansion_check",
    "StateFunctional",
    "occupancy",
    "occupancy_squared",
    "RateEntry",
    "RateReport",
    "lln_rate_study",
    "deviator_influence",
    "NashEntry",
    "NashReport",
    "nash_gap",
    "TablePolicy",
    "dp_best_response",
    "EmpiricalGreedyPolicy",
    "default_deviations",
    "tangent_payoff_finite",
    "tangent_payoff_particles",
    "stratified_counts",
    "matched_euler_reference",
    "simulate_finite_ensemble",
]

LOG_FLOOR = 1e-12
RATE_GUARD = 0.1


# ---------------------------------------------------------------------------
# Trajectory-level simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgentSystem:
    """N agents, a common feedback policy, and an optional deviating agent 0."""

    init: np.ndarray
    policy: object
    horizon: float
    dt: float
    deviator: object | None = None
    stream_ids: tuple | None = None

    def __post_init__(self):
        init = np.asarray(self.init)
        object.__setattr__(self, "init", init)
        if init.shape[0] < 2:
            raise ValueError("need at least two agents")
        ids = self.stream_ids
        ids = tuple(range(init.shape[0])) if ids is None else tuple(int(i) for i in ids)
        if len(ids) != init.shape[0]:
            raise ValueError("stream_ids must match the agent count")
        object.__setattr__(self, "stream_ids", ids)
        n = round(self.horizon / self.dt)
        if n < 1 or abs(n * self.dt - self.horizon) > 1e-9 * max(1.0, self.horizon):
            raise ValueError("dt must divide the horizon")

    @property
    def n_agents(self) -> int:
        return self.init.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.arange(round(self.horizon / self.dt) + 1) * self.dt


@dataclass(frozen=True)
class SimulationResult:
    times: np.ndarray
    trajectories: np.ndarray  # (nt+1, N) states or positions
    empirical: MeasurePath
    kind: str


def _policy_u(policy, t, x, mu):
    try:
        return policy(t, x, mu)
    except TypeError:
        return policy(t, x)


def simulate_agents(system: AgentSystem, generator, seed: int) -> SimulationResult:
    """Synchronous stepping with per-agent counter-derived RNG streams.

    Exchangeable by construction: permuting the non-tagged agents' initial
    states together with their stream ids permutes the trajectories and
    leaves the empirical path unchanged.
    """
    spec = generator.single() if isinstance(generator, ControlledGenerator) else generator
    n = system.n_agents
    rngs = [derive_stream(seed, 0, sid, 2) for sid in system.stream_ids]
    times = system.times
    dt = system.dt

    if spec.rates is not None:
        return _simulate_agents_finite(system, spec, times, dt, rngs)
    if spec.triple is None:
        raise ValueError("generator has neither rates nor a Levy triple")
    return _simulate_agents_particles(system, spec, times, dt, rngs)


def _simulate_agents_finite(system, spec, times, dt, rngs):
    rates = spec.rates
    k_states = rates.n_states
    n = system.n_agents
    states = np.asarray(system.init, dtype=int).copy()
    traj = [states.copy()]
    snaps = [_counts_measure(states, k_states)]
    for step, t in enumerate(times[:-1]):
        mu = snaps[-1]
        mats = _rate_matrices(rates, t, mu)
        if dt * max(m.sum(axis=1).max() for m in mats) > RATE_GUARD + 1e-12:
            raise GeneratorError("dt * max rate exceeds the thinning guard; reduce dt")
        new = states.copy()
        for i in range(n):
            pol = system.deviator if (i == 0 and system.deviator is not None) else system.policy
            a = int(_policy_u(pol, t, states[i], mu))
            row = mats[a][states[i]] if isinstance(rates, ControlledRateMatrix) else mats[0][states[i]]
            u = rngs[i].random()
            cum = np.cumsum(row * dt)
            if u < cum[-1]:
                new[i] = int(np.searchsorted(cum, u, side="right"))
        states = new
        traj.append(states.copy())
        snaps.append(_counts_measure(states, k_states))
    return SimulationResult(times, np.array(traj), MeasurePath(times, snaps), "finite")


def _rate_matrices(rates, t, mu):
    if isinstance(rates, ControlledRateMatrix):
        return [rates.at(a)(t, mu) for a in range(rates.n_actions)]
    return [rates(t, mu)]


def _counts_measure(states, k_states) -> FiniteState:
    counts = np.bincount(states, minlength=k_states).astype(float)
    return FiniteState(counts / states.size)


def _simulate_agents_particles(system, spec, times, dt, rngs):
    n = system.n_agents
    x = np.asarray(system.init, dtype=float).copy()
    traj = [x.copy()]
    w = np.full(n, 1.0 / n)
    snaps = [Particles(x.copy(), w)]
    for t in times[:-1]:
        mu = snaps[-1]
        new = np.empty_like(x)
        for i in range(n):
            pol = system.deviator if (i == 0 and system.deviator is not None) else system.policy
            u = _policy_u(pol, t, x[i], mu) if pol is not None else None
            new[i] = sample_increment(
                spec.triple, t, float(x[i]), mu, dt, rngs[i],
                h=spec.control_drift if pol is not None else None, u=u,
            )
        x = new
        traj.append(x.copy())
        snaps.append(Particles(x.copy(), w))
    return SimulationResult(times, np.array(traj), MeasurePath(times, snaps), "particles")


# ---------------------------------------------------------------------------
# Payoffs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PayoffSpec:
    """Running plus terminal reward.

    ``running`` is either a callable J(t, x, mu, u) or, for finite-state
    games, a nested tuple of registry coefficients indexed [action][state]
    (which is what the replica-vectorized engines consume).  ``terminal``
    is a callable or a per-state array.
    """

    running: object = None
    terminal: object = None

    def running_scalar(self, t, x, mu, u) -> float:
        if self.running is None:
            return 0.0
        if callable(self.running):
            return float(self.running(t, x, mu, u))
        coef = self.running[int(u)][int(x)]
        return float(coef(t, float(x), mu))

    def terminal_value(self, x):
        if self.terminal is None:
            return 0.0
        if callable(self.terminal):
            return float(self.terminal(x))
        return float(np.asarray(self.terminal, dtype=float)[int(x)])

    # -- replica-vectorized finite-state forms ------------------------------

    def running_tensor(self, t, batch_mu, k_states: int, n_actions: int) -> np.ndarray:
        """(K, A, R) tensor of running costs against a batch of crowd vectors."""
        if self.running is None:
            raise ValueError("payoff has no running component")
        if callable(self.running):
            raise ValueError("vectorized studies need coefficient-table running costs")
        r = np.asarray(batch_mu.masses).shape[0]
        out = np.empty((k_states, n_actions, r))
        for a in range(n_actions):
            for i in range(k_states):
                val = self.running[a][i](t, float(i), batch_mu)
                out[i, a, :] = np.broadcast_to(np.asarray(val, dtype=float), (r,))
        return out

    def terminal_batch(self, states: np.ndarray) -> np.ndarray:
        if self.terminal is None:
            return np.zeros(states.shape)
        if callable(self.terminal):
            return np.asarray(self.terminal(states), dtype=float)
        return np.asarray(self.terminal, dtype=float)[np.asarray(states, dtype=int)]


def payoff(trajectory: np.ndarray, empirical: MeasurePath, spec: PayoffSpec, policy_used) -> float:
    """Trapezoid time quadrature of the running reward plus the terminal one."""
    times = empirical.times
    if trajectory.shape[0] != times.size:
        raise ValueError("trajectory and empirical path must share the time grid")
    dt = empirical.dt
    weights = np.full(times.size, dt)
    weights[0] = weights[-1] = 0.5 * dt
    total = 0.0
    for w, t, x, mu in zip(weights, times, trajectory, empirical.snapshots):
        u = _policy_u(policy_used, t, x, mu) if policy_used is not None else 0
        total += w * spec.running_scalar(t, x, mu, u)
    return total + spec.terminal_value(trajectory[-1])


# ---------------------------------------------------------------------------
# Generator expansion check (exact 1/N decomposition)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeasureFunctional:
    """Functional of a measure with supplied variational derivatives.

    ``dmu_*`` give the first variational derivative and its derivatives in
    the spatial argument; ``d2mu_cross`` is the mixed second derivative of
    the second variational derivative, evaluated on the diagonal.
    """

    name: str
    value: Callable
    dmu_value: Callable | None = None
    dmu_grad: Callable | None = None
    dmu_hess: Callable | None = None
    d2mu_value: Callable | None = None
    d2mu_cross: Callable | None = None


def linear_functional(g, dg, d2g, name="linear") -> MeasureFunctional:
    return MeasureFunctional(
        name,
        value=lambda mu: pairing(g, mu),
        dmu_value=lambda mu, v: g(np.atleast_1d(v))[0],
        dmu_grad=lambda mu, v: dg(np.atleast_1d(v))[0],
        dmu_hess=lambda mu, v: d2g(np.atleast_1d(v))[0],
        d2mu_value=lambda mu, v, w: 0.0,
        d2mu_cross=lambda mu, v, w: 0.0,
    )


def quadratic_functional(g, dg, d2g, name="quadratic") -> MeasureFunctional:
    def pv(mu):
        return pairing(g, mu)

    return MeasureFunctional(
        name,
        value=lambda mu: pv(mu) ** 2,
        dmu_value=lambda mu, v: 2.0 * pv(mu) * g(np.atleast_1d(v))[0],
        dmu_grad=lambda mu, v: 2.0 * pv(mu) * dg(np.atleast_1d(v))[0],
        dmu_hess=lambda mu, v: 2.0 * pv(mu) * d2g(np.atleast_1d(v))[0],
        d2mu_value=lambda mu, v, w: 2.0 * g(np.atleast_1d(v))[0] * g(np.atleast_1d(w))[0],
        d2mu_cross=lambda mu, v, w: 2.0 * dg(np.atleast_1d(v))[0] * dg(np.atleast_1d(w))[0],
    )


def constant_functional(c: float) -> MeasureFunctional:
    return MeasureFunctional(
        "constant",
        value=lambda mu: c,
        dmu_value=lambda mu, v: 0.0,
        dmu_grad=lambda mu, v: 0.0,
        dmu_hess=lambda mu, v: 0.0,
        d2mu_value=lambda mu, v, w: 0.0,
        d2mu_cross=lambda mu, v, w: 0.0,
    )


@dataclass(frozen=True)
class ExpansionReport:
    n_atoms: int
    n_particle_value: float
    limit_value: float
    residual: float
    residual_times_n: float


def generator_expansion_check(functional: MeasureFunctional, triple: LevyTriple, t, mu: Particles,
                              h=None, u=None) -> ExpansionReport:
    """Exact N-particle generator action versus its mean-field limit.

    Both sides are computed in closed form from the supplied variational
    derivatives (drift and diffusion terms) and from functional evaluations
    on atom-shifted empirical measures (jump terms), so the residual
    isolates the 1/N correction exactly.
    """
    for cb in ("dmu_value", "dmu_grad", "dmu_hess", "d2mu_cross"):
        if getattr(functional, cb) is None:
            raise ValueError(f"functional lacks the {cb} callback")
    if not isinstance(mu, Particles) or mu.dim != 1:
        raise ValueError("expansion check operates on 1-d particle measures")
    jumps = triple.jumps
    if jumps is not None and not isinstance(jumps, CompoundPoisson):
        raise GeneratorError("expansion check supports atomic jump measures only")

    pts = mu.points[:, 0]
    n = pts.size
    inv_n = 1.0 / n
    f_val = functional.value(mu)

    a_hat = 0.0
    lam_val = 0.0
    for i, xi in enumerate(pts):
        b_i = float(np.asarray(triple.b_vector(t, float(xi), mu)))
        g_i = float(np.asarray(triple.g_scalar(t, float(xi), mu)))
        dval = functional.dmu_value(mu, xi)
        dgrad = functional.dmu_grad(mu, xi)
        dhess = functional.dmu_hess(mu, xi)
        cross = functional.d2mu_cross(mu, xi, xi)

        # exact chain rule through the empirical measure
        df_dxi = inv_n * dgrad
        d2f_dxi2 = inv_n * dhess + inv_n**2 * cross
        a_hat += b_i * df_dxi + 0.5 * g_i * d2f_dxi2
        lam_val += inv_n * (b_i * dgrad + 0.5 * g_i * dhess)

        if jumps is not None:
            rate = float(np.asarray(jumps.intensity(t, float(xi), mu)))
            for y, p in jumps.atoms:
                yv = float(y[0])
                comp = 1.0 if abs(yv) < 1.0 else 0.0
                shifted = pts.copy()
                shifted[i] = xi + yv
                f_shift = functional.value(Particles(shifted, mu.weights))
                a_hat += rate * p * (f_shift - f_val - comp * yv * df_dxi)
                d_shift = functional.dmu_value(mu, xi + yv)
                lam_val += inv_n * rate * p * (d_shift - dval - comp * yv * dgrad)

    residual = a_hat - lam_val
    return ExpansionReport(n, a_hat, lam_val, residual, residual * n)


# ---------------------------------------------------------------------------
# Replica-vectorized finite-state ensemble
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _MassBatch:
    """Duck-typed batch of mass vectors; observables see masses[..., k]."""

    masses: np.ndarray  # (R, K)
    state_values: np.ndarray


@dataclass(frozen=True)
class StateFunctional:
    """Smooth functional of the occupancy vector, replica-vectorized."""

    name: str
    batch: Callable  # (R, K) -> (R,)
    scalar: Callable  # (K,) -> float


def occupancy(k: int) -> StateFunctional:
    return StateFunctional(f"m{k}", lambda m: m[:, k], lambda m: float(m[k]))


def occupancy_squared(k: int) -> StateFunctional:
    return StateFunctional(f"m{k}^2", lambda m: m[:, k] ** 2, lambda m: float(m[k]) ** 2)


def occupancy_exp(k: int, scale: float = 1.0) -> StateFunctional:
    return StateFunctional(
        f"exp({scale}*m{k})",
        lambda m: np.exp(scale * m[:, k]),
        lambda m: float(np.exp(scale * m[k])),
    )


def stratified_counts(mu0: FiniteState, n: int) -> np.ndarray:
    """Largest-remainder atom allocation: ||mu0^N - mu0|| = O(1/N)."""
    return _proportional_counts(mu0.masses / mu0.total_mass(), n)


def matched_euler_reference(prob: KineticProblem, policy=None) -> np.ndarray:
    """Deterministic limit of the thinning chain: the Euler mass recursion."""
    spec = prob.spec
    base = prob.mu0
    m = base.masses.astype(float).copy()
    out = [m.copy()]
    dt = prob.dt
    for k in range(prob.n_steps):
        t = k * dt
        mu = base.with_masses(m, signed=True)
        mats = _rate_matrices(spec.rates, t, mu)
        if isinstance(spec.rates, ControlledRateMatrix):
            actions = [int(_policy_u(policy, t, i, mu)) if policy is not None else 0
                       for i in range(spec.rates.n_states)]
            q = np.array([mats[actions[i]][i] for i in range(spec.rates.n_states)])
        else:
            q = mats[0]
        m = m + dt * (_rate_generator_matrix(q).T @ m)
        out.append(m.copy())
    return np.array(out)


def _batch_rate_tensor(rate_matrix: RateMatrix, t, batch_mu: _MassBatch, n_rep: int) -> np.ndarray:
    """(K, K, R) tensor of rates against a batch of crowd vectors."""
    k = rate_matrix.n_states
    out = np.zeros((k, k, n_rep))
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            val = rate_matrix._fns[i][j](t, float(i), batch_mu)
            out[i, j, :] = np.broadcast_to(np.asarray(val, dtype=float), (n_rep,))
    if out.min() < 0:
        raise GeneratorError("negative jump rate")
    return out


def _action_tables(policy, t, k_states, mu) -> np.ndarray:
    return np.array([int(_policy_u(policy, t, i, mu)) for i in range(k_states)])


@dataclass(frozen=True)
class EnsembleResult:
    final_masses: np.ndarray  # (R, K)
    payoff_tagged: np.ndarray | None
    n_agents: int
    n_replicas: int


def simulate_finite_ensemble(
    rates: ControlledRateMatrix | RateMatrix,
    policy,
    mu0: FiniteState,
    horizon: float,
    dt: float,
    n_agents: int,
    n_replicas: int,
    seed: int,
    batch: int = 0,
    deviator=None,
    payoff_spec: PayoffSpec | None = None,
) -> EnsembleResult:
    """All replicas of the N-agent thinning chain, vectorized.

    One Philox stream per batch drives an (R, N) uniform block per step, so
    paired runs that differ only in the tagged agent's policy share every
    draw (common random numbers).  Initial atoms are placed by stratified
    allocation and are identical across replicas.
    """
    k_states = rates.n_states
    n_actions = rates.n_actions if isinstance(rates, ControlledRateMatrix) else 1
    counts = stratified_counts(mu0, n_agents)
    init = np.repeat(np.arange(k_states), counts)
    states = np.tile(init, (n_replicas, 1))
    rng = derive_stream(seed, 17, batch, 3)
    n_steps = round(horizon / dt)
    times = np.arange(n_steps + 1) * dt
    sv = mu0.state_values

    pay = np.zeros(n_replicas) if payoff_spec is not None else None
    eye = np.eye(k_states)
    r_idx = np.arange(n_replicas)[:, None]

    def crowd(states_arr):
        return eye[states_arr].mean(axis=1)  # (R, K)

    for step, t in enumerate(times[:-1]):
        m = crowd(states)
        batch_mu = _MassBatch(m, sv)
        if isinstance(rates, ControlledRateMatrix):
            tensors = np.stack(
                [_batch_rate_tensor(rates.at(a), t, batch_mu, n_replicas) for a in range(n_actions)]
            )  # (A, K, K, R)
        else:
            tensors = _batch_rate_tensor(rates, t, batch_mu, n_replicas)[None]
        if dt * float(tensors.sum(axis=2).max()) > RATE_GUARD + 1e-12:
            raise GeneratorError("dt * max rate exceeds the thinning guard; reduce dt")

        actions = _ensemble_actions(policy, t, states, batch_mu, n_agents)
        if deviator is not None:
            actions[:, 0] = _ensemble_actions_col(deviator, t, states[:, 0], batch_mu, n_agents)

        if pay is not None:
            w = dt if 0 < step else 0.5 * dt
            pay += w * _running_tagged(payoff_spec, t, states[:, 0], actions[:, 0], batch_mu,
                                       k_states, n_actions)

        u = rng.random(states.shape)
        if k_states == 2:
            other = 1 - states
            rate_out = tensors[actions, states, other, r_idx]
            states = np.where(u < rate_out * dt, other, states)
        else:
            probs = tensors[actions, states, :, r_idx] * dt  # (R, N, K)
            cum = np.cumsum(probs, axis=2)
            jumped = u < cum[:, :, -1]
            new = (u[:, :, None] < cum).argmax(axis=2)
            states = np.where(jumped, new, states)

    m = crowd(states)
    if pay is not None:
        batch_mu = _MassBatch(m, sv)
        actions = _ensemble_actions(policy, times[-1], states, batch_mu, n_agents)
        if deviator is not None:
            actions[:, 0] = _ensemble_actions_col(deviator, times[-1], states[:, 0], batch_mu, n_agents)
        pay += 0.5 * dt * _running_tagged(payoff_spec, times[-1], states[:, 0], actions[:, 0],
                                          batch_mu, k_states, n_actions)
        pay += payoff_spec.terminal_batch(states[:, 0])
    return EnsembleResult(m, pay, n_agents, n_replicas)


def _running_tagged(payoff_spec, t, states_col, actions_col, batch_mu, k_states, n_actions):
    tensor = payoff_spec.running_tensor(t, batch_mu, k_states, n_actions)  # (K, A, R)
    r = np.arange(states_col.size)
    return tensor[states_col, actions_col, r]


def _ensemble_actions(policy, t, states, batch_mu, n_agents) -> np.ndarray:
    if policy is None:
        return np.zeros(states.shape, dtype=int)
    if hasattr(policy, "ensemble_actions"):
        raise ValueError("measure-adaptive policies are supported for the tagged agent only")
    table = _action_tables(policy, t, batch_mu.masses.shape[1], None)
    return table[states]


def _ensemble_actions_col(policy, t, states_col, batch_mu, n_agents) -> np.ndarray:
    if hasattr(policy, "ensemble_actions"):
        return policy.ensemble_actions(t, states_col, batch_mu, n_agents)
    table = _action_tables(policy, t, batch_mu.masses.shape[1], None)
    return table[states_col]


# ---------------------------------------------------------------------------
# LLN rate study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateEntry:
    n_agents: int
    replicas: int
    bias: float
    stderr: float
    flagged: bool


@dataclass(frozen=True)
class RateReport:
    functional: str
    entries: tuple
    slope: float
    slope_stderr: float
    intercept: float
    inconclusive: bool


def _batch_means_stderr(values: np.ndarray, n_batches: int = 100) -> float:
    n = values.size
    n_batches = min(n_batches, n)
    usable = (n // n_batches) * n_batches
    means = values[:usable].reshape(n_batches, -1).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def _weighted_slope(ns, biases, stderrs):
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.maximum(np.abs(np.asarray(biases, dtype=float)), LOG_FLOOR))
    w = 1.0 / np.maximum(np.asarray(stderrs, dtype=float), LOG_FLOOR) ** 2
    sw = w.sum()
    xb = (w * x).sum() / sw
    yb = (w * y).sum() / sw
    sxx = (w * (x - xb) ** 2).sum()
    slope = float((w * (x - xb) * (y - yb)).sum() / sxx)
    intercept = float(yb - slope * xb)
    resid = y - (intercept + slope * x)
    dof = max(len(x) - 2, 1)
    s2 = float((w * resid**2).sum() / dof / sxx)
    return slope, float(np.sqrt(s2)), intercept


def lln_rate_study(
    prob: KineticProblem,
    policy,
    functionals: Sequence[StateFunctional],
    ns: Sequence[int],
    replicas: int,
    seed: int,
    deviator=None,
    max_batches: int = 8,
) -> list[RateReport]:
    """Bias of E F(mu^N_T) against the matched deterministic limit, per F.

    Replicas are added in batches until the Monte-Carlo stderr drops below
    a third of the measured bias (or the batch budget is exhausted, which
    flags the entry).  The fitted slope uses weighted least squares on
    unflagged entries; fewer than two of them marks the whole report
    inconclusive rather than silently passing.
    """
    spec = prob.spec
    if spec.rates is None:
        raise ValueError("rate study needs a finite-state problem")
    ref = matched_euler_reference(prob, policy)[-1]
    ref_vals = {f.name: f.scalar(ref) for f in functionals}

    reports = []
    samples: dict[tuple[int, str], np.ndarray] = {}
    for n_agents in ns:
        values = {f.name: [] for f in functionals}
        for b in range(max_batches):
            result = simulate_finite_ensemble(
                spec.rates, policy, prob.mu0, prob.horizon, prob.dt,
                n_agents, replicas, seed, batch=b, deviator=deviator,
            )
            for f in functionals:
                values[f.name].append(f.batch(result.final_masses))
            done = True
            for f in functionals:
                pooled = np.concatenate(values[f.name])
                bias = float(pooled.mean() - ref_vals[f.name])
                stderr = _batch_means_stderr(pooled)
                # escalate past the /3 flag threshold for slope stability
                if stderr >= abs(bias) / 5.0:
                    done = False
            if done:
                break
        for f in functionals:
            samples[(n_agents, f.name)] = np.concatenate(values[f.name])

    for f in functionals:
        entries = []
        for n_agents in ns:
            pooled = samples[(n_agents, f.name)]
            bias = float(pooled.mean() - ref_vals[f.name])
            stderr = _batch_means_stderr(pooled)
            entries.append(
                RateEntry(n_agents, pooled.size, bias, stderr, stderr >= abs(bias) / 3.0)
            )
        good = [e for e in entries if not e.flagged]
        if len(good) >= 2:
            slope, slope_se, intercept = _weighted_slope(
                [e.n_agents for e in good], [e.bias for e in good], [e.stderr for e in good]
            )
            inconclusive = len(good) < len(entries)
        else:
            slope, slope_se, intercept = float("nan"), float("nan"), float("nan")
            inconclusive = True
        reports.append(RateReport(f.name, tuple(entries), slope, slope_se, intercept, inconclusive))
    return reports


@dataclass(frozen=True)
class DeviatorEntry:
    functional: str
    n_agents: int
    bias_conforming: float
    bias_deviating: float
    stderr: float
    within_two_stderr: bool


def deviator_influence(
    prob: KineticProblem,
    policy,
    deviator,
    functionals: Sequence[StateFunctional],
    ns: Sequence[int],
    replicas: int,
    seed: int,
) -> list[DeviatorEntry]:
    """Paired-seed comparison of the LLN bias with and without one deviator."""
    spec = prob.spec
    ref = matched_euler_reference(prob, policy)[-1]
    out = []
    for n_agents in ns:
        base = simulate_finite_ensemble(
            spec.rates, policy, prob.mu0, prob.horizon, prob.dt,
            n_agents, replicas, seed, batch=0,
        )
        dev = simulate_finite_ensemble(
            spec.rates, policy, prob.mu0, prob.horizon, prob.dt,
            n_agents, replicas, seed, batch=0, deviator=deviator,
        )
        for functional in functionals:
            ref_val = functional.scalar(ref)
            v0 = functional.batch(base.final_masses)
            v1 = functional.batch(dev.final_masses)
            b0 = float(v0.mean() - ref_val)
            b1 = float(v1.mean() - ref_val)
            stderr = max(_batch_means_stderr(v0), _batch_means_stderr(v1))
            out.append(
                DeviatorEntry(functional.name, n_agents, b0, b1, stderr, abs(b1 - b0) <= 2.0 * stderr)
            )
    return out


# ---------------------------------------------------------------------------
# Nash gap study
# ---------------------------------------------------------------------------


class TablePolicy:
    """Deterministic (time index, state) -> action table."""

    def __init__(self, times, table, name="table"):
        self.times = np.asarray(times, dtype=float)
        self.table = np.asarray(table, dtype=int)
        self.name = name
        self._dt = float(self.times[1] - self.times[0]) if self.times.size > 1 else 1.0

    def _k(self, t):
        return int(np.clip(round((t - self.times[0]) / self._dt), 0, self.times.size - 1))

    def __call__(self, t, x, mu=None):
        row = self.table[self._k(t)]
        return row[np.asarray(x, dtype=int)]


def dp_best_response(rates: ControlledRateMatrix, payoff_spec: PayoffSpec, flow: MeasurePath,
                     times) -> TablePolicy:
    """Exact backward induction on the thinning chain against a frozen flow."""
    times = np.asarray(times, dtype=float)
    dt = float(times[1] - times[0])
    k_states = rates.n_states
    n_actions = rates.n_actions
    v = np.array([payoff_spec.terminal_value(i) for i in range(k_states)])
    table = np.zeros((times.size, k_states), dtype=int)
    values = np.zeros((times.size, k_states))
    values[-1] = v
    # terminal row: no decision epoch remains; use the instantaneous
    # Hamiltonian convention so tables align with extracted policies
    mu_term = flow.at(times[-1])
    qv_term = np.empty((k_states, n_actions))
    for a in range(n_actions):
        q = rates.at(a)(times[-1], mu_term)
        gain = q @ v - q.sum(axis=1) * v
        for i in range(k_states):
            qv_term[i, a] = payoff_spec.running_scalar(times[-1], i, mu_term, a) + gain[i]
    best_t = qv_term.max(axis=1)
    thr = best_t - 1e-12 * np.maximum(1.0, np.abs(best_t))
    table[-1] = np.argmax(qv_term >= thr[:, None], axis=1)
    for k in range(times.size - 2, -1, -1):
        t = times[k]
        mu = flow.at(t)
        qv = np.full((k_states, n_actions), -np.inf)
        for a in range(n_actions):
            q = rates.at(a)(t, mu)
            trans = q * dt
            stay = 1.0 - trans.sum(axis=1)
            for i in range(k_states):
                run = payoff_spec.running_scalar(t, i, mu, a)
                qv[i, a] = run * dt + stay[i] * v[i] + float(trans[i] @ v)
        v = qv.max(axis=1)
        thresh = v - 1e-12 * np.maximum(1.0, np.abs(v))
        table[k] = np.argmax(qv >= thresh[:, None], axis=1)
        values[k] = v
    pol = TablePolicy(times, table, name="dp-best-response")
    pol.values = values
    return pol


class EmpiricalGreedyPolicy:
    """Tagged-agent deviation reacting to the realized crowd vector.

    One-step-greedy: the running cost is evaluated at the current empirical
    masses (optionally excluding the agent's own atom) while the
    continuation uses a frozen reference value table, optionally tilted by
    the observed crowding excess m^N - m_ref with weight ``fluct_weight``
    (a persistence estimate: crowded-now states stay costly for a while).
    """

    def __init__(self, rates: ControlledRateMatrix, payoff_spec: PayoffSpec,
                 value_table: np.ndarray, times, self_excluding: bool = False,
                 flow_table: np.ndarray | None = None, fluct_weight: float = 0.0,
                 name: str | None = None):
        self.rates = rates
        self.payoff_spec = payoff_spec
        self.values = np.asarray(value_table, dtype=float)
        self.times = np.asarray(times, dtype=float)
        self.self_excluding = self_excluding
        self.flow_table = None if flow_table is None else np.asarray(flow_table, dtype=float)
        self.fluct_weight = float(fluct_weight)
        self._dt = float(self.times[1] - self.times[0])
        if name is None:
            name = "greedy-self-excluding" if self_excluding else "greedy"
            if fluct_weight:
                name = f"tracker[w={fluct_weight:g}]"
        self.name = name

    def _k(self, t):
        return int(np.clip(round((t - self.times[0]) / self._dt), 0, self.times.size - 1))

    def ensemble_actions(self, t, states_col, batch_mu, n_agents) -> np.ndarray:
        k_idx = min(self._k(t) + 1, self.times.size - 1)
        v_next = self.values[k_idx]
        m = batch_mu.masses
        if self.self_excluding and n_agents > 1:
            eye = np.eye(m.shape[1])
            m = (n_agents * m - eye[states_col]) / (n_agents - 1)
        adj = _MassBatch(m, batch_mu.state_values)
        r = states_col.size
        k_states = m.shape[1]
        n_actions = self.rates.n_actions
        run = self.payoff_spec.running_tensor(t, adj, k_states, n_actions)  # (K, A, R)
        if self.flow_table is not None and self.fluct_weight:
            excess = m - self.flow_table[k_idx]  # (R, K)
            v_adj = v_next[None, :] - self.fluct_weight * excess
        else:
            v_adj = np.broadcast_to(v_next, (r, k_states))
        qv = np.empty((r, n_actions))
        dt = self._dt
        ridx = np.arange(r)
        own_v = v_adj[ridx, states_col]
        for a in range(n_actions):
            tensor = _batch_rate_tensor(self.rates.at(a), t, adj, r)  # (K, K, R)
            rows = tensor[states_col, :, ridx] * dt  # (R, K)
            stay = 1.0 - rows.sum(axis=1)
            cont = stay * own_v + np.einsum("rk,rk->r", rows, v_adj)
            qv[:, a] = run[states_col, a, ridx] * dt + cont
        best = qv.max(axis=1)
        thresh = best - 1e-12 * np.maximum(1.0, np.abs(best))
        return np.argmax(qv >= thresh[:, None], axis=1)

    def __call__(self, t, x, mu=None):  # scalar fallback against a plain measure
        if mu is None:
            return 0
        batch = _MassBatch(np.asarray(mu.masses)[None, :], mu.state_values)
        return int(self.ensemble_actions(t, np.array([int(x)]), batch, 10**9)[0])


def default_deviations(rates: ControlledRateMatrix, payoff_spec: PayoffSpec, flow: MeasurePath,
                       times, tracker_weights=(0.1, 0.25, 0.5)) -> list:
    """The default family: DP best response, fluctuation trackers, extremes."""
    dp = dp_best_response(rates, payoff_spec, flow, times)
    flow_table = np.array([snap.masses for snap in flow.snapshots])
    devs = [dp]
    for w in tracker_weights:
        devs.append(
            EmpiricalGreedyPolicy(rates, payoff_spec, dp.values, times,
                                  flow_table=flow_table, fluct_weight=w)
        )
    devs.append(
        EmpiricalGreedyPolicy(rates, payoff_spec, dp.values, times, self_excluding=True,
                              flow_table=flow_table, fluct_weight=tracker_weights[-1],
                              name="tracker-self-excluding")
    )
    n_actions = rates.n_actions
    nt, k_states = dp.table.shape
    for a in range(n_actions):
        tab = np.full((nt, k_states), a, dtype=int)
        devs.append(TablePolicy(times, tab, name=f"const-{a}"))
    devs.append(TablePolicy(times, (n_actions - 1) - dp.table, name="anti-dp"))
    return devs


@dataclass(frozen=True)
class NashEntry:
    n_agents: int
    replicas: int
    eps_hat: float
    stderr: float
    best_deviation: str
    bias_dominant: bool


@dataclass(frozen=True)
class NashReport:
    entries: tuple
    slope: float
    slope_stderr: float
    inconclusive: bool
    per_deviation: dict


def nash_gap(
    rates: ControlledRateMatrix,
    policy,
    payoff_spec: PayoffSpec,
    mu0: FiniteState,
    horizon: float,
    dt: float,
    deviations: Sequence,
    ns: Sequence[int],
    replicas: int,
    seed: int,
    max_batches: int = 4,
) -> NashReport:
    """Best unilateral-deviation gain of the tagged agent, per system size.

    Conforming and deviating runs share every random draw (common random
    numbers), so the paired differences have far smaller variance than the
    payoffs themselves.  The slope is fitted on log max(eps, floor) with
    inverse-variance weights; entries whose stderr is not dominated are
    flagged and make the report inconclusive.
    """
    entries = []
    per_dev: dict = {d_name(d): [] for d in deviations}
    for n_agents in ns:
        diffs_by_dev: dict = {d_name(d): [] for d in deviations}
        active = list(deviations)
        best = best_se = float("nan")
        best_name = ""
        dominant = False
        for b in range(1, max_batches + 1):
            base = simulate_finite_ensemble(
                rates, policy, mu0, horizon, dt, n_agents, replicas, seed,
                batch=b, payoff_spec=payoff_spec,
            )
            for dev in active:
                run = simulate_finite_ensemble(
                    rates, policy, mu0, horizon, dt, n_agents, replicas, seed,
                    batch=b, deviator=dev, payoff_spec=payoff_spec,
                )
                diffs_by_dev[d_name(dev)].append(run.payoff_tagged - base.payoff_tagged)
            stats = {}
            best = -np.inf
            for dev in active:
                pooled = np.concatenate(diffs_by_dev[d_name(dev)])
                gain = float(pooled.mean())
                se = _batch_means_stderr(pooled)
                stats[d_name(dev)] = (gain, se)
                if gain > best:
                    best, best_se, best_name = gain, se, d_name(dev)
            dominant = best > 0 and best_se < best / 3.0
            if dominant:
                break
            # escalate only the contenders for the max
            active = [
                dev for dev in active
                if stats[d_name(dev)][0] >= best - 5.0 * (stats[d_name(dev)][1] + best_se)
            ]
        n_used = replicas * len(diffs_by_dev[best_name])
        for dev in deviations:
            pooled = np.concatenate(diffs_by_dev[d_name(dev)])
            per_dev[d_name(dev)].append(
                (n_agents, float(pooled.mean()), _batch_means_stderr(pooled))
            )
        entries.append(NashEntry(n_agents, n_used, best, best_se, best_name, dominant))

    good = [e for e in entries if e.bias_dominant]
    if len(good) >= 2:
        slope, slope_se, _ = _weighted_slope(
            [e.n_agents for e in good],
            [max(e.eps_hat, LOG_FLOOR) for e in good],
            [e.stderr for e in good],
        )
    else:
        slope, slope_se = float("nan"), float("nan")
    inconclusive = len(good) < len(entries)
    return NashReport(tuple(entries), slope, slope_se, inconclusive, per_dev)


def d_name(dev) -> str:
    return getattr(dev, "name", type(dev).__name__)


# ---------------------------------------------------------------------------
# Tangent-process payoff simulation (frozen flow)
# ---------------------------------------------------------------------------


def tangent_payoff_finite(
    rates: ControlledRateMatrix | RateMatrix,
    policy,
    flow: MeasurePath,
    payoff_spec: PayoffSpec,
    mu0: FiniteState,
    n_rep: int,
    seed: int,
) -> np.ndarray:
    """Payoffs of one agent driven by the frozen limit flow; (R,) array."""
    times = flow.times
    dt = flow.dt
    k_states = rates.n_states
    counts = stratified_counts(mu0, n_rep)
    states = np.repeat(np.arange(k_states), counts)
    rng = derive_stream(seed, 23, 0, 4)
    pay = np.zeros(n_rep)
    for step, t in enumerate(times[:-1]):
        mu = flow.at(t)
        if isinstance(rates, ControlledRateMatrix):
            actions_by_state = _action_tables(policy, t, k_states, mu)
            mats = np.stack([rates.at(a)(t, mu) for a in range(rates.n_actions)])
            q = mats[actions_by_state, np.arange(k_states)]  # (K, K) per own state
        else:
            actions_by_state = np.zeros(k_states, dtype=int)
            q = rates(t, mu)
        w = dt if step > 0 else 0.5 * dt
        run = np.array(
            [payoff_spec.running_scalar(t, i, mu, int(actions_by_state[i])) for i in range(k_states)]
        )
        pay += w * run[states]
        probs = q[states] * dt
        cum = np.cumsum(probs, axis=1)
        u = rng.random(n_rep)
        jumped = u < cum[:, -1]
        new = (u[:, None] < cum).argmax(axis=1)
        states = np.where(jumped, new, states)
    mu = flow.at(times[-1])
    if isinstance(rates, ControlledRateMatrix):
        actions_by_state = _action_tables(policy, times[-1], k_states, mu)
    else:
        actions_by_state = np.zeros(k_states, dtype=int)
    run = np.array(
        [payoff_spec.running_scalar(times[-1], i, mu, int(actions_by_state[i])) for i in range(k_states)]
    )
    pay += 0.5 * dt * run[states]
    pay += payoff_spec.terminal_batch(states)
    return pay


def tangent_payoff_particles(
    triple: LevyTriple,
    control_drift,
    policy,
    flow: MeasurePath,
    running: Callable,
    terminal: Callable,
    init_points: np.ndarray,
    n_rep: int,
    seed: int,
) -> np.ndarray:
    """Continuous-space tangent process payoffs against a frozen flow."""
    times = flow.times
    dt = flow.dt
    pts = np.asarray(init_points, dtype=float)
    reps = int(np.ceil(n_rep / pts.size))
    x = np.tile(pts, reps)[:n_rep].astype(float)
    rng = derive_stream(seed, 29, 0, 5)
    pay = np.zeros(n_rep)
    for step, t in enumerate(times[:-1]):
        mu = flow.at(t)
        u = np.asarray(_policy_u(policy, t, x, mu), dtype=float)
        w = dt if step > 0 else 0.5 * dt
        pay += w * np.asarray(running(t, x, mu, u), dtype=float)
        x = sample_increment(triple, t, x, mu, dt, rng, h=control_drift, u=u)
    mu = flow.at(times[-1])
    u = np.asarray(_policy_u(policy, times[-1], x, mu), dtype=float)
    pay += 0.5 * dt * np.asarray(running(times[-1], x, mu, u), dtype=float)
    pay += np.asarray(terminal(x), dtype=float)
    return pay
