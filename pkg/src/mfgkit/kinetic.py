"""Forward solvers for the kinetic equation in weak form.

Finite-state flows integrate the rate ODE (RK4 by default), continuous
flows run the self-consistent particle method driven by one-step generator
sampling, and 1-d grid densities use an operator-splitting transport /
diffusion / jump stepper.  The non-anticipating Picard scheme iterates
linear solves along a frozen measure path until self-consistency.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded

from .generators import (
    ClassSpec,
    ControlledGenerator,
    ControlledRateMatrix,
    CompoundPoisson,
    LevyTriple,
    StableLike,
    derive_stream,
    sample_increment,
)
from .measures import (
    FiniteState,
    Grid1D,
    Measure,
    MeasurePath,
    Particles,
    TestDictionary,
    dual_norm_estimate,
    finite_state_dictionary,
    moment,
)

__all__ = [
    "KineticError",
    "KineticStepError",
    "PicardError",
    "KineticProblem",
    "PicardResult",
    "MomentPathReport",
    "solve_finite_state",
    "solve_mkv_particles",
    "picard_nonanticipating",
    "moment_path",
    "solve_grid1d",
    "GridTransportStepper",
]

NEGATIVE_CLAMP = 1e-12


class KineticError(ValueError):
    """Invalid kinetic problem data."""


class KineticStepError(RuntimeError):
    """Positivity or stability violated; the caller should reduce dt."""


class PicardError(RuntimeError):
    """Non-convergence of the Picard iteration; carries the residuals."""

    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = list(residuals)


@dataclass(frozen=True)
class KineticProblem:
    """One forward solve: dynamics, feedback policy, initial law, horizon."""

    generator: ControlledGenerator | ClassSpec
    mu0: Measure
    horizon: float
    dt: float
    policy: Callable | None = None

    def __post_init__(self):
        if self.horizon <= 0 or self.dt <= 0:
            raise KineticError("horizon and dt must be positive")
        n = round(self.horizon / self.dt)
        if n < 1 or abs(n * self.dt - self.horizon) > 1e-9 * max(1.0, self.horizon):
            raise KineticError("dt must divide the horizon")
        spec = self.generator.single() if isinstance(self.generator, ControlledGenerator) else self.generator
        object.__setattr__(self, "_spec", spec)

    @property
    def spec(self) -> ClassSpec:
        return self._spec

    @property
    def n_steps(self) -> int:
        return round(self.horizon / self.dt)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


def _policy_actions(policy, t, n_states, mu=None) -> np.ndarray:
    if policy is None:
        return np.zeros(n_states, dtype=int)
    out = np.empty(n_states, dtype=int)
    for i in range(n_states):
        out[i] = int(_call_policy(policy, t, i, mu))
    return out


def _call_policy(policy, t, x, mu=None):
    try:
        return policy(t, x, mu)
    except TypeError:
        return policy(t, x)


def _rate_generator_matrix(q: np.ndarray) -> np.ndarray:
    """Generator matrix: off-diagonal rates, diagonal minus row sums."""
    gen = q.copy()
    np.fill_diagonal(gen, 0.0)
    np.fill_diagonal(gen, -gen.sum(axis=1))
    return gen


def _rates_at(spec: ClassSpec, t, masses, base: FiniteState, policy, past=None) -> np.ndarray:
    mu = base.with_masses(masses, signed=True)
    rates = spec.rates
    if isinstance(rates, ControlledRateMatrix):
        actions = _policy_actions(policy, t, rates.n_states, mu)
        q = rates.matrix_for_policy(t, mu, actions)
    else:
        q = rates(t, mu)
    return q


def solve_finite_state(prob: KineticProblem, method: str = "rk4") -> MeasurePath:
    """Integrate the finite-state kinetic ODE; mass renormalized each step.

    Negative overshoot up to 1e-12 is clamped (one warning per solve);
    anything worse raises KineticStepError asking for a smaller dt.
    """
    spec = prob.spec
    if spec.rates is None:
        raise KineticError("finite-state solver needs a rate-matrix generator")
    if not isinstance(prob.mu0, FiniteState):
        raise KineticError("finite-state solver needs a FiniteState initial measure")
    if method not in ("rk4", "euler"):
        raise KineticError(f"unknown method {method!r}")

    dt = prob.dt
    base = prob.mu0
    mass0 = base.total_mass()
    m = base.masses.astype(float).copy()
    snaps = [base]
    warned = False

    def rhs(t, masses):
        q = _rates_at(spec, t, masses, base, prob.policy)
        if dt * float(q.sum(axis=1).max()) > 0.1 + 1e-9:
            # mirrors the thinning-regime guard of the particle system
            raise KineticStepError("dt * max rate exceeds 0.1; reduce dt")
        return _rate_generator_matrix(q).T @ masses

    for k in range(prob.n_steps):
        t = k * dt
        if method == "euler":
            m = m + dt * rhs(t, m)
        else:
            k1 = rhs(t, m)
            k2 = rhs(t + 0.5 * dt, m + 0.5 * dt * k1)
            k3 = rhs(t + 0.5 * dt, m + 0.5 * dt * k2)
            k4 = rhs(t + dt, m + dt * k3)
            m = m + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        neg = float(m.min())
        if neg < -NEGATIVE_CLAMP:
            raise KineticStepError(
                f"negative mass {neg:.3g} beyond clamp threshold; reduce dt"
            )
        if neg < 0:
            if not warned:
                warnings.warn("clamped negative mass overshoot <= 1e-12", RuntimeWarning)
                warned = True
            m = np.maximum(m, 0.0)
        m *= mass0 / m.sum()
        snaps.append(base.with_masses(m.copy()))
    return MeasurePath(prob.times, snaps)


def solve_mkv_particles(prob: KineticProblem, n_particles: int, seed: int, return_points: bool = False):
    """Self-consistent particle method: N coupled Euler chains, empirical feedback.

    Deterministic given the seed.  Initial particles are sampled from mu0
    (atoms replicated proportionally when mu0 is itself a particle cloud).
    """
    if n_particles < 2:
        raise KineticError("particle method needs N >= 2")
    spec = prob.spec
    if spec.triple is None:
        raise KineticError("particle solver needs a Levy-triple generator")
    rng = derive_stream(seed, 0, 0, 1)
    x = _sample_initial_points(prob.mu0, n_particles, rng)
    w = np.full(n_particles, 1.0 / n_particles)
    snaps = [Particles(x.copy(), w)]
    traj = [x.copy()] if return_points else None
    for k in range(prob.n_steps):
        t = k * prob.dt
        mu = snaps[-1]
        u = None
        if prob.policy is not None:
            u = _policy_values(prob.policy, t, x, mu)
        x = sample_increment(
            spec.triple, t, x, mu, prob.dt, rng,
            h=spec.control_drift if prob.policy is not None else None, u=u,
        )
        snaps.append(Particles(x.copy(), w))
        if return_points:
            traj.append(x.copy())
    path = MeasurePath(prob.times, snaps)
    if return_points:
        return path, np.array(traj)
    return path


def _policy_values(policy, t, x, mu):
    try:
        vals = policy(t, x, mu)
    except TypeError:
        vals = policy(t, x)
    return np.asarray(vals, dtype=float)


def _sample_initial_points(mu0: Measure, n: int, rng) -> np.ndarray:
    if isinstance(mu0, Particles):
        if mu0.dim != 1:
            idx = rng.choice(mu0.n_particles, size=n, p=mu0.weights / mu0.total_mass())
            return mu0.points[idx].copy()
        pts = mu0.points[:, 0]
        counts = _proportional_counts(mu0.weights / mu0.total_mass(), n)
        return np.repeat(pts, counts).astype(float)
    if isinstance(mu0, Grid1D):
        probs = mu0.density / mu0.density.sum()
        counts = _proportional_counts(probs, n)
        pts = []
        for j, c in enumerate(counts):
            if c > 0:
                offs = (np.arange(c) + 0.5) / c
                pts.append(mu0.xmin + (j + offs) * mu0.dx)
        return np.concatenate(pts)
    raise KineticError("particle solver needs a Particles or Grid1D initial measure")


def _proportional_counts(probs: np.ndarray, n: int) -> np.ndarray:
    """Largest-remainder allocation of n atoms to the given proportions."""
    raw = probs * n
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    if rem > 0:
        order = np.argsort(-(raw - counts))
        counts[order[:rem]] += 1
    return counts


# ---------------------------------------------------------------------------
# Grid transport stepper (forward, conservative)
# ---------------------------------------------------------------------------


class GridTransportStepper:
    """Operator-splitting forward stepper for 1-d grid densities.

    Upwind conservative advection, implicit diffusion, explicit atomic
    jumps; zero-flux boundaries.  The CFL guard dt <= 0.9 dx / max|b|
    raises rather than silently destabilizing.
    """

    def __init__(self, triple: LevyTriple, control_drift=None):
        if isinstance(triple.jumps, StableLike):
            raise KineticError("grid forward stepper supports atomic jumps only")
        self.triple = triple
        self.control_drift = control_drift

    def step(self, mu: Grid1D, t: float, dt: float, policy=None) -> Grid1D:
        rho = mu.density.copy()
        xs = mu.centers
        dx = mu.dx
        b = np.broadcast_to(np.asarray(self.triple.b_vector(t, xs, mu), dtype=float), xs.shape).copy()
        if policy is not None and self.control_drift is not None:
            u = _policy_values(policy, t, xs, mu)
            b = b + np.asarray(self.control_drift(t, xs, mu, u), dtype=float)
        jumps = self.triple.jumps
        lam = None
        if isinstance(jumps, CompoundPoisson):
            lam = np.broadcast_to(np.asarray(jumps.intensity(t, xs, mu), dtype=float), xs.shape)
            b = b - lam * float(jumps.compensator_drift(1)[0])

        cfl = 0.9 * dx / max(float(np.max(np.abs(b))), 1e-30)
        if dt > cfl:
            raise KineticStepError(f"CFL violated: dt={dt:.3g} > {cfl:.3g}; reduce dt")

        # conservative upwind advection
        bf = 0.5 * (b[:-1] + b[1:])
        flux = np.where(bf > 0, bf * rho[:-1], bf * rho[1:])
        rho = rho - (dt / dx) * (np.concatenate([flux, [0.0]]) - np.concatenate([[0.0], flux]))

        # implicit diffusion on w = G rho in conservative form
        g = np.broadcast_to(np.asarray(self.triple.g_scalar(t, xs, mu), dtype=float), xs.shape)
        if np.any(g > 0):
            rho = _implicit_diffusion(rho, g, dt, dx)

        # atomic jumps by interpolation shift
        if lam is not None:
            gain = np.zeros_like(rho)
            for y, p in jumps.atoms:
                shift = float(y[0])
                src = xs - shift
                lam_src = np.interp(src, xs, lam, left=0.0, right=0.0)
                rho_src = np.interp(src, xs, rho, left=0.0, right=0.0)
                gain += p * lam_src * rho_src
            rho = rho + dt * (gain - lam * rho)

        if float(rho.min()) < -NEGATIVE_CLAMP:
            raise KineticStepError("negative density beyond clamp threshold; reduce dt")
        rho = np.maximum(rho, 0.0)
        return mu.with_density(rho)


def _implicit_diffusion(rho: np.ndarray, g: np.ndarray, dt: float, dx: float) -> np.ndarray:
    """(I - dt D) rho_new = rho with D rho = 0.5 d^2(G rho)/dx^2, zero flux."""
    m = rho.size
    c = 0.5 * dt / dx**2
    ab = np.zeros((3, m))
    # row j: -c g_{j-1} rho_{j-1} + (1 + 2 c g_j) rho_j - c g_{j+1} rho_{j+1}
    ab[0, 1:] = -c * g[1:]
    ab[1, :] = 1.0 + 2.0 * c * g
    ab[2, :-1] = -c * g[:-1]
    # zero-flux boundaries: reflecting ghost cells
    ab[1, 0] = 1.0 + c * g[0]
    ab[1, -1] = 1.0 + c * g[-1]
    return solve_banded((1, 1), ab, rho)


def solve_grid1d(prob: KineticProblem) -> MeasurePath:
    """Self-consistent grid solve: coefficients see the current density."""
    spec = prob.spec
    if spec.triple is None:
        raise KineticError("grid solver needs a Levy-triple generator")
    if not isinstance(prob.mu0, Grid1D):
        raise KineticError("grid solver needs a Grid1D initial measure")
    stepper = GridTransportStepper(spec.triple, spec.control_drift)
    mu = prob.mu0
    snaps = [mu]
    for k in range(prob.n_steps):
        mu = stepper.step(mu, k * prob.dt, prob.dt, policy=prob.policy)
        snaps.append(mu)
    return MeasurePath(prob.times, snaps)


# ---------------------------------------------------------------------------
# Non-anticipating Picard scheme
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PicardResult:
    path: MeasurePath
    residuals: tuple
    n_iterations: int


class _PathInterpolant:
    """Linear-in-time interpolation of a stored mass-vector path."""

    def __init__(self, times, vectors):
        self.times = np.asarray(times, dtype=float)
        self.vectors = np.asarray(vectors, dtype=float)

    def at(self, t: float) -> np.ndarray:
        ts = self.times
        if t <= ts[0]:
            return self.vectors[0]
        if t >= ts[-1]:
            return self.vectors[-1]
        j = int(np.searchsorted(ts, t) - 1)
        w = (t - ts[j]) / (ts[j + 1] - ts[j])
        return (1 - w) * self.vectors[j] + w * self.vectors[j + 1]


def picard_nonanticipating(
    prob: KineticProblem,
    n_iter: int = 40,
    tol: float = 1e-10,
    dictionary: TestDictionary | None = None,
) -> PicardResult:
    """Iterate linear solves along the frozen previous path to a fixed point.

    Supports finite-state (and grid) representations where the linear
    propagator substep is deterministic.  The residual is the dictionary
    dual-norm surrogate, sup over the time grid.
    """
    if not isinstance(prob.mu0, FiniteState):
        raise KineticError("Picard scheme implemented for finite-state representation")
    spec = prob.spec
    if spec.rates is None:
        raise KineticError("Picard scheme needs a rate-matrix generator")
    base = prob.mu0
    k_states = base.n_states
    d = dictionary or finite_state_dictionary(k_states)
    times = prob.times
    dt = prob.dt
    mass0 = base.total_mass()

    prev = np.tile(base.masses, (len(times), 1))
    residuals: list[float] = []
    for it in range(1, n_iter + 1):
        frozen = _PathInterpolant(times, prev)

        def rhs(t, masses):
            q = _rates_at(spec, t, frozen.at(t), base, prob.policy)
            return _rate_generator_matrix(q).T @ masses

        m = base.masses.astype(float).copy()
        new = [m.copy()]
        for k in range(prob.n_steps):
            t = k * dt
            k1 = rhs(t, m)
            k2 = rhs(t + 0.5 * dt, m + 0.5 * dt * k1)
            k3 = rhs(t + 0.5 * dt, m + 0.5 * dt * k2)
            k4 = rhs(t + dt, m + dt * k3)
            m = m + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            m = np.maximum(m, 0.0)
            m *= mass0 / m.sum()
            new.append(m.copy())
        new = np.array(new)
        res = max(
            dual_norm_estimate(base.with_masses(a), base.with_masses(b), d)
            for a, b in zip(new, prev)
        )
        residuals.append(res)
        prev = new
        if res < tol:
            snaps = [base.with_masses(v) for v in new]
            return PicardResult(MeasurePath(times, snaps), tuple(residuals), it)
    raise PicardError(
        f"Picard iteration did not reach tol={tol:g} in {n_iter} iterations", residuals
    )


@dataclass(frozen=True)
class MomentPathReport:
    times: np.ndarray
    values: np.ndarray
    max_value: float
    order: float


def moment_path(path: MeasurePath, p: float) -> MomentPathReport:
    vals = np.array([moment(snap, p) for snap in path.snapshots])
    return MomentPathReport(path.times, vals, float(vals.max()), p)
