"""Levy-Khintchine generator specs, evaluation, and one-step sampling.

A triple (G, b, nu) with measure dependence defines the uncontrolled part
of each agent's dynamics; control enters through an extra drift h(t,x,mu,u)
in continuous space, or through action-dependent jump rates on finite state
spaces.  Compensation of small jumps uses the open unit ball: jumps with
|y| = 1 are not compensated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.random import Generator, Philox

from .measures import Measure, MeasureError
from .registry import Coefficient, build_coefficient

__all__ = [
    "GeneratorError",
    "Box",
    "FiniteSet",
    "CompoundPoisson",
    "StableLike",
    "LevyTriple",
    "RateMatrix",
    "ControlledRateMatrix",
    "ClassSpec",
    "ControlledGenerator",
    "apply_generator",
    "sample_increment",
    "finite_rate_step",
    "derive_stream",
    "cms_stable",
    "linear_drift_control",
]

ALPHA_MIN = 0.05
ALPHA_MAX = 1.95
STABLE_R_MIN = 1e-3
STABLE_QUAD_NODES = 64


class GeneratorError(ValueError):
    """Invalid generator data (non-PSD diffusion, bad stable order, ...)."""


@dataclass(frozen=True)
class Box:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise GeneratorError("control box needs hi > lo")


@dataclass(frozen=True)
class FiniteSet:
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if len(self.values) == 0:
            raise GeneratorError("empty control set")


def _as_coef(spec) -> Callable:
    """Normalize float / Coefficient / callable into callable(t, x, mu)."""
    if spec is None:
        return lambda t, x, mu: np.zeros_like(np.asarray(x, dtype=float)) if np.ndim(x) else 0.0
    if isinstance(spec, Coefficient):
        return spec
    if isinstance(spec, (int, float)):
        c = float(spec)
        return lambda t, x, mu: c * np.ones_like(np.asarray(x, dtype=float)) if np.ndim(x) else c
    if callable(spec):
        return spec
    return build_coefficient(spec)


# ---------------------------------------------------------------------------
# Jump specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompoundPoisson:
    """Finite-activity atomic jump measure: intensity times a jump-size law.

    ``atoms`` is a sequence of (y, p) with probabilities p summing to 1;
    the intensity may depend on (t, x, mu).
    """

    rate: object
    atoms: tuple

    def __post_init__(self):
        atoms = tuple((np.atleast_1d(np.asarray(y, dtype=float)), float(p)) for y, p in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        probs = np.array([p for _, p in atoms])
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise GeneratorError("atom probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "_rate_fn", _as_coef(self.rate))

    def intensity(self, t, x, mu) -> float | np.ndarray:
        lam = self._rate_fn(t, x, mu)
        if np.any(np.asarray(lam) < 0):
            raise GeneratorError("compound-Poisson intensity must be nonnegative")
        return lam

    def compensator_drift(self, dim: int) -> np.ndarray:
        """integral of y over the open unit ball, per unit intensity."""
        drift = np.zeros(dim)
        for y, p in self.atoms:
            if np.linalg.norm(y) < 1.0:
                drift += p * y
        return drift


@dataclass(frozen=True)
class StableLike:
    """Stable-like jump density a(t,x,s) |y|^{-1-alpha(x,s)} up to radius cutoff.

    ``directions`` lists unit vectors s with spherical weights; alpha and
    scale may depend on the position and direction.  Simulation splits at
    r_min: jumps below it are replaced by a variance-matched Gaussian.
    """

    alpha: object
    scale: object
    cutoff: float = 1.0
    directions: tuple | None = None
    weights: tuple | None = None
    r_min: float = STABLE_R_MIN

    def __post_init__(self):
        if self.directions is None:
            object.__setattr__(self, "directions", ((1.0,), (-1.0,)))
        dirs = tuple(tuple(float(c) for c in np.atleast_1d(d)) for d in self.directions)
        object.__setattr__(self, "directions", dirs)
        if self.weights is None:
            object.__setattr__(self, "weights", tuple(1.0 for _ in dirs))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.weights) != len(dirs):
            raise GeneratorError("weights must match directions")
        if self.cutoff <= self.r_min:
            raise GeneratorError("cutoff must exceed r_min")

    def order(self, x, s) -> float:
        a = self.alpha(x, np.asarray(s)) if callable(self.alpha) else float(self.alpha)
        if not (ALPHA_MIN < a < ALPHA_MAX):
            raise GeneratorError(f"stable order {a} outside ({ALPHA_MIN}, {ALPHA_MAX})")
        return float(a)

    def amplitude(self, t, x, s) -> float:
        a = self.scale(t, x, np.asarray(s)) if callable(self.scale) else float(self.scale)
        if a < 0:
            raise GeneratorError("stable-like scale must be nonnegative")
        return float(a)


JumpSpec = CompoundPoisson | StableLike


@dataclass(frozen=True)
class LevyTriple:
    """(G, b, nu): diffusion, drift, jump spec; all measure-dependent."""

    diffusion: object = 0.0
    drift: object = 0.0
    jumps: JumpSpec | None = None
    dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "_g_fn", _as_coef(self.diffusion))
        object.__setattr__(self, "_b_fn", _as_coef(self.drift))

    def g_matrix(self, t, x, mu) -> np.ndarray:
        g = np.asarray(self._g_fn(t, x, mu), dtype=float)
        if self.dim == 1 and g.ndim == 0:
            g = g.reshape(1, 1)
        if g.ndim == 1:
            g = np.diag(g)
        if g.shape != (self.dim, self.dim):
            raise GeneratorError(f"diffusion matrix shape {g.shape} != ({self.dim},{self.dim})")
        if not np.allclose(g, g.T, atol=1e-12):
            raise GeneratorError("diffusion matrix must be symmetric")
        if np.min(np.linalg.eigvalsh(g)) < -1e-10:
            raise GeneratorError("diffusion matrix must be positive semidefinite")
        return g

    def g_scalar(self, t, x, mu):
        """Vectorized scalar diffusion for d=1 paths."""
        g = np.asarray(self._g_fn(t, x, mu), dtype=float)
        if np.any(g < 0):
            raise GeneratorError("diffusion must be nonnegative")
        return g

    def b_vector(self, t, x, mu):
        return np.asarray(self._b_fn(t, x, mu), dtype=float)


# ---------------------------------------------------------------------------
# Finite-state rate matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateMatrix:
    """K x K matrix of nonnegative off-diagonal rate coefficients."""

    coefficients: tuple  # (K,K) nested tuple of Coefficient-likes (diag ignored)

    def __post_init__(self):
        rows = tuple(tuple(_as_coef(c) for c in row) for row in self.coefficients)
        object.__setattr__(self, "_fns", rows)

    @property
    def n_states(self) -> int:
        return len(self._fns)

    def __call__(self, t, mu) -> np.ndarray:
        k = self.n_states
        q = np.zeros((k, k))
        for i in range(k):
            for j in range(k):
                if i == j:
                    continue
                q[i, j] = self._fns[i][j](t, float(i), mu)
        if np.min(q) < 0:
            raise GeneratorError("negative jump rate")
        return q

    def dmu(self, t, mu, v_states) -> np.ndarray:
        """(K, K, V) array of d q_ij / d mu(v)."""
        k, v = self.n_states, len(v_states)
        out = np.zeros((k, k, v))
        for i in range(k):
            for j in range(k):
                if i == j:
                    continue
                fn = self._fns[i][j]
                if isinstance(fn, Coefficient):
                    out[i, j] = fn.dmu(t, float(i), mu, v_states)
        return out

    def d2mu(self, t, mu, v_states, u_states) -> np.ndarray:
        k = self.n_states
        out = np.zeros((k, k, len(v_states), len(u_states)))
        for i in range(k):
            for j in range(k):
                if i == j:
                    continue
                fn = self._fns[i][j]
                if isinstance(fn, Coefficient):
                    out[i, j] = fn.d2mu(t, float(i), mu, v_states, u_states)
        return out


@dataclass(frozen=True)
class ControlledRateMatrix:
    """One RateMatrix per action from a finite action set."""

    per_action: tuple

    def __post_init__(self):
        mats = tuple(
            m if isinstance(m, RateMatrix) else RateMatrix(m) for m in self.per_action
        )
        object.__setattr__(self, "per_action", mats)
        if len({m.n_states for m in mats}) != 1:
            raise GeneratorError("all action rate matrices must share the state count")

    @property
    def n_actions(self) -> int:
        return len(self.per_action)

    @property
    def n_states(self) -> int:
        return self.per_action[0].n_states

    def at(self, action: int) -> RateMatrix:
        return self.per_action[int(action)]

    def matrix_for_policy(self, t, mu, actions_by_state) -> np.ndarray:
        """Row i taken from the matrix of the action used in state i."""
        k = self.n_states
        q = np.zeros((k, k))
        mats = [self.at(a)(t, mu) for a in range(self.n_actions)]
        for i in range(k):
            q[i] = mats[int(actions_by_state[i])][i]
        return q


# ---------------------------------------------------------------------------
# Controlled generator bundles
# ---------------------------------------------------------------------------


def linear_drift_control(beta) -> Callable:
    """h(t,x,mu,u) = beta(t,x,mu) * u, the drift family of the quadratic case."""
    beta_fn = _as_coef(beta)

    def h(t, x, mu, u):
        return np.asarray(beta_fn(t, x, mu), dtype=float) * np.asarray(u, dtype=float)

    return h


@dataclass(frozen=True)
class ClassSpec:
    """Dynamics of one agent class: either continuous-space or finite-state."""

    triple: LevyTriple | None = None
    rates: RateMatrix | ControlledRateMatrix | None = None
    control_drift: Callable | None = None  # h(t, x, mu, u)
    control_set: Box | FiniteSet | None = None

    def __post_init__(self):
        if (self.triple is None) == (self.rates is None):
            raise GeneratorError("exactly one of triple / rates must be given")


@dataclass(frozen=True)
class ControlledGenerator:
    classes: tuple

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(self.classes) < 1:
            raise GeneratorError("need at least one agent class")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def single(self) -> ClassSpec:
        if len(self.classes) != 1:
            raise GeneratorError("generator has several classes; pick one explicitly")
        return self.classes[0]


# ---------------------------------------------------------------------------
# Generator application
# ---------------------------------------------------------------------------


def _f_derivatives(f, x, fd_step):
    """(value fn, gradient, Hessian) with analytic derivatives when present."""
    from .measures import TestFunction

    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = x.size

    def value(pt):
        pt = np.asarray(pt, dtype=float)
        if d == 1:
            return float(np.asarray(f(pt.reshape(1)))[0])
        return float(np.asarray(f(pt.reshape(1, d)))[0])

    if isinstance(f, TestFunction) and f.d1 is not None and d == 1:
        grad = np.array([float(np.asarray(f.d1(x))[0])])
        hess = np.array([[float(np.asarray(f.d2(x))[0])]]) if f.d2 is not None else None
    else:
        grad = np.zeros(d)
        hess = np.zeros((d, d))
        h = fd_step
        f0 = value(x)
        for i in range(d):
            e = np.zeros(d)
            e[i] = h
            fp, fm = value(x + e), value(x - e)
            grad[i] = (fp - fm) / (2 * h)
            hess[i, i] = (fp - 2 * f0 + fm) / h**2
        for i in range(d):
            for j in range(i + 1, d):
                ei = np.zeros(d)
                ej = np.zeros(d)
                ei[i] = h
                ej[j] = h
                hess[i, j] = hess[j, i] = (
                    value(x + ei + ej) - value(x + ei - ej) - value(x - ei + ej) + value(x - ei - ej)
                ) / (4 * h**2)
    if hess is None:
        h = fd_step
        f0 = value(x)
        hess = np.array([[(value(x + h) - 2 * f0 + value(x - h)) / h**2]])
    return value, grad, hess


def apply_generator(triple: LevyTriple, f, t, x, mu, h=None, u=None, fd_step=1e-5) -> float:
    """Evaluate (A f)(x) for the Levy-Khintchine triple plus optional h(u) drift.

    The jump integral uses exact atom sums for compound-Poisson laws and a
    64-node log-radial quadrature per direction for stable-like laws, with
    the sub-r_min remainder added analytically through the Hessian.
    """
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    d = x_arr.size
    if d != triple.dim:
        raise GeneratorError(f"point dimension {d} != generator dimension {triple.dim}")
    value, grad, hess = _f_derivatives(f, x_arr, fd_step)

    g = triple.g_matrix(t, x if d > 1 else float(x_arr[0]), mu)
    total = 0.5 * float(np.sum(g * hess))

    b = np.atleast_1d(triple.b_vector(t, x if d > 1 else float(x_arr[0]), mu))
    drift = b.copy()
    if h is not None:
        drift = drift + np.atleast_1d(np.asarray(h(t, x if d > 1 else float(x_arr[0]), mu, u), dtype=float))
    total += float(np.dot(drift, grad))

    jumps = triple.jumps
    if isinstance(jumps, CompoundPoisson):
        lam = float(jumps.intensity(t, x if d > 1 else float(x_arr[0]), mu))
        acc = 0.0
        f0 = value(x_arr)
        for y, p in jumps.atoms:
            comp = float(np.dot(grad, y)) if np.linalg.norm(y) < 1.0 else 0.0
            acc += p * (value(x_arr + y) - f0 - comp)
        total += lam * acc
    elif isinstance(jumps, StableLike):
        total += _stable_generator_term(jumps, value, grad, hess, t, x_arr, mu)
    return total


def _stable_generator_term(spec: StableLike, value, grad, hess, t, x_arr, mu) -> float:
    d = x_arr.size
    f0 = value(x_arr)
    xq = float(x_arr[0]) if d == 1 else x_arr
    total = 0.0
    log_r = np.linspace(math.log(spec.r_min), math.log(spec.cutoff), STABLE_QUAD_NODES)
    radii = np.exp(log_r)
    for s_t, w in zip(spec.directions, spec.weights):
        s = np.asarray(s_t, dtype=float)
        if s.size != d:
            raise GeneratorError("direction dimension mismatch")
        alpha = spec.order(xq, s)
        amp = spec.amplitude(t, xq, s)
        if amp == 0.0 or w == 0.0:
            continue
        sg = float(np.dot(grad, s))
        vals = np.empty_like(radii)
        for k, r in enumerate(radii):
            comp = r * sg if r < 1.0 else 0.0
            vals[k] = value(x_arr + r * s) - f0 - comp
        integrand = vals * amp * radii**(-1.0 - alpha) * radii  # extra r from log substitution
        total += w * float(np.trapezoid(integrand, log_r))
        # analytic sub-r_min remainder through the Hessian
        s_hess_s = float(s @ hess @ s)
        total += w * 0.5 * amp * s_hess_s * spec.r_min ** (2.0 - alpha) / (2.0 - alpha)
    return total


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def derive_stream(master_seed: int, a: int = 0, b: int = 0, c: int = 0) -> Generator:
    """Counter-based stream: distinct (a, b, c) never overlap for < 2^64 draws."""
    mask = (1 << 64) - 1
    return Generator(Philox(key=master_seed & mask, counter=[0, a & mask, b & mask, c & mask]))


def cms_stable(alpha: float, rng: Generator, size=None) -> np.ndarray:
    """Chambers-Mallows-Stuck draw of a standard symmetric alpha-stable law."""
    if not (ALPHA_MIN < alpha < 2.0):
        raise GeneratorError(f"stable order {alpha} outside ({ALPHA_MIN}, 2)")
    u = rng.uniform(-np.pi / 2, np.pi / 2, size=size)
    w = rng.exponential(1.0, size=size)
    if abs(alpha - 1.0) < 1e-12:
        return np.tan(u)
    return (
        np.sin(alpha * u)
        / np.cos(u) ** (1.0 / alpha)
        * (np.cos(u - alpha * u) / w) ** ((1.0 - alpha) / alpha)
    )


def sample_increment(triple: LevyTriple, t, x, mu, dt: float, rng: Generator, h=None, u=None):
    """One Euler step increment endpoint x' for the given triple.

    Vectorized over a 1-d array of positions.  Stable-like jumps use the
    compound-Poisson decomposition above r_min (power-law radii by inverse
    CDF, truncated at the cutoff) plus a matched-variance Gaussian below;
    unit-ball compensator drift is subtracted so the generator matches
    `apply_generator` exactly in the small-dt limit.
    """
    if dt <= 0:
        raise GeneratorError("dt must be positive")
    if triple.dim != 1:
        return _sample_increment_nd(triple, t, x, mu, dt, rng, h, u)
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    scalar = np.ndim(x) == 0

    drift = np.broadcast_to(np.asarray(triple.b_vector(t, x_arr, mu), dtype=float), x_arr.shape).copy()
    if h is not None:
        drift = drift + np.asarray(h(t, x_arr, mu, u), dtype=float)
    g = np.broadcast_to(np.asarray(triple.g_scalar(t, x_arr, mu), dtype=float), x_arr.shape)

    out = x_arr + drift * dt
    if np.any(g > 0):
        out = out + np.sqrt(g * dt) * rng.standard_normal(x_arr.shape)

    jumps = triple.jumps
    if isinstance(jumps, CompoundPoisson):
        lam = np.broadcast_to(
            np.asarray(jumps.intensity(t, x_arr, mu), dtype=float), x_arr.shape
        )
        counts = rng.poisson(lam * dt)
        idx = np.nonzero(counts)[0]
        if idx.size:
            ys = np.array([float(y[0]) for y, _ in jumps.atoms])
            ps = np.array([p for _, p in jumps.atoms])
            for i in idx:
                picks = rng.choice(ys.size, size=counts[i], p=ps)
                out[i] += ys[picks].sum()
        out = out - dt * lam * float(jumps.compensator_drift(1)[0])
    elif isinstance(jumps, StableLike):
        out = _stable_jumps_1d(jumps, t, x_arr, mu, dt, rng, out)
    return float(out[0]) if scalar else out


def _stable_exact_intensity(alpha: float, r_min: float, cutoff: float) -> float:
    return (r_min**-alpha - cutoff**-alpha) / alpha


def _stable_radius_invcdf(uq, alpha, r_min, cutoff):
    lo = r_min**-alpha
    hi = cutoff**-alpha
    return (lo - uq * (lo - hi)) ** (-1.0 / alpha)


def _stable_jumps_1d(spec: StableLike, t, x_arr, mu, dt, rng, out):
    xq = x_arr  # per-particle coefficients evaluated at current positions
    small_var = np.zeros_like(x_arr)
    comp_drift = np.zeros_like(x_arr)
    for s_t, w in zip(spec.directions, spec.weights):
        s = float(np.asarray(s_t)[0])
        alphas = np.array([spec.order(float(xi), np.array([s])) for xi in xq])
        amps = np.array([spec.amplitude(t, float(xi), np.array([s])) for xi in xq])
        lam_big = w * amps * (spec.r_min**-alphas - spec.cutoff**-alphas) / alphas
        counts = rng.poisson(lam_big * dt)
        idx = np.nonzero(counts)[0]
        for i in idx:
            uq = rng.random(counts[i])
            radii = _stable_radius_invcdf(uq, alphas[i], spec.r_min, spec.cutoff)
            out[i] += s * radii.sum()
        # matched-variance Gaussian for sub-r_min jumps
        small_var += w * amps * s * s * spec.r_min ** (2.0 - alphas) / (2.0 - alphas)
        # unit-ball compensator for r in [r_min, 1)
        upper = min(1.0, spec.cutoff)
        if upper > spec.r_min:
            with np.errstate(divide="ignore"):
                m1 = np.where(
                    np.abs(alphas - 1.0) < 1e-12,
                    math.log(upper / spec.r_min),
                    (upper ** (1.0 - alphas) - spec.r_min ** (1.0 - alphas)) / (1.0 - alphas),
                )
            comp_drift += w * amps * s * m1
    out = out + np.sqrt(small_var * dt) * rng.standard_normal(x_arr.shape)
    out = out - dt * comp_drift
    return out


def _sample_increment_nd(triple, t, x, mu, dt, rng, h, u):
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 1
    pts = x_arr[None, :] if single else x_arr
    out = np.empty_like(pts)
    for i, pt in enumerate(pts):
        drift = np.atleast_1d(triple.b_vector(t, pt, mu)).astype(float)
        if h is not None:
            drift = drift + np.atleast_1d(np.asarray(h(t, pt, mu, u), dtype=float))
        g = triple.g_matrix(t, pt, mu)
        step = pt + drift * dt
        if np.any(np.diag(g) > 0):
            step = step + np.linalg.cholesky(g * dt + 1e-18 * np.eye(triple.dim)) @ rng.standard_normal(triple.dim)
        jumps = triple.jumps
        if isinstance(jumps, CompoundPoisson):
            lam = float(jumps.intensity(t, pt, mu))
            n = rng.poisson(lam * dt)
            ps = np.array([p for _, p in jumps.atoms])
            for _ in range(n):
                k = rng.choice(len(jumps.atoms), p=ps)
                step = step + jumps.atoms[k][0]
            step = step - dt * lam * jumps.compensator_drift(triple.dim)
        elif isinstance(jumps, StableLike):
            raise GeneratorError("stable-like sampling implemented for d=1 paths")
        out[i] = step
    return out[0] if single else out


def finite_rate_step(rates, i: int, dt: float, rng: Generator, mode: str = "thinning") -> int:
    """One jump step of a finite-state chain from state i.

    ``rates`` is a row function state -> (K,) vector q(state -> .), a full
    (K, K) matrix, or a single (K,) row for state i; diagonals are ignored.
    Thinning mode requires dt * total_rate <= 0.1 and realizes each jump
    with probability q_ij dt; exact mode runs competing exponential clocks
    within the step (rates frozen per visited state).
    """
    if dt <= 0:
        raise GeneratorError("dt must be positive")

    if callable(rates):
        row_of = lambda s: np.asarray(rates(s), dtype=float)  # noqa: E731
    else:
        arr = np.asarray(rates, dtype=float)
        if arr.ndim == 2:
            row_of = lambda s: arr[s]  # noqa: E731
        else:
            if mode == "exact":
                raise GeneratorError("exact mode needs a row function or full matrix")
            row_of = lambda s: arr  # noqa: E731

    def clean_row(state):
        row = row_of(state).copy()
        if np.min(row) < 0:
            raise GeneratorError("negative rate")
        row[state] = 0.0
        return row

    if mode == "thinning":
        row = clean_row(i)
        total = float(row.sum())
        if total == 0.0:
            return i
        if dt * total > 0.1 + 1e-12:
            raise GeneratorError(
                f"thinning regime violated: dt*rate = {dt * total:.3g} > 0.1; reduce dt or use exact mode"
            )
        u = rng.random()
        cum = np.cumsum(row * dt)
        if u < cum[-1]:
            return int(np.searchsorted(cum, u, side="right"))
        return i
    if mode == "exact":
        state = i
        remaining = dt
        while True:
            row = clean_row(state)
            total = float(row.sum())
            if total == 0.0:
                return state
            tau = rng.exponential(1.0 / total)
            if tau > remaining:
                return state
            remaining -= tau
            state = int(rng.choice(row.size, p=row / total))
    raise GeneratorError(f"unknown mode {mode!r}")
