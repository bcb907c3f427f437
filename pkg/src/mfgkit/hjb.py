"""Backward mild-solution HJB solver.

The value function is built in integral form: propagate the terminal data
backward and Picard-iterate the map that adds the time integral of the
Hamiltonian of the current gradient, windowed in time so the measured
contraction ratio stays below one half.  Linear propagation is supplied by
interchangeable kernels (spectral heat / stable kernels on a 1-d grid,
matrix exponentials on finite state spaces, a split-scheme grid stepper
for measure-dependent coefficients).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm, solve_banded

from .generators import (
    Box,
    CompoundPoisson,
    ControlledRateMatrix,
    FiniteSet,
    LevyTriple,
)
from .measures import MeasurePath

__all__ = [
    "HJBError",
    "ContractionFailure",
    "GridGeometry",
    "FiniteGeometry",
    "HeatKernel",
    "StableKernel",
    "MatrixExponential",
    "IdentityPropagator",
    "GridStepper",
    "propagate_backward",
    "measure_smoothing",
    "HInfHamiltonian",
    "GenericHamiltonian",
    "JumpHamiltonian",
    "HamiltonianValue",
    "hamiltonian_eval",
    "ValueFunction",
    "MildSolution",
    "mild_solve",
    "Policy",
    "FeedbackPolicy",
    "ConstantPolicy",
    "HJBPolicy",
    "extract_policy",
]

THETA_MIN = 1e-8


class HJBError(ValueError):
    """Invalid HJB problem data."""


class ContractionFailure(RuntimeError):
    """Picard residuals stopped decreasing; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


# ---------------------------------------------------------------------------
# Geometries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridGeometry:
    xmin: float
    xmax: float
    n: int

    def __post_init__(self):
        if self.n < 4 or not self.xmax > self.xmin:
            raise HJBError("grid geometry needs n >= 4 cells and xmax > xmin")

    @property
    def dx(self) -> float:
        return (self.xmax - self.xmin) / self.n

    @property
    def centers(self) -> np.ndarray:
        return self.xmin + (np.arange(self.n) + 0.5) * self.dx

    def gradient(self, phi: np.ndarray) -> np.ndarray:
        """Second-order central differences, one-sided at the boundary."""
        g = np.empty_like(phi)
        dx = self.dx
        g[1:-1] = (phi[2:] - phi[:-2]) / (2 * dx)
        g[0] = (-3 * phi[0] + 4 * phi[1] - phi[2]) / (2 * dx)
        g[-1] = (3 * phi[-1] - 4 * phi[-2] + phi[-3]) / (2 * dx)
        return g


@dataclass(frozen=True)
class FiniteGeometry:
    n_states: int

    def __post_init__(self):
        if self.n_states < 1:
            raise HJBError("need at least one state")


# ---------------------------------------------------------------------------
# Linear propagators
# ---------------------------------------------------------------------------


class _SpectralKernel:
    """Fourier multiplier exp(-c tau |xi|^alpha) on an even-reflection padding.

    Constants map to constants exactly; boundary artifacts stay below the
    monitor threshold for data supported well inside the box.
    """

    def __init__(self, geometry: GridGeometry, alpha: float, scale):
        self.geometry = geometry
        self.alpha = float(alpha)
        self._scale = scale
        n = geometry.n
        self._xi = np.abs(np.fft.rfftfreq(2 * n, d=geometry.dx) * 2.0 * np.pi)

    def _rate(self, t, s) -> float:
        if callable(self._scale):
            # piecewise integration of a time-dependent rate
            grid = np.linspace(t, s, 33)
            return float(np.trapezoid([self._scale(tt) for tt in grid], grid))
        return float(self._scale) * (s - t)

    def apply(self, phi: np.ndarray, t: float, s: float) -> np.ndarray:
        if s == t:
            return phi.copy()
        ext = np.concatenate([phi, phi[::-1]])
        mult = np.exp(-self._rate(t, s) * self._xi**self.alpha)
        out = np.fft.irfft(np.fft.rfft(ext) * mult, n=2 * self.geometry.n)
        return out[: self.geometry.n]


class HeatKernel(_SpectralKernel):
    """Gaussian convolution with variance g_eff * (s - t)."""

    def __init__(self, geometry: GridGeometry, g_eff):
        g = g_eff if callable(g_eff) else float(g_eff)
        scale = (lambda tt: 0.5 * g(tt)) if callable(g) else 0.5 * g
        super().__init__(geometry, 2.0, scale)
        self.g_eff = g_eff


class StableKernel(_SpectralKernel):
    """Spectral fractional kernel exp(-(s-t) c |xi|^alpha), 0 < alpha < 2."""

    def __init__(self, geometry: GridGeometry, alpha: float, scale: float):
        if not 0.0 < alpha < 2.0:
            raise HJBError("stable kernel order must lie in (0, 2)")
        super().__init__(geometry, alpha, float(scale))


class MatrixExponential:
    """exp((s - t) Q) phi for the generator matrix built from a rate matrix."""

    def __init__(self, rates: np.ndarray | Callable):
        self._rates = rates
        self._cache: dict = {}
        if not callable(rates):
            q = np.asarray(rates, dtype=float)
            if q.ndim != 2 or q.shape[0] != q.shape[1]:
                raise HJBError("rate matrix must be square")
            off = q - np.diag(np.diag(q))
            if off.min() < 0:
                raise HJBError("negative jump rate")
            gen = off - np.diag(off.sum(axis=1))
            self._gen = gen
            self.geometry = FiniteGeometry(q.shape[0])
        else:
            self._gen = None
            self.geometry = None

    def generator_at(self, t: float) -> np.ndarray:
        if self._gen is not None:
            return self._gen
        q = np.asarray(self._rates(t), dtype=float)
        off = q - np.diag(np.diag(q))
        return off - np.diag(off.sum(axis=1))

    def apply(self, phi: np.ndarray, t: float, s: float) -> np.ndarray:
        if s == t:
            return np.asarray(phi, dtype=float).copy()
        if self._gen is not None:
            key = round(s - t, 15)
            if key not in self._cache:
                self._cache[key] = expm((s - t) * self._gen)
            return self._cache[key] @ phi
        # piecewise-constant stepping for time-dependent rates
        n_sub = max(1, int(np.ceil((s - t) / 0.05)))
        out = np.asarray(phi, dtype=float).copy()
        edges = np.linspace(t, s, n_sub + 1)
        for a, b in zip(edges[:-1], edges[1:]):
            out = expm((b - a) * self.generator_at(0.5 * (a + b))) @ out
        return out


class IdentityPropagator:
    """U^{t,s} = Id; the L = 0 degenerate case."""

    def __init__(self, geometry):
        self.geometry = geometry

    def apply(self, phi: np.ndarray, t: float, s: float) -> np.ndarray:
        return np.asarray(phi, dtype=float).copy()


class GridStepper:
    """Split-scheme backward propagation for measure-dependent coefficients.

    Semi-Lagrangian advection, implicit diffusion, explicit atomic jumps;
    unconditionally stable, first order in the substep.  The measure flow
    supplies mu_t for the coefficients.
    """

    def __init__(self, geometry: GridGeometry, triple: LevyTriple, flow: MeasurePath | None = None,
                 n_substeps: int = 1):
        from .generators import StableLike

        if isinstance(triple.jumps, StableLike):
            raise HJBError("grid stepper supports atomic jumps; use StableKernel instead")
        self.geometry = geometry
        self.triple = triple
        self.flow = flow
        self.n_substeps = max(1, int(n_substeps))

    def _mu(self, t):
        return self.flow.at(t) if self.flow is not None else None

    def apply(self, phi: np.ndarray, t: float, s: float) -> np.ndarray:
        if s == t:
            return phi.copy()
        out = np.asarray(phi, dtype=float).copy()
        geom = self.geometry
        xs = geom.centers
        n_sub = self.n_substeps
        tau = (s - t) / n_sub
        # backward propagation: integrate d phi / d tau = L phi from s down to t
        for j in range(n_sub):
            tt = s - j * tau
            mu = self._mu(tt)
            b = np.broadcast_to(np.asarray(self.triple.b_vector(tt, xs, mu), dtype=float), xs.shape).copy()
            lam = None
            jumps = self.triple.jumps
            if isinstance(jumps, CompoundPoisson):
                lam = np.broadcast_to(np.asarray(jumps.intensity(tt, xs, mu), dtype=float), xs.shape)
                b = b - lam * float(jumps.compensator_drift(1)[0])
            # semi-Lagrangian advection with edge clamp
            out = np.interp(xs + b * tau, xs, out, left=out[0], right=out[-1])
            g = np.broadcast_to(np.asarray(self.triple.g_scalar(tt, xs, mu), dtype=float), xs.shape)
            if np.any(g > 0):
                out = _implicit_function_diffusion(out, g, tau, geom.dx)
            if lam is not None:
                gain = np.zeros_like(out)
                for y, p in jumps.atoms:
                    gain += p * np.interp(xs + float(y[0]), xs, out, left=out[0], right=out[-1])
                out = out + tau * lam * (gain - out)
        return out


def _implicit_function_diffusion(phi: np.ndarray, g: np.ndarray, dt: float, dx: float) -> np.ndarray:
    """(I - dt * 0.5 G d^2/dx^2) phi_new = phi with Neumann ghosts."""
    m = phi.size
    c = 0.5 * dt / dx**2
    ab = np.zeros((3, m))
    ab[0, 1:] = -c * g[:-1]
    ab[1, :] = 1.0 + 2.0 * c * g
    ab[2, :-1] = -c * g[1:]
    ab[1, 0] = 1.0 + c * g[0]
    ab[1, -1] = 1.0 + c * g[-1]
    return solve_banded((1, 1), ab, phi)


def propagate_backward(propagator, phi: np.ndarray, t: float, s: float) -> np.ndarray:
    """U^{t,s} phi for t <= s."""
    if t > s:
        raise HJBError(f"backward propagation needs t <= s, got t={t} > s={s}")
    return propagator.apply(np.asarray(phi, dtype=float), t, s)


def measure_smoothing(propagator, taus, probes=None) -> list[tuple[float, float]]:
    """Empirical smoothing rate w(tau) = sup ||grad U^{t,t+tau} phi|| / ||phi||.

    Reported rather than assumed; meaningful for grid propagators.
    """
    geom = propagator.geometry
    if not isinstance(geom, GridGeometry):
        return []
    xs = geom.centers
    mid = 0.5 * (geom.xmin + geom.xmax)
    width = geom.xmax - geom.xmin
    if probes is None:
        probes = [
            np.tanh(8.0 * (xs - mid) / width),
            np.exp(-0.5 * ((xs - mid) / (0.1 * width)) ** 2),
            np.sign(np.sin(4.0 * np.pi * (xs - geom.xmin) / width)),
        ]
    out = []
    for tau in taus:
        w = 0.0
        for phi in probes:
            prop = propagate_backward(propagator, phi, 0.0, tau)
            w = max(w, float(np.max(np.abs(geom.gradient(prop)))) / float(np.max(np.abs(phi))))
        out.append((float(tau), w))
    return out


# ---------------------------------------------------------------------------
# Hamiltonians
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HamiltonianValue:
    value: float
    u_star: float | int
    boundary_warning: bool = False


def _coef(spec):
    from .generators import _as_coef

    return _as_coef(spec)


@dataclass(frozen=True)
class HInfHamiltonian:
    """Quadratic-in-control family: running cost alpha - theta u^2, drift beta u.

    Closed form: u* = beta p / (2 theta), H = alpha + beta^2 p^2 / (4 theta).
    """

    alpha: object = 0.0
    beta: object = 1.0
    theta: object = 0.5

    def __post_init__(self):
        object.__setattr__(self, "_a", _coef(self.alpha))
        object.__setattr__(self, "_b", _coef(self.beta))
        object.__setattr__(self, "_th", _coef(self.theta))

    def coefficients(self, t, x, mu):
        a = np.asarray(self._a(t, x, mu), dtype=float)
        b = np.asarray(self._b(t, x, mu), dtype=float)
        th = np.asarray(self._th(t, x, mu), dtype=float)
        if np.any(th <= THETA_MIN):
            raise HJBError("H-infinity family needs theta > 0")
        return a, b, th

    def eval(self, t, x, p, mu):
        a, b, th = self.coefficients(t, x, mu)
        p = np.asarray(p, dtype=float)
        u = b / (2.0 * th) * p
        return a + b**2 * p**2 / (4.0 * th), u

    def dp(self, t, x, p, mu):
        _, b, th = self.coefficients(t, x, mu)
        return b**2 * np.asarray(p, dtype=float) / (2.0 * th)

    def control_drift(self):
        """The matching h(t,x,mu,u) = beta u for the kinetic side."""
        from .generators import linear_drift_control

        return linear_drift_control(self._b)


@dataclass(frozen=True)
class GenericHamiltonian:
    """H(t,x,p,mu) = max_u [h(t,x,mu,u) p + J(t,x,mu,u)] by numeric search.

    Finite control sets are enumerated; boxes get a coarse scan plus
    golden-section refinement.  Ties break toward the smallest control.
    """

    h: Callable
    running_cost: Callable
    control_set: Box | FiniteSet
    scan_points: int = 33
    tol: float = 1e-9

    def objective(self, t, x, p, mu, u):
        return (
            np.asarray(self.h(t, x, mu, u), dtype=float) * np.asarray(p, dtype=float)
            + np.asarray(self.running_cost(t, x, mu, u), dtype=float)
        )

    def eval(self, t, x, p, mu):
        if isinstance(self.control_set, FiniteSet):
            us = np.asarray(self.control_set.values, dtype=float)
            vals = np.array([self.objective(t, x, p, mu, u) for u in us])
            best = float(vals.max())
            ties = us[vals >= best - 1e-12 * max(1.0, abs(best))]
            return best, float(ties.min())
        lo, hi = self.control_set.lo, self.control_set.hi
        us = np.linspace(lo, hi, self.scan_points)
        vals = np.array([self.objective(t, x, p, mu, u) for u in us])
        spread = float(vals.max() - vals.min())
        if spread <= 1e-12 * max(1.0, float(np.abs(vals).max())):
            return float(vals[0]), lo  # degenerate: constant in u
        j = int(np.argmax(vals))
        a = us[max(j - 1, 0)]
        b = us[min(j + 1, self.scan_points - 1)]
        u, v = _golden_max(lambda uu: self.objective(t, x, p, mu, uu), a, b, self.tol)
        return float(v), float(u)

    def dp(self, t, x, p, mu, h_fd=1e-5):
        vp, _ = self.eval(t, x, p + h_fd, mu)
        vm, _ = self.eval(t, x, p - h_fd, mu)
        return (vp - vm) / (2 * h_fd)


def _golden_max(f, a, b, tol):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    u = c if fc >= fd else d
    return u, max(fc, fd)


@dataclass(frozen=True)
class JumpHamiltonian:
    """Finite-state jump control: H_i(V) = max_a [J(t,i,mu,a) + sum_j q_a(i,j)(V_j - V_i)].

    ``p`` in the unified eval signature is the full value vector.
    """

    rates: ControlledRateMatrix
    running_cost: Callable  # J(t, i, mu, action)

    @property
    def n_actions(self) -> int:
        return self.rates.n_actions

    @property
    def n_states(self) -> int:
        return self.rates.n_states

    def q_values(self, t, values, mu) -> np.ndarray:
        """(K, n_actions) array of action values per state."""
        v = np.asarray(values, dtype=float)
        k = self.n_states
        out = np.empty((k, self.n_actions))
        for a in range(self.n_actions):
            q = self.rates.at(a)(t, mu)
            jump_gain = q @ v - q.sum(axis=1) * v
            for i in range(k):
                out[i, a] = float(self.running_cost(t, i, mu, a)) + float(jump_gain[i])
        return out

    def eval_state(self, t, i, values, mu):
        qv = self.q_values(t, values, mu)[int(i)]
        best = float(qv.max())
        # tie-break toward the smallest action index
        a_star = int(np.nonzero(qv >= best - 1e-12 * max(1.0, abs(best)))[0][0])
        return best, a_star

    def eval_all(self, t, values, mu):
        qv = self.q_values(t, values, mu)
        best = qv.max(axis=1)
        thresh = best - 1e-12 * np.maximum(1.0, np.abs(best))
        actions = np.argmax(qv >= thresh[:, None], axis=1)
        return best, actions.astype(int)


def hamiltonian_eval(hamiltonian, t, x, p, mu=None) -> HamiltonianValue:
    """Evaluate H and its maximizer; dispatches across the three families."""
    if isinstance(hamiltonian, HInfHamiltonian):
        v, u = hamiltonian.eval(t, x, p, mu)
        return HamiltonianValue(float(v), float(u))
    if isinstance(hamiltonian, GenericHamiltonian):
        v, u = hamiltonian.eval(t, x, p, mu)
        warn = False
        if isinstance(hamiltonian.control_set, Box):
            lo, hi = hamiltonian.control_set.lo, hamiltonian.control_set.hi
            warn = min(u - lo, hi - u) < 1e-6 * (hi - lo)
        return HamiltonianValue(float(v), u, warn)
    if isinstance(hamiltonian, JumpHamiltonian):
        v, a = hamiltonian.eval_state(t, int(x), p, mu)
        return HamiltonianValue(float(v), a)
    raise HJBError(f"unknown Hamiltonian type {type(hamiltonian).__name__}")


# ---------------------------------------------------------------------------
# Value functions and the mild solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValueFunction:
    times: np.ndarray
    geometry: GridGeometry | FiniteGeometry
    values: np.ndarray  # (nt, M)
    gradients: np.ndarray | None = None
    class_index: int = 0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", times)
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.shape[0] != times.size:
            raise HJBError("value table and time grid mismatch")
        if not np.all(np.isfinite(vals)):
            raise HJBError("non-finite values in the value function")
        if isinstance(self.geometry, GridGeometry) and self.gradients is None:
            grads = np.array([self.geometry.gradient(v) for v in vals])
            object.__setattr__(self, "gradients", grads)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def time_index(self, t: float) -> int:
        return int(np.clip(round((t - self.times[0]) / self.dt), 0, self.times.size - 1))

    def value_at(self, t: float, x):
        k = self.time_index(t)
        if isinstance(self.geometry, FiniteGeometry):
            return self.values[k][np.asarray(x, dtype=int)]
        return np.interp(np.asarray(x, dtype=float), self.geometry.centers, self.values[k])

    def grad_at(self, t: float, x):
        if not isinstance(self.geometry, GridGeometry):
            raise HJBError("gradients are defined on grid value functions only")
        k = self.time_index(t)
        return np.interp(np.asarray(x, dtype=float), self.geometry.centers, self.gradients[k])


@dataclass(frozen=True)
class MildSolution:
    value: ValueFunction
    residuals: tuple
    windows: tuple
    contraction_ratio: float
    smoothing_probe: tuple = ()
    boundary_max: float = 0.0


class _RetryWindow(Exception):
    pass


def mild_solve(
    hamiltonian,
    propagator,
    v_terminal: np.ndarray,
    times: np.ndarray,
    mu_flow: MeasurePath | None = None,
    tol: float = 1e-9,
    max_iter: int = 80,
    probe_smoothing: bool = False,
) -> MildSolution:
    """Picard-iterate the mild equation on adaptive time windows.

    The terminal slice is kept bitwise; a window is accepted once the
    sup-C1 residual falls below tol with the measured contraction ratio
    <= 0.5, halving the window otherwise.  Residuals that fail to decrease
    three times in a row raise ContractionFailure with diagnostics.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2:
        raise HJBError("need a time grid with at least two points")
    geom = propagator.geometry
    v_terminal = np.asarray(v_terminal, dtype=float)
    is_grid = isinstance(geom, GridGeometry)
    m = geom.n if is_grid else geom.n_states
    if v_terminal.shape != (m,):
        raise HJBError("terminal data does not match the geometry")

    nt = times.size
    n_windows = 1
    diag_windows: list = []
    while True:
        try:
            values, residuals, diag_windows, ratio = _solve_windows(
                hamiltonian, propagator, v_terminal, times, mu_flow, tol, max_iter, n_windows
            )
            break
        except _RetryWindow:
            n_windows *= 2
            if (nt - 1) / n_windows < 2:
                raise ContractionFailure(
                    "contraction not achieved even on two-step windows",
                    diagnostics=diag_windows,
                )

    values[-1] = v_terminal  # terminal condition exact, bitwise
    vf = ValueFunction(times, geom, values)
    probe = ()
    if probe_smoothing and is_grid:
        dt = float(times[1] - times[0])
        probe = tuple(measure_smoothing(propagator, [dt, 4 * dt]))
    boundary_max = 0.0
    if is_grid:
        boundary_max = float(max(np.max(np.abs(values[:, 0])), np.max(np.abs(values[:, -1]))))
    return MildSolution(vf, tuple(residuals), tuple(diag_windows), ratio, probe, boundary_max)


def _hamiltonian_slice(hamiltonian, t, geom, phi_slice, grad_slice, mu):
    if isinstance(hamiltonian, JumpHamiltonian):
        vals, _ = hamiltonian.eval_all(t, phi_slice, mu)
        return vals
    xs = geom.centers
    if isinstance(hamiltonian, HInfHamiltonian):
        vals, _ = hamiltonian.eval(t, xs, grad_slice, mu)
        return np.asarray(vals, dtype=float)
    vals = np.empty_like(phi_slice)
    for j, (x, p) in enumerate(zip(xs, grad_slice)):
        vals[j], _ = hamiltonian.eval(t, x, p, mu)
    return vals


def _solve_windows(hamiltonian, propagator, v_terminal, times, mu_flow, tol, max_iter, n_windows):
    nt = times.size
    geom = propagator.geometry
    is_grid = isinstance(geom, GridGeometry)
    edges = np.unique(np.linspace(0, nt - 1, n_windows + 1).astype(int))
    values = np.zeros((nt, v_terminal.size))
    values[-1] = v_terminal
    all_res: list[float] = []
    diagnostics = []
    worst_ratio = 0.0

    mu_at = (lambda t: mu_flow.at(t)) if mu_flow is not None else (lambda t: None)

    for a, b in zip(edges[-2::-1], edges[::-1]):
        # window [t_a, t_b]; terminal data = values[b]
        width = b - a
        term = values[b].copy()
        # initial guess: pure propagation
        phi = np.empty((width + 1, term.size))
        phi[-1] = term
        for k in range(width - 1, -1, -1):
            phi[k] = propagator.apply(phi[k + 1], times[a + k], times[a + k + 1])
        grads = None
        if is_grid:
            grads = np.array([geom.gradient(v) for v in phi])

        residuals: list[float] = []
        ratio = 0.0
        for it in range(max_iter):
            psi = _psi_apply(hamiltonian, propagator, term, times[a : b + 1], phi, grads, mu_at, geom)
            diff = psi - phi
            res = float(np.max(np.abs(diff)))
            if is_grid:
                gnew = np.array([geom.gradient(v) for v in psi])
                res += float(np.max(np.abs(gnew - grads)))
                grads = gnew
            residuals.append(res)
            phi = psi
            if res < tol:
                break
            if len(residuals) >= 2:
                ratio = residuals[-1] / max(residuals[-2], 1e-300)
                worst_ratio = max(worst_ratio, ratio)
                if ratio > 0.5 and len(residuals) == 2 and n_windows < nt:
                    raise _RetryWindow
            if len(residuals) >= 3 and residuals[-1] >= residuals[-2] >= residuals[-3] > tol:
                raise ContractionFailure(
                    f"residuals non-decreasing for 3 iterations in window [{times[a]:.4g}, {times[b]:.4g}]",
                    diagnostics=[(int(a), int(b), tuple(residuals))],
                )
        else:
            raise ContractionFailure(
                f"window [{times[a]:.4g}, {times[b]:.4g}] did not reach tol in {max_iter} iterations",
                diagnostics=[(int(a), int(b), tuple(residuals))],
            )
        values[a : b + 1] = phi
        all_res.extend(residuals)
        diagnostics.append((int(a), int(b), tuple(residuals)))
    return values, all_res, diagnostics, worst_ratio


def _psi_apply(hamiltonian, propagator, term, win_times, phi, grads, mu_at, geom):
    """One application of the mild map via the composed trapezoid recursion."""
    n = win_times.size
    psi = np.empty_like(phi)
    psi[-1] = term
    h_vals = np.empty_like(phi)
    for k in range(n):
        g = grads[k] if grads is not None else None
        h_vals[k] = _hamiltonian_slice(hamiltonian, win_times[k], geom, phi[k], g, mu_at(win_times[k]))
    for k in range(n - 2, -1, -1):
        dt = win_times[k + 1] - win_times[k]
        carried = psi[k + 1] + 0.5 * dt * h_vals[k + 1]
        psi[k] = propagator.apply(carried, win_times[k], win_times[k + 1]) + 0.5 * dt * h_vals[k]
    return psi


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


class Policy:
    """Feedback control (t, x) -> u; may consult the crowd measure."""

    def __call__(self, t, x, mu=None):  # pragma: no cover - interface
        raise NotImplementedError


class FeedbackPolicy(Policy):
    def __init__(self, fn: Callable, name: str = "feedback"):
        self.fn = fn
        self.name = name

    def __call__(self, t, x, mu=None):
        try:
            return self.fn(t, x, mu)
        except TypeError:
            return self.fn(t, x)


class ConstantPolicy(Policy):
    def __init__(self, u):
        self.u = u
        self.name = f"const[{u}]"

    def __call__(self, t, x, mu=None):
        if np.ndim(x):
            return np.full(np.shape(x)[0], self.u)
        return self.u


class HJBPolicy(Policy):
    """Argmax feedback induced by a solved value function and a measure flow."""

    def __init__(self, value: ValueFunction, hamiltonian, flow: MeasurePath | None = None):
        self.value = value
        self.hamiltonian = hamiltonian
        self.flow = flow
        self.name = "hjb"

    def _mu(self, t, mu):
        if self.flow is not None:
            return self.flow.at(t)
        return mu

    def __call__(self, t, x, mu=None):
        mu_t = self._mu(t, mu)
        h = self.hamiltonian
        if isinstance(h, JumpHamiltonian):
            k = self.value.time_index(t)
            _, actions = h.eval_all(t, self.value.values[k], mu_t)
            return actions[np.asarray(x, dtype=int)]
        p = self.value.grad_at(t, x)
        if isinstance(h, HInfHamiltonian):
            _, u = h.eval(t, np.asarray(x, dtype=float), p, mu_t)
            return u
        if np.ndim(x) == 0:
            return hamiltonian_eval(h, t, float(x), float(p), mu_t).u_star
        return np.array(
            [hamiltonian_eval(h, t, float(xi), float(pi), mu_t).u_star for xi, pi in zip(x, p)]
        )

    def as_table(self) -> np.ndarray:
        """(nt, M) table of controls on the value function's grid."""
        vf = self.value
        if isinstance(vf.geometry, FiniteGeometry):
            xs = np.arange(vf.geometry.n_states)
        else:
            xs = vf.geometry.centers
        return np.array([np.asarray(self(t, xs)) for t in vf.times])


def extract_policy(value: ValueFunction, hamiltonian, flow: MeasurePath | None = None) -> HJBPolicy:
    """Feedback control from the argmax at p = grad V (or the value vector)."""
    if flow is not None and len(flow) != value.times.size:
        raise HJBError("flow and value function must share the time grid")
    return HJBPolicy(value, hamiltonian, flow)
