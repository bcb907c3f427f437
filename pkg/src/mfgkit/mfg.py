"""The mean-field-game consistency fixed point.

Alternates the backward mild HJB solve with the forward kinetic solve,
damping the measure-flow update, until the flow assumed by the feedback
equals the flow that feedback produces.  Several starts surface distinct
fixed points when they exist; nothing here asserts uniqueness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .generators import ClassSpec, ControlledGenerator, ControlledRateMatrix, derive_stream
from .hjb import (
    FiniteGeometry,
    GridGeometry,
    HInfHamiltonian,
    HJBError,
    HJBPolicy,
    IdentityPropagator,
    JumpHamiltonian,
    ConstantPolicy,
    extract_policy,
    mild_solve,
)
from .kinetic import KineticProblem, solve_finite_state, solve_grid1d
from .measures import (
    FiniteState,
    Grid1D,
    Measure,
    MeasurePath,
    TestDictionary,
    default_dictionary,
    dual_norm_estimate,
    finite_state_dictionary,
)
from .nparticle import PayoffSpec, tangent_payoff_finite, tangent_payoff_particles

__all__ = [
    "MFGError",
    "MFGProblem",
    "MFGSolution",
    "solve_mfg",
    "best_response_gap_on_flow",
    "feedback_lipschitz_estimate",
    "make_perturbed_flow",
]


class MFGError(RuntimeError):
    """No start converged; carries the best residual history."""

    def __init__(self, message, residual_histories=()):
        super().__init__(message)
        self.residual_histories = list(residual_histories)


@dataclass(frozen=True)
class MFGProblem:
    """One game: dynamics, per-class Hamiltonians, payoffs, discretization.

    ``propagators`` supply the uncontrolled linear part for each class's
    HJB solve (identity for pure-jump finite-state games, a heat/stable
    kernel or grid stepper otherwise).  For finite-state games the
    Hamiltonian carries the controlled rates themselves.
    """

    generator: ControlledGenerator
    hamiltonians: tuple
    terminals: tuple
    mu0s: tuple
    horizon: float
    dt: float
    propagators: tuple
    payoffs: tuple = ()
    damping: float = 0.5
    tol: float = 1e-6
    max_iter: int = 60
    n_starts: int = 5
    hjb_tol: float | None = None

    def __post_init__(self):
        k = self.generator.n_classes
        for name in ("hamiltonians", "terminals", "mu0s", "propagators"):
            val = getattr(self, name)
            object.__setattr__(self, name, tuple(val))
            if len(getattr(self, name)) != k:
                raise MFGError(f"{name} must have one entry per agent class")
        if not 0.0 < self.damping <= 1.0:
            raise MFGError("damping must lie in (0, 1]")
        if self.payoffs:
            object.__setattr__(self, "payoffs", tuple(self.payoffs))
        n = round(self.horizon / self.dt)
        if n < 1 or abs(n * self.dt - self.horizon) > 1e-9 * max(1.0, self.horizon):
            raise MFGError("dt must divide the horizon")

    @property
    def n_classes(self) -> int:
        return self.generator.n_classes

    @property
    def times(self) -> np.ndarray:
        return np.arange(round(self.horizon / self.dt) + 1) * self.dt


@dataclass(frozen=True)
class MFGSolution:
    flows: tuple  # MeasurePath per class
    values: tuple  # ValueFunction per class
    policies: tuple  # HJBPolicy per class
    residual_history: tuple
    start_index: int
    converged: bool
    fixed_point_residual: float = float("nan")

    @property
    def iterations(self) -> int:
        return max(len(self.residual_history) - 1, 1)

    @property
    def flow(self) -> MeasurePath:
        return self.flows[0]

    @property
    def policy(self):
        return self.policies[0]

    @property
    def value(self):
        return self.values[0]


def _dictionary_for(mu0: Measure) -> TestDictionary:
    if isinstance(mu0, FiniteState):
        return finite_state_dictionary(mu0.n_states)
    return default_dictionary()


def _forward_solve(prob: MFGProblem, class_idx: int, policy) -> MeasurePath:
    spec = prob.generator.classes[class_idx]
    kp = KineticProblem(
        ControlledGenerator((spec,)), prob.mu0s[class_idx], prob.horizon, prob.dt, policy
    )
    if spec.rates is not None:
        return solve_finite_state(kp)
    if isinstance(prob.mu0s[class_idx], Grid1D):
        return solve_grid1d(kp)
    raise MFGError("MFG forward solves need finite-state or grid measures")


def _backward_solve(prob: MFGProblem, class_idx: int, flow: MeasurePath):
    sol = mild_solve(
        prob.hamiltonians[class_idx],
        prob.propagators[class_idx],
        np.asarray(prob.terminals[class_idx], dtype=float),
        prob.times,
        mu_flow=flow,
        tol=prob.hjb_tol if prob.hjb_tol is not None else min(prob.tol * 1e-2, 1e-8),
    )
    return sol.value


def _baseline_policy(prob: MFGProblem, class_idx: int, start: int):
    h = prob.hamiltonians[class_idx]
    if isinstance(h, JumpHamiltonian):
        return ConstantPolicy(start % h.n_actions)
    spread = (0.0, 0.5, -0.5, 1.0, -1.0)
    return ConstantPolicy(spread[start % len(spread)])


def _damp_paths(old: MeasurePath, new: MeasurePath, rho: float) -> MeasurePath:
    if rho >= 1.0:
        return new
    snaps = []
    for a, b in zip(old.snapshots, new.snapshots):
        if isinstance(a, FiniteState):
            snaps.append(a.with_masses((1 - rho) * a.masses + rho * b.masses))
        else:
            snaps.append(a.with_density((1 - rho) * a.density + rho * b.density))
    return MeasurePath(old.times, snaps)


def _flow_distance(a: MeasurePath, b: MeasurePath, dictionary: TestDictionary) -> float:
    return max(
        dual_norm_estimate(x, y, dictionary) for x, y in zip(a.snapshots, b.snapshots)
    )


def solve_mfg(prob: MFGProblem) -> list[MFGSolution]:
    """Damped fixed-point iteration over measure flows, multi-start.

    Each start initializes the flow with a different constant-control
    kinetic solve, then alternates backward HJB / policy extraction /
    forward kinetic steps with damping until the fixed-point residual
    sup_t ||K(Gamma(flow)) - flow|| drops below tol.  Distinct converged
    flows (pairwise distance > 10 tol) are all returned.
    """
    dictionaries = [_dictionary_for(mu0) for mu0 in prob.mu0s]
    solutions: list[MFGSolution] = []
    histories = []
    for start in range(prob.n_starts):
        flows = [
            _forward_solve(prob, ci, _baseline_policy(prob, ci, start))
            for ci in range(prob.n_classes)
        ]
        prev_new = None
        residuals: list[float] = []
        converged = False
        values = policies = None
        fp_res = float("nan")
        for _ in range(prob.max_iter):
            values = tuple(_backward_solve(prob, ci, flows[ci]) for ci in range(prob.n_classes))
            policies = tuple(
                extract_policy(values[ci], prob.hamiltonians[ci], flows[ci])
                for ci in range(prob.n_classes)
            )
            new_flows = [_forward_solve(prob, ci, policies[ci]) for ci in range(prob.n_classes)]
            compare = prev_new if prev_new is not None else flows
            res = max(
                _flow_distance(new_flows[ci], compare[ci], dictionaries[ci])
                for ci in range(prob.n_classes)
            )
            residuals.append(res)
            if res < prob.tol:
                # verification pass: the returned triple is self-consistent
                values = tuple(
                    _backward_solve(prob, ci, new_flows[ci]) for ci in range(prob.n_classes)
                )
                policies = tuple(
                    extract_policy(values[ci], prob.hamiltonians[ci], new_flows[ci])
                    for ci in range(prob.n_classes)
                )
                check = [_forward_solve(prob, ci, policies[ci]) for ci in range(prob.n_classes)]
                fp_res = max(
                    _flow_distance(check[ci], new_flows[ci], dictionaries[ci])
                    for ci in range(prob.n_classes)
                )
                if fp_res < prob.tol:
                    flows = new_flows
                    converged = True
                    break
                # not yet a fixed point: keep iterating from the check flow
                prev_new = check
                flows = check
                continue
            prev_new = new_flows
            flows = [
                _damp_paths(flows[ci], new_flows[ci], prob.damping)
                for ci in range(prob.n_classes)
            ]
        histories.append(tuple(residuals))
        if converged:
            solutions.append(
                MFGSolution(
                    tuple(flows), values, policies, tuple(residuals), start, True, fp_res
                )
            )
    if not solutions:
        raise MFGError("no start converged", histories)

    # deduplicate by flow distance
    distinct: list[MFGSolution] = []
    for sol in solutions:
        dup = False
        for kept in distinct:
            d = max(
                _flow_distance(sol.flows[ci], kept.flows[ci], dictionaries[ci])
                for ci in range(prob.n_classes)
            )
            if d <= 10.0 * prob.tol:
                dup = True
                break
        if not dup:
            distinct.append(sol)
    return distinct


# ---------------------------------------------------------------------------
# Diagnostics on a solved game
# ---------------------------------------------------------------------------


def best_response_gap_on_flow(
    prob: MFGProblem,
    sol: MFGSolution,
    candidates: Sequence,
    n_rep: int = 20_000,
    seed: int = 0,
    class_idx: int = 0,
) -> dict:
    """max over candidates of payoff(candidate) - payoff(Gamma), flow frozen.

    Payoffs come from the tangent-process simulation with matched seeds
    (common random numbers), so the gap of Gamma against itself is exactly
    zero and optimality shows as gap <= Monte-Carlo tolerance.
    """
    if not prob.payoffs:
        raise MFGError("problem carries no payoff specification")
    spec = prob.generator.classes[class_idx]
    flow = sol.flows[class_idx]
    payoff_spec = prob.payoffs[class_idx]
    base = _tangent_payoffs(prob, spec, sol.policies[class_idx], flow, payoff_spec, n_rep, seed, class_idx)
    gaps = {}
    for cand in candidates:
        vals = _tangent_payoffs(prob, spec, cand, flow, payoff_spec, n_rep, seed, class_idx)
        diffs = vals - base
        name = getattr(cand, "name", type(cand).__name__)
        gaps[name] = (float(diffs.mean()), float(diffs.std(ddof=1) / np.sqrt(n_rep)))
    best = max(gaps.values(), key=lambda g: g[0])
    return {"gaps": gaps, "max_gap": best[0], "max_gap_stderr": best[1]}


def _tangent_payoffs(prob, spec, policy, flow, payoff_spec, n_rep, seed, class_idx):
    if spec.rates is not None:
        return tangent_payoff_finite(
            spec.rates, policy, flow, payoff_spec, prob.mu0s[class_idx], n_rep, seed
        )
    mu0 = prob.mu0s[class_idx]
    if isinstance(mu0, Grid1D):
        from .kinetic import _sample_initial_points

        pts = _sample_initial_points(mu0, min(n_rep, 512), derive_stream(seed, 3, 1, 7))
    else:
        pts = mu0.points[:, 0]
    running = payoff_spec.running if callable(payoff_spec.running) else None
    if running is None:
        raise MFGError("continuous-space gap needs a callable running payoff")
    terminal = payoff_spec.terminal if callable(payoff_spec.terminal) else (
        lambda x: np.zeros_like(np.asarray(x, dtype=float))
    )
    return tangent_payoff_particles(
        spec.triple, spec.control_drift, policy, flow, running, terminal, pts, n_rep, seed
    )


def make_perturbed_flow(flow: MeasurePath, scale: float, seed: int) -> MeasurePath:
    """A nearby admissible flow: mass vectors tilted by a smooth bump."""
    rng = derive_stream(seed, 5, 11, 13)
    snaps = []
    for k, snap in enumerate(flow.snapshots):
        if isinstance(snap, FiniteState):
            tilt = rng.normal(size=snap.n_states)
            m = snap.masses * (1.0 + scale * (tilt - tilt.mean()))
            m = np.maximum(m, 1e-12)
            snaps.append(snap.with_masses(m * (snap.total_mass() / m.sum())))
        else:
            tilt = rng.normal(size=3)
            xs = snap.centers
            bump = 1.0 + scale * (
                tilt[0] * np.sin(np.pi * (xs - xs[0]) / (xs[-1] - xs[0]))
                + tilt[1] * np.cos(np.pi * (xs - xs[0]) / (xs[-1] - xs[0]))
            )
            rho = np.maximum(snap.density * bump, 0.0)
            snaps.append(snap.with_density(rho * (snap.total_mass() / (rho.sum() * snap.dx))))
    return MeasurePath(flow.times, snaps)


def feedback_lipschitz_estimate(
    prob: MFGProblem,
    flow_pairs: Sequence[tuple],
    class_idx: int = 0,
    dictionary: TestDictionary | None = None,
) -> float:
    """k1 = sup ||Gamma[eta] - Gamma[xi]|| / sup_s ||eta_s - xi_s|| over pairs.

    Pairs closer than 1e-10 in the flow norm are excluded from the ratio.
    """
    if len(flow_pairs) < 1:
        raise MFGError("need at least one flow pair")
    d = dictionary or _dictionary_for(prob.mu0s[class_idx])
    k_hat = 0.0
    used = 0
    for eta, xi in flow_pairs:
        dist = _flow_distance(eta, xi, d)
        if dist < 1e-10:
            continue
        used += 1
        v_eta = _backward_solve(prob, class_idx, eta)
        v_xi = _backward_solve(prob, class_idx, xi)
        pol_eta = extract_policy(v_eta, prob.hamiltonians[class_idx], eta)
        pol_xi = extract_policy(v_xi, prob.hamiltonians[class_idx], xi)
        tab_eta = np.asarray(pol_eta.as_table(), dtype=float)
        tab_xi = np.asarray(pol_xi.as_table(), dtype=float)
        k_hat = max(k_hat, float(np.max(np.abs(tab_eta - tab_xi))) / dist)
    if used == 0:
        raise MFGError("all flow pairs were closer than the exclusion threshold")
    return k_hat
