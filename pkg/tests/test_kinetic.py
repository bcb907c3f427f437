import numpy as np
import pytest
from scipy.linalg import expm

from mfgkit.generators import ClassSpec, ControlledGenerator, LevyTriple, RateMatrix
from mfgkit.kinetic import (
    KineticError,
    KineticProblem,
    KineticStepError,
    PicardError,
    moment_path,
    picard_nonanticipating,
    solve_finite_state,
    solve_grid1d,
    solve_mkv_particles,
)
from mfgkit.measures import (
    FiniteState,
    Grid1D,
    Particles,
    dual_norm_estimate,
    finite_state_dictionary,
    pairing,
)
from mfgkit.registry import Coefficient, Observable


def finite_problem(rates, mu0, horizon=1.0, dt=1e-3, policy=None):
    spec = ClassSpec(rates=RateMatrix(rates))
    return KineticProblem(ControlledGenerator((spec,)), FiniteState(mu0), horizon, dt, policy)


def test_zero_rates_constant_path():
    prob = finite_problem(((0.0, 0.0), (0.0, 0.0)), [0.3, 0.7], dt=0.05)
    path = solve_finite_state(prob)
    for snap in path.snapshots:
        assert np.allclose(snap.masses, [0.3, 0.7], atol=1e-15)


def test_two_state_matrix_exponential_oracle():
    prob = finite_problem(((0.0, 1.0), (0.0, 0.0)), [1.0, 0.0])
    path = solve_finite_state(prob)
    # independent oracle: expm of the generator matrix
    gen = np.array([[-1.0, 1.0], [0.0, 0.0]])
    ref = expm(gen.T * 1.0) @ np.array([1.0, 0.0])
    assert np.max(np.abs(path.snapshots[-1].masses - ref)) < 1e-9
    # closed form frozen values
    assert path.snapshots[-1].masses[0] == pytest.approx(0.36788, abs=1e-5)
    assert path.snapshots[-1].masses[1] == pytest.approx(0.63212, abs=1e-5)


def test_symmetric_two_state_closed_form():
    prob = finite_problem(((0.0, 1.0), (1.0, 0.0)), [1.0, 0.0])
    path = solve_finite_state(prob)
    t = 1.0
    expected = np.array([(1 + np.exp(-2 * t)) / 2, (1 - np.exp(-2 * t)) / 2])
    assert np.max(np.abs(path.snapshots[-1].masses - expected)) < 1e-6
    assert path.snapshots[-1].masses[0] == pytest.approx(0.56767, abs=1e-5)


def test_mass_conservation_drift():
    prob = finite_problem(((0.0, 1.3), (0.8, 0.0)), [0.55, 0.45])
    path = solve_finite_state(prob)
    drift = max(abs(snap.total_mass() - 1.0) for snap in path.snapshots)
    assert drift <= 1e-10


def test_weak_form_consistency():
    # centered time differences of (f, mu_t) match the generator pairing
    prob = finite_problem(((0.0, 1.2), (0.6, 0.0)), [0.8, 0.2])
    path = solve_finite_state(prob)
    q = np.array([[0.0, 1.2], [0.6, 0.0]])
    gen = q - np.diag(q.sum(axis=1))
    d = finite_state_dictionary(2)
    dt = path.dt
    for f in d.entries[:4]:
        vals = np.array([pairing(f, snap) for snap in path.snapshots])
        table = f.values
        for k in range(1, len(path) - 1, 100):
            lhs = (vals[k + 1] - vals[k - 1]) / (2 * dt)
            rhs = float(np.dot(gen @ table, path.snapshots[k].masses))
            assert lhs == pytest.approx(rhs, abs=5e-5)


def test_flow_lipschitz_in_initial_data():
    rates = ((0.0, {"form": "linear_mean", "a": 0.5, "b": 0.8,
                    "observable": {"kind": "state", "k": 1}}), (0.7, 0.0))
    d = finite_state_dictionary(2)
    ratios = []
    for dt in (2e-3, 1e-3):
        paths = []
        for m0 in ([0.6, 0.4], [0.62, 0.38]):
            prob = finite_problem(rates, m0, dt=dt)
            paths.append(solve_finite_state(prob))
        dist0 = dual_norm_estimate(paths[0].snapshots[0], paths[1].snapshots[0], d)
        dist = max(
            dual_norm_estimate(a, b, d)
            for a, b in zip(paths[0].snapshots, paths[1].snapshots)
        )
        ratios.append(dist / dist0)
    assert all(np.isfinite(r) for r in ratios)
    assert 0.5 <= ratios[0] / ratios[1] <= 2.0


def test_rate_guard_raises():
    prob = finite_problem(((0.0, 300.0), (0.0, 0.0)), [1.0, 0.0], dt=1e-3)
    with pytest.raises(KineticStepError):
        solve_finite_state(prob)


def test_problem_validation():
    with pytest.raises(KineticError):
        finite_problem(((0.0, 1.0), (0.0, 0.0)), [1.0, 0.0], horizon=1.0, dt=0.3)


def particle_problem(triple, mu0, horizon=1.0, dt=0.01, policy=None):
    spec = ClassSpec(triple=triple)
    return KineticProblem(ControlledGenerator((spec,)), mu0, horizon, dt, policy)


def test_particles_zero_generator_frozen():
    mu0 = Particles([[0.5], [1.5], [-0.3]], [1 / 3] * 3)
    prob = particle_problem(LevyTriple(), mu0, dt=0.1)
    path = solve_mkv_particles(prob, 3, seed=1)
    for snap in path.snapshots:
        assert np.array_equal(np.sort(snap.points[:, 0]), np.sort(mu0.points[:, 0]))


def test_particles_mean_reversion_fixed_point():
    # b(t,x,mu) = mean(mu) - x; all particles at 1 stay at 1 exactly
    b = Coefficient("affine", {"a": 0.0, "bx": -1.0, "bm": 1.0}, Observable("identity"))
    mu0 = Particles([[1.0]], [1.0])
    prob = particle_problem(LevyTriple(drift=b), mu0, dt=0.05)
    path = solve_mkv_particles(prob, 8, seed=3)
    for snap in path.snapshots:
        assert np.allclose(snap.points, 1.0, atol=1e-14)


def test_particles_linear_ode_oracle():
    b = Coefficient("linear_x", {"a": 0.0, "b": -1.0})
    mu0 = Particles([[1.0]], [1.0])
    dt = 0.01
    prob = particle_problem(LevyTriple(drift=b), mu0, dt=dt)
    path = solve_mkv_particles(prob, 16, seed=5)
    mean_t1 = pairing(lambda x: x, path.snapshots[-1])
    assert abs(mean_t1 - np.exp(-1.0)) <= 10 * dt


def test_particles_ou_variance_oracle():
    b = Coefficient("linear_x", {"a": 0.0, "b": -1.0})
    mu0 = Particles([[0.0]], [1.0])
    prob = particle_problem(LevyTriple(diffusion=1.0, drift=b), mu0, dt=0.005)
    path = solve_mkv_particles(prob, 20_000, seed=8)
    report = moment_path(path, 2.0)
    expected = (1 - np.exp(-2.0)) / 2
    assert report.values[-1] == pytest.approx(expected, abs=0.02)
    assert report.max_value <= 0.55


def test_particles_deterministic_given_seed():
    b = Coefficient("linear_x", {"a": 0.2, "b": -0.5})
    mu0 = Particles([[0.0], [1.0]], [0.5, 0.5])
    prob = particle_problem(LevyTriple(diffusion=0.3, drift=b), mu0, dt=0.02)
    p1 = solve_mkv_particles(prob, 50, seed=11)
    p2 = solve_mkv_particles(prob, 50, seed=11)
    for a, b_ in zip(p1.snapshots, p2.snapshots):
        assert np.array_equal(a.points, b_.points)


def test_moment_path_trivial():
    mu0 = Particles([[0.0], [0.0]], [0.5, 0.5])
    prob = particle_problem(LevyTriple(), mu0, dt=0.1)
    path = solve_mkv_particles(prob, 4, seed=0)
    rep = moment_path(path, 2.0)
    assert np.allclose(rep.values, 0.0)


def test_moment_path_pure_drift_exact():
    mu0 = Particles([[0.0]], [1.0])
    prob = particle_problem(LevyTriple(drift=1.0), mu0, dt=0.1)
    path = solve_mkv_particles(prob, 4, seed=0)
    rep = moment_path(path, 1.0)
    assert np.allclose(rep.values, path.times, atol=1e-12)


def test_picard_no_feedback_converges_at_second_pass():
    prob = finite_problem(((0.0, 1.0), (0.5, 0.0)), [0.7, 0.3], dt=0.01)
    result = picard_nonanticipating(prob, tol=1e-12)
    assert result.n_iterations == 2
    assert result.residuals[-1] == 0.0
    assert result.residuals[0] > 0.0


def test_picard_coupled_residuals_decay_superlinearly():
    # q(0 -> 1) driven by the mass currently in state 1
    rates = (
        (0.0, {"form": "linear_mean", "a": 0.2, "b": 1.0,
               "observable": {"kind": "state", "k": 1}}),
        (0.4, 0.0),
    )
    prob = finite_problem(rates, [0.9, 0.1], dt=0.01)
    result = picard_nonanticipating(prob, tol=1e-13)
    res = np.array(result.residuals)
    res = res[res > 0]
    ratios = res[1:] / res[:-1]
    # factorial-type decay: the contraction ratio itself keeps shrinking
    assert np.all(np.diff(ratios) < 0)
    assert ratios[-1] < 0.25 * ratios[0]
    # log-residual concavity (second differences nonpositive up to noise)
    logs = np.log(res)
    second = np.diff(logs, 2)
    assert np.all(second < 1e-8)


def test_picard_matches_self_consistent_fine_solve():
    rates = (
        (0.0, {"form": "linear_mean", "a": 0.2, "b": 1.0,
               "observable": {"kind": "state", "k": 1}}),
        (0.4, 0.0),
    )
    prob = finite_problem(rates, [0.9, 0.1], dt=0.01)
    result = picard_nonanticipating(prob, tol=1e-13)
    fine = solve_finite_state(finite_problem(rates, [0.9, 0.1], dt=1e-3))
    end = result.path.snapshots[-1].masses
    ref = fine.snapshots[-1].masses
    assert np.max(np.abs(end - ref)) < 1e-5


def test_picard_nonconvergence_error_carries_residuals():
    rates = (
        (0.0, {"form": "linear_mean", "a": 0.2, "b": 1.0,
               "observable": {"kind": "state", "k": 1}}),
        (0.4, 0.0),
    )
    prob = finite_problem(rates, [0.9, 0.1], dt=0.01)
    with pytest.raises(PicardError) as err:
        picard_nonanticipating(prob, n_iter=2, tol=1e-16)
    assert len(err.value.residuals) == 2


def test_grid_solver_conserves_mass_and_positivity():
    m = 160
    xs = np.linspace(-4, 4, m, endpoint=False) + 4 / m
    rho = np.exp(-0.5 * (xs / 0.4) ** 2)
    rho /= rho.sum() * (8 / m)
    mu0 = Grid1D(-4.0, 4.0, rho)
    b = Coefficient("linear_x", {"a": 0.3, "b": -0.6})
    prob = particle_problem(LevyTriple(diffusion=0.2, drift=b), mu0, horizon=0.5, dt=0.01)
    path = solve_grid1d(prob)
    for snap in path.snapshots:
        assert snap.total_mass() == pytest.approx(1.0, abs=1e-9)
        assert snap.density.min() >= 0.0
    # drift toward 0.5 with OU pull: mean moves from 0 toward the fixed point
    mean_end = pairing(lambda x: x, path.snapshots[-1])
    assert 0.1 < mean_end < 0.5
