import numpy as np
import pytest
from scipy.stats import levy_stable

from mfgkit.generators import (
    Box,
    CompoundPoisson,
    FiniteSet,
    GeneratorError,
    LevyTriple,
    RateMatrix,
    StableLike,
    apply_generator,
    cms_stable,
    derive_stream,
    finite_rate_step,
    linear_drift_control,
    sample_increment,
)
from mfgkit.measures import TestFunction, default_dictionary, empirical_from_points

MU = empirical_from_points([0.0])


def f_identity(x):
    return np.asarray(x, dtype=float)


def f_square(x):
    return np.asarray(x, dtype=float) ** 2


def test_pure_drift_on_identity():
    triple = LevyTriple(diffusion=0.0, drift=1.0)
    assert apply_generator(triple, f_identity, 0.0, 0.3, MU) == pytest.approx(1.0, abs=1e-8)


def test_laplacian_on_quadratic():
    triple = LevyTriple(diffusion=2.0, drift=0.0)
    for x in (-1.0, 0.0, 2.5):
        assert apply_generator(triple, f_square, 0.0, x, MU) == pytest.approx(2.0, abs=1e-5)


def test_single_atom_jump_uncompensated():
    jumps = CompoundPoisson(rate=1.0, atoms=[((2.0,), 1.0)])
    triple = LevyTriple(diffusion=0.0, drift=0.0, jumps=jumps)
    # |y| = 2 outside the unit ball: f(x+2) - f(x) = 2 for f(x) = x
    assert apply_generator(triple, f_identity, 0.0, 0.0, MU) == pytest.approx(2.0, abs=1e-8)


def test_small_atom_jump_compensated():
    jumps = CompoundPoisson(rate=3.0, atoms=[((0.5,), 1.0)])
    triple = LevyTriple(jumps=jumps)
    # compensated: f(x+y) - f(x) - y f'(x) = 0 for linear f
    assert apply_generator(triple, f_identity, 0.0, 0.0, MU) == pytest.approx(0.0, abs=1e-8)
    # quadratic picks up y^2 * rate
    assert apply_generator(triple, f_square, 0.0, 0.0, MU) == pytest.approx(3.0 * 0.25, abs=1e-6)


def test_conservativity_constant_function():
    const = lambda x: np.ones_like(np.asarray(x, dtype=float))  # noqa: E731
    triples = [
        LevyTriple(diffusion=1.3, drift=-0.7),
        LevyTriple(jumps=CompoundPoisson(rate=2.0, atoms=[((0.4,), 0.5), ((-1.5,), 0.5)])),
        LevyTriple(jumps=StableLike(alpha=1.5, scale=0.8, cutoff=2.0)),
    ]
    for triple in triples:
        for x in (-0.8, 0.0, 1.7):
            assert apply_generator(triple, const, 0.2, x, MU) == pytest.approx(0.0, abs=1e-10)


def test_linearity_in_f():
    rng = np.random.default_rng(5)
    triple = LevyTriple(
        diffusion=0.6,
        drift=0.3,
        jumps=CompoundPoisson(rate=1.2, atoms=[((0.7,), 0.6), ((-1.2,), 0.4)]),
    )
    d = default_dictionary()
    for _ in range(6):
        a, b = rng.normal(size=2)
        f, g = d.entries[2], d.entries[4]
        combo = TestFunction(
            "combo",
            lambda x: a * f(x) + b * g(x),
            lambda x: a * f.d1(x) + b * g.d1(x),
            lambda x: a * f.d2(x) + b * g.d2(x),
        )
        lhs = apply_generator(triple, combo, 0.0, 0.4, MU)
        rhs = a * apply_generator(triple, f, 0.0, 0.4, MU) + b * apply_generator(
            triple, g, 0.0, 0.4, MU
        )
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)


def test_positive_maximum_principle_probe():
    # f has an interior maximum at 0; with zero drift the generator must be
    # nonpositive there up to quadrature error
    f = TestFunction(
        "bump",
        lambda x: np.exp(-0.5 * np.asarray(x) ** 2),
        lambda x: -np.asarray(x) * np.exp(-0.5 * np.asarray(x) ** 2),
        lambda x: (np.asarray(x) ** 2 - 1.0) * np.exp(-0.5 * np.asarray(x) ** 2),
    )
    for triple in (
        LevyTriple(diffusion=0.9),
        LevyTriple(jumps=CompoundPoisson(rate=1.5, atoms=[((0.8,), 1.0)])),
        LevyTriple(jumps=StableLike(alpha=1.2, scale=0.5, cutoff=1.5)),
    ):
        assert apply_generator(triple, f, 0.0, 0.0, MU) <= 1e-8


def test_generator_validation_errors():
    with pytest.raises(GeneratorError):
        apply_generator(
            LevyTriple(jumps=StableLike(alpha=1.99, scale=1.0, cutoff=2.0)),
            f_square,
            0.0,
            0.0,
            MU,
        )
    bad_g = LevyTriple(diffusion=-1.0)
    with pytest.raises(GeneratorError):
        apply_generator(bad_g, f_square, 0.0, 0.0, MU)
    with pytest.raises(GeneratorError):
        Box(1.0, 0.0)
    with pytest.raises(GeneratorError):
        FiniteSet(())


def test_sample_increment_deterministic_drift():
    triple = LevyTriple(diffusion=0.0, drift=1.0)
    rng = derive_stream(0)
    assert sample_increment(triple, 0.0, 0.0, MU, 0.1, rng) == pytest.approx(0.1, abs=1e-15)


def test_sample_increment_zero_generator_identity():
    triple = LevyTriple()
    rng = derive_stream(0)
    x = np.array([-1.0, 0.5, 3.0])
    assert np.array_equal(sample_increment(triple, 0.0, x, MU, 0.05, rng), x)


def test_sample_increment_controlled_drift():
    h = linear_drift_control(2.0)
    triple = LevyTriple()
    rng = derive_stream(0)
    out = sample_increment(triple, 0.0, 0.0, MU, 0.1, rng, h=h, u=1.5)
    assert out == pytest.approx(0.3, abs=1e-15)


def test_sample_increment_brownian_variance():
    triple = LevyTriple(diffusion=1.0)
    rng = derive_stream(42, 1)
    n, dt = 100_000, 0.01
    inc = sample_increment(triple, 0.0, np.zeros(n), MU, dt, rng)
    # Var of x^2 for N(0, dt) is 2 dt^2 -> stderr of the mean is dt sqrt(2/n)
    assert np.var(inc) == pytest.approx(dt, abs=3 * dt * np.sqrt(2.0 / n))


def test_sample_increment_compound_poisson_moments():
    lam, y = 2.0, 2.0
    triple = LevyTriple(jumps=CompoundPoisson(rate=lam, atoms=[((y,), 1.0)]))
    rng = derive_stream(7, 2)
    n, dt = 200_000, 0.02
    inc = sample_increment(triple, 0.0, np.zeros(n), MU, dt, rng)
    mean_exp = lam * y * dt  # |y| > 1: uncompensated
    var_exp = lam * y**2 * dt
    assert np.mean(inc) == pytest.approx(mean_exp, abs=4 * np.sqrt(var_exp / n))
    assert np.var(inc) == pytest.approx(var_exp, rel=0.05)


def test_sample_increment_stable_like_variance():
    alpha, a, kc = 1.4, 0.6, 2.0
    triple = LevyTriple(jumps=StableLike(alpha=alpha, scale=a, cutoff=kc))
    rng = derive_stream(11, 3)
    n, dt = 200_000, 0.01
    inc = sample_increment(triple, 0.0, np.zeros(n), MU, dt, rng)
    # both directions, weight 1 each: integral of y^2 nu(dy) over [0, Kc]
    var_exp = 2.0 * a * kc ** (2.0 - alpha) / (2.0 - alpha) * dt
    assert abs(np.mean(inc)) < 4 * np.sqrt(var_exp / n)
    assert np.var(inc) == pytest.approx(var_exp, rel=0.08)


def test_cms_stable_matches_scipy_quantiles():
    alpha = 1.5
    rng = derive_stream(123)
    draws = cms_stable(alpha, rng, size=200_000)
    for q in (0.25, 0.5, 0.75, 0.9):
        ref = levy_stable.ppf(q, alpha, 0.0)
        emp = np.quantile(draws, q)
        assert emp == pytest.approx(ref, abs=0.03 + 0.02 * abs(ref))


def test_finite_rate_step_no_rates():
    rng = derive_stream(0)
    assert finite_rate_step(np.zeros(3), 1, 0.05, rng) == 1


def test_finite_rate_step_negative_rate_error():
    rng = derive_stream(0)
    with pytest.raises(GeneratorError):
        finite_rate_step(np.array([0.0, -1.0]), 0, 0.01, rng)


def test_finite_rate_step_thinning_regime_guard():
    rng = derive_stream(0)
    with pytest.raises(GeneratorError):
        finite_rate_step(np.array([0.0, 5.0]), 0, 0.1, rng)


def test_finite_rate_step_exponential_law():
    # q(0 -> 1) = 1, exact mode over horizon 1: P(still in 0) = e^{-1}
    q = np.array([[0.0, 1.0], [0.0, 0.0]])
    rng = derive_stream(2024, 5)
    n = 100_000
    stayed = 0
    for _ in range(n):
        stayed += finite_rate_step(q, 0, 1.0, rng, mode="exact") == 0
    p_hat = stayed / n
    p_true = np.exp(-1.0)
    stderr = np.sqrt(p_true * (1 - p_true) / n)
    assert p_hat == pytest.approx(p_true, abs=3 * stderr)


def test_finite_rate_step_symmetric_stationary():
    q = np.array([[0.0, 1.0], [1.0, 0.0]])
    rng = derive_stream(9, 6)
    n, horizon = 20_000, 3.0
    in_zero = 0
    for _ in range(n):
        in_zero += finite_rate_step(q, 0, horizon, rng, mode="exact") == 0
    # P(state 0 at t) = 0.5 + 0.5 exp(-2t); transient at t=3 is ~1.2e-3
    p_hat = in_zero / n
    assert p_hat == pytest.approx(0.5, abs=0.012)


def test_rate_matrix_evaluation():
    rm = RateMatrix(((0.0, 2.0), (0.5, 0.0)))
    q = rm(0.0, None)
    assert q[0, 1] == 2.0 and q[1, 0] == 0.5 and q[0, 0] == 0.0


def test_derive_stream_determinism_and_separation():
    a = derive_stream(5, 1, 2, 3).standard_normal(4)
    b = derive_stream(5, 1, 2, 3).standard_normal(4)
    c = derive_stream(5, 1, 2, 4).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_increment_mean_variance_match_generator_small_dt():
    # combined diffusion + drift + jumps: first two moments of the increment
    triple = LevyTriple(
        diffusion=0.5,
        drift=0.2,
        jumps=CompoundPoisson(rate=1.0, atoms=[((1.5,), 1.0)]),
    )
    rng = derive_stream(31, 8)
    n, dt = 400_000, 0.005
    inc = sample_increment(triple, 0.0, np.zeros(n), MU, dt, rng)
    mean_exp = (0.2 + 1.0 * 1.5) * dt
    var_exp = (0.5 + 1.0 * 1.5**2) * dt
    assert np.mean(inc) == pytest.approx(mean_exp, abs=4 * np.sqrt(var_exp / n))
    assert np.var(inc) == pytest.approx(var_exp, rel=0.05)
