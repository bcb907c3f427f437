"""Measure representations, pairings, and computable dual-norm surrogates.

Three concrete representations are supported: mass vectors over a finite
state space, weighted particle clouds in R^d, and cell-centered densities
on a uniform 1-d grid.  All of them are immutable after construction and
support the same pairing / moment / serialization interface, so the
solvers upstream never branch on representation beyond dispatch here.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "MeasureError",
    "FiniteState",
    "Particles",
    "Grid1D",
    "Measure",
    "TestFunction",
    "TestDictionary",
    "MeasurePath",
    "HolderReport",
    "total_mass",
    "is_probability",
    "pairing",
    "empirical_from_points",
    "dual_norm_estimate",
    "moment",
    "holder_check",
    "default_dictionary",
    "finite_state_dictionary",
    "measure_to_json",
    "measure_from_json",
]

# Mass neighborhood for (sub/super) probability measures: 0 < lo < 1 < hi.
MASS_LO = 0.5
MASS_HI = 2.0
PROB_TOL = 1e-9


class MeasureError(ValueError):
    """Representation mismatch, invalid masses, or domain errors."""


def _readonly(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FiniteState:
    """Nonnegative mass vector over S states (signed variant for derivatives).

    ``state_values`` gives the numeric embedding of the states, used by
    moments and by R-valued test functions; defaults to 0..S-1.
    """

    masses: np.ndarray
    class_index: int | None = None
    state_values: np.ndarray | None = None
    signed: bool = False

    kind = "finite"

    def __post_init__(self):
        object.__setattr__(self, "masses", _readonly(self.masses))
        if self.masses.ndim != 1 or self.masses.size == 0:
            raise MeasureError("finite-state masses must be a nonempty vector")
        vals = self.state_values
        vals = np.arange(self.masses.size, dtype=float) if vals is None else vals
        object.__setattr__(self, "state_values", _readonly(vals))
        if self.state_values.shape != self.masses.shape:
            raise MeasureError("state_values must match masses in length")
        if not self.signed:
            _check_positive_mass(self.masses, self.total_mass())

    @property
    def n_states(self) -> int:
        return self.masses.size

    def total_mass(self) -> float:
        return float(self.masses.sum())

    def with_masses(self, masses, signed: bool | None = None) -> "FiniteState":
        return FiniteState(
            masses,
            class_index=self.class_index,
            state_values=self.state_values,
            signed=self.signed if signed is None else signed,
        )


@dataclass(frozen=True)
class Particles:
    """Weighted particle cloud in R^d; points stored as an (N, d) array."""

    points: np.ndarray
    weights: np.ndarray
    signed: bool = False

    kind = "particles"

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", _readonly(self.weights))
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise MeasureError("particle cloud must be a nonempty (N, d) array")
        if self.weights.shape != (pts.shape[0],):
            raise MeasureError("weights must be a length-N vector")
        if not self.signed:
            _check_positive_mass(self.weights, self.total_mass())

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_particles(self) -> int:
        return self.points.shape[0]

    def total_mass(self) -> float:
        return float(self.weights.sum())


@dataclass(frozen=True)
class Grid1D:
    """Cell-centered density on a uniform grid over [xmin, xmax]."""

    xmin: float
    xmax: float
    density: np.ndarray
    signed: bool = False

    kind = "grid1d"

    def __post_init__(self):
        object.__setattr__(self, "density", _readonly(self.density))
        if self.density.ndim != 1 or self.density.size == 0:
            raise MeasureError("grid density must be a nonempty vector")
        if not self.xmax > self.xmin:
            raise MeasureError("grid requires xmax > xmin")
        if not self.signed:
            _check_positive_mass(self.density, self.total_mass())

    @property
    def n_cells(self) -> int:
        return self.density.size

    @property
    def dx(self) -> float:
        return (self.xmax - self.xmin) / self.density.size

    @property
    def centers(self) -> np.ndarray:
        m = self.density.size
        return self.xmin + (np.arange(m) + 0.5) * self.dx

    def total_mass(self) -> float:
        return float(self.density.sum() * self.dx)

    def with_density(self, density, signed: bool | None = None) -> "Grid1D":
        return Grid1D(
            self.xmin,
            self.xmax,
            density,
            signed=self.signed if signed is None else signed,
        )


Measure = FiniteState | Particles | Grid1D


def _check_positive_mass(values: np.ndarray, mass: float) -> None:
    if np.min(values) < 0:
        raise MeasureError("masses/weights/densities must be nonnegative")
    if not (MASS_LO <= mass <= MASS_HI):
        raise MeasureError(
            f"total mass {mass:.6g} outside [{MASS_LO}, {MASS_HI}] neighborhood"
        )


def total_mass(mu: Measure) -> float:
    return mu.total_mass()


def is_probability(mu: Measure, tol: float = PROB_TOL) -> bool:
    return abs(mu.total_mass() - 1.0) <= tol


# ---------------------------------------------------------------------------
# Test functions and dictionaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """Scalar test function with optional derivatives and a certified bound.

    ``values`` may be a vectorized callable f(x) for R^d measures (x of
    shape (N,) in d=1 or (N, d) otherwise) or a fixed table indexed by
    state for finite-state measures.  ``bound`` certifies
    max(sup|f|, sup|f'|, sup|f''|) <= bound after scaling.
    """

    name: str
    values: Callable[[np.ndarray], np.ndarray] | np.ndarray
    d1: Callable[[np.ndarray], np.ndarray] | None = None
    d2: Callable[[np.ndarray], np.ndarray] | None = None
    bound: float = 1.0

    __test__ = False  # not a pytest class despite the name

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if isinstance(self.values, np.ndarray):
            idx = np.asarray(x, dtype=int)
            return self.values[idx]
        return np.asarray(self.values(np.asarray(x, dtype=float)), dtype=float)


@dataclass(frozen=True)
class TestDictionary:
    """A finite dictionary of certified test functions; the dual-norm surrogate.

    ``label`` records which norm the entries were scaled for ("C2" for the
    second-order dual surrogate, "C0"/"Lip" for the weaker ones), so every
    reported norm can name the dictionary that produced it.
    """

    entries: tuple[TestFunction, ...]
    label: str = "C2"

    __test__ = False  # not a pytest class despite the name

    def __post_init__(self):
        if len(self.entries) < 1:
            raise MeasureError("test dictionary must be nonempty")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def _c2_probe_bound(f, d1, d2, kind: str) -> float:
    """Numeric sup bound of f and requested derivatives on a wide probe grid."""
    x = np.linspace(-12.0, 12.0, 24001)
    sups = [np.max(np.abs(f(x)))]
    if kind in ("Lip", "C2"):
        sups.append(np.max(np.abs(d1(x))))
    if kind == "C2":
        sups.append(np.max(np.abs(d2(x))))
    return float(max(sups))


_BASE_FORMS: tuple[tuple[str, Callable, Callable, Callable], ...] = (
    ("one", lambda x: np.ones_like(x), lambda x: np.zeros_like(x), lambda x: np.zeros_like(x)),
    ("tanh", np.tanh, lambda x: 1.0 / np.cosh(x) ** 2, lambda x: -2.0 * np.tanh(x) / np.cosh(x) ** 2),
    ("sin", np.sin, np.cos, lambda x: -np.sin(x)),
    ("cos", np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x)),
    ("gauss", lambda x: np.exp(-0.5 * x**2), lambda x: -x * np.exp(-0.5 * x**2),
     lambda x: (x**2 - 1.0) * np.exp(-0.5 * x**2)),
    ("xgauss", lambda x: x * np.exp(-0.5 * x**2), lambda x: (1.0 - x**2) * np.exp(-0.5 * x**2),
     lambda x: x * (x**2 - 3.0) * np.exp(-0.5 * x**2)),
    ("sin2q", lambda x: 0.25 * np.sin(2.0 * x), lambda x: 0.5 * np.cos(2.0 * x),
     lambda x: -np.sin(2.0 * x)),
    ("cos2q", lambda x: 0.25 * np.cos(2.0 * x), lambda x: -0.5 * np.sin(2.0 * x),
     lambda x: -np.cos(2.0 * x)),
)


def default_dictionary(dim: int = 1, kind: str = "C2") -> TestDictionary:
    """The fixed 8-function-per-dimension dictionary for R^d measures.

    Each entry is scaled so its certified bound (sup of the function and,
    depending on ``kind``, its first/second derivative) is <= 1.
    """
    if kind not in ("C2", "Lip", "C0"):
        raise MeasureError(f"unknown dictionary kind {kind!r}")
    entries: list[TestFunction] = []
    for axis in range(dim):
        for name, f, d1, d2 in _BASE_FORMS:
            s = 1.0 / _c2_probe_bound(f, d1, d2, kind)

            def make(fn, scale, ax):
                def g(x):
                    x = np.asarray(x, dtype=float)
                    coord = x if x.ndim == 1 else x[..., ax]
                    return scale * fn(coord)

                return g

            label = name if dim == 1 else f"{name}[x{axis}]"
            entries.append(
                TestFunction(label, make(f, s, axis), make(d1, s, axis), make(d2, s, axis), 1.0)
            )
    return TestDictionary(tuple(entries), label=kind)


def finite_state_dictionary(n_states: int) -> TestDictionary:
    """Indicator and smoothed-indicator test functions on {0..S-1}.

    All entries take values in [0, 1], so the dual-norm surrogate between
    two unit point masses is exactly 1, attained at the sharp indicator.
    """
    if n_states < 2:
        raise MeasureError("finite-state dictionary needs >= 2 states")
    entries: list[TestFunction] = []
    idx = np.arange(n_states, dtype=float)
    for i in range(n_states):
        table = np.zeros(n_states)
        table[i] = 1.0
        entries.append(TestFunction(f"e{i}", table, bound=1.0))
    for sigma in (0.75, 1.5, 3.0):
        for i in range(n_states):
            table = np.exp(-0.5 * ((idx - i) / sigma) ** 2)
            entries.append(TestFunction(f"e{i}~{sigma}", table, bound=1.0))
    return TestDictionary(tuple(entries), label="finite")


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------


def pairing(f, mu: Measure) -> float:
    """The pairing (f, mu) = integral of f against mu.

    Particle clouds and finite-state vectors evaluate the sum exactly;
    grid densities use the midpoint rule on cell centers.
    """
    if isinstance(mu, FiniteState):
        if isinstance(f, TestFunction) and isinstance(f.values, np.ndarray):
            if f.values.size != mu.n_states:
                raise MeasureError("test-function table does not match state count")
            vals = f.values
        else:
            vals = _eval_function(f, mu.state_values)
        return float(np.dot(vals, mu.masses))
    if isinstance(mu, Particles):
        x = mu.points[:, 0] if mu.dim == 1 else mu.points
        return float(np.dot(_eval_function(f, x), mu.weights))
    if isinstance(mu, Grid1D):
        return float(np.dot(_eval_function(f, mu.centers), mu.density) * mu.dx)
    raise MeasureError(f"unsupported measure type {type(mu).__name__}")


def _eval_function(f, x: np.ndarray) -> np.ndarray:
    if isinstance(f, TestFunction) and isinstance(f.values, np.ndarray):
        raise MeasureError("state-table test function applied to an R^d measure")
    try:
        vals = np.asarray(f(x), dtype=float)
    except (TypeError, ValueError) as exc:
        raise MeasureError(f"test function not evaluable on support: {exc}") from exc
    n = x.shape[0] if np.ndim(x) else 1
    if vals.shape not in ((n,), ()):
        raise MeasureError("test function returned a shape not matching the support")
    return np.broadcast_to(vals, (n,))


def empirical_from_points(points: Sequence | np.ndarray) -> Particles:
    """Normalized sum of Dirac masses at the given points, weights 1/N."""
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        raise MeasureError("cannot build an empirical measure from no points")
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    return Particles(pts, np.full(n, 1.0 / n))


def dual_norm_estimate(mu: Measure, nu: Measure, dictionary: TestDictionary) -> float:
    """max_f |(f, mu) - (f, nu)| over the dictionary.

    A computable surrogate for the dual norm ||mu - nu|| against the space
    the dictionary was certified for; symmetric and zero on equal inputs.
    """
    if mu.kind != nu.kind:
        raise MeasureError(f"cannot compare {mu.kind} with {nu.kind}")
    if len(dictionary) == 0:
        raise MeasureError("empty test dictionary")
    return max(abs(pairing(f, mu) - pairing(f, nu)) for f in dictionary)


def moment(mu: Measure, p: float) -> float:
    """The p-th absolute moment, p in (0, 2]."""
    if not 0.0 < p <= 2.0:
        raise MeasureError(f"moment order p={p} outside (0, 2]")
    if isinstance(mu, Particles):
        r = np.linalg.norm(mu.points, axis=1)
        return float(np.dot(r**p, mu.weights))
    return pairing(lambda x: np.abs(x) ** p, mu)


# ---------------------------------------------------------------------------
# Measure paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeasurePath:
    """Snapshots of one measure flow on a uniform time grid."""

    times: np.ndarray
    snapshots: tuple

    def __post_init__(self):
        object.__setattr__(self, "times", _readonly(self.times))
        object.__setattr__(self, "snapshots", tuple(self.snapshots))
        if self.times.ndim != 1 or self.times.size != len(self.snapshots):
            raise MeasureError("times and snapshots must align")
        if self.times.size >= 3:
            steps = np.diff(self.times)
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
                raise MeasureError("time grid must be uniform")
        kinds = {snap.kind for snap in self.snapshots}
        if len(kinds) > 1:
            raise MeasureError(f"mixed snapshot kinds in one path: {sorted(kinds)}")

    def __len__(self) -> int:
        return self.times.size

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self) > 1 else 0.0

    @property
    def kind(self) -> str:
        return self.snapshots[0].kind

    def at(self, t: float) -> Measure:
        """Snapshot at the grid time nearest to t (clamped to the range)."""
        i = int(np.clip(round((t - self.times[0]) / self.dt), 0, len(self) - 1)) if len(self) > 1 else 0
        return self.snapshots[i]

    def index_of(self, t: float) -> int:
        if len(self) == 1:
            return 0
        return int(np.clip(round((t - self.times[0]) / self.dt), 0, len(self) - 1))

    def to_csv(self, target, histogram_edges: np.ndarray | None = None) -> None:
        """Write the path; columns depend on the representation."""
        close = False
        if isinstance(target, (str, bytes)):
            fh = open(target, "w")
            close = True
        else:
            fh = target
        try:
            _path_csv(self, fh, histogram_edges)
        finally:
            if close:
                fh.close()


@dataclass(frozen=True)
class HolderReport:
    c_hat: float
    worst_pair: tuple[float, float]
    n_pairs: int
    dictionary_label: str


def holder_check(path: MeasurePath, dictionary: TestDictionary) -> HolderReport:
    """Smallest C with ||mu_t1 - mu_t2|| <= C sqrt|t1 - t2| over snapshot pairs."""
    n = len(path)
    if n < 3:
        raise MeasureError("Holder check needs a path with >= 3 snapshots")
    pair_vals = np.array([[pairing(f, snap) for f in dictionary] for snap in path.snapshots])
    c_hat, worst = 0.0, (path.times[0], path.times[0])
    times = path.times
    n_pairs = 0
    for i in range(n - 1):
        diffs = np.max(np.abs(pair_vals[i + 1 :] - pair_vals[i]), axis=1)
        gaps = np.sqrt(times[i + 1 :] - times[i])
        ratios = diffs / gaps
        n_pairs += ratios.size
        j = int(np.argmax(ratios))
        if ratios[j] > c_hat:
            c_hat = float(ratios[j])
            worst = (float(times[i]), float(times[i + 1 + j]))
    return HolderReport(c_hat, worst, n_pairs, dictionary.label)


def _path_csv(path: MeasurePath, fh, histogram_edges) -> None:
    fmt = lambda v: format(float(v), ".17g")  # noqa: E731 - local formatter
    first = path.snapshots[0]
    if isinstance(first, FiniteState):
        header = ["t"] + [f"m{i}" for i in range(first.n_states)]
        fh.write(",".join(header) + "\n")
        for t, snap in zip(path.times, path.snapshots):
            fh.write(",".join([fmt(t)] + [fmt(v) for v in snap.masses]) + "\n")
    elif isinstance(first, Grid1D):
        header = ["t"] + [f"rho{i}" for i in range(first.n_cells)]
        fh.write(",".join(header) + "\n")
        for t, snap in zip(path.times, path.snapshots):
            fh.write(",".join([fmt(t)] + [fmt(v) for v in snap.density]) + "\n")
    else:
        edges = histogram_edges
        if edges is None:
            edges = np.linspace(-5.0, 5.0, 21)
        header = ["t", "mean", "m2"] + [f"hist{i}" for i in range(len(edges) - 1)]
        fh.write(",".join(header) + "\n")
        for t, snap in zip(path.times, path.snapshots):
            r = snap.points[:, 0] if snap.dim == 1 else np.linalg.norm(snap.points, axis=1)
            mean = float(np.dot(r, snap.weights))
            m2 = moment(snap, 2.0)
            hist, _ = np.histogram(r, bins=edges, weights=snap.weights)
            fh.write(",".join([fmt(t), fmt(mean), fmt(m2)] + [fmt(h) for h in hist]) + "\n")


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------


def measure_to_json(mu: Measure) -> str:
    if isinstance(mu, FiniteState):
        payload = {
            "kind": "finite",
            "masses": mu.masses.tolist(),
            "class_index": mu.class_index,
            "state_values": mu.state_values.tolist(),
            "signed": mu.signed,
        }
    elif isinstance(mu, Particles):
        payload = {
            "kind": "particles",
            "points": mu.points.tolist(),
            "weights": mu.weights.tolist(),
            "signed": mu.signed,
        }
    elif isinstance(mu, Grid1D):
        payload = {
            "kind": "grid1d",
            "xmin": mu.xmin,
            "xmax": mu.xmax,
            "density": mu.density.tolist(),
            "signed": mu.signed,
        }
    else:
        raise MeasureError(f"unsupported measure type {type(mu).__name__}")
    return json.dumps(payload, sort_keys=True)


def measure_from_json(text: str) -> Measure:
    payload = json.loads(text)
    kind = payload.get("kind")
    if kind == "finite":
        return FiniteState(
            np.asarray(payload["masses"], dtype=float),
            class_index=payload.get("class_index"),
            state_values=np.asarray(payload["state_values"], dtype=float)
            if payload.get("state_values") is not None
            else None,
            signed=bool(payload.get("signed", False)),
        )
    if kind == "particles":
        return Particles(
            np.asarray(payload["points"], dtype=float),
            np.asarray(payload["weights"], dtype=float),
            signed=bool(payload.get("signed", False)),
        )
    if kind == "grid1d":
        return Grid1D(
            float(payload["xmin"]),
            float(payload["xmax"]),
            np.asarray(payload["density"], dtype=float),
            signed=bool(payload.get("signed", False)),
        )
    raise MeasureError(f"unknown measure kind {kind!r}")
