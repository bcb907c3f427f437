"""Named coefficient forms with analytic measure-derivatives.

Problem files refer to coefficients by form name plus parameters; no code
is ever loaded at runtime.  Every measure-dependent form ships its first
and second variational derivatives in closed form, which is what the
linearized sensitivity equations consume (no numerical differentiation of
coefficients happens anywhere).

Measure dependence always enters through a scalar observable m = (g, mu)
for a named g, so derivatives reduce to the chain rule through m.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measures import Measure, MeasureError, pairing

__all__ = ["Observable", "Coefficient", "build_coefficient", "build_observable", "FORM_NAMES"]


@dataclass(frozen=True)
class Observable:
    """A named test function g defining the scalar m = (g, mu).

    kinds: "identity" (g(x) = x, the mean), "state" (mass in state k),
    "table" (explicit values per state).
    """

    kind: str = "identity"
    k: int = 0
    table: tuple | None = None

    def mean(self, mu):
        """m = (g, mu); mass-vector measures may be batched on leading axes."""
        if isinstance(mu, (list, tuple)):
            raise MeasureError("observable applied to multi-class measure without class index")
        masses = getattr(mu, "masses", None)
        if self.kind == "state":
            if masses is None:
                raise MeasureError("state observable needs a mass-vector measure")
            return np.asarray(masses, dtype=float)[..., self.k]
        if self.kind == "table":
            vals = np.asarray(self.table, dtype=float)
            if masses is None:
                raise MeasureError("table observable needs a mass-vector measure")
            return np.asarray(masses, dtype=float) @ vals
        if self.kind == "identity":
            if masses is not None and np.asarray(masses).ndim > 1:
                sv = np.asarray(getattr(mu, "state_values"), dtype=float)
                return np.asarray(masses, dtype=float) @ sv
            return pairing(lambda x: x, mu)
        raise MeasureError(f"unknown observable kind {self.kind!r}")

    def at_points(self, v) -> np.ndarray:
        """g evaluated at candidate mass locations (state indices or points)."""
        v = np.asarray(v)
        if self.kind == "identity":
            return np.asarray(v, dtype=float)
        if self.kind == "state":
            return (np.asarray(v, dtype=int) == self.k).astype(float)
        if self.kind == "table":
            return np.asarray(self.table, dtype=float)[np.asarray(v, dtype=int)]
        raise MeasureError(f"unknown observable kind {self.kind!r}")


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True)
class Coefficient:
    """One scalar coefficient c(t, x, mu) from the form registry."""

    form: str
    params: dict = field(default_factory=dict)
    observable: Observable = field(default_factory=Observable)

    def __post_init__(self):
        if self.form not in FORM_NAMES:
            raise MeasureError(f"unknown coefficient form {self.form!r}")

    # -- evaluation ---------------------------------------------------------

    def _m(self, mu) -> float:
        return self.observable.mean(mu)

    def __call__(self, t, x, mu) -> np.ndarray | float:
        p = self.params
        if self.form == "constant":
            return p["c"] * np.ones_like(np.asarray(x, dtype=float)) if np.ndim(x) else p["c"]
        if self.form == "linear_x":
            return p.get("a", 0.0) + p.get("b", 0.0) * np.asarray(x, dtype=float)
        m = self._m(mu)
        if self.form == "linear_mean":
            val = p.get("a", 0.0) + p.get("b", 0.0) * m
        elif self.form == "quadratic_mean":
            val = p.get("a", 0.0) + p.get("b", 0.0) * m * m
        elif self.form == "logistic":
            val = p["a"] * _sigmoid(p["b"] * (m - p.get("c", 0.0)))
        elif self.form == "affine":
            return (
                p.get("a", 0.0)
                + p.get("bx", 0.0) * np.asarray(x, dtype=float)
                + p.get("bm", 0.0) * m
            )
        else:  # pragma: no cover - guarded in __post_init__
            raise MeasureError(self.form)
        return val * np.ones_like(np.asarray(x, dtype=float)) if np.ndim(x) else val

    @property
    def measure_dependent(self) -> bool:
        return self.form in ("linear_mean", "quadratic_mean", "logistic", "affine")

    # -- variational derivatives -------------------------------------------

    def dmu(self, t, x, mu, v) -> np.ndarray:
        """delta c / delta mu(v) at candidate locations v."""
        g = self.observable.at_points(v)
        p = self.params
        if self.form in ("constant", "linear_x"):
            return np.zeros_like(g)
        if self.form == "linear_mean":
            return p.get("b", 0.0) * g
        if self.form == "affine":
            return p.get("bm", 0.0) * g
        m = self._m(mu)
        if self.form == "quadratic_mean":
            return 2.0 * p.get("b", 0.0) * m * g
        if self.form == "logistic":
            s = _sigmoid(p["b"] * (m - p.get("c", 0.0)))
            return p["a"] * p["b"] * s * (1.0 - s) * g
        raise MeasureError(self.form)  # pragma: no cover

    def d2mu(self, t, x, mu, v, u) -> np.ndarray:
        """delta^2 c / delta mu(v) delta mu(u); an outer-product matrix."""
        gv = self.observable.at_points(v)
        gu = self.observable.at_points(u)
        p = self.params
        if self.form in ("constant", "linear_x", "linear_mean", "affine"):
            return np.zeros((gv.size, gu.size))
        if self.form == "quadratic_mean":
            return 2.0 * p.get("b", 0.0) * np.outer(gv, gu)
        if self.form == "logistic":
            m = self._m(mu)
            s = _sigmoid(p["b"] * (m - p.get("c", 0.0)))
            return p["a"] * p["b"] ** 2 * s * (1.0 - s) * (1.0 - 2.0 * s) * np.outer(gv, gu)
        raise MeasureError(self.form)  # pragma: no cover


FORM_NAMES = ("constant", "linear_x", "linear_mean", "quadratic_mean", "logistic", "affine")


def build_observable(spec) -> Observable:
    if spec is None:
        return Observable()
    if isinstance(spec, Observable):
        return spec
    kind = spec.get("kind", "identity")
    if kind == "table":
        return Observable(kind="table", table=tuple(float(v) for v in spec["values"]))
    return Observable(kind=kind, k=int(spec.get("k", 0)))


def build_coefficient(spec) -> Coefficient:
    """Build from a number (constant shorthand) or a {form, params} mapping."""
    if isinstance(spec, Coefficient):
        return spec
    if isinstance(spec, (int, float)):
        return Coefficient("constant", {"c": float(spec)})
    if not isinstance(spec, dict) or "form" not in spec:
        raise MeasureError(f"bad coefficient spec: {spec!r}")
    params = {k: float(v) for k, v in spec.items() if k not in ("form", "observable")}
    return Coefficient(
        spec["form"], params, build_observable(spec.get("observable"))
    )
