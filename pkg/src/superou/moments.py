"""Closed-form first and second moments and the limiting variance constants.

Every formula here is evaluated exactly for :class:`SpectralFunction` inputs:
``(T_s f)^2`` is expanded in the eigenbasis with the Hermite product, after
which the time integrals are elementary exponentials.  Three laws are
covered: the supercritical process ``X`` (mechanism ``psi``), the
subcritical process ``X~`` (mechanism ``psi*``), and the immigration
process ``I`` generated along one backbone particle.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import exprel

from .branching import ConsistencyError, DerivedMechanism
from .spectral import (
    INFINITY,
    DegenerateFunctionError,
    MultiIndex,
    OUParams,
    SpectralFunction,
    compare_order,
    critical_order,
    gamma_order,
    semigroup_apply,
    spectral_split,
)


class Law(enum.Enum):
    X = "X"          # supercritical (xi, psi)-superprocess
    XSTAR = "X*"     # subcritical (xi, psi*)-superprocess
    I = "I"          # immigration along a single backbone particle


class Regime(enum.Enum):
    SMALL = "small"
    CRITICAL = "critical"
    LARGE = "large"


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite atomic measure ``sum_j masses[j] * delta_{points[j]}``."""

    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        m = np.atleast_1d(np.asarray(self.masses, dtype=float))
        if pts.shape[0] != m.shape[0]:
            raise ValueError("points and masses differ in length")
        if np.any(m < 0):
            raise ValueError("masses must be nonnegative")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "masses", m)

    @classmethod
    def dirac(cls, x, mass: float = 1.0) -> "AtomicMeasure":
        return cls(np.atleast_2d(np.asarray(x, dtype=float)), [mass])

    @classmethod
    def empty(cls, d: int) -> "AtomicMeasure":
        return cls(np.zeros((0, d)), np.zeros(0))

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def integrate(self, f) -> float:
        if self.masses.size == 0:
            return 0.0
        return float(np.dot(self.masses, f(self.points)))

    def to_json(self) -> list:
        return [{"x": list(map(float, p)), "m": float(m)} for p, m in zip(self.points, self.masses)]

    @classmethod
    def from_json(cls, atoms: Sequence[dict], d: int) -> "AtomicMeasure":
        if not atoms:
            return cls.empty(d)
        pts = np.array([np.atleast_1d(a["x"]) for a in atoms], dtype=float).reshape(len(atoms), d)
        return cls(pts, [float(a["m"]) for a in atoms])


@dataclass(frozen=True)
class MomentReport:
    mean: float
    variance: float
    t: float
    law: Law


@dataclass(frozen=True)
class LimitConstants:
    """Limit variances for one test function; fields not relevant to the regime are None."""

    regime: Regime
    gamma: int
    sigma_f_sq: float | None = None
    rho_f_sq: float | None = None
    eta_f_sq: SpectralFunction | None = None
    beta_fs_sq: float | None = None
    sigma_fl_sq: float | None = None
    crit_var: float | None = None

    @property
    def theorem21_var(self) -> float | None:
        if self.beta_fs_sq is None:
            return None
        return self.beta_fs_sq + self.sigma_fl_sq

    def to_dict(self) -> dict:
        out = {"regime": self.regime.value, "gamma": self.gamma}
        for name in ("sigma_f_sq", "rho_f_sq", "beta_fs_sq", "sigma_fl_sq", "crit_var"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val
        if self.eta_f_sq is not None:
            out["eta_f_sq"] = self.eta_f_sq.to_json()
        if self.theorem21_var is not None:
            out["theorem21_var"] = self.theorem21_var
        return out


def _law_rates(dm: DerivedMechanism, law: Law) -> tuple[float, float]:
    """Growth rate and branching constant ``psi''(0+)`` of the law."""
    if law is Law.X:
        return dm.alpha, dm.A
    if law is Law.XSTAR:
        return -dm.alpha_star, dm.A_star
    raise ValueError(f"law {law} has no direct branching rates")


def _by_order(f: SpectralFunction) -> dict[int, SpectralFunction]:
    groups: dict[int, dict] = {}
    for p, a in f.coeffs.items():
        groups.setdefault(p.order, {})[p] = a
    return {m: SpectralFunction(f.params, c) for m, c in groups.items()}


def _square_terms(f: SpectralFunction):
    """Terms ``(n, q, B)`` with ``(T_s f)^2 = sum B e^{-n b s} phi_q``."""
    groups = _by_order(f)
    orders = sorted(groups)
    acc: dict[tuple[int, MultiIndex], float] = {}
    for i, m in enumerate(orders):
        for m2 in orders[i:]:
            prod = groups[m] * groups[m2]
            mult = 1.0 if m == m2 else 2.0
            for q, c in prod.coeffs.items():
                key = (m + m2, q)
                acc[key] = acc.get(key, 0.0) + mult * c
    return [(n, q, c) for (n, q), c in acc.items()]


def _points_of(mu, d: int) -> AtomicMeasure:
    if isinstance(mu, AtomicMeasure):
        return mu
    return AtomicMeasure.dirac(np.asarray(mu, dtype=float).reshape(1, d))


def mean_functional(f: SpectralFunction, mu, t: float, dm: DerivedMechanism, law: Law = Law.X) -> float:
    """``E_mu <f, X_t>`` for the chosen law.

    For ``Law.I`` the atoms of ``mu`` count initial backbone particles and the
    result is the expected immigration functional they generate.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    mu = _points_of(mu, f.params.d)
    base = mu.integrate(semigroup_apply(f, t))
    if law is Law.X:
        return math.exp(dm.alpha * t) * base
    if law is Law.XSTAR:
        return math.exp(-dm.alpha_star * t) * base
    return (math.exp(dm.alpha * t) - math.exp(-dm.alpha_star * t)) * base / dm.lambda_star


def _variance_at(terms, params: OUParams, x: np.ndarray, t: float, rate: float, const: float) -> float:
    """``const e^{rt} int_0^t e^{rs} T_{t-s}[(T_s f)^2](x) ds`` from square terms."""
    if t == 0 or not terms:
        return 0.0
    b = float(params.b)
    acc = []
    for n, q, c in terms:
        kappa = rate - n * b + q.order * b
        integral = t * exprel(kappa * t)
        phi_q = SpectralFunction.basis(params, q)(x)
        acc.append(c * phi_q * math.exp((rate - q.order * b) * t) * integral)
    return const * math.fsum(acc)


def variance_functional(f: SpectralFunction, x, t: float, dm: DerivedMechanism, law: Law = Law.X) -> float:
    """``Var_{delta_x} <f, X_t>`` in closed form.

    ``Law.X`` and ``Law.XSTAR`` use ``A e^{rt} int_0^t e^{rs} T_{t-s}[(T_s f)^2] ds``
    with ``(A, r)`` equal to ``(psi''(0), alpha)`` or ``(psi*''(0), -alpha*)``.
    ``Law.I`` is the variance of the immigration generated by one backbone
    particle started at ``x``.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    x = np.asarray(x, dtype=float).reshape(f.params.d)
    if law is Law.I:
        mean, second = immigration_moments(f, x, t, dm)
        return max(second - mean * mean, 0.0)
    rate, const = _law_rates(dm, law)
    return _variance_at(_square_terms(f), f.params, x, t, rate, const)


def variance_measure(f: SpectralFunction, mu: AtomicMeasure, t: float, dm: DerivedMechanism,
                     law: Law = Law.X) -> float:
    """Variance under an initial atomic measure (additive over atoms)."""
    if law is Law.I:
        raise ValueError("immigration variance is defined per backbone particle")
    return math.fsum(m * variance_functional(f, x, t, dm, law) for x, m in zip(mu.points, mu.masses))


def discretization_excess(f: SpectralFunction, mu, t: float, dm: DerivedMechanism, eps: float,
                          law: Law = Law.X) -> float:
    """Extra variance of the mass-eps particle system over the superprocess.

    The particle picture at time t is a Poisson cloud of intensity
    ``X_t / eps`` with atoms of mass eps, so its variance exceeds the
    superprocess variance by ``eps * E<f^2, X_t>``.
    """
    return eps * mean_functional(f * f, mu, t, dm, law)


def immigration_moments(f: SpectralFunction, x, t: float, dm: DerivedMechanism) -> tuple[float, float]:
    """Mean and second moment of ``<f, I_t>`` for one backbone particle at ``x``."""
    x = np.asarray(x, dtype=float).reshape(f.params.d)
    mean = mean_functional(f, x, t, dm, Law.I)
    terms = _square_terms(f)
    var_x = _variance_at(terms, f.params, x, t, dm.alpha, dm.A)
    var_star = _variance_at(terms, f.params, x, t, -dm.alpha_star, dm.A_star)
    second = (var_x - var_star) / dm.lambda_star
    scale = max(abs(second), mean * mean, 1.0)
    if second < mean * mean - 1e-9 * scale:
        raise ConsistencyError(f"immigration second moment {second} below squared mean {mean * mean}")
    return mean, second


def extinction_probability(mu, dm: DerivedMechanism) -> float:
    mass = mu.total_mass if isinstance(mu, AtomicMeasure) else float(mu)
    if mass < 0:
        raise ValueError("total mass must be nonnegative")
    return math.exp(-dm.lambda_star * mass)


def classify(f: SpectralFunction, alpha, b) -> Regime:
    gamma = gamma_order(f)
    if gamma == INFINITY:
        raise DegenerateFunctionError("the zero function has no regime")
    sign = compare_order(gamma, alpha, b)
    return {-1: Regime.LARGE, 0: Regime.CRITICAL, 1: Regime.SMALL}[sign]


def _small_sum(f: SpectralFunction, alpha: float, b: float, A: float) -> float:
    """``A * sum_p a_p^2 / (2|p|b - alpha)``; every order must exceed ``alpha/(2b)``."""
    return A * math.fsum(a * a / (2 * p.order * b - alpha) for p, a in f.coeffs.items())


def limit_constants(f: SpectralFunction, dm: DerivedMechanism, alpha=None, b=None) -> LimitConstants:
    """Regime and limiting variances for ``f``.

    ``alpha`` and ``b`` default to the mechanism's and ``f``'s values; pass
    Fractions to decide the critical case exactly.
    """
    alpha = dm.mechanism.alpha if alpha is None else alpha
    b = f.params.b if b is None else b
    regime = classify(f, alpha, b)
    gamma = int(gamma_order(f))
    A, af, bf = dm.A, float(alpha), float(b)
    if regime is Regime.SMALL:
        return LimitConstants(regime, gamma, sigma_f_sq=_small_sum(f, af, bf, A))
    lead = f.restrict(lambda p: p.order == gamma)
    if regime is Regime.CRITICAL:
        return LimitConstants(regime, gamma, rho_f_sq=A * sum(a * a for a in lead.coeffs.values()))
    f_s, f_c, f_l = spectral_split(f, alpha, b)
    square = lead * lead
    eta = SpectralFunction(f.params, {q: A * c / (af - 2 * gamma * bf + q.order * bf)
                                      for q, c in square.coeffs.items()})
    beta_fs = A * math.fsum(a * a / (af - 2 * p.order * bf) for p, a in f_s.coeffs.items())
    return LimitConstants(
        regime, gamma,
        eta_f_sq=eta,
        beta_fs_sq=beta_fs,
        sigma_fl_sq=_small_sum(f_l, af, bf, A),
        crit_var=A * math.fsum(a * a for a in f_c.coeffs.values()),
    )


def normalization(regime: Regime, t: float, alpha: float, gamma: int, b: float) -> float:
    """Factor turning ``Var_{delta_x}<f, X_t>`` into the quantity with a finite limit."""
    if regime is Regime.SMALL:
        return math.exp(-alpha * t)
    if regime is Regime.CRITICAL:
        return math.exp(-alpha * t) / t
    return math.exp(-2.0 * (alpha - gamma * b) * t)


def asymptotic_check(f: SpectralFunction, x, dm: DerivedMechanism, t_grid: Iterable[float]) -> list[dict]:
    """Normalized variances against their limits, for ``X`` and ``I``.

    Rows carry ``t, law, normalized, limit, rel_gap``.
    """
    t_grid = list(t_grid)
    if any(t1 <= t0 for t0, t1 in zip(t_grid, t_grid[1:])):
        raise ValueError("t_grid must be increasing")
    x = np.asarray(x, dtype=float).reshape(f.params.d)
    lc = limit_constants(f, dm)
    b, alpha, lam = float(f.params.b), dm.alpha, dm.lambda_star
    if lc.regime is Regime.SMALL:
        lim_x = lc.sigma_f_sq
        lim_i = lim_x / lam
    elif lc.regime is Regime.CRITICAL:
        lim_x = lc.rho_f_sq
        lim_i = lim_x / lam
    else:
        lead = f.restrict(lambda p: p.order == lc.gamma)(x)
        lim_x = lc.eta_f_sq(x)
        lim_i = lim_x / lam - lead * lead / lam ** 2
    rows = []
    for t in t_grid:
        scale = normalization(lc.regime, t, alpha, lc.gamma, b)
        for law, lim in ((Law.X, lim_x), (Law.I, lim_i)):
            val = scale * variance_functional(f, x, t, dm, law)
            gap = abs(val / lim - 1.0) if lim != 0 else abs(val)
            rows.append({"t": float(t), "law": law.value, "normalized": val, "limit": lim, "rel_gap": gap})
    return rows


def martingale_second_moment(p, mu: AtomicMeasure, t: float, dm: DerivedMechanism, params: OUParams) -> float:
    """``E_mu (H_t^p)^2`` with ``H_t^p = e^{-(alpha - |p| b) t} <phi_p, X_t>``."""
    phi = SpectralFunction.basis(params, p)
    k = math.exp(-(dm.alpha - MultiIndex(p).order * float(params.b)) * t)
    mean = mean_functional(phi, mu, t, dm)
    return k * k * (mean * mean + variance_measure(phi, mu, t, dm))


def martingale_second_moment_limit(p, mu: AtomicMeasure, dm: DerivedMechanism, params: OUParams) -> float:
    """``<phi_p, mu>^2 + A int_0^inf e^{-(alpha - 2|p|b)s} T_s[phi_p^2] ds`` against mu.

    Finite only when ``alpha > 2|p|b``.
    """
    p = MultiIndex(p)
    b = float(params.b)
    gap = dm.alpha - 2 * p.order * b
    if gap <= 0:
        return math.inf
    phi = SpectralFunction.basis(params, p)
    square = phi * phi
    kernel = SpectralFunction(params, {q: dm.A * c / (gap + q.order * b) for q, c in square.coeffs.items()})
    return mu.integrate(phi) ** 2 + mu.integrate(kernel)


def martingale_increment_variance(p, mu: AtomicMeasure, s: float, t: float, dm: DerivedMechanism,
                                  params: OUParams) -> float:
    """``Var(H_t^p - H_s^p) = E(H_t^p)^2 - E(H_s^p)^2`` for ``s <= t`` (orthogonal increments)."""
    return martingale_second_moment(p, mu, t, dm, params) - martingale_second_moment(p, mu, s, dm, params)


def plugin_residual_variance(f: SpectralFunction, dm: DerivedMechanism, delta: float) -> float:
    """Approximate variance left out when ``H_inf^p`` is replaced by ``H_{t+delta}^p``.

    Each small-order component contributes
    ``A sum a_p^2 / (alpha - 2mb) * exp(-(alpha - 2mb) delta)`` to the
    normalized statistic; the plug-in statistic's variance is lower by this.
    """
    f_s, _, _ = spectral_split(f, dm.mechanism.alpha, f.params.b)
    b = float(f.params.b)
    return dm.A * math.fsum(a * a / (dm.alpha - 2 * p.order * b) * math.exp(-(dm.alpha - 2 * p.order * b) * delta)
                            for p, a in f_s.coeffs.items())


__all__ = [
    "AtomicMeasure", "Law", "LimitConstants", "MomentReport", "Regime", "asymptotic_check",
    "classify", "critical_order", "discretization_excess", "extinction_probability",
    "immigration_moments", "limit_constants", "martingale_increment_variance",
    "martingale_second_moment", "martingale_second_moment_limit", "mean_functional",
    "normalization", "plugin_residual_variance", "variance_functional", "variance_measure",
]
