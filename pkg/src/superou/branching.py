"""Branching mechanisms with finite atomic Levy measure.

A mechanism is

    psi(l) = -alpha*l + beta*l**2 + sum_i c_i * (exp(-l*x_i) - 1 + l*x_i)

with ``alpha > 0`` for the supercritical process under study.  The same class
also represents the subcritical dual ``psi*(l) = psi(l + lambda*)``, which has
``alpha = -alpha*`` and tilted weights ``c_i * exp(-lambda* x_i)``.

Besides the scalar constants this module builds the two offspring laws used
by the simulation engines: the backbone law ``p_n`` (with its branch-point
mass law ``eta_n``) and the mass-``eps`` particle rule whose branching
functional reproduces ``psi`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from numbers import Real
from typing import Sequence

import numpy as np
from scipy import optimize, stats


class MechanismError(ValueError):
    """A branching mechanism violates a standing assumption."""


class DiscretizationError(ValueError):
    """No mass-eps particle rule exists for the requested eps."""

    def __init__(self, message: str, max_eps: float):
        super().__init__(message)
        self.max_eps = max_eps


class ConsistencyError(RuntimeError):
    """An internal normalization or moment identity failed."""


@dataclass(frozen=True)
class BranchingMechanism:
    alpha: Real
    beta: float = 0.0
    atoms: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        atoms = tuple((float(x), float(c)) for x, c in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "beta", float(self.beta))

    @classmethod
    def from_dict(cls, obj: dict, parse=float) -> "BranchingMechanism":
        atoms = tuple((float(a["x"]), float(a["c"])) for a in obj.get("atoms", ()))
        return cls(parse(obj["alpha"]), float(obj.get("beta", 0.0)), atoms)

    def to_dict(self) -> dict:
        from .spectral import _num_to_json

        return {
            "alpha": _num_to_json(self.alpha),
            "beta": self.beta,
            "atoms": [{"x": x, "c": c} for x, c in self.atoms],
        }

    @property
    def _xc(self):
        if not self.atoms:
            return np.zeros(0), np.zeros(0)
        x, c = np.array(self.atoms).T
        return x, c

    def psi(self, lam):
        lam = np.asarray(lam, dtype=float)
        x, c = self._xc
        jump = np.sum(c * (np.expm1(-np.multiply.outer(lam, x)) + np.multiply.outer(lam, x)), axis=-1)
        out = -float(self.alpha) * lam + self.beta * lam * lam + jump
        return float(out) if out.ndim == 0 else out

    def dpsi(self, lam):
        lam = np.asarray(lam, dtype=float)
        x, c = self._xc
        jump = np.sum(c * x * -np.expm1(-np.multiply.outer(lam, x)), axis=-1)
        out = -float(self.alpha) + 2.0 * self.beta * lam + jump
        return float(out) if out.ndim == 0 else out

    def d2psi(self, lam=0.0):
        lam = np.asarray(lam, dtype=float)
        x, c = self._xc
        jump = np.sum(c * x * x * np.exp(-np.multiply.outer(lam, x)), axis=-1)
        out = 2.0 * self.beta + jump
        return float(out) if out.ndim == 0 else out

    @property
    def linear_jump_mass(self) -> float:
        """``sum_i c_i x_i``, the large-lambda slope contributed by the atoms."""
        return float(sum(c * x for x, c in self.atoms))

    @property
    def A(self) -> float:
        """``psi''(0+) = 2 beta + sum_i c_i x_i^2``."""
        return 2.0 * self.beta + float(sum(c * x * x for x, c in self.atoms))


def validate(m: BranchingMechanism) -> str | None:
    """First violated standing assumption as a message, or ``None`` if valid."""
    try:
        alpha = float(m.alpha)
    except (TypeError, ValueError):
        return "alpha is not a number"
    if not math.isfinite(alpha) or alpha <= 0:
        return f"supercriticality alpha = -psi'(0+) > 0 fails: alpha={m.alpha}"
    if not math.isfinite(m.beta) or m.beta < 0:
        return f"beta >= 0 fails: beta={m.beta}"
    for i, (x, c) in enumerate(m.atoms):
        if not (math.isfinite(x) and x > 0):
            return f"Levy measure must live on (0, inf): atom {i} has x={x}"
        if not (math.isfinite(c) and c > 0):
            return f"Levy measure weights must be positive: atom {i} has c={c}"
    if m.beta == 0 and m.linear_jump_mass <= alpha:
        return (f"psi(inf)=inf fails: beta=0 and sum c_i x_i = {m.linear_jump_mass:g} "
                f"<= alpha = {alpha:g}")
    return None


def check(m: BranchingMechanism) -> BranchingMechanism:
    msg = validate(m)
    if msg is not None:
        raise MechanismError(msg)
    return m


def lambda_star(m: BranchingMechanism) -> float:
    """The positive root of ``psi``."""
    check(m)
    alpha = float(m.alpha)
    # psi(l) <= -alpha l + (A/2) l^2 < 0 below alpha/A
    lo = alpha / m.A
    # psi(alpha/beta) >= 0 when beta > 0; doubling also covers rounding at an exact root
    hi = alpha / m.beta if m.beta > 0 else alpha / m.linear_jump_mass
    if m.psi(hi) == 0.0:
        return hi
    for _ in range(200):
        if m.psi(hi) > 0:
            break
        hi *= 2.0
    else:
        raise MechanismError("could not bracket the positive root of psi")
    root = optimize.brentq(m.psi, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    for _ in range(3):
        step = m.psi(root) / m.dpsi(root)
        if not math.isfinite(step) or abs(step) > 1e-8 * root:
            break
        root -= step
    return root


@dataclass(frozen=True)
class DerivedMechanism:
    """Constants derived from a supercritical mechanism.

    ``dual`` is the subcritical mechanism ``psi*`` as a
    :class:`BranchingMechanism` with negative ``alpha``.
    """

    mechanism: BranchingMechanism
    lambda_star: float
    alpha_star: float
    A: float
    A_star: float
    dual: BranchingMechanism = field(repr=False)

    @property
    def alpha(self) -> float:
        return float(self.mechanism.alpha)

    def psi_star(self, lam):
        return self.dual.psi(lam)


def derive(m: BranchingMechanism) -> DerivedMechanism:
    lam = lambda_star(m)
    alpha_star = m.dpsi(lam)
    if not alpha_star > 0:
        raise ConsistencyError(f"alpha* = psi'(lambda*) = {alpha_star} is not positive")
    tilted = tuple((x, c * math.exp(-lam * x)) for x, c in m.atoms)
    dual = BranchingMechanism(-alpha_star, m.beta, tilted)
    return DerivedMechanism(m, lam, alpha_star, m.A, dual.A, dual)


def generator_F(dm: DerivedMechanism, s) -> float:
    """Backbone branching generator ``F(s) = psi(lambda* (1 - s)) / lambda*``."""
    s = np.asarray(s, dtype=float)
    if np.any((s < 0) | (s > 1)):
        raise ValueError("s must lie in [0, 1]")
    return dm.mechanism.psi(dm.lambda_star * (1.0 - s)) / dm.lambda_star


def _sample_poisson_at_least_two(rng: np.random.Generator, lam: float, size: int) -> np.ndarray:
    """Poisson(lam) conditioned on >= 2.

    Rejection from plain Poisson draws; for small ``lam`` (acceptance below
    10%) inversion of the conditional cdf instead.
    """
    if lam < 0.5:
        ks = np.arange(2, 2 + 40)
        cdf = np.cumsum(stats.poisson.pmf(ks, lam)) / _poisson_tail2(lam)
        idx = np.searchsorted(cdf, rng.random(size), side="right")
        return ks[np.minimum(idx, ks.size - 1)]
    out = np.empty(size, dtype=np.int64)
    todo = np.arange(size)
    while todo.size:
        draw = rng.poisson(lam, todo.size)
        ok = draw >= 2
        out[todo[ok]] = draw[ok]
        todo = todo[~ok]
    return out


def _poisson_tail2(theta: float) -> float:
    """P(Poisson(theta) >= 2) without cancellation for small theta."""
    return -math.expm1(-theta) - theta * math.exp(-theta)


@dataclass(frozen=True)
class CountMixture:
    """Law of an offspring count written as a finite mixture.

    Component 0 is the point mass at ``k0`` (weight ``w0``), component 1 the
    point mass at 2 (weight ``w2``), and component ``2 + i`` is Poisson with
    mean ``theta[i]`` conditioned on ``>= 2`` (weight ``w[i]``).
    """

    k0: int
    w0: float
    w2: float
    theta: tuple[float, ...]
    w: tuple[float, ...]

    @property
    def weights(self) -> np.ndarray:
        return np.array((self.w0, self.w2) + self.w)

    def sample_with_component(self, rng: np.random.Generator, size: int):
        comp = rng.choice(len(self.weights), size=size, p=self.weights / self.weights.sum())
        k = np.where(comp == 0, self.k0, 2).astype(np.int64)
        for i, th in enumerate(self.theta):
            sel = np.flatnonzero(comp == 2 + i)
            if sel.size:
                k[sel] = _sample_poisson_at_least_two(rng, th, sel.size)
        return k, comp

    def sample(self, rng: np.random.Generator, size: int | None = None):
        k, _ = self.sample_with_component(rng, 1 if size is None else size)
        return int(k[0]) if size is None else k

    def pgf(self, s):
        s = np.asarray(s, dtype=float)
        out = self.w0 * s ** self.k0 + self.w2 * s * s
        for th, w in zip(self.theta, self.w):
            out = out + w * (np.exp(th * (s - 1.0)) - math.exp(-th) * (1.0 + th * s)) / _poisson_tail2(th)
        return out

    def pmf(self, max_k: int) -> np.ndarray:
        ks = np.arange(max_k + 1)
        out = np.zeros(max_k + 1)
        out[self.k0] += self.w0
        out[2] += self.w2
        for th, w in zip(self.theta, self.w):
            cond = stats.poisson.pmf(ks, th) / _poisson_tail2(th)
            cond[:2] = 0.0
            out += w * cond
        return out

    def support_bound(self, tail: float = 1e-14) -> int:
        """Smallest K with the mass above K below ``tail``."""
        top = max(2, self.k0)
        for th, w in zip(self.theta, self.w):
            if w > 0:
                # first k whose conditional tail mass (given >= 2) drops below tail / w
                ks = np.arange(2, int(th + 40.0 * math.sqrt(th) + 80))
                logtail = stats.poisson.logsf(ks, th) - math.log(_poisson_tail2(th))
                below = np.flatnonzero(logtail < math.log(tail / w))
                top = max(top, int(ks[below[0]]) if below.size else int(ks[-1]))
        return top

    def mean(self) -> float:
        out = self.w0 * self.k0 + 2.0 * self.w2
        for th, w in zip(self.theta, self.w):
            out += w * th * -math.expm1(-th) / _poisson_tail2(th)
        return out


@dataclass(frozen=True)
class OffspringLaw:
    """Backbone offspring law ``p_n`` (``n >= 2``) with its branch-point masses.

    ``pmf[n]`` is ``p_n`` up to the ``1 - 1e-14`` quantile; ``mixture`` is the
    exact sampler.  Component ``2 + i`` of the mixture corresponds to atom
    ``i`` and carries branch-point mass ``x_i``; the beta component carries 0.
    """

    pmf: np.ndarray
    mixture: CountMixture
    atom_masses: tuple[float, ...]
    dm: DerivedMechanism = field(repr=False)

    def sample(self, rng: np.random.Generator, size: int | None = None):
        return self.mixture.sample(rng, size)

    def sample_with_mass(self, rng: np.random.Generator, size: int):
        """Joint draw of (offspring count n, branch-point mass Y ~ eta_n)."""
        k, comp = self.mixture.sample_with_component(rng, size)
        masses = np.concatenate(([0.0, 0.0], self.atom_masses))
        return k, masses[comp]

    def mean(self) -> float:
        return self.mixture.mean()

    def pgf(self, s):
        return self.mixture.pgf(s)

    def prob(self, n: int) -> float:
        if n < 2:
            return 0.0
        return float(self.mixture.pmf(n)[n])


def backbone_offspring_law(dm: DerivedMechanism) -> OffspringLaw:
    m, lam, a_star = dm.mechanism, dm.lambda_star, dm.alpha_star
    norm = lam * a_star
    w2 = m.beta * lam * lam / norm
    theta = tuple(lam * x for x, _ in m.atoms)
    w = tuple(c * _poisson_tail2(th) / norm for (x, c), th in zip(m.atoms, theta))
    mix = CountMixture(2, 0.0, w2, theta, w)
    total = w2 + sum(w)
    if abs(total - 1.0) > 1e-10:
        raise ConsistencyError(f"backbone offspring weights sum to {total!r}, not 1")
    pmf = mix.pmf(mix.support_bound())
    return OffspringLaw(pmf, mix, tuple(x for x, _ in m.atoms), dm)


class DomainError(ValueError):
    pass


def branch_point_law(dm: DerivedMechanism, n_offspring: int, rng: np.random.Generator,
                     size: int | None = None):
    """Sample the branch-point immigration mass ``Y ~ eta_n`` given ``n`` offspring."""
    probs, masses = branch_point_weights(dm, n_offspring)
    idx = rng.choice(len(probs), size=size, p=probs)
    return masses[idx] if size is not None else float(masses[idx])


def branch_point_weights(dm: DerivedMechanism, n: int):
    """Atoms and weights of ``eta_n``: index 0 is the point mass at 0."""
    m, lam = dm.mechanism, dm.lambda_star
    raw = [m.beta * lam * lam if n == 2 else 0.0]
    raw += [c * math.exp(n * math.log(lam * x) - lam * x - math.lgamma(n + 1)) if n >= 2 else 0.0
            for x, c in m.atoms]
    raw = np.array(raw)
    total = raw.sum()
    if n < 2 or total <= 0:
        raise DomainError(f"p_{n} = 0: no backbone branching with {n} offspring")
    return raw / total, np.array([0.0] + [x for x, _ in m.atoms])


@dataclass(frozen=True)
class ParticleRule:
    """Mass-``eps`` particles branching at rate ``rate`` with offspring law ``offspring``.

    The rule satisfies ``rate * (g(s) - s) = eps * psi((1 - s) / eps)``, where
    ``g`` is the offspring generating function.
    """

    mechanism: BranchingMechanism
    eps: float
    rate: float
    offspring: CountMixture

    def pgf(self, s):
        return self.offspring.pgf(s)

    def coefficients(self, max_k: int) -> np.ndarray:
        return self.offspring.pmf(max_k)

    def mean_offspring(self) -> float:
        return self.offspring.mean()

    def sample(self, rng: np.random.Generator, size: int | None = None):
        return self.offspring.sample(rng, size)


def max_admissible_eps(mech: BranchingMechanism) -> float:
    """Largest eps with a valid rule: ``1/lambda*`` if supercritical, else infinite."""
    if float(mech.alpha) > 0:
        return 1.0 / lambda_star(mech)
    return math.inf


def discretize(mech: BranchingMechanism, eps: float) -> ParticleRule:
    """Mass-eps particle rule for ``mech`` (either ``psi`` or a dual ``psi*``).

    Expanding ``eps * psi((1 - s)/eps) = q0 + l*s + sum_{k>=2} q_k s^k`` gives
    ``q0 = eps * psi(1/eps)``, ``q2 = beta/eps + ...`` and per-atom Poisson
    tails ``eps c_i e^{-x_i/eps} (x_i/eps)^k / k!``.  The rate is ``-l`` and
    the offspring law puts mass ``q_k / rate`` on ``k`` (nothing on ``k = 1``).
    """
    if not eps > 0:
        raise DiscretizationError("eps must be positive", max_admissible_eps(mech))
    alpha = float(mech.alpha)
    eps = float(eps)
    q0 = eps * mech.psi(1.0 / eps)
    rate = 2.0 * mech.beta / eps - alpha + sum(c * x * -math.expm1(-x / eps) for x, c in mech.atoms)
    if q0 < -1e-12 * max(1.0, abs(rate)) or rate <= 0:
        bound = max_admissible_eps(mech)
        raise DiscretizationError(
            f"eps={eps:g} admits no particle rule (q0={q0:.3g}, rate={rate:.3g}); "
            f"maximal admissible eps is {bound:.6g}", bound)
    q0 = max(q0, 0.0)
    theta = tuple(x / eps for x, _ in mech.atoms)
    w = tuple(eps * c * _poisson_tail2(th) / rate for (x, c), th in zip(mech.atoms, theta))
    mix = CountMixture(0, q0 / rate, mech.beta / eps / rate, theta, w)
    total = float(mix.weights.sum())
    if abs(total - 1.0) > 1e-10:
        raise ConsistencyError(f"offspring weights sum to {total!r}, not 1")
    return ParticleRule(mech, eps, rate, mix)


def parse_atoms(atoms: Sequence) -> tuple[tuple[float, float], ...]:
    return tuple((float(a["x"]), float(a["c"])) if isinstance(a, dict) else (float(a[0]), float(a[1]))
                 for a in atoms)
