"""Hermite eigenfunction toolkit for the Ornstein-Uhlenbeck generator.

The generator ``L = 0.5 * sigma**2 * Laplacian - b * x . grad`` has eigenvalues
``-m * b`` with eigenfunctions

    phi_p(x) = H_p(sqrt(b) * x / sigma) / sqrt(p! * 2**|p|)

where ``H_p`` is the tensor product of physicists' Hermite polynomials.  The
``phi_p`` form an orthonormal basis of ``L^2(varphi)`` for the invariant
Gaussian density ``varphi``.  Test functions are carried around as finite
coefficient maps over this basis (:class:`SpectralFunction`), which makes the
semigroup, products and every moment formula exact.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from numbers import Rational, Real
from types import MappingProxyType
from typing import Callable, Iterable, Mapping

import numpy as np

#: Value returned by :func:`gamma_order` for the zero function.
INFINITY = math.inf

#: Coefficients smaller than this are dropped after products.
DROP_TOL = 1e-15

#: Fallback tolerance for deciding whether ``alpha / (2 b)`` is an integer.
CRITICAL_TOL = 1e-12


class ParameterMismatchError(ValueError):
    """Two spectral functions live over different OU parameters."""


class DegenerateFunctionError(ValueError):
    """The operation needs a nonzero function (finite gamma order)."""


@dataclass(frozen=True)
class OUParams:
    """Dimension ``d``, drift rate ``b`` and diffusion coefficient ``sigma``.

    ``b`` may be a :class:`fractions.Fraction` so that the critical test
    ``alpha == 2 * m * b`` can be decided exactly.
    """

    d: int = 1
    b: Real = 1.0
    sigma: Real = 1.0

    def __post_init__(self):
        if not isinstance(self.d, (int, np.integer)) or self.d < 1:
            raise ValueError(f"dimension d must be a positive integer, got {self.d!r}")
        if not self.b > 0:
            raise ValueError(f"drift rate b must be positive, got {self.b!r}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")

    @property
    def scale(self) -> float:
        """Factor ``sqrt(b) / sigma`` mapping x to the Hermite argument."""
        return math.sqrt(float(self.b)) / float(self.sigma)

    @property
    def stationary_sd(self) -> float:
        """Coordinate standard deviation of the invariant law, ``sigma/sqrt(2b)``."""
        return float(self.sigma) / math.sqrt(2.0 * float(self.b))

    def density(self, x) -> np.ndarray:
        """Invariant density ``varphi`` at points ``x`` of shape (n, d) or (d,)."""
        x = _as_points(x, self.d)
        b, s2 = float(self.b), float(self.sigma) ** 2
        return (b / (math.pi * s2)) ** (self.d / 2) * np.exp(-b / s2 * np.sum(x * x, axis=1))

    def to_dict(self) -> dict:
        return {"d": int(self.d), "b": _num_to_json(self.b), "sigma": _num_to_json(self.sigma)}


class MultiIndex(tuple):
    """A multi-index ``p`` in ``Z_+^d``; hashes and compares like a plain tuple."""

    def __new__(cls, entries: Iterable[int]):
        entries = tuple(int(e) for e in entries)
        if any(e < 0 for e in entries):
            raise ValueError(f"multi-index entries must be nonnegative, got {entries}")
        return super().__new__(cls, entries)

    @property
    def order(self) -> int:
        return sum(self)

    @property
    def factorial(self) -> int:
        return math.prod(math.factorial(e) for e in self)

    @classmethod
    def unit(cls, d: int, i: int, k: int = 1) -> "MultiIndex":
        """``k * e_i`` in dimension ``d`` (``i`` is zero based)."""
        return cls(k if j == i else 0 for j in range(d))

    @classmethod
    def zero(cls, d: int) -> "MultiIndex":
        return cls((0,) * d)


def enumerate_indices(d: int, max_order: int) -> list[MultiIndex]:
    """All ``p`` with ``|p| <= max_order``, sorted by order then reversed lex.

    Within one order the index with the largest leading entry comes first, so
    ``d=2, max_order=1`` gives ``[(0,0), (1,0), (0,1)]``.
    """
    if max_order < 0:
        raise ValueError("max_order must be nonnegative")
    out = []
    for m in range(max_order + 1):
        out.extend(MultiIndex(p) for p in _compositions(m, d))
    return out


def _compositions(m: int, d: int):
    if d == 1:
        yield (m,)
        return
    for first in range(m, -1, -1):
        for rest in _compositions(m - first, d - 1):
            yield (first,) + rest


def _as_points(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(1, d) if x.shape[0] == d else x.reshape(-1, 1)
    if x.shape[1] != d:
        raise ValueError(f"points have dimension {x.shape[1]}, expected {d}")
    return x


def _is_single(x, d: int) -> bool:
    nd = np.ndim(x)
    return nd == 0 or (nd == 1 and np.size(x) == d)


def hermite_table(y: np.ndarray, max_degree: int) -> np.ndarray:
    """Normalized Hermite values ``H_k(y) / sqrt(k! 2^k)`` for ``k <= max_degree``.

    Uses the three-term recurrence ``H_{k+1} = 2y H_k - 2k H_{k-1}`` rescaled
    to the normalized functions, which stays bounded for large ``k``.
    Output has shape ``y.shape + (max_degree + 1,)``.
    """
    y = np.asarray(y, dtype=float)
    out = np.empty(y.shape + (max_degree + 1,))
    out[..., 0] = 1.0
    if max_degree >= 1:
        out[..., 1] = math.sqrt(2.0) * y
    for k in range(1, max_degree):
        out[..., k + 1] = (
            math.sqrt(2.0 / (k + 1)) * y * out[..., k] - math.sqrt(k / (k + 1)) * out[..., k - 1]
        )
    return out


def eval_eigenfunction(p, x, params: OUParams) -> np.ndarray | float:
    """Evaluate ``phi_p`` at one point (returns float) or at an (n, d) array."""
    p = MultiIndex(p)
    if len(p) != params.d:
        raise ValueError(f"multi-index {p} does not match dimension {params.d}")
    single = _is_single(x, params.d)
    pts = _as_points(x, params.d)
    table = hermite_table(pts * params.scale, max(p) if p else 0)
    val = np.ones(pts.shape[0])
    for j, pj in enumerate(p):
        val *= table[:, j, pj]
    return float(val[0]) if single else val


@dataclass(frozen=True, eq=False)
class SpectralFunction:
    """A test function given by finitely many eigen-coefficients ``a_p``.

    Absent indices have coefficient zero; exact zeros are never stored.
    Supports ``+``, ``-``, scalar ``*``, and ``f * g`` for the pointwise
    product.  Calling the object evaluates it at points.
    """

    params: OUParams
    coeffs: Mapping[MultiIndex, float] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for p, a in self.coeffs.items():
            p = MultiIndex(p)
            if len(p) != self.params.d:
                raise ValueError(f"multi-index {p} does not match dimension {self.params.d}")
            a = float(a)
            if not math.isfinite(a):
                raise ValueError(f"coefficient for {p} is not finite")
            if a != 0.0:
                clean[p] = clean.get(p, 0.0) + a
        ordered = dict(sorted(clean.items(), key=lambda kv: (kv[0].order, tuple(-e for e in kv[0]))))
        object.__setattr__(self, "coeffs", MappingProxyType(ordered))

    def __reduce__(self):
        # mapping proxies do not pickle; rebuild from a plain dict in worker processes
        return (type(self), (self.params, dict(self.coeffs)))

    # construction helpers
    @classmethod
    def basis(cls, params: OUParams, p, coeff: float = 1.0) -> "SpectralFunction":
        return cls(params, {MultiIndex(p): coeff})

    @classmethod
    def zero(cls, params: OUParams) -> "SpectralFunction":
        return cls(params, {})

    @classmethod
    def constant(cls, params: OUParams, value: float = 1.0) -> "SpectralFunction":
        return cls(params, {MultiIndex.zero(params.d): value})

    def coeff(self, p) -> float:
        return self.coeffs.get(MultiIndex(p), 0.0)

    @property
    def support(self) -> list[MultiIndex]:
        return list(self.coeffs)

    @property
    def max_order(self) -> int:
        return max((p.order for p in self.coeffs), default=0)

    def is_zero(self) -> bool:
        return not self.coeffs

    def restrict(self, keep: Callable[[MultiIndex], bool]) -> "SpectralFunction":
        return SpectralFunction(self.params, {p: a for p, a in self.coeffs.items() if keep(p)})

    def __call__(self, x):
        single = _is_single(x, self.params.d)
        pts = _as_points(x, self.params.d)
        val = np.zeros(pts.shape[0])
        if self.coeffs:
            top = max(max(p) for p in self.coeffs)
            table = hermite_table(pts * self.params.scale, top)
            for p, a in self.coeffs.items():
                term = np.full(pts.shape[0], a)
                for j, pj in enumerate(p):
                    if pj:
                        term *= table[:, j, pj]
                val += term
        return float(val[0]) if single else val

    def _check(self, other: "SpectralFunction"):
        if self.params != other.params:
            raise ParameterMismatchError(f"OU parameters differ: {self.params} vs {other.params}")

    def __eq__(self, other):
        if not isinstance(other, SpectralFunction):
            return NotImplemented
        return self.params == other.params and dict(self.coeffs) == dict(other.coeffs)

    def __hash__(self):
        return hash((self.params, tuple(self.coeffs.items())))

    def __add__(self, other):
        if not isinstance(other, SpectralFunction):
            return NotImplemented
        self._check(other)
        out = dict(self.coeffs)
        for p, a in other.coeffs.items():
            out[p] = out.get(p, 0.0) + a
        return SpectralFunction(self.params, out)

    def __neg__(self):
        return SpectralFunction(self.params, {p: -a for p, a in self.coeffs.items()})

    def __sub__(self, other):
        if not isinstance(other, SpectralFunction):
            return NotImplemented
        return self + (-other)

    def __mul__(self, other):
        if isinstance(other, SpectralFunction):
            return product(self, other)
        if isinstance(other, Real):
            return SpectralFunction(self.params, {p: a * float(other) for p, a in self.coeffs.items()})
        return NotImplemented

    __rmul__ = __mul__

    def __repr__(self):
        terms = " + ".join(f"{a:.6g}*phi{tuple(p)}" for p, a in self.coeffs.items()) or "0"
        return f"SpectralFunction({terms})"

    def to_json(self) -> dict:
        return {
            "indices": [list(p) for p in self.coeffs],
            "coeffs": [a for a in self.coeffs.values()],
        }

    @classmethod
    def from_json(cls, obj: Mapping | str, params: OUParams) -> "SpectralFunction":
        if isinstance(obj, str):
            obj = json.loads(obj)
        indices, coeffs = obj["indices"], obj["coeffs"]
        if len(indices) != len(coeffs):
            raise ValueError("'indices' and 'coeffs' must have equal length")
        out: dict[MultiIndex, float] = {}
        for p, a in zip(indices, coeffs):
            p = MultiIndex(p)
            out[p] = out.get(p, 0.0) + float(a)
        return cls(params, out)


def inner_product_phi(f: SpectralFunction, g: SpectralFunction) -> float:
    """``<f, g>_varphi`` by Parseval."""
    f._check(g)
    small, big = (f, g) if len(f.coeffs) <= len(g.coeffs) else (g, f)
    return math.fsum(a * big.coeffs.get(p, 0.0) for p, a in small.coeffs.items())


@lru_cache(maxsize=None)
def _linearization(m: int, n: int) -> tuple[tuple[int, float], ...]:
    """Coefficients of ``psi_m * psi_n`` on ``psi_{m+n-2k}`` (normalized Hermite).

    From ``H_m H_n = sum_k C(m,k) C(n,k) k! 2^k H_{m+n-2k}``; after
    normalization the powers of two cancel and the k-th coefficient is
    ``sqrt(m! n! (m+n-2k)!) / (k! (m-k)! (n-k)!)``.
    """
    out = []
    fm, fn = math.factorial(m), math.factorial(n)
    for k in range(min(m, n) + 1):
        sq = Fraction(fm * fn * math.factorial(m + n - 2 * k),
                      (math.factorial(k) * math.factorial(m - k) * math.factorial(n - k)) ** 2)
        out.append((m + n - 2 * k, math.sqrt(sq)))
    return tuple(out)


def product(f: SpectralFunction, g: SpectralFunction) -> SpectralFunction:
    """Pointwise product ``f * g`` expanded exactly in the eigenbasis."""
    f._check(g)
    out: dict[tuple, float] = {}
    for p, a in f.coeffs.items():
        for q, c in g.coeffs.items():
            per_coord = [_linearization(pj, qj) for pj, qj in zip(p, q)]
            for combo in itertools.product(*per_coord):
                r = tuple(k for k, _ in combo)
                out[r] = out.get(r, 0.0) + a * c * math.prod(w for _, w in combo)
    return SpectralFunction(f.params, {r: v for r, v in out.items() if abs(v) >= DROP_TOL})


def project(fn: Callable[[np.ndarray], np.ndarray], max_order: int, quad_order: int,
            params: OUParams, drop_tol: float = 1e-12) -> SpectralFunction:
    """Coefficients ``a_p = <fn, phi_p>_varphi`` for ``|p| <= max_order``.

    ``fn`` takes an (n, d) array of points and returns n values.  The inner
    products are computed by tensor Gauss-Hermite quadrature with
    ``quad_order`` nodes per coordinate, exact for polynomial ``fn`` of
    degree at most ``2 * quad_order - 1 - max_order``.  Coefficients with
    magnitude below ``drop_tol`` (relative to the largest) are treated as
    quadrature noise and dropped, so that ``gamma_order`` is meaningful.
    """
    if quad_order < max_order + 1:
        raise ValueError(f"quad_order={quad_order} too small for max_order={max_order}; "
                         f"need at least {max_order + 1}")
    d = params.d
    nodes, weights = np.polynomial.hermite.hermgauss(quad_order)
    weights = weights / math.sqrt(math.pi)
    grid = np.array(list(itertools.product(range(quad_order), repeat=d)))
    y = nodes[grid]  # (N, d) Hermite arguments
    w = np.prod(weights[grid], axis=1)
    vals = np.asarray(fn(y / params.scale), dtype=float).reshape(-1)
    if vals.shape[0] != y.shape[0]:
        raise ValueError("fn must map an (n, d) array to n values")
    table = hermite_table(y, max_order)  # (N, d, K)
    raw = {}
    for p in enumerate_indices(d, max_order):
        basis = np.ones(y.shape[0])
        for j, pj in enumerate(p):
            basis *= table[:, j, pj]
        raw[p] = float(np.dot(w * vals, basis))
    scale = max((abs(a) for a in raw.values()), default=0.0)
    cut = drop_tol * max(scale, 1.0)
    return SpectralFunction(params, {p: a for p, a in raw.items() if abs(a) > cut})


def gamma_order(f: SpectralFunction) -> int | float:
    """Smallest order carrying a nonzero coefficient; :data:`INFINITY` for zero."""
    return min((p.order for p in f.coeffs), default=INFINITY)


def critical_order(alpha: Real, b: Real) -> int | None:
    """The integer ``alpha / (2 b)`` if it is one, else ``None``.

    Exact when both arguments are rational (ints or Fractions); otherwise
    decided with tolerance :data:`CRITICAL_TOL`.
    """
    if isinstance(alpha, Rational) and isinstance(b, Rational):
        ratio = Fraction(alpha) / (2 * Fraction(b))
        return int(ratio) if ratio.denominator == 1 else None
    ratio = float(alpha) / (2.0 * float(b))
    nearest = round(ratio)
    return int(nearest) if abs(ratio - nearest) <= CRITICAL_TOL else None


def compare_order(m: int, alpha: Real, b: Real) -> int:
    """Sign of ``2 m b - alpha``: -1 if ``m < alpha/(2b)``, 0 if equal, 1 if above."""
    crit = critical_order(alpha, b)
    if crit is not None:
        return (m > crit) - (m < crit)
    return 1 if 2.0 * m * float(b) > float(alpha) else -1


def spectral_split(f: SpectralFunction, alpha: Real, b: Real):
    """Split ``f`` into ``(f_s, f_c, f_l)`` by order below, at, above ``alpha/(2b)``."""
    if not alpha > 0 or not b > 0:
        raise ValueError("alpha and b must be positive")
    if gamma_order(f) == INFINITY:
        raise DegenerateFunctionError("spectral split of the zero function")
    parts: tuple[dict, dict, dict] = ({}, {}, {})
    for p, a in f.coeffs.items():
        parts[compare_order(p.order, alpha, b) + 1][p] = a
    return tuple(SpectralFunction(f.params, part) for part in parts)


def semigroup_apply(f: SpectralFunction, t: float) -> SpectralFunction:
    """``T_t f``: each coefficient is damped by ``exp(-|p| b t)``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return f
    b = float(f.params.b)
    return SpectralFunction(f.params, {p: a * math.exp(-p.order * b * t) for p, a in f.coeffs.items()})


def ou_transition_sample(x, t, params: OUParams, rng: np.random.Generator) -> np.ndarray:
    """Exact OU transition: ``N(x e^{-bt}, sigma_t^2 I)`` with ``sigma_t^2 = sigma^2 (1 - e^{-2bt}) / (2b)``.

    ``x`` broadcasts against ``t``; both may be arrays (one time per point).
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    b = float(params.b)
    decay = np.exp(-b * t)
    sd = float(params.sigma) * np.sqrt(-np.expm1(-2.0 * b * t) / (2.0 * b))
    if x.ndim == 2 and decay.ndim == 1:
        decay, sd = decay[:, None], sd[:, None]
    return x * decay + sd * rng.standard_normal(x.shape)


def parse_real(value) -> Real:
    """Config helper: ``"3/10"`` and ints become Fractions; other numbers floats."""
    if isinstance(value, bool):
        raise ValueError("booleans are not numbers here")
    if isinstance(value, (int, Fraction)):
        return Fraction(value)
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return Fraction(int(value[0]), int(value[1]))
    return float(value)


def _num_to_json(value):
    if isinstance(value, Fraction):
        return str(value) if value.denominator != 1 else int(value)
    return float(value)
