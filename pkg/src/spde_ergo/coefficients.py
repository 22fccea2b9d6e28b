"""Coefficient triples ``(b, g = g1 + g2, sigma)``, truncation gate and mollifier.

Coefficients are built from small term objects (constants, polynomials and
sines in ``r``, or opaque closures in ``(t, x, r)``).  Every term evaluates
vectorized over ``r``, knows its ``r``-derivative and can be mollified in
``r``.  Polynomial and sine terms mollify in closed form from the moments and
the characteristic function of the bump; closures fall back to quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .errors import ConfigurationError, HypothesisViolation
from .grid_noise import row_sum


# ---------------------------------------------------------------------------
# mollifier


def _bump(z):
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    inside = np.abs(z) < 1.0
    zi = z[inside]
    out[inside] = np.exp(-1.0 / (1.0 - zi * zi))
    return out


def _bump_prime(z):
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    inside = np.abs(z) < 1.0
    zi = z[inside]
    q = 1.0 - zi * zi
    out[inside] = np.exp(-1.0 / q) * (-2.0 * zi / (q * q))
    return out


@lru_cache(maxsize=None)
def _bump_mass():
    mass, _ = integrate.quad(lambda z: math.exp(-1.0 / (1.0 - z * z)), -1.0, 1.0, epsabs=1e-14, epsrel=1e-13)
    return mass


@dataclass(frozen=True)
class Mollifier:
    """Normalized bump ``phi(z) ~ exp(-1/(1-z^2))`` on (-1, 1) and its quadrature.

    ``n`` is the mollification index: coefficients are smoothed with
    ``phi_n(y) = n phi(n y)``.
    """

    n: int
    n_nodes: int = 96

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("mollification index must be >= 1")

    @property
    def mass(self) -> float:
        return _bump_mass()

    def phi(self, z):
        return _bump(z) / self.mass

    @property
    def nodes(self):
        return _quadrature(self.n_nodes)[0]

    @property
    def weights(self):
        return _quadrature(self.n_nodes)[1]

    @property
    def derivative_weights(self):
        return _quadrature(self.n_nodes)[2]

    def moment(self, k: int) -> float:
        return _moment(k)

    def characteristic(self, omega: float) -> float:
        """``int phi(z) cos(omega z) dz`` (the bump is even)."""
        return _characteristic(float(omega))


@lru_cache(maxsize=None)
def _quadrature(n_nodes):
    z, w = np.polynomial.legendre.leggauss(n_nodes)
    mass = _bump_mass()
    wphi = w * _bump(z) / mass
    # exact unit mass keeps constants invariant to round-off
    wphi /= wphi.sum()
    wdphi = w * _bump_prime(z) / mass
    return z, wphi, wdphi


@lru_cache(maxsize=None)
def _moment(k):
    if k % 2:
        return 0.0
    val, _ = integrate.quad(lambda z: z**k * math.exp(-1.0 / (1.0 - z * z)), -1.0, 1.0, epsabs=1e-15, epsrel=1e-13)
    return val / _bump_mass()


@lru_cache(maxsize=4096)
def _characteristic(omega):
    val, _ = integrate.quad(
        lambda z: math.cos(omega * z) * math.exp(-1.0 / (1.0 - z * z)), -1.0, 1.0, epsabs=1e-15, epsrel=1e-13
    )
    return val / _bump_mass()


# ---------------------------------------------------------------------------
# coefficient terms


def _shape(t, x, r):
    return np.broadcast(np.asarray(t), np.asarray(x), np.asarray(r)).shape


class Term:
    """A scalar coefficient ``(t, x, r) -> value``."""

    is_zero = False
    is_constant = False

    def __call__(self, t, x, r):
        raise NotImplementedError

    def deriv(self, t, x, r):
        raise NotImplementedError

    def mollify(self, moll: Mollifier) -> "Term":
        return Mollified(self, moll)

    def __add__(self, other):
        return Sum((self, other))


@dataclass(frozen=True, eq=False)
class Constant(Term):
    value: float = 0.0

    @property
    def is_zero(self):
        return self.value == 0.0

    is_constant = True

    def __call__(self, t, x, r):
        return np.full(_shape(t, x, r), float(self.value))

    def deriv(self, t, x, r):
        return np.zeros(_shape(t, x, r))

    def mollify(self, moll):
        return self


@dataclass(frozen=True, eq=False)
class Polynomial(Term):
    """``sum_k coeffs[k] r^k``."""

    coeffs: tuple = (0.0,)

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))

    @property
    def is_zero(self):
        return all(c == 0.0 for c in self.coeffs)

    @property
    def is_constant(self):
        return all(c == 0.0 for c in self.coeffs[1:])

    @staticmethod
    def _horner(coeffs, r, shape):
        val = np.full(r.shape, coeffs[-1])
        for c in coeffs[-2::-1]:
            val *= r
            val += c
        if val.shape != shape:
            val = np.broadcast_to(val, shape).astype(float, copy=True)
        return val

    def __call__(self, t, x, r):
        r = np.asarray(r, dtype=float)
        return self._horner(self.coeffs, r, _shape(t, x, r))

    def deriv(self, t, x, r):
        r = np.asarray(r, dtype=float)
        d = tuple(k * c for k, c in enumerate(self.coeffs))[1:] or (0.0,)
        return self._horner(d, r, _shape(t, x, r))

    def mollify(self, moll):
        # int phi(z) p(xi - z/n) dz = sum_j c_j sum_i C(j,i) xi^(j-i) (-1)^i m_i / n^i
        c = self.coeffs
        out = np.zeros(len(c))
        for j, cj in enumerate(c):
            for i in range(0, j + 1, 2):
                out[j - i] += cj * math.comb(j, i) * moll.moment(i) / moll.n**i
        return Polynomial(tuple(out))


@dataclass(frozen=True, eq=False)
class Sine(Term):
    """``amplitude * sin(frequency * r)``."""

    amplitude: float = 0.0
    frequency: float = 1.0

    @property
    def is_zero(self):
        return self.amplitude == 0.0 or self.frequency == 0.0

    def __call__(self, t, x, r):
        r = np.asarray(r, dtype=float)
        val = self.amplitude * np.sin(self.frequency * r)
        return np.broadcast_to(val, _shape(t, x, r)).astype(float, copy=True)

    def deriv(self, t, x, r):
        r = np.asarray(r, dtype=float)
        val = self.amplitude * self.frequency * np.cos(self.frequency * r)
        return np.broadcast_to(val, _shape(t, x, r)).astype(float, copy=True)

    def mollify(self, moll):
        factor = moll.characteristic(self.frequency / moll.n)
        return Sine(self.amplitude * factor, self.frequency)


@dataclass(frozen=True, eq=False)
class Sum(Term):
    terms: tuple = ()

    def __post_init__(self):
        flat = []
        for term in self.terms:
            flat.extend(term.terms if isinstance(term, Sum) else [term])
        object.__setattr__(self, "terms", tuple(t for t in flat if not t.is_zero))

    @property
    def is_zero(self):
        return not self.terms

    @property
    def is_constant(self):
        return all(t.is_constant for t in self.terms)

    def __call__(self, t, x, r):
        out = np.zeros(_shape(t, x, r))
        for term in self.terms:
            out = out + term(t, x, r)
        return out

    def deriv(self, t, x, r):
        out = np.zeros(_shape(t, x, r))
        for term in self.terms:
            out = out + term.deriv(t, x, r)
        return out

    def mollify(self, moll):
        return Sum(tuple(term.mollify(moll) for term in self.terms))


@dataclass(frozen=True, eq=False)
class Closure(Term):
    """Opaque callable ``fn(t, x, r)``; derivative by central differences if absent."""

    fn: Callable = None
    dfn: Optional[Callable] = None
    step: float = 1e-6

    def __call__(self, t, x, r):
        val = self.fn(t, x, np.asarray(r, dtype=float))
        return np.broadcast_to(np.asarray(val, dtype=float), _shape(t, x, r)).astype(float, copy=True)

    def deriv(self, t, x, r):
        r = np.asarray(r, dtype=float)
        if self.dfn is not None:
            val = self.dfn(t, x, r)
        else:
            h = self.step * np.maximum(1.0, np.abs(r))
            val = (self.fn(t, x, r + h) - self.fn(t, x, r - h)) / (2 * h)
        return np.broadcast_to(np.asarray(val, dtype=float), _shape(t, x, r)).astype(float, copy=True)


@dataclass(frozen=True, eq=False)
class Mollified(Term):
    """Quadrature mollification ``int phi(z) f(t, x, xi - z/n) dz`` of any term.

    The derivative moves onto the bump, ``n int phi'(z) f(xi - z/n) dz``, so
    terms with kinks are handled without differentiating them.
    """

    base: Term = None
    moll: Mollifier = None

    def _stack(self, t, x, r):
        r = np.asarray(r, dtype=float)
        shifts = self.moll.nodes / self.moll.n
        rr = r[..., None] - shifts
        return self.base(np.asarray(t)[..., None], np.asarray(x)[..., None], rr)

    def __call__(self, t, x, r):
        vals = row_sum(self._stack(t, x, r) * self.moll.weights)
        return np.broadcast_to(vals, _shape(t, x, r)).astype(float, copy=True)

    def deriv(self, t, x, r):
        vals = self.moll.n * row_sum(self._stack(t, x, r) * self.moll.derivative_weights)
        return np.broadcast_to(vals, _shape(t, x, r)).astype(float, copy=True)

    def mollify(self, moll):
        return Mollified(self, moll)


def as_term(obj) -> Term:
    """Coerce numbers and callables into terms."""
    if isinstance(obj, Term):
        return obj
    if obj is None:
        return Constant(0.0)
    if isinstance(obj, (int, float)):
        return Constant(float(obj))
    if callable(obj):
        return Closure(obj)
    raise TypeError(f"cannot use {obj!r} as a coefficient")


# ---------------------------------------------------------------------------
# truncation gate


@dataclass(frozen=True)
class TruncationGate:
    """``kappa_R``: equal to 1 on ``|r| <= R``, 0 on ``|r| >= R + 1``.

    The transition is the quintic smoothstep ``1 - (10 s^3 - 15 s^4 + 6 s^5)``
    with ``s = |r| - R``; it is C^2 with maximal slope 15/8.
    ``R = inf`` gives the identity gate (no truncation).
    """

    R: float = math.inf

    def __post_init__(self):
        if not self.R > 0:
            raise ConfigurationError("truncation.R must be positive")

    @property
    def active(self) -> bool:
        return math.isfinite(self.R)

    def value(self, r):
        r = np.abs(np.asarray(r, dtype=float))
        s = np.clip(r - self.R, 0.0, 1.0)
        return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s * s)

    def derivative(self, r):
        r = np.asarray(r, dtype=float)
        s = np.clip(np.abs(r) - self.R, 0.0, 1.0)
        return -30.0 * s * s * (1.0 - s) ** 2 * np.sign(r)

    __call__ = value


def gate(gate: TruncationGate, r):
    """Evaluate ``kappa_R(r)``."""
    return gate.value(r)


# ---------------------------------------------------------------------------
# coefficient sets and hypotheses

_R_LATTICE = np.concatenate([-np.geomspace(100.0, 1e-3, 80), [0.0], np.geomspace(1e-3, 100.0, 80)])
_T_LATTICE = np.array([0.0, 0.5, 1.0])
_X_LATTICE = np.linspace(0.0, 1.0, 5)
_REL_TOL = 1e-9


@dataclass(frozen=True)
class CoefficientSet:
    """The triple ``(b, g1 + g2, sigma)`` with its declared constants.

    ``k1`` is ``None`` when the lower noise bound (H4) is not asserted.
    Construct through :func:`make_preset` or :meth:`validated` so the
    hypotheses are checked.
    """

    b: Term = field(default_factory=Constant)
    g1: Term = field(default_factory=Constant)
    g2: Term = field(default_factory=Constant)
    sigma: Term = field(default_factory=lambda: Constant(1.0))
    K: float = 1.0
    L: float = 1.0
    k1: Optional[float] = None
    k2: Optional[float] = None
    name: str = "custom"

    @property
    def g(self) -> Term:
        return Sum((self.g1, self.g2))

    @property
    def has_flux(self) -> bool:
        return not (self.g1.is_zero and self.g2.is_zero)

    def validated(self) -> "CoefficientSet":
        validate(self)
        return self

    def with_sigma_scale(self, factor: float) -> "CoefficientSet":
        """Same set with ``sigma`` multiplied by ``factor``; bounds rescaled."""
        sigma = _scale_term(self.sigma, factor)
        scale = abs(factor)
        return replace(
            self,
            sigma=sigma,
            L=max(self.L, self.L * scale),
            k1=None if self.k1 is None else self.k1 * scale,
            k2=None if self.k2 is None else self.k2 * scale,
        )


def _scale_term(term, factor):
    if isinstance(term, Constant):
        return Constant(term.value * factor)
    if isinstance(term, Polynomial):
        return Polynomial(tuple(c * factor for c in term.coeffs))
    if isinstance(term, Sine):
        return Sine(term.amplitude * factor, term.frequency)
    if isinstance(term, Sum):
        return Sum(tuple(_scale_term(t, factor) for t in term.terms))
    return Closure(lambda t, x, r, _f=term: factor * _f(t, x, r), lambda t, x, r, _f=term: factor * _f.deriv(t, x, r))


def _lattice():
    t, x, r = np.meshgrid(_T_LATTICE, _X_LATTICE, _R_LATTICE, indexing="ij")
    return t.ravel(), x.ravel(), r.ravel()


def _first_violation(mask, t, x, r):
    i = int(np.flatnonzero(mask)[0])
    return {"t": float(t[i]), "x": float(x[i]), "r": float(r[i])}


def validate(coeffs: CoefficientSet):
    """Check (H1)-(H4) on a sampled lattice; raise :class:`HypothesisViolation`.

    ``r`` runs over a log-spaced set in [-100, 100], ``t`` over {0, 0.5, 1} and
    ``x`` over five points of [0, 1].  Lipschitz checks use neighbouring
    lattice pairs.
    """
    K, L = coeffs.K, coeffs.L
    if not K > 0 or not L > 0:
        raise ConfigurationError("coefficients.K and coefficients.L must be positive")
    t, x, r = _lattice()
    lin = K * (1.0 + np.abs(r))
    quad = K * (1.0 + r * r)
    slack = 1.0 + _REL_TOL

    b = coeffs.b(t, x, r)
    bad = np.abs(b) > lin * slack
    if bad.any():
        raise HypothesisViolation("H1", "|b| exceeds K(1+|r|)", _first_violation(bad, t, x, r))
    g1 = coeffs.g1(t, x, r)
    bad = np.abs(g1) > lin * slack
    if bad.any():
        raise HypothesisViolation("H2", "|g1| exceeds K(1+|r|)", _first_violation(bad, t, x, r))
    g2 = coeffs.g2(t, x, r)
    bad = np.abs(g2) > quad * slack
    if bad.any():
        raise HypothesisViolation("H2", "|g2| exceeds K(1+|r|^2)", _first_violation(bad, t, x, r))

    sigma = coeffs.sigma(t, x, r)
    shape = (len(_T_LATTICE) * len(_X_LATTICE), len(_R_LATTICE))
    p, q = r.reshape(shape)[:, :-1].ravel(), r.reshape(shape)[:, 1:].ravel()
    tp, xp = t.reshape(shape)[:, :-1].ravel(), x.reshape(shape)[:, :-1].ravel()
    dp = np.abs(p - q)
    ds = np.abs(np.diff(sigma.reshape(shape), axis=1)).ravel()
    bad = ds > L * dp * slack + 1e-14
    if bad.any():
        raise HypothesisViolation("H3", "sigma is not L-Lipschitz", _first_violation(bad, tp, xp, p))
    local = L * (1.0 + np.abs(p) + np.abs(q)) * dp * slack + 1e-14
    for label, vals in (("b", b), ("g", g1 + g2)):
        dv = np.abs(np.diff(vals.reshape(shape), axis=1)).ravel()
        bad = dv > local
        if bad.any():
            raise HypothesisViolation(
                "H3", f"{label} violates the local Lipschitz bound L(1+|p|+|q|)|p-q|", _first_violation(bad, tp, xp, p)
            )
    if coeffs.k2 is not None:
        bad = np.abs(sigma) > coeffs.k2 * slack
        if bad.any():
            raise HypothesisViolation("H3", "|sigma| exceeds k2", _first_violation(bad, t, x, r))
    if coeffs.k1 is not None:
        if not coeffs.k1 > 0:
            raise HypothesisViolation("H4", "k1 must be strictly positive")
        bad = np.abs(sigma) < coeffs.k1 / slack
        if bad.any():
            raise HypothesisViolation("H4", "|sigma| falls below k1", _first_violation(bad, t, x, r))
    return coeffs


def sigma_extrema(sigma: Term):
    """``(min |sigma|, max |sigma|)`` scanned on the validation lattice."""
    t, x, r = _lattice()
    dense = np.linspace(-10.0, 10.0, 4001)
    tt, xx, rr = np.meshgrid(_T_LATTICE, _X_LATTICE, dense, indexing="ij")
    vals = np.concatenate([np.abs(sigma(t, x, r)), np.abs(sigma(tt.ravel(), xx.ravel(), rr.ravel()))])
    return float(vals.min()), float(vals.max())


def sigma_term(const=1.0, amp=0.0, freq=1.0) -> Term:
    """``const + amp * sin(freq * r)``."""
    return Sum((Constant(const), Sine(amp, freq)))


def make_preset(name: str, **params) -> CoefficientSet:
    """Build and validate a coefficient set.

    Parameters
    ----------
    name : {"burgers", "reaction_diffusion", "custom"}
        ``burgers`` has ``g2 = r^2 / 2`` and ``b = g1 = 0``;
        ``reaction_diffusion`` has ``g = 0`` and a polynomial-plus-sine ``b``;
        ``custom`` takes ``b``, ``g1``, ``g2`` and ``sigma`` as terms or callables.
    sigma_const, sigma_amp, sigma_freq : float
        ``sigma(r) = sigma_const + sigma_amp * sin(sigma_freq * r)`` unless a
        ``sigma`` term is given.
    b_coeffs : sequence of float
        Polynomial coefficients of ``b`` (constant term first).
    b_sin_amp, b_sin_freq : float
        Optional sine part of ``b``.
    K, L, k1, k2 : float
        Declared constants.  Missing ``k1``/``k2`` are scanned from ``sigma``;
        ``k1`` is kept only if the scan finds ``|sigma|`` bounded away from 0.
    """
    params = dict(params)
    sigma = params.pop("sigma", None)
    if sigma is None:
        sigma = sigma_term(
            params.pop("sigma_const", 1.0), params.pop("sigma_amp", 0.0), params.pop("sigma_freq", 1.0)
        )
    else:
        for key in ("sigma_const", "sigma_amp", "sigma_freq"):
            params.pop(key, None)
    sigma = as_term(sigma)
    K = float(params.pop("K", 1.0))
    L = float(params.pop("L", 1.0))
    k1 = params.pop("k1", None)
    k2 = params.pop("k2", None)

    if name == "burgers":
        b = Constant(0.0)
        g1 = Constant(0.0)
        g2 = Polynomial((0.0, 0.0, 0.5))
    elif name == "reaction_diffusion":
        coeffs = tuple(params.pop("b_coeffs", (0.0, -1.0)))
        b = Sum((Polynomial(coeffs), Sine(params.pop("b_sin_amp", 0.0), params.pop("b_sin_freq", 1.0))))
        g1 = Constant(0.0)
        g2 = Constant(0.0)
    elif name == "custom":
        b = as_term(params.pop("b", 0.0))
        g1 = as_term(params.pop("g1", 0.0))
        g2 = as_term(params.pop("g2", 0.0))
    else:
        raise ConfigurationError(f"unknown coefficient preset {name!r}")
    for key in ("b_coeffs", "b_sin_amp", "b_sin_freq"):
        params.pop(key, None)
    if params:
        raise ConfigurationError(f"unknown coefficient parameters: {sorted(params)}")

    lo, hi = sigma_extrema(sigma)
    if k2 is None:
        k2 = hi
    if k1 is None and lo > 0:
        k1 = lo
    coeffs = CoefficientSet(
        b=b, g1=g1, g2=g2, sigma=sigma, K=K, L=L,
        k1=None if k1 is None else float(k1), k2=float(k2), name=name,
    )
    return validate(coeffs)


def mollify(coeffs: CoefficientSet, n: int, n_nodes: int = 96) -> CoefficientSet:
    """Smooth ``b``, ``g1``, ``g2`` and ``sigma`` in ``r`` with ``phi_n``.

    ``(t, x)`` are held fixed.  Declared constants carry over unchanged:
    mollification preserves growth and Lipschitz bounds up to the shift
    ``1/n`` in ``r``.
    """
    moll = Mollifier(int(n), n_nodes)
    return replace(
        coeffs,
        b=coeffs.b.mollify(moll),
        g1=coeffs.g1.mollify(moll),
        g2=coeffs.g2.mollify(moll),
        sigma=coeffs.sigma.mollify(moll),
        name=f"{coeffs.name}|mollified(n={int(n)})",
    )
