"""Constitutive functions: Flory-Huggins potential, its C2 regularization,
phase-dependent viscosity/permeability/relaxation and the Darcy friction.

All functions accept scalars or numpy arrays and are pure.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial
from scipy.optimize import bisect
from scipy.special import xlogy


class DomainError(ValueError):
    """Argument outside the domain of a singular function."""


@dataclass(frozen=True)
class PotentialParams:
    theta: float = 1.0
    theta0: float = 2.0
    xi: float = 1e-4
    gamma: float = 0.5

    def __post_init__(self):
        if not (self.theta > 0 and self.theta0 > 0):
            raise ValueError("theta and theta0 must be positive")
        if not self.theta < self.theta0:
            raise ValueError("requires theta < theta0 (double-well potential)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 < self.xi < min(self.gamma, 1.0):
            raise ValueError("xi must lie in (0, min(gamma, 1))")

    @property
    def alpha0(self) -> float:
        """Coefficient of the concave part -alpha0/2 s^2."""
        return self.theta0

    @property
    def alpha_bar(self) -> float:
        """Lower bound of F''."""
        return self.theta

    @property
    def alpha_tilde(self) -> float:
        return self.theta0 - self.theta


@dataclass(frozen=True)
class CoefficientParams:
    nu1: float = 1.0
    nu2: float = 1.5
    lambda_star: float = 1.0
    lambda_slope: float = 0.5
    k_star: float = 0.5
    k_slope: float = 0.5
    sigma: float = 1.0
    alpha_filter: float = 0.0

    def __post_init__(self):
        if self.nu1 <= 0 or self.nu2 <= 0:
            raise ValueError("viscosities must be positive")
        if self.lambda_star <= 0 or self.lambda_slope <= 0:
            raise ValueError("lambda_star and lambda_slope must be positive")
        if self.k_star <= 0 or self.k_slope < 0:
            raise ValueError("k_star must be positive and k_slope non-negative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.alpha_filter < 0:
            raise ValueError("alpha_filter must be non-negative")

    @property
    def nu_min(self) -> float:
        return min(self.nu1, self.nu2)

    @property
    def nu_max(self) -> float:
        return max(self.nu1, self.nu2)

    @property
    def k_max(self) -> float:
        return self.k_star + self.k_slope

    @property
    def viscosity_contrast(self) -> float:
        """|nu1 - nu2| / (nu1 + nu2); small values are needed for well-posedness."""
        return abs(self.nu1 - self.nu2) / (self.nu1 + self.nu2)


# ---------------------------------------------------------------------------
# Flory-Huggins potential  Psi = F - theta0/2 s^2
# ---------------------------------------------------------------------------

def _check_open(s, name):
    s = np.asarray(s, dtype=float)
    if np.any(~(np.abs(s) < 1.0)):
        raise DomainError(f"{name} requires |s| < 1")
    return s


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def f_value(s, p: PotentialParams):
    """Convex part F(s) = theta/2 [(1+s)ln(1+s) + (1-s)ln(1-s)] on [-1, 1]."""
    s = np.asarray(s, dtype=float)
    if np.any(~(np.abs(s) <= 1.0)):
        raise DomainError("F is finite only on [-1, 1]")
    return _out(0.5 * p.theta * (xlogy(1 + s, 1 + s) + xlogy(1 - s, 1 - s)))


def f_prime(s, p: PotentialParams):
    s = _check_open(s, "F'")
    return _out(0.5 * p.theta * (np.log1p(s) - np.log1p(-s)))


def f_second(s, p: PotentialParams):
    s = _check_open(s, "F''")
    return _out(p.theta / ((1 - s) * (1 + s)))


def psi_value(s, p: PotentialParams):
    s = _check_open(s, "psi_value")
    return _out(f_value(s, p) - 0.5 * p.theta0 * s * s)


def psi_prime(s, p: PotentialParams):
    s = _check_open(s, "psi_prime")
    return _out(f_prime(s, p) - p.theta0 * s)


def psi_second(s, p: PotentialParams):
    s = _check_open(s, "psi_second")
    return _out(f_second(s, p) - p.theta0)


def f_xi(s, p: PotentialParams, order: int = 0):
    """C2 regularization F_xi of the convex part and its first two derivatives.

    Equal to F on [-1+xi, 1-xi]; outside, the second-order Taylor polynomial
    of F about the nearer matching point +-(1-xi).
    """
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    s = np.asarray(s, dtype=float)
    s0 = 1.0 - p.xi
    inner = np.clip(s, -s0, s0)
    # Taylor offset from the matching point (zero inside)
    h = s - inner
    f0 = 0.5 * p.theta * (xlogy(1 + inner, 1 + inner) + xlogy(1 - inner, 1 - inner))
    f1 = 0.5 * p.theta * (np.log1p(inner) - np.log1p(-inner))
    f2 = p.theta / ((1 - inner) * (1 + inner))
    if order == 0:
        out = f0 + f1 * h + 0.5 * f2 * h * h
    elif order == 1:
        out = f1 + f2 * h
    else:
        out = f2
    return _out(out)


def psi_xi(s, p: PotentialParams, order: int = 0):
    """Regularized potential Psi_xi = F_xi - theta0/2 s^2 (and derivatives)."""
    s = np.asarray(s, dtype=float)
    concave = (-0.5 * p.theta0 * s * s, -p.theta0 * s, -p.theta0 + 0 * s)[order]
    return _out(f_xi(s, p, order) + concave)


def equilibrium_phase(p: PotentialParams, xtol: float = 1e-14) -> float:
    """Positive root s_eq of psi_prime (the pure-phase minimum of the double well)."""
    # psi'(s) < 0 just above 0 when theta < theta0, +inf at s -> 1
    lo = 1e-9
    hi = 1.0 - 1e-15
    return bisect(lambda s: psi_prime(s, p), lo, hi, xtol=xtol, maxiter=500)


# ---------------------------------------------------------------------------
# Transport coefficients
# ---------------------------------------------------------------------------

def _clamp(s):
    return np.clip(np.asarray(s, dtype=float), -1.0, 1.0)


def nu_of(s, c: CoefficientParams):
    """Viscosity nu1 (1+s)/2 + nu2 (1-s)/2, argument clamped to [-1, 1]."""
    s = _clamp(s)
    return _out(0.5 * c.nu1 * (1 + s) + 0.5 * c.nu2 * (1 - s))


def k_of(s, c: CoefficientParams):
    s = _clamp(s)
    return _out(c.k_star + 0.5 * c.k_slope * (1 + s))


def darcy_coefficient(phi, c: CoefficientParams, tol: float = 1e-9):
    """Friction factor nu(phi)(1-phi)/(2k(phi)); vanishes in pure blood."""
    phi = np.asarray(phi, dtype=float)
    if np.any(~(np.abs(phi) <= 1.0 + tol)):
        raise DomainError("darcy_coefficient requires phi in [-1, 1]")
    phi = _clamp(phi)
    return _out(nu_of(phi, c) * (1 - phi) / (2 * k_of(phi, c)))


@dataclass(frozen=True)
class ElasticCoefficient:
    """Relaxation coefficient lambda(s) with its first two derivatives."""

    value: Callable
    prime: Callable
    second: Callable
    label: str = "custom"

    def __call__(self, s):
        return self.value(s)


def polynomial_lambda(coeffs) -> ElasticCoefficient:
    """lambda as a polynomial in s (increasing-degree coefficients)."""
    poly = Polynomial(np.asarray(coeffs, dtype=float))
    d1 = poly.deriv(1)
    d2 = poly.deriv(2)
    wrap = lambda f: (lambda s: _out(f(np.asarray(s, dtype=float))))  # noqa: E731
    return ElasticCoefficient(wrap(poly), wrap(d1), wrap(d2), label=f"poly{list(poly.coef)}")


def affine_lambda(c: CoefficientParams) -> ElasticCoefficient:
    """Default lambda(s) = lambda_star + lambda_slope (s + 1), extended affinely."""
    return polynomial_lambda([c.lambda_star + c.lambda_slope, c.lambda_slope])


def lambda_of(s, c: CoefficientParams):
    return affine_lambda(c).value(s)


def lambda_prime_of(s, c: CoefficientParams):
    return affine_lambda(c).prime(s)


def _bump(t):
    out = np.zeros_like(t)
    inside = np.abs(t) < 1
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


_QUAD_ORDER = 64


def _bump_rule(order: int = _QUAD_ORDER):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    w = weights * _bump(nodes)
    return nodes, w / w.sum()


def bump_second_moment(order: int = _QUAD_ORDER) -> float:
    """int t^2 rho(t) dt of the normalized unit bump (fixed-order rule)."""
    t, w = _bump_rule(order)
    return float(np.sum(w * t * t))


def mollify_lambda(lam: ElasticCoefficient, alpha: float, order: int = _QUAD_ORDER) -> ElasticCoefficient:
    """Convolve lambda with a symmetric C-infinity bump supported on [-alpha, alpha]."""
    if not alpha > 0:
        raise ValueError("mollification width alpha must be positive")
    t, w = _bump_rule(order)

    def conv(f):
        def g(s):
            s = np.asarray(s, dtype=float)
            vals = f(s[..., None] - alpha * t)
            return _out(np.sum(vals * w, axis=-1))
        return g

    return ElasticCoefficient(conv(lam.value), conv(lam.prime), conv(lam.second),
                              label=f"{lam.label}*bump({alpha:g})")


@dataclass(frozen=True)
class ModelParams:
    """All constitutive data of a run."""

    potential: PotentialParams = field(default_factory=PotentialParams)
    coeffs: CoefficientParams = field(default_factory=CoefficientParams)
    lambda_poly: tuple | None = None

    @cached_property
    def lam(self) -> ElasticCoefficient:
        if self.lambda_poly is None:
            return affine_lambda(self.coeffs)
        return polynomial_lambda(self.lambda_poly)

    def with_xi(self, xi: float) -> "ModelParams":
        p = self.potential
        return ModelParams(PotentialParams(p.theta, p.theta0, xi, p.gamma), self.coeffs, self.lambda_poly)
