"""Regularization kernel for conical potentials.

chi(eps, x, beta) = beta * int_0^x ((eps^2 + r)^beta - eps^(2 beta)) / r dr.

At eps = 0 this is exactly x^beta; for eps > 0 it is a smooth, monotone,
concave profile squeezed between 0 and x^beta that converges to x^beta
uniformly on [0,1] as eps -> 0.  The integrand has a removable singularity
at r = 0 (limit beta * eps^(2 beta - 2)), handled by a short Taylor head
before adaptive quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .errors import ConfigurationError

__all__ = [
    "SmoothingParams",
    "chi",
    "chi_derivative",
    "chi_values",
    "regularized_cone_potential",
]


@dataclass(frozen=True)
class SmoothingParams:
    epsilon: float
    beta: float
    quad_tol: float = 1e-12

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be nonnegative")
        if not (0.0 < self.beta < 1.0):
            raise ConfigurationError("beta must lie in (0, 1)")


def _check_args(eps, x, beta):
    if eps < 0 or x < 0:
        raise ConfigurationError("chi requires eps >= 0 and x >= 0")
    if not (0.0 < beta < 1.0):
        raise ConfigurationError("beta must lie in (0, 1)")


def chi(eps: float, x: float, beta: float, quad_tol: float = 1e-12) -> float:
    """Kernel value by adaptive quadrature, absolute error <= 1e-10.

    The segment [0, min(x, 1e-3 eps^2)] is integrated by the Taylor
    expansion of ((1+u)^beta - 1)/u, the rest by scipy's adaptive rule.
    """
    _check_args(eps, x, beta)
    if x == 0.0:
        return 0.0
    if eps == 0.0:
        return float(x**beta)
    e2 = eps * eps
    a = min(x, 1e-3 * e2)
    # int_0^a: beta * e2^(beta-1) * [a + (b-1) a^2/(4 e2) + (b-1)(b-2) a^3/(18 e2^2)]
    head = beta * e2**(beta - 1.0) * (
        a
        + (beta - 1.0) * a * a / (4.0 * e2)
        + (beta - 1.0) * (beta - 2.0) * a**3 / (18.0 * e2 * e2))
    tail = 0.0
    if x > a:
        tail, _ = quad(lambda r: ((e2 + r)**beta - e2**beta) / r, a, x,
                       epsabs=quad_tol, epsrel=quad_tol, limit=200)
    return float(beta * (head + tail))


def chi_derivative(eps: float, x: float, beta: float) -> float:
    """d chi / dx = beta ((eps^2+x)^beta - eps^(2 beta)) / x, defined for x > 0."""
    if x <= 0:
        raise ConfigurationError("chi_derivative requires x > 0")
    _check_args(eps, x, beta)
    e2 = eps * eps
    return float(beta * ((e2 + x)**beta - e2**beta) / x)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


def chi_values(eps: float, x, beta: float) -> np.ndarray:
    """Vectorized kernel over an array of arguments.

    Sorts the values and accumulates Gauss-Legendre panels between
    consecutive points; the integrand is smooth for eps > 0, so 24-point
    panels reach round-off.  Matches the scalar quadrature to ~1e-12.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ConfigurationError("chi requires nonnegative arguments")
    _check_args(eps, float(x.flat[0]) if x.size else 0.0, beta)
    if eps == 0.0:
        return x**beta
    e2 = eps * eps
    flat = x.ravel()
    order = np.argsort(flat)
    xs = flat[order]

    def integrand(r):
        out = np.empty_like(r)
        small = r < 1e-14 * e2
        out[small] = beta * e2**(beta - 1.0)
        rr = r[~small]
        out[~small] = ((e2 + rr)**beta - e2**beta) / rr
        return out

    def panel(a, b):
        if b <= a:
            return 0.0
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        return half * np.dot(_GL_WEIGHTS, integrand(mid + half * _GL_NODES))

    acc = np.empty_like(xs)
    run = panel(0.0, xs[0]) if xs.size else 0.0
    for i in range(xs.size):
        if i > 0:
            run += panel(xs[i - 1], xs[i])
        acc[i] = run
    out = np.empty_like(flat)
    out[order] = beta * acc
    return out.reshape(x.shape)


def regularized_cone_potential(bg, params: SmoothingParams, delta: float):
    """Field delta * chi(eps^2 + q) over the background's divisor profile q.

    At eps = 0 this is the conical potential delta * q^beta.
    """
    from .torus_field import ScalarField
    vals = chi_values(params.epsilon, bg.q.values, params.beta)
    return ScalarField(bg.q.grid, delta * vals)
