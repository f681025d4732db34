"""Elliptic-curve periods, the modular parameter tau, and tau-fields on the base.

Periods of y^2 = 4x^3 - g2 x - g3 are computed from the arithmetic-geometric
mean with the optimal square-root branch: for roots e1, e2, e3 the half-period
attached to a root e is pi / (2 agm(sqrt(e - e'), sqrt(e - e''))).  Numerical
period integrals are kept in the test suite as the independent oracle.

A TauModel describes how the fiber modulus varies over the base: constant,
a local logarithmic profile around marked points (capped and blended to a
constant), or a Weierstrass family (g2(s), g3(s)) evaluated pointwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ModelError, NumericalError
from .torus_field import Grid, ScalarField, periodic_distance

__all__ = [
    "WeierstrassCurve",
    "TauModel",
    "ConstantTau",
    "LocalLogTau",
    "WeierstrassFamilyTau",
    "agm",
    "agm_array",
    "discriminant",
    "periods_from_weierstrass",
    "normalize_tau",
    "tau_field",
]

_AGM_MAX_ITER = 64


@dataclass(frozen=True)
class WeierstrassCurve:
    """Curve y^2 = 4x^3 - g2 x - g3; smooth iff g2^3 - 27 g3^2 != 0."""

    g2: complex
    g3: complex


def discriminant(c: WeierstrassCurve) -> complex:
    g2 = complex(c.g2)
    g3 = complex(c.g3)
    return g2**3 - 27.0 * g3**2


def agm_array(a, b):
    """Elementwise complex AGM with the optimal square-root branch.

    The geometric mean takes the principal square root, flipped in sign
    whenever |a' - b'| > |a' + b'| (the branch that keeps the iteration
    quadratically convergent).  Zero inputs are absorbing.
    """
    a = np.asarray(a, dtype=complex).copy()
    b = np.asarray(b, dtype=complex).copy()
    zero = (a == 0) | (b == 0)
    a[zero] = 0.0
    b[zero] = 0.0
    for _ in range(_AGM_MAX_ITER):
        scale = np.maximum(np.abs(a), np.abs(b))
        done = np.abs(a - b) <= 1e-15 * np.maximum(scale, 1e-300)
        if done.all():
            return (a + b) / 2.0
        an = (a + b) / 2.0
        bn = np.sqrt(a * b)
        flip = np.abs(an - bn) > np.abs(an + bn)
        bn = np.where(flip, -bn, bn)
        a, b = an, bn
    raise NumericalError("AGM did not converge within 64 iterations")


def agm(a: complex, b: complex) -> complex:
    if a == 0 or b == 0:
        return 0j
    return complex(agm_array(np.array([a]), np.array([b]))[0])


def _sorted_roots(g2, g3):
    """Roots of 4x^3 - g2 x - g3, ordered by (Re, Im) descending so the
    ordering is stable under positive real rescaling of the roots."""
    r = np.roots([4.0, 0.0, -g2, -g3])
    idx = np.lexsort((-r.imag, -r.real))
    return r[idx]


def _cubic_roots_batched(g2, g3):
    """Roots of 4x^3 - g2 x - g3 for arrays of invariants, via batched
    companion-matrix eigenvalues, sorted like _sorted_roots."""
    g2 = np.asarray(g2, dtype=complex)
    g3 = np.asarray(g3, dtype=complex)
    m = np.zeros(g2.shape + (3, 3), dtype=complex)
    m[..., 1, 0] = 1.0
    m[..., 2, 1] = 1.0
    m[..., 0, 2] = g3 / 4.0
    m[..., 1, 2] = g2 / 4.0
    ev = np.linalg.eigvals(m)
    order = np.lexsort((-ev.imag, -ev.real), axis=-1)
    return np.take_along_axis(ev, order, axis=-1)


def normalize_tau(tau: complex) -> complex:
    """Reduce tau into the standard fundamental domain |Re| <= 1/2, |tau| >= 1,
    with boundary representatives chosen to have Re tau >= 0."""
    tau = complex(tau)
    if tau.imag == 0:
        raise ModelError("tau must have nonzero imaginary part")
    if tau.imag < 0:
        tau = -tau
    for _ in range(256):
        tau = complex(tau.real - round(tau.real), tau.imag)
        if abs(tau) < 1.0 - 1e-15:
            tau = -1.0 / tau
        else:
            break
    else:
        raise NumericalError("fundamental-domain reduction did not terminate")
    if abs(abs(tau) - 1.0) < 1e-12 and tau.real < 0:
        tau = -1.0 / tau
    if abs(tau.real + 0.5) < 1e-12:
        tau = tau + 1.0
    return tau


def periods_from_weierstrass(c: WeierstrassCurve):
    """Half-period basis (w1, w2) with Im(w2/w1) > 0 and the normalized tau.

    Returns (w1, w2, tau) where tau is w2/w1 reduced to the fundamental
    domain.  Degenerate curves (zero discriminant) are rejected.
    """
    if discriminant(c) == 0:
        raise ModelError("degenerate fiber: discriminant vanishes")
    e1, e2, e3 = _sorted_roots(complex(c.g2), complex(c.g3))
    w1 = np.pi / (2.0 * agm(np.sqrt(complex(e1 - e2)), np.sqrt(complex(e1 - e3))))
    w2 = np.pi / (2.0 * agm(np.sqrt(complex(e3 - e1)), np.sqrt(complex(e3 - e2))))
    if (w2 / w1).imag < 0:
        w2 = -w2
    return complex(w1), complex(w2), normalize_tau(w2 / w1)


def _im_tau_from_invariants(g2, g3):
    """Im tau for arrays of invariants through the AGM period ratio."""
    e = _cubic_roots_batched(g2, g3)
    e1, e2, e3 = e[..., 0], e[..., 1], e[..., 2]
    w1 = np.pi / (2.0 * agm_array(np.sqrt(e1 - e2), np.sqrt(e1 - e3)))
    w2 = np.pi / (2.0 * agm_array(np.sqrt(e3 - e1), np.sqrt(e3 - e2)))
    ratio = w2 / w1
    return np.abs(ratio.imag)


# ---------------------------------------------------------------------------
# tau models on the base
# ---------------------------------------------------------------------------

class TauModel:
    """Marker base class; concrete kinds below."""

    kind = "abstract"


@dataclass(frozen=True)
class ConstantTau(TauModel):
    tau: complex = 1j

    kind = "constant"

    def __post_init__(self):
        if complex(self.tau).imag <= 0:
            raise ModelError("constant tau must lie in the upper half-plane")


@dataclass(frozen=True)
class LocalLogTau(TauModel):
    """Im tau = baseline + sum_i (b_i / 2 pi) * G(d_i) where G equals -log d
    inside half the cap radius, is constant (-log cap) outside the cap, and
    is joined by a C^2 quintic blend in between.  The b_i come from the
    fibration's singular-fiber list."""

    baseline: float = 1.0
    cap_radius: float = 0.25

    kind = "ib_local"

    def __post_init__(self):
        if self.baseline <= 0:
            raise ModelError("baseline Im tau must be positive")
        if not (0.0 < self.cap_radius <= 0.45):
            raise ModelError("cap radius must lie in (0, 0.45]")


@dataclass(frozen=True)
class WeierstrassFamilyTau(TauModel):
    """g2(s), g3(s) as constants plus optional periodic Fourier modes
    [(kx, ky, complex amplitude), ...] on each invariant."""

    g2: complex = 4.0
    g3: complex = 0.0
    g2_modes: tuple = field(default_factory=tuple)
    g3_modes: tuple = field(default_factory=tuple)

    kind = "weierstrass"


def _smoothstep(u):
    """Quintic smoothstep: 0 at u<=0, 1 at u>=1, C^2 at both ends."""
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (10.0 - 15.0 * u + 6.0 * u**2)


def local_log_im_tau(model: LocalLogTau, dists, b):
    """Im tau contribution profile for one marked point at distances dists."""
    cap = model.cap_radius
    lo = 0.5 * cap
    d = np.maximum(np.asarray(dists, dtype=float), 1e-300)
    g_log = -np.log(d)
    g_cap = -np.log(cap)
    w = 1.0 - _smoothstep((d - lo) / (cap - lo))
    g = np.where(d <= lo, g_log,
                 np.where(d >= cap, g_cap, g_cap + w * (g_log - g_cap)))
    return (b / (2.0 * np.pi)) * g


def _evaluate_modes(grid: Grid, const, modes):
    x, y = grid.mesh()
    out = np.full((grid.n, grid.n), complex(const), dtype=complex)
    for kx, ky, amp in modes:
        out += complex(amp) * np.exp(2j * np.pi * (kx * x + ky * y))
    return out


def tau_field(model: TauModel, grid: Grid, singular_points=(), ib_indices=()):
    """Sample Im tau on the grid and build the validity mask.

    The mask excludes a two-cell disk around each singular point; Im tau
    must be positive everywhere on the mask.  For the local-log kind the
    b-indices pair up with singular_points.
    """
    n = grid.n
    if model.kind == "constant":
        im = np.full((n, n), complex(model.tau).imag)
    elif model.kind == "ib_local":
        if len(singular_points) != len(ib_indices):
            raise ModelError("each singular point needs a log-monodromy index")
        im = np.full((n, n), model.baseline)
        for p, b in zip(singular_points, ib_indices):
            if b > 0:
                im = im + local_log_im_tau(model, periodic_distance(grid, p), b)
    elif model.kind == "weierstrass":
        g2 = _evaluate_modes(grid, model.g2, model.g2_modes)
        g3 = _evaluate_modes(grid, model.g3, model.g3_modes)
        disc = g2**3 - 27.0 * g3**2
        if np.any(np.abs(disc) < 1e-12):
            raise ModelError("Weierstrass family degenerates on the grid")
        im = _im_tau_from_invariants(g2, g3)
    else:
        raise ConfigurationError(f"unknown tau model kind {model.kind!r}")

    mask = np.ones((n, n), dtype=bool)
    for p in singular_points:
        mask &= periodic_distance(grid, p) > 2.0 * grid.spacing
    if np.any(im[mask] <= 0):
        raise ModelError("Im tau is not positive on the valid mask")
    return ScalarField(grid, np.asarray(im, dtype=float)), mask
