"""Periodic scalar fields and spectral calculus on the flat unit torus.

The base domain is the periodic square [0,1)^2 with complex coordinate
s = x + iy and area element dA = dx dy.  A (1,1)-form is represented by
its density against dA, and the dd-bar operator acts on potentials as
u -> (1/2) Lap u with Lap = d^2/dx^2 + d^2/dy^2.  All differentiation is
spectral (FFT), so band-limited identities hold to round-off and the
Poisson inverse is diagonal in Fourier space.

Point masses are band-limited (Dirichlet-kernel) deltas rather than
single-cell spikes; this keeps the Green-potential identity
(1/2) Lap psi_p = 2 pi (delta_p - 1) exact in the discrete calculus.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as _fft

from .errors import ConfigurationError, SolvabilityError

__all__ = [
    "Grid",
    "ScalarField",
    "GreenPotential",
    "make_grid",
    "field_from_values",
    "field_from_function",
    "constant_field",
    "laplacian",
    "gradient_squared",
    "solve_poisson",
    "green_potential",
    "grid_delta",
    "integrate",
    "mean",
    "radial_profile",
    "periodic_distance",
    "circle_samples",
    "write_field_csv",
    "read_field_csv",
    "write_field_pgm",
]


def _workers():
    try:
        return max(1, int(os.environ.get("CONEFLOW_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class Grid:
    """N x N periodic grid over [0,1)^2 with spacing exactly 1/N."""

    n: int
    spacing: float

    def axis(self):
        return np.arange(self.n) / self.n

    def mesh(self):
        x = self.axis()
        return np.meshgrid(x, x, indexing="ij")

    def point_index(self, p):
        """Index of the grid point nearest to p (coordinates wrapped)."""
        i = int(round((p[0] % 1.0) * self.n)) % self.n
        j = int(round((p[1] % 1.0) * self.n)) % self.n
        return i, j


@dataclass(frozen=True)
class ScalarField:
    """Immutable real field sampled on a Grid, row-major values[i, j] at
    (x, y) = (i/N, j/N)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.shape != (self.grid.n, self.grid.n):
            raise ConfigurationError(
                f"field shape {v.shape} does not match grid n={self.grid.n}")
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("field contains non-finite values")
        v.setflags(write=False)

    def mean(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True)
class GreenPotential:
    """Mean-zero log potential psi_p with (1/2) Lap psi_p = 2 pi (delta_p - 1).

    Near its anchor, psi_p(s) - 2 log|s - p| stays bounded under grid
    refinement, so exp(psi_p) behaves like |s - p|^2.
    """

    anchor: tuple
    field: ScalarField


@lru_cache(maxsize=32)
def _wavenumbers(n: int):
    k = np.fft.fftfreq(n, d=1.0 / n)
    kx, ky = np.meshgrid(k, k, indexing="ij")
    kx.setflags(write=False)
    ky.setflags(write=False)
    return kx, ky


@lru_cache(maxsize=32)
def _lap_multiplier(n: int):
    kx, ky = _wavenumbers(n)
    m = -4.0 * np.pi**2 * (kx**2 + ky**2)
    m.setflags(write=False)
    return m


def make_grid(n: int) -> Grid:
    """Build an N x N grid; N must be even and at least 16."""
    if not isinstance(n, (int, np.integer)):
        raise ConfigurationError(f"grid size must be an integer, got {n!r}")
    if n < 16 or n % 2 != 0:
        raise ConfigurationError(
            f"grid size must be even and >= 16 for spectral symmetry, got {n}")
    return Grid(n=int(n), spacing=1.0 / int(n))


def field_from_values(grid: Grid, values) -> ScalarField:
    return ScalarField(grid, np.array(values, dtype=float))


def field_from_function(grid: Grid, fn) -> ScalarField:
    x, y = grid.mesh()
    return field_from_values(grid, fn(x, y))


def constant_field(grid: Grid, c: float) -> ScalarField:
    return field_from_values(grid, np.full((grid.n, grid.n), float(c)))


# ---------------------------------------------------------------------------
# spectral operators (array-level workers plus field-level API)
# ---------------------------------------------------------------------------

def lap_values(values: np.ndarray) -> np.ndarray:
    n = values.shape[0]
    hat = _fft.fft2(values, workers=_workers())
    return _fft.ifft2(_lap_multiplier(n) * hat, workers=_workers()).real


def laplacian(f: ScalarField) -> ScalarField:
    """Spectral Laplacian; the output mean vanishes to round-off."""
    return ScalarField(f.grid, lap_values(f.values))


def gradient_values(values: np.ndarray):
    n = values.shape[0]
    kx, ky = _wavenumbers(n)
    hat = _fft.fft2(values, workers=_workers())
    gx = _fft.ifft2(2j * np.pi * kx * hat, workers=_workers()).real
    gy = _fft.ifft2(2j * np.pi * ky * hat, workers=_workers()).real
    return gx, gy


def gradient_squared(f: ScalarField) -> ScalarField:
    gx, gy = gradient_values(f.values)
    return ScalarField(f.grid, gx * gx + gy * gy)


def solve_poisson_values(rhs: np.ndarray, mean_tol: float = 1e-10) -> np.ndarray:
    m = rhs.mean()
    if abs(m) > mean_tol:
        raise SolvabilityError(
            f"Poisson right-hand side must have zero mean; got mean={m:.3e} "
            f"(tolerance {mean_tol:.1e})")
    n = rhs.shape[0]
    hat = _fft.fft2(rhs, workers=_workers())
    mult = 0.5 * _lap_multiplier(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        sol = hat / mult
    sol[0, 0] = 0.0
    return _fft.ifft2(sol, workers=_workers()).real


def solve_poisson(rhs: ScalarField, mean_tol: float = 1e-10) -> ScalarField:
    """Unique mean-zero u with (1/2) Lap u = rhs; rhs must be mean-zero."""
    return ScalarField(rhs.grid, solve_poisson_values(rhs.values, mean_tol))


def delta_values(grid: Grid, p) -> np.ndarray:
    """Band-limited unit-mass delta at p (all Fourier coefficients are the
    plane-wave phases; real part taken for the asymmetric Nyquist mode)."""
    n = grid.n
    kx, ky = _wavenumbers(n)
    phase = np.exp(-2j * np.pi * (kx * (p[0] % 1.0) + ky * (p[1] % 1.0)))
    return _fft.ifft2(phase, workers=_workers()).real * n * n


def grid_delta(grid: Grid, p) -> ScalarField:
    return ScalarField(grid, delta_values(grid, p))


def green_values(grid: Grid, p) -> np.ndarray:
    n = grid.n
    kx, ky = _wavenumbers(n)
    k2 = kx**2 + ky**2
    phase = np.exp(-2j * np.pi * (kx * (p[0] % 1.0) + ky * (p[1] % 1.0)))
    with np.errstate(divide="ignore", invalid="ignore"):
        hat = -phase / (np.pi * k2)
    hat[0, 0] = 0.0
    return _fft.ifft2(hat, workers=_workers()).real * n * n


def green_potential(grid: Grid, p) -> GreenPotential:
    """Mean-zero potential with a 2 log|s-p| singularity at p.

    Solves (1/2) Lap psi = 2 pi (delta_p - 1) against the band-limited
    delta, which makes the identity exact in spectral space and gives
    translation equivariance on lattice-aligned shifts of p.
    """
    p = (p[0] % 1.0, p[1] % 1.0)
    return GreenPotential(anchor=p, field=ScalarField(grid, green_values(grid, p)))


def mollify_values(values: np.ndarray, scale: float) -> np.ndarray:
    """Gaussian mollification at a fixed physical length scale (spectral)."""
    n = values.shape[0]
    kx, ky = _wavenumbers(n)
    filt = np.exp(-0.5 * (2.0 * np.pi * scale)**2 * (kx**2 + ky**2))
    hat = _fft.fft2(values, workers=_workers())
    return _fft.ifft2(filt * hat, workers=_workers()).real


def mollify(f: ScalarField, scale: float) -> ScalarField:
    return ScalarField(f.grid, mollify_values(f.values, scale))


def integrate(f: ScalarField) -> float:
    """Integral over the unit torus: the periodic trapezoid rule collapses
    to the plain mean times total area 1."""
    return float(f.values.mean())


def mean(f: ScalarField) -> float:
    return float(f.values.mean())


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def periodic_distance(grid: Grid, p) -> np.ndarray:
    """Distance from every grid point to p in the flat torus metric."""
    x = grid.axis()
    dx = np.abs(x - p[0] % 1.0)
    dx = np.minimum(dx, 1.0 - dx)
    dy = np.abs(x - p[1] % 1.0)
    dy = np.minimum(dy, 1.0 - dy)
    return np.hypot(dx[:, None], dy[None, :])


def pair_distance(p, q) -> float:
    dx = abs(p[0] % 1.0 - q[0] % 1.0)
    dx = min(dx, 1.0 - dx)
    dy = abs(p[1] % 1.0 - q[1] % 1.0)
    dy = min(dy, 1.0 - dy)
    return float(np.hypot(dx, dy))


def bilinear_sample(values: np.ndarray, xs, ys):
    """Periodic bilinear interpolation at arbitrary coordinates."""
    n = values.shape[0]
    fx = np.asarray(xs) * n
    fy = np.asarray(ys) * n
    i0 = np.floor(fx).astype(int) % n
    j0 = np.floor(fy).astype(int) % n
    tx = fx - np.floor(fx)
    ty = fy - np.floor(fy)
    i1 = (i0 + 1) % n
    j1 = (j0 + 1) % n
    return (values[i0, j0] * (1 - tx) * (1 - ty)
            + values[i1, j0] * tx * (1 - ty)
            + values[i0, j1] * (1 - tx) * ty
            + values[i1, j1] * tx * ty)


def circle_samples(f: ScalarField, center, radius: float, n_angles: int = None):
    """Values of f on the circle of given radius, bilinearly interpolated
    at equally spaced angles (at least 64, scaled with the circumference)."""
    n = f.grid.n
    if n_angles is None:
        n_angles = max(64, 4 * int(np.ceil(0.5 * np.pi * radius * n)))
    th = 2.0 * np.pi * np.arange(n_angles) / n_angles
    xs = center[0] + radius * np.cos(th)
    ys = center[1] + radius * np.sin(th)
    return bilinear_sample(f.values, xs, ys)


def radial_profile(f: ScalarField, center, radii):
    """Circle means of f around center, one per requested radius.

    Radii must lie in (2/N, 0.4): below two cells a circle is not resolved,
    and beyond 0.4 the periodic images start to wrap.
    """
    n = f.grid.n
    out = []
    for r in radii:
        if not (2.0 / n < r < 0.4):
            raise ConfigurationError(
                f"radius {r} outside the resolvable range (2/N, 0.4) at N={n}")
        out.append((float(r), float(circle_samples(f, center, r).mean())))
    return out


# ---------------------------------------------------------------------------
# snapshot export: textual CSV and 8-bit PGM heatmaps
# ---------------------------------------------------------------------------

def write_field_csv(f: ScalarField, path):
    lines = [f"# N={f.grid.n}"]
    for row in f.values:
        lines.append(",".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_field_csv(path) -> ScalarField:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# N="):
            raise ConfigurationError(f"{path}: missing '# N=' header")
        n = int(header.split("=", 1)[1])
        values = np.loadtxt(fh, delimiter=",").reshape(n, n)
    return ScalarField(make_grid(n), values)


def write_field_pgm(f: ScalarField, path):
    v = f.values
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        scaled = np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.zeros_like(v, dtype=np.uint8)
    header = f"P5\n# min={lo!r} max={hi!r}\n{f.grid.n} {f.grid.n}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(scaled.tobytes())
