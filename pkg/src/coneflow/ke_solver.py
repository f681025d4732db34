"""Newton solver for the limiting conical equation on the base.

In density form the stationary equation reads

    A + (1/2) Lap v = F e^v (q + eps^2)^(-(1-beta)) A,

for the combined potential v = phi + delta * chi(eps^2 + q).  The zero-order
term e^v makes the linearization strictly negative definite, so no gauge
fixing is needed: damped Newton steps with a conjugate-gradient inner solve
(spectrally preconditioned) converge from v = 0 for every epsilon in the
continuation schedules used here.

Continuation solves a decreasing epsilon ladder with warm starts, transfers
phi between levels (the cone part is rebuilt per epsilon), and reports the
Cauchy differences on a compact region.  The zero-epsilon solution is only
ever produced by Richardson extrapolation of the ladder, never solved for
directly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .cone_smoothing import chi_values
from .errors import ConfigurationError, DivergenceError, PositivityError
from .fibration_model import BackgroundGeometry, DensityData
from .torus_field import ScalarField, circle_samples, lap_values, _lap_multiplier
import scipy.fft as _fft

__all__ = [
    "KEProblem",
    "KESolution",
    "ContinuationReport",
    "ke_residual",
    "newton_solve",
    "continuation_solve",
    "extrapolated_solution",
    "default_extrapolation_schedule",
    "holder_exponent_estimate",
    "preconditioned_cg",
]


@dataclass(frozen=True)
class KEProblem:
    bg: BackgroundGeometry
    density: DensityData
    beta: float
    delta: float
    epsilon: float

    def coefficient_values(self, epsilon=None) -> np.ndarray:
        """M = F (q + eps^2)^(-(1-beta)) A, the nonlinearity's weight."""
        eps = self.epsilon if epsilon is None else epsilon
        f_vals = self.density.density_values()
        return f_vals * (self.bg.q.values + eps * eps) ** (-(1.0 - self.beta)) \
            * self.bg.area

    def cone_field_values(self, epsilon=None) -> np.ndarray:
        eps = self.epsilon if epsilon is None else epsilon
        return self.delta * chi_values(eps, self.bg.q.values, self.beta)


@dataclass(frozen=True)
class KESolution:
    problem: KEProblem
    v: ScalarField            # phi + delta chi(eps^2 + q)
    phi: ScalarField
    residual_sup: float
    newton_iters: int
    residual_history: tuple = ()

    @property
    def epsilon(self):
        return self.problem.epsilon

    def density_values(self) -> np.ndarray:
        """Limit density rho = F e^v (q + eps^2)^(-(1-beta)) A."""
        return self.problem.coefficient_values() * np.exp(self.v.values)


def ke_residual(problem: KEProblem, v: ScalarField) -> ScalarField:
    """Pointwise residual A + (1/2) Lap v - M e^v."""
    vals = problem.bg.area + 0.5 * lap_values(v.values) \
        - problem.coefficient_values() * np.exp(v.values)
    return ScalarField(v.grid, vals)


def preconditioned_cg(apply_op, b, fourier_symbol, rel_tol=1e-12, max_iter=500):
    """CG for an SPD grid operator with an exact diagonal-in-Fourier
    preconditioner given by its symbol array."""
    x = np.zeros_like(b)
    r = b.copy()
    z = _fft.ifft2(_fft.fft2(r) / fourier_symbol).real
    p = z.copy()
    rz = float(np.vdot(r, z).real)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return x, 0
    for it in range(max_iter):
        ap = apply_op(p)
        alpha = rz / float(np.vdot(p, ap).real)
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= rel_tol * b_norm:
            return x, it + 1
        z = _fft.ifft2(_fft.fft2(r) / fourier_symbol).real
        rz_new = float(np.vdot(r, z).real)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, max_iter


def newton_solve(problem: KEProblem, v0: ScalarField = None,
                 tol: float = 1e-9, max_iter: int = 50,
                 cg_tol: float = 1e-12) -> KESolution:
    """Damped Newton iteration from v0 (default 0).

    Each step solves (-(1/2) Lap + M e^v) w = G by preconditioned CG and
    halves the step until the sup residual decreases and the metric density
    A + (1/2) Lap v stays positive.  Terminates at sup|G| <= tol.
    """
    bg = problem.bg
    n = bg.grid.n
    m_coeff = problem.coefficient_values()
    if np.any(m_coeff <= 0):
        raise PositivityError("equation coefficient must be positive")
    v = np.zeros((n, n)) if v0 is None else np.array(v0.values, dtype=float)
    if (bg.area + 0.5 * lap_values(v)).min() <= 0:
        raise PositivityError("initial density is outside the Kahler cone")
    lm = _lap_multiplier(n)
    history = []
    for it in range(max_iter + 1):
        g = bg.area + 0.5 * lap_values(v) - m_coeff * np.exp(v)
        sup = float(np.abs(g).max())
        history.append(sup)
        if sup <= tol:
            vf = ScalarField(bg.grid, v)
            return KESolution(
                problem=problem,
                v=vf,
                phi=ScalarField(bg.grid, v - problem.cone_field_values()),
                residual_sup=sup,
                newton_iters=it,
                residual_history=tuple(history),
            )
        c = m_coeff * np.exp(v)
        symbol = -0.5 * lm + float(c.mean())
        w, _ = preconditioned_cg(lambda u: -0.5 * lap_values(u) + c * u,
                                 g, symbol, rel_tol=cg_tol)
        step = 1.0
        accepted = False
        for _ in range(30):
            vn = v + step * w
            density = bg.area + 0.5 * lap_values(vn)
            if density.min() > 0:
                gn = density - m_coeff * np.exp(vn)
                if np.abs(gn).max() < sup:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            raise DivergenceError(
                f"Newton line search stalled at iteration {it}", history)
        v = v + step * w
    raise DivergenceError(
        f"Newton did not reach tol={tol} in {max_iter} iterations", history)


@dataclass(frozen=True)
class ContinuationReport:
    epsilons: tuple
    residuals: tuple
    newton_iters: tuple
    cauchy_sups: tuple          # sup over {q >= 0.1} of |v_{j+1} - v_j|
    holder_exponent: float


def _check_schedule(schedule, grid_n):
    schedule = [float(e) for e in schedule]
    if not schedule:
        raise ConfigurationError("epsilon schedule is empty")
    if schedule[0] < 0.25:
        raise ConfigurationError("schedule must start at 0.25 or above")
    for a, b in zip(schedule, schedule[1:]):
        if not (0.0 < b < a):
            raise ConfigurationError("schedule must decrease strictly")
        if b / a > 0.7 + 1e-12:
            raise ConfigurationError(
                f"schedule ratio {b / a:.3f} exceeds 0.7 between {a} and {b}")
    if schedule[-1] < 2.0 / grid_n:
        raise ConfigurationError(
            f"schedule must end at or above the grid scale 2/N = {2.0 / grid_n}")
    return schedule


def continuation_solve(problem: KEProblem, schedule):
    """Warm-started Newton ladder over a decreasing epsilon schedule.

    Returns (solution at the smallest epsilon, report).  The report's Cauchy
    differences are sups over the compact region q >= 0.1 and are expected
    to decrease down the ladder.
    """
    schedule = _check_schedule(schedule, problem.bg.grid.n)
    region = problem.bg.q.values >= 0.1
    sols = []
    residuals = []
    iters = []
    v_prev = None
    cone_prev = None
    for eps in schedule:
        p_eps = replace(problem, epsilon=eps)
        cone_now = p_eps.cone_field_values()
        v0 = None
        if v_prev is not None:
            v0 = ScalarField(problem.bg.grid,
                             v_prev.values - cone_prev + cone_now)
        try:
            sol = newton_solve(p_eps, v0)
        except DivergenceError as exc:
            raise DivergenceError(f"continuation failed at eps={eps}: {exc}",
                                  exc.history)
        sols.append(sol)
        residuals.append(sol.residual_sup)
        iters.append(sol.newton_iters)
        v_prev = sol.v
        cone_prev = cone_now
    cauchy = tuple(
        float(np.abs(b.v.values - a.v.values)[region].max())
        for a, b in zip(sols, sols[1:]))
    hold = holder_exponent_estimate(sols[-1].v, problem.bg.model.cone_point)
    report = ContinuationReport(
        epsilons=tuple(schedule),
        residuals=tuple(residuals),
        newton_iters=tuple(iters),
        cauchy_sups=cauchy,
        holder_exponent=hold,
    )
    return sols[-1], report, sols


def default_extrapolation_schedule(grid_n: int, start=0.4, ratio=0.7):
    """Geometric schedule from start down to the grid scale 2/N."""
    sched = [start]
    while sched[-1] * ratio >= 2.0 / grid_n:
        sched.append(sched[-1] * ratio)
    return sched


def _extrapolation_basis(beta: float, eps: float):
    """Terms of the small-epsilon expansion of the solution family.

    At beta = 1/2 the cone profile contributes eps and eps log eps terms;
    otherwise the leading corrections are eps^(2 beta) and the next powers.
    """
    if abs(beta - 0.5) < 1e-12:
        return (1.0, eps, eps * np.log(eps), eps * eps)
    return (1.0, eps**(2.0 * beta), eps**min(4.0 * beta, 2.0),
            eps**min(2.0 + 2.0 * beta, 4.0))


def extrapolated_solution(problem: KEProblem, schedule=None):
    """Continuation followed by pointwise Richardson extrapolation to eps = 0.

    Fits the last four ladder solutions against the expansion basis and
    returns a KESolution tagged with epsilon = 0 whose density uses the
    unregularized coefficient.  The zero-epsilon equation itself is never
    iterated on.
    """
    if schedule is None:
        schedule = default_extrapolation_schedule(problem.bg.grid.n)
    sol_min, report, sols = continuation_solve(problem, schedule)
    if len(sols) < 4:
        raise ConfigurationError("extrapolation needs at least four ladder points")
    tail = sols[-4:]
    basis = np.array([_extrapolation_basis(problem.beta, s.epsilon)
                      for s in tail])
    weights = np.linalg.inv(basis)[0]
    v_star = sum(w * s.v.values for w, s in zip(weights, tail))
    p0 = replace(problem, epsilon=0.0)
    v_field = ScalarField(problem.bg.grid, v_star)
    resid = ke_residual(p0, v_field)
    cone0 = p0.cone_field_values()
    sol = KESolution(
        problem=p0,
        v=v_field,
        phi=ScalarField(problem.bg.grid, v_star - cone0),
        residual_sup=float(np.abs(resid.values).max()),
        newton_iters=0,
        residual_history=(),
    )
    return sol, report, sols


def holder_exponent_estimate(v: ScalarField, center) -> float:
    """Least-squares slope of log oscillation against log radius.

    Oscillation at radius rho is max - min of the circle samples together
    with the center value, over dyadic radii in [4/N, 0.1].  The result is
    clamped into (0, 1]; a constant field reports 1 by convention.
    """
    n = v.grid.n
    radii = []
    r = 0.1
    while r >= 4.0 / n:
        radii.append(r)
        r *= 0.5
    if len(radii) < 2 and 4.0 / n < 0.1:
        radii.append(4.0 / n)   # coarse grids: include the window's low end
    if len(radii) < 2:
        raise ConfigurationError(f"grid too coarse for oscillation radii at N={n}")
    center_val = float(v.values[v.grid.point_index(center)])
    oscs, used = [], []
    for rho in radii:
        samples = circle_samples(v, center, rho)
        osc = float(max(samples.max(), center_val) - min(samples.min(), center_val))
        if osc > 1e-14:
            oscs.append(osc)
            used.append(rho)
    if len(used) < 2:
        return 1.0
    slope = float(np.polyfit(np.log(used), np.log(oscs), 1)[0])
    return float(min(max(slope, 1e-6), 1.0))
