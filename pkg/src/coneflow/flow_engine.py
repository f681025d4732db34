"""Base-reduced parabolic flow and its 4D product-case oracle.

The reduced flow evolves the potential phi on the base:

    d phi / dt = log[ (q + eps^2)^(1-beta) (A + (1/2) Lap eta) / (F A) ]
                 - phi - delta chi(eps^2 + q),        eta = phi + delta chi,

whose stationary points are exactly the solutions of the regularized
limiting equation handled by ke_solver.  Backward Euler with the same
Newton/CG machinery (shifted by 1/dt) is the default scheme; an explicit
RK4 with a conservative stability guard is kept as a cross-check.

The 4D oracle evolves the same flow on a coarse product of a fiber torus
and the base, computing the full 2x2 Hermitian determinant spectrally.
For fiber-constant data its right-hand side agrees with the reduced one
to round-off, which is the reduction's correctness certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as _fft

from .errors import (ConfigurationError, DivergenceError, PositivityError,
                     StabilityGuardError)
from .ke_solver import KEProblem, preconditioned_cg
from .torus_field import ScalarField, lap_values, make_grid, _lap_multiplier

__all__ = [
    "FlowState",
    "Trajectory",
    "FlowOps",
    "reduced_rhs",
    "flow_step",
    "run_flow",
    "fit_decay_slope",
    "ProductFlow4D",
]

SCHEMES = ("backward-euler-newton", "rk4-explicit")


@dataclass(frozen=True)
class FlowState:
    phi: ScalarField
    t: float
    epsilon: float
    dt: float


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    gaps: dict = field(default_factory=dict)        # mask name -> [sup gap]
    energy: list = field(default_factory=list)      # integral of phi
    min_density: list = field(default_factory=list)
    monitors: dict = field(default_factory=dict)    # name -> [value]
    snapshots: dict = field(default_factory=dict)   # time -> phi values

    def append(self, t, gaps, energy, min_density, monitors):
        if self.times and t <= self.times[-1]:
            raise ConfigurationError("trajectory times must increase strictly")
        self.times.append(t)
        for k, v in gaps.items():
            self.gaps.setdefault(k, []).append(v)
        self.energy.append(energy)
        self.min_density.append(min_density)
        for k, v in monitors.items():
            self.monitors.setdefault(k, []).append(v)


class FlowOps:
    """Cached per-problem quantities for one epsilon level."""

    def __init__(self, problem: KEProblem):
        self.problem = problem
        self.area = problem.bg.area
        self.cone = problem.cone_field_values()           # delta chi field
        self.half_lap_cone = 0.5 * lap_values(self.cone)
        self.log_prefactor = (
            (1.0 - problem.beta)
            * np.log(problem.bg.q.values + problem.epsilon**2)
            - problem.density.log_density.values
            - math.log(self.area))
        self.n = problem.bg.grid.n
        self.grid = problem.bg.grid

    def density_values(self, phi_values) -> np.ndarray:
        return self.area + 0.5 * lap_values(phi_values) + self.half_lap_cone

    def rhs_values(self, phi_values) -> np.ndarray:
        density = self.density_values(phi_values)
        if density.min() <= 0.0:
            raise PositivityError(
                "flow state left the Kahler cone (nonpositive density)")
        return (self.log_prefactor + np.log(density)
                - phi_values - self.cone)


def reduced_rhs(state: FlowState, problem: KEProblem) -> ScalarField:
    """Right-hand side of the reduced flow at the state's potential."""
    if abs(state.epsilon - problem.epsilon) > 1e-15:
        raise ConfigurationError("state and problem disagree on epsilon")
    ops = FlowOps(problem)
    return ScalarField(state.phi.grid, ops.rhs_values(state.phi.values))


def _rk4_guard(ops: FlowOps, phi_values, dt):
    density = ops.density_values(phi_values)
    guard = 0.2 * ops.grid.spacing**2 * ops.area / float(density.max())
    if dt > guard:
        raise StabilityGuardError(
            f"rk4 step dt={dt} exceeds the stability guard {guard:.3e} "
            f"(0.2 h^2 A / max density)")


def _backward_euler(ops: FlowOps, phi, dt, tol=1e-12, max_newton=30):
    """Solve u - dt * rhs(u) = phi by Newton with a CG inner solve.

    The linearization is (1+dt) I - dt (1/2) Lap / D; multiplying through
    by the density D makes it SPD, and a mean-density Fourier symbol is an
    exact-preconditioner ansatz that keeps CG counts at a handful.
    """
    lm = _lap_multiplier(ops.n)
    u = phi + dt * ops.rhs_values(phi)      # explicit predictor
    if ops.density_values(u).min() <= 0.0:
        u = phi.copy()
    for it in range(max_newton):
        resid = u - phi - dt * ops.rhs_values(u)
        sup = float(np.abs(resid).max())
        if sup <= tol:
            return u, it
        density = ops.density_values(u)
        symbol = (1.0 + dt) * float(density.mean()) - dt * 0.5 * lm

        def apply_op(w):
            return (1.0 + dt) * density * w - dt * 0.5 * lap_values(w)

        w, _ = preconditioned_cg(apply_op, -density * resid, symbol,
                                 rel_tol=1e-13)
        step = 1.0
        accepted = False
        for _ in range(30):
            un = u + step * w
            if ops.density_values(un).min() > 0.0:
                rn = un - phi - dt * ops.rhs_values(un)
                if np.abs(rn).max() < sup:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            raise DivergenceError(
                f"backward-Euler Newton stalled (residual {sup:.3e})")
        u = u + step * w
    raise DivergenceError("backward-Euler Newton did not converge")


def _rk4(ops: FlowOps, phi, dt):
    k1 = ops.rhs_values(phi)
    k2 = ops.rhs_values(phi + 0.5 * dt * k1)
    k3 = ops.rhs_values(phi + 0.5 * dt * k2)
    k4 = ops.rhs_values(phi + dt * k3)
    out = phi + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if ops.density_values(out).min() <= 0.0:
        raise PositivityError("rk4 step lost density positivity")
    return out


def flow_step(state: FlowState, problem: KEProblem,
              scheme: str = "backward-euler-newton",
              ops: FlowOps = None) -> FlowState:
    """Advance the state by its dt with the chosen scheme."""
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown scheme {scheme!r}; pick from {SCHEMES}")
    if state.dt <= 0:
        raise ConfigurationError("dt must be positive")
    ops = ops or FlowOps(problem)
    phi = np.array(state.phi.values, dtype=float)
    if scheme == "rk4-explicit":
        _rk4_guard(ops, phi, state.dt)
        new_phi = _rk4(ops, phi, state.dt)
    else:
        new_phi, _ = _backward_euler(ops, phi, state.dt)
    return FlowState(phi=ScalarField(state.phi.grid, new_phi),
                     t=state.t + state.dt, epsilon=state.epsilon, dt=state.dt)


def run_flow(problem: KEProblem, T: float, dt: float,
             scheme: str = "backward-euler-newton",
             masks: dict = None, target_phi: ScalarField = None,
             monitor_mask=None, snapshot_times=()) -> tuple:
    """Evolve from phi(0) = 0 to time T, sampling every step.

    masks maps names to boolean arrays; the trajectory records the sup gap
    to target_phi on each.  monitor_mask (default: the first mask) hosts
    the boundedness monitors sup|psi|, sup|d_t psi| and the trace of the
    reference density against the evolving one.

    Returns (final state, trajectory, decay report).
    """
    if T > 50.0:
        raise ConfigurationError("flow horizon is capped at T = 50")
    if dt <= 0 or T <= 0:
        raise ConfigurationError("T and dt must be positive")
    ops = FlowOps(problem)
    n = problem.bg.grid.n
    masks = masks or {}
    if monitor_mask is None and masks:
        monitor_mask = next(iter(masks.values()))
    traj = Trajectory()
    phi = np.zeros((n, n))
    state = FlowState(phi=ScalarField(problem.bg.grid, phi), t=0.0,
                      epsilon=problem.epsilon, dt=dt)
    n_steps = int(round(T / dt))
    snapshot_times = sorted(snapshot_times)
    target = None if target_phi is None else target_phi.values
    try:
        for _ in range(n_steps):
            state = flow_step(state, problem, scheme, ops=ops)
            phi = state.phi.values
            density = ops.density_values(phi)
            rhs = ops.rhs_values(phi)
            gaps = {}
            if target is not None:
                diff = np.abs(phi - target)
                for name, mask in masks.items():
                    gaps[name] = float(diff[mask].max())
            monitors = {}
            if monitor_mask is not None:
                psi = phi + ops.cone
                monitors["sup_psi"] = float(np.abs(psi[monitor_mask]).max())
                monitors["sup_dt_psi"] = float(np.abs(rhs[monitor_mask]).max())
                monitors["trace_ref"] = float(
                    (ops.area / density[monitor_mask]).max())
            traj.append(state.t, gaps, float(phi.mean()),
                        float(density.min()), monitors)
            if snapshot_times and abs(state.t - snapshot_times[0]) < 0.5 * dt:
                traj.snapshots[snapshot_times.pop(0)] = phi.copy()
    except (DivergenceError, PositivityError) as exc:
        raise DivergenceError(
            f"flow aborted at t={state.t:.3f}: {exc}") from exc
    decay = {name: fit_decay_slope(traj.times, series)
             for name, series in traj.gaps.items()}
    return state, traj, decay


def fit_decay_slope(times, gaps, window=(1e-6, 1e-1)):
    """Least-squares slope of log gap over the window; None if underresolved."""
    t = np.asarray(times, dtype=float)
    g = np.asarray(gaps, dtype=float)
    sel = (g >= window[0]) & (g <= window[1])
    if sel.sum() < 5:
        return None
    coeffs = np.polyfit(t[sel], np.log(g[sel]), 1)
    return {"slope": float(coeffs[0]),
            "intercept_constant": float(np.exp(coeffs[1])),
            "samples": int(sel.sum())}


# ---------------------------------------------------------------------------
# coarse 4D product oracle
# ---------------------------------------------------------------------------

class ProductFlow4D:
    """Full product-space flow on fiber nf^2 x base nb^2, explicit Euler.

    Valid for product models only (constant tau, no singular fibers,
    density F identically one).  The fiber carries a flat form of constant
    density fiber_area; larger fiber area softens the fiber stiffness and
    is what admits the documented dt at horizon T = 2.
    """

    def __init__(self, problem: KEProblem, nf: int = 16, nb: int = 32,
                 fiber_area: float = 2.0):
        model = problem.bg.model
        if model.fibers or model.tau_model.kind != "constant":
            raise ConfigurationError("the 4D oracle supports product models only")
        if np.abs(problem.density.log_density.values).max() > 1e-10:
            raise ConfigurationError("the 4D oracle requires F identically 1")
        from .fibration_model import assemble_density, build_background
        self.nf = nf
        self.nb = nb
        self.fiber_area = float(fiber_area)
        self.base_grid = make_grid(nb)
        bg = build_background(model, self.base_grid)
        dens = assemble_density(model, bg)
        self.base_problem = KEProblem(bg=bg, density=dens, beta=problem.beta,
                                      delta=problem.delta,
                                      epsilon=problem.epsilon)
        self.base_ops = FlowOps(self.base_problem)
        self.area = bg.area

        kf = np.fft.fftfreq(nf, d=1.0 / nf)
        kb = np.fft.fftfreq(nb, d=1.0 / nb)
        kxw, kyw, kxs, kys = np.meshgrid(kf, kf, kb, kb, indexing="ij")
        tp = 2.0 * np.pi
        lap_w = -tp**2 * (kxw**2 + kyw**2)
        lap_s = -tp**2 * (kxs**2 + kys**2)
        m_re = -(tp * kxw * tp * kxs + tp * kyw * tp * kys)
        m_im = -(tp * kxw * tp * kys - tp * kyw * tp * kxs)
        # two fused multipliers: one inverse transform yields two real fields
        self._mult_lap = lap_w + 1j * lap_s
        self._mult_mixed = m_re + 1j * m_im
        self._base_log_prefactor = self.base_ops.log_prefactor \
            - math.log(self.fiber_area)
        self._cone = self.base_ops.cone
        self._half_lap_cone = self.base_ops.half_lap_cone

    def initial_state(self, fiber_mode_amplitude: float = 0.0):
        phi = np.zeros((self.nf, self.nf, self.nb, self.nb))
        if fiber_mode_amplitude:
            xw = np.arange(self.nf) / self.nf
            phi += fiber_mode_amplitude * np.cos(2.0 * np.pi * xw)[
                :, None, None, None]
        return phi

    def rhs(self, phi, t):
        hat = _fft.fftn(phi, workers=2)
        z1 = _fft.ifftn(self._mult_lap * hat, workers=2)
        z2 = _fft.ifftn(self._mult_mixed * hat, workers=2)
        lap_w = z1.real
        lap_s = z1.imag
        m_re = 0.5 * z2.real
        m_im = 0.5 * z2.imag
        p = math.exp(-t) * self.fiber_area + 0.5 * lap_w
        q = self.area + 0.5 * lap_s + self._half_lap_cone
        det = p * q - m_re**2 - m_im**2
        if p.min() <= 0.0 or det.min() <= 0.0:
            raise PositivityError("4D determinant left the Kahler cone")
        return (t + self._base_log_prefactor + np.log(det)
                - phi - self._cone)

    def stability_limit(self, horizon_t: float) -> float:
        """Euler step bound 2/lambda for the stiffest linear mode."""
        lam_fiber = (math.exp(horizon_t) * 2.0 * np.pi**2
                     * 2.0 * (self.nf / 2)**2 / self.fiber_area)
        q_min = float(self.base_ops.density_values(
            np.zeros((self.nb, self.nb))).min())
        lam_base = 2.0 * np.pi**2 * 2.0 * (self.nb / 2)**2 / q_min
        return 2.0 / (lam_fiber + lam_base + 1.0)

    def fiber_gap(self, phi) -> float:
        """sup |psi - fiber-average psi| (the cone part is fiber-constant)."""
        return float(np.abs(phi - phi.mean(axis=(0, 1))[None, None]).max())

    def run(self, T: float, dt: float, phi=None, sample_every: int = 50,
            reduced_reference: bool = False):
        """Explicit Euler to time T; returns (phi, samples dict).

        With reduced_reference=True a reduced-flow Euler trajectory on the
        base grid is advanced in lockstep and the sup difference recorded.
        """
        limit = self.stability_limit(T)
        if dt > limit:
            raise StabilityGuardError(
                f"4D explicit step dt={dt} exceeds the Euler bound "
                f"{limit:.3e} at horizon T={T}")
        phi = self.initial_state() if phi is None else np.array(phi, dtype=float)
        phi_red = np.zeros((self.nb, self.nb)) if reduced_reference else None
        n_steps = int(round(T / dt))
        samples = {"t": [], "fiber_gap": [], "reduced_diff": []}
        for s in range(n_steps):
            t = s * dt
            phi = phi + dt * self.rhs(phi, t)
            if reduced_reference:
                phi_red = phi_red + dt * self.base_ops.rhs_values(phi_red)
            if (s + 1) % sample_every == 0 or s + 1 == n_steps:
                samples["t"].append((s + 1) * dt)
                samples["fiber_gap"].append(self.fiber_gap(phi))
                if reduced_reference:
                    samples["reduced_diff"].append(float(
                        np.abs(phi - phi_red[None, None]).max()))
        return phi, samples
