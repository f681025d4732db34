"""One-call verification suite: solve, flow, and check every tracked estimate.

Produces one EstimateReport per tracked statement, keyed by the report
identifiers consumed downstream:

    lemma-3.2, lemma-3.4, eq-3.10, thm-1.1-2, prop-2.1-holder,
    prop-3.7, F-Lp

The keys are wire-format tokens for report consumers; see each builder for
what is actually measured.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from .estimates import (EstimateReport, cone_angle, multiplicity_exponent,
                        ricci_residual, sigma_barrier, trace_field,
                        verify_c0_convergence, verify_trace_bound)
from .fibration_model import (FibrationModel, assemble_density,
                              build_background, validate_lp)
from .flow_engine import run_flow
from .ke_solver import (KEProblem, default_extrapolation_schedule,
                        extrapolated_solution, newton_solve)
from .torus_field import ScalarField, make_grid

__all__ = ["run_verification_suite", "REPORT_KEYS"]

REPORT_KEYS = ("lemma-3.2", "lemma-3.4", "eq-3.10", "thm-1.1-2",
               "prop-2.1-holder", "prop-3.7", "F-Lp")

SIGMA_LEVELS = (0.2, 0.4, 0.6)
TRACE_TIMES = (1.0, 5.0, 10.0, 20.0)
DECAY_BAND = (-1.15, -0.85)
CONE_SLOPE_RTOL = 0.02
MULTIPLICITY_ATOL = 0.05


def _ricci_cap(model: FibrationModel) -> float:
    return 5e-3 if not model.fibers else 2e-2


def run_verification_suite(model: FibrationModel, grid_n: int = 128,
                           flow_T: float = 20.0, flow_dt: float = 0.05,
                           scheme: str = "backward-euler-newton",
                           flow_epsilon: float = 0.05,
                           qr_mask_level: float = 0.1,
                           lp_grids=(128, 256, 512)) -> dict:
    """Run the full suite on one model; returns {key: EstimateReport}."""
    grid = make_grid(grid_n)
    bg = build_background(model, grid)
    density = assemble_density(model, bg, grid)
    problem = KEProblem(bg=bg, density=density, beta=model.beta,
                        delta=model.delta, epsilon=flow_epsilon)

    gamma_points = [bg.model.cone_point] + [f.point for f in bg.model.fibers]
    barrier = sigma_barrier(grid, gamma_points, reference_area=bg.area)
    masks = {f"sigma>={level}": barrier.level_mask(level)
             for level in SIGMA_LEVELS}
    masks[f"qr>={qr_mask_level}"] = bg.q.values >= qr_mask_level

    # stationary target at the flow's epsilon, then the flow itself
    target = newton_solve(problem)
    snapshot_times = [t for t in TRACE_TIMES if t <= flow_T]
    state, traj, decay = run_flow(
        problem, flow_T, flow_dt, scheme, masks=masks,
        target_phi=target.phi, monitor_mask=masks["sigma>=0.2"],
        snapshot_times=snapshot_times)

    # extrapolated stationary solution for the curvature identity
    sol0, cont_report, _ = extrapolated_solution(
        replace(problem, epsilon=0.0),
        default_extrapolation_schedule(grid_n))

    reports = {}
    reports["lemma-3.2"] = _decay_rate_report(decay)
    reports["prop-3.7"] = _c0_report(traj)
    reports["lemma-3.4"], reports["eq-3.10"] = _trace_reports(
        traj, bg, problem, barrier)
    reports["thm-1.1-2"] = _limit_identity_report(sol0, bg, barrier)
    reports["prop-2.1-holder"] = _holder_report(cont_report)
    reports["F-Lp"] = _lp_report(model, lp_grids)
    return reports


def _decay_rate_report(decay) -> EstimateReport:
    lo, hi = DECAY_BAND
    constants = {}
    violations = []
    for level in SIGMA_LEVELS:
        fit = decay.get(f"sigma>={level}")
        if fit is None:
            violations.append(math.inf)
            constants[f"sigma>={level}"] = None
            continue
        slope = fit["slope"]
        constants[f"sigma>={level}"] = {"slope": slope,
                                        "C": fit["intercept_constant"]}
        violations.append(max(lo - slope, slope - hi))
    worst = float(max(violations))
    return EstimateReport(
        name="lemma-3.2", constants=constants, max_violation=worst,
        passed=bool(worst <= 0.0),
        samples={"band": list(DECAY_BAND)})


def _c0_report(traj) -> EstimateReport:
    base = verify_c0_convergence(traj, SIGMA_LEVELS, name="prop-3.7")
    monitors = {k: float(np.max(v)) for k, v in traj.monitors.items()}
    samples = dict(base.samples)
    samples["monitor_maxima"] = monitors
    times = np.asarray(traj.times)
    early = times <= 1.0
    monitor_growth = {}
    for k, v in traj.monitors.items():
        v = np.asarray(v)
        early_max = float(np.abs(v[early]).max())
        monitor_growth[k] = float(np.abs(v).max() / max(early_max, 1e-300))
    samples["monitor_growth_vs_t1"] = monitor_growth
    return EstimateReport(name="prop-3.7", constants=base.constants,
                          max_violation=base.max_violation,
                          passed=base.passed, samples=samples)


def _trace_reports(traj, bg, problem, barrier):
    from .flow_engine import FlowOps
    ops = FlowOps(problem)
    grid = bg.grid
    ref = ScalarField(grid, np.full((grid.n, grid.n), bg.area))
    forward, backward = [], []
    for t, phi in sorted(traj.snapshots.items()):
        density = ScalarField(grid, ops.density_values(phi))
        forward.append(trace_field(ref, density))   # tr_{omega_psi} omega_t
        backward.append(trace_field(density, ref))  # tr_{omega_t} omega_psi
    r_34 = verify_trace_bound(forward, barrier, name="lemma-3.4")
    r_310 = verify_trace_bound(forward + backward, barrier, name="eq-3.10")
    r_34.samples["times"] = sorted(traj.snapshots)
    r_310.samples["times"] = sorted(traj.snapshots)
    return r_34, r_310


def _limit_identity_report(sol0, bg, barrier) -> EstimateReport:
    mask = barrier.level_mask(0.5)
    _, sup = ricci_residual(sol0, mask)
    cap = _ricci_cap(bg.model)
    beta = bg.model.beta
    slope = cone_angle(sol0)
    violations = [sup / cap - 1.0,
                  abs(slope / (2.0 * beta) - 1.0) / CONE_SLOPE_RTOL - 1.0]
    constants = {"ricci_residual_sup": sup, "ricci_cap": cap,
                 "cone_slope": slope, "cone_slope_target": 2.0 * beta}
    exps = {}
    for f in bg.model.fibers:
        target = -2.0 * (f.multiplicity - 1) / f.multiplicity
        measured = multiplicity_exponent(sol0, f.point)
        exps[str(f.point)] = {"measured": measured, "target": target}
        violations.append(abs(measured - target) / MULTIPLICITY_ATOL - 1.0)
    if exps:
        constants["multiplicity_exponents"] = exps
    worst = float(max(violations))
    return EstimateReport(name="thm-1.1-2", constants=constants,
                          max_violation=worst, passed=bool(worst <= 0.0))


def _holder_report(cont_report) -> EstimateReport:
    """Regularity exponent is reported, not asserted against a target: the
    statement only guarantees some exponent in (0, 1)."""
    h = cont_report.holder_exponent
    violation = 0.0 if 0.0 < h <= 1.0 else 1.0
    cauchy = list(cont_report.cauchy_sups)
    decreasing = all(b <= a * 1.05 for a, b in zip(cauchy, cauchy[1:]))
    if not decreasing:
        violation = max(violation, 1.0)
    return EstimateReport(
        name="prop-2.1-holder",
        constants={"holder_exponent": h, "cauchy_sups": cauchy},
        max_violation=float(violation), passed=bool(violation <= 0.0),
        samples={"epsilons": list(cont_report.epsilons)})


def _lp_report(model, lp_grids) -> EstimateReport:
    """Integrability dichotomy, asserted qualitatively: the below-threshold
    integral must Cauchy-stabilize across refinements while the
    above-threshold one keeps growing (when a genuine singular exponent
    sets the threshold)."""
    rep = validate_lp(model, lp_grids)
    low_changes = [abs(v) for v in rep["low_changes"].values()]
    violations = []
    for a, b in zip(low_changes, low_changes[1:]):
        violations.append(b - a)            # must shrink
    ratios = [f.multiplicity / (f.multiplicity - 1.0)
              for f in model.fibers if f.multiplicity > 1]
    growth_expected = bool(ratios) and min(ratios) <= 1.0 / (1.0 - model.beta)
    if growth_expected:
        for v in rep["high_changes"].values():
            violations.append(0.05 - v)     # must keep growing by > 5%
    if not violations:
        violations = [0.0]
    worst = float(max(violations))
    return EstimateReport(
        name="F-Lp",
        constants={"p_star": rep["p_star"], "p_low": rep["p_low"],
                   "p_high": rep["p_high"],
                   "low_changes": rep["low_changes"],
                   "high_changes": rep["high_changes"],
                   "growth_expected": growth_expected},
        max_violation=worst, passed=bool(worst <= 0.0),
        samples={"integrals_low": rep["integrals_low"],
                 "integrals_high": rep["integrals_high"]})
