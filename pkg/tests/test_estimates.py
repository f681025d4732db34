import json

import numpy as np
import pytest
from dataclasses import replace

from coneflow.errors import ConfigurationError, ModelError
from coneflow.estimates import (EstimateReport, cone_angle,
                                fit_trace_constants, multiplicity_exponent,
                                ricci_residual, sigma_barrier, trace_field,
                                verify_c0_convergence, verify_trace_bound)
from coneflow.fibration_model import (assemble_density, build_background,
                                      product_model)
from coneflow.ke_solver import KEProblem, KESolution, newton_solve
from coneflow.torus_field import (ScalarField, constant_field,
                                  field_from_values, make_grid,
                                  periodic_distance)


@pytest.fixture(scope="module")
def barrier128(grid128):
    return sigma_barrier(grid128, [(0.5, 0.5), (0.25, 0.25)])


def test_sigma_vanishes_at_points(barrier128, grid128):
    for p in barrier128.points:
        i, j = grid128.point_index(p)
        assert barrier128.sigma.values[i, j] == 0.0
        # exact plateau one cell around the point
        near = periodic_distance(grid128, p) <= grid128.spacing
        assert np.abs(barrier128.sigma.values[near]).max() == 0.0


def test_sigma_saturates_far_away(grid128):
    b = sigma_barrier(grid128, [(0.5, 0.5)])
    far = periodic_distance(grid128, (0.5, 0.5)) >= 0.4
    assert np.abs(b.sigma.values[far] - 1.0).max() < 1e-6


def test_sigma_range_and_positivity(barrier128, grid128):
    v = barrier128.sigma.values
    assert v.min() >= 0.0 and v.max() <= 1.0
    outside = np.ones_like(v, dtype=bool)
    for p in barrier128.points:
        outside &= periodic_distance(grid128, p) > grid128.spacing
    assert v[outside].min() > 0.0


def test_sigma_bound_constant_stable_under_refinement():
    consts = {}
    for n in (128, 256):
        g = make_grid(n)
        consts[n] = sigma_barrier(g, [(0.5, 0.5)]).bound_constant
    assert consts[256] == pytest.approx(consts[128], rel=0.05)


def test_sigma_rejects_duplicate_points(grid64):
    with pytest.raises(ModelError):
        sigma_barrier(grid64, [(0.5, 0.5), (0.5, 0.5)])


def test_trace_field_basics(grid64):
    one = constant_field(grid64, 1.0)
    two = constant_field(grid64, 2.0)
    assert np.all(trace_field(one, one).values == 1.0)
    assert np.all(trace_field(two, one).values == 2.0)
    with pytest.raises(ModelError):
        trace_field(one, constant_field(grid64, 0.0))


def test_trace_bound_trivial(grid64):
    b = sigma_barrier(grid64, [(0.5, 0.5)])
    rep = verify_trace_bound(constant_field(grid64, 1.0), b)
    assert rep.passed
    assert rep.constants["C"] <= 1.0


def test_trace_bound_exact_exponential(grid64):
    b = sigma_barrier(grid64, [(0.5, 0.5)])
    sig = b.sigma.values
    with np.errstate(over="ignore"):
        trace = np.exp(np.minimum(1.0 / np.maximum(sig, 1e-300), 690.0))
    trace[sig == 0] = 1.0
    rep = verify_trace_bound(field_from_values(grid64, trace),
                             b, lambda_grid=(1,))
    assert rep.passed
    assert rep.constants["lambda"] == 1
    assert rep.constants["C"] <= np.e    # minimal dominating constant near 1


def test_trace_bound_negative_control():
    # e^(1/sigma^2) against lambda capped at 1 must be rejected once the
    # sample set reaches small sigma; synthetic samples pin this down
    # (passed in log form since the trace itself overflows)
    sig = np.logspace(-7, 0, 200)
    fit = fit_trace_constants(None, sig, lambda_grid=(1,),
                              log_trace_values=1.0 / sig**2)
    assert fit["C"] > 1e6
    # the full lambda grid does dominate it (lambda = 2 matches exactly)
    fit_full = fit_trace_constants(None, sig, lambda_grid=(1, 2, 4, 8),
                                   log_trace_values=1.0 / sig**2)
    assert fit_full["C"] <= 2.0 and fit_full["lambda"] in (2, 4, 8)


def test_fit_trace_requires_positive(grid64):
    with pytest.raises(ModelError):
        fit_trace_constants(np.array([1.0, -1.0]), np.array([0.5, 0.5]))


# ---------------------------------------------------------------------------
# curvature identity and exponents
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def solved_product_128():
    grid = make_grid(128)
    model = product_model()
    bg = build_background(model, grid)
    dens = assemble_density(model, bg, grid)
    p = KEProblem(bg=bg, density=dens, beta=model.beta, delta=model.delta,
                  epsilon=0.05)
    return newton_solve(p)


def test_ricci_residual_requires_mask(solved_product_128):
    with pytest.raises(ConfigurationError):
        ricci_residual(solved_product_128, np.zeros((128, 128), dtype=bool))


def test_ricci_residual_negative_control(solved_product_128):
    # a constant-density pseudo-solution violates the identity by A
    p = solved_product_128.problem
    v_flat = np.log(p.bg.area) - np.log(p.coefficient_values())
    fake = KESolution(problem=p,
                      v=ScalarField(p.bg.grid, v_flat),
                      phi=ScalarField(p.bg.grid,
                                      v_flat - p.cone_field_values()),
                      residual_sup=0.0, newton_iters=0)
    b = sigma_barrier(p.bg.grid, [p.bg.model.cone_point])
    _, sup = ricci_residual(fake, b.level_mask(0.5))
    assert sup > p.bg.area / 2


def test_ricci_residual_decreases_with_eps(solved_product_128):
    # the residual at positive eps carries the smoothing correction, which
    # shrinks like eps^2; in sup norm the measurement is swamped by spectral
    # ringing of the under-resolved smoothing layer, so the trend is read
    # off after mollifying at a fixed physical scale
    from coneflow.ke_solver import continuation_solve
    from coneflow.torus_field import mollify_values
    p = solved_product_128.problem
    mask = p.bg.q.values >= 0.5
    _, _, sols = continuation_solve(replace(p, epsilon=0.4),
                                    [0.4, 0.2, 0.1, 0.05, 0.025])
    sups = []
    for s in sols:
        f, _ = ricci_residual(s, mask)
        sups.append(np.abs(mollify_values(f.values, 0.04)[mask]).max())
    assert all(b < a for a, b in zip(sups, sups[1:]))
    assert sups[-1] < 0.02      # down at the eps^2 scale, above any floor


def synthetic_power_solution(problem, exponent, center):
    """KESolution whose density is the pure power |s - center|^exponent."""
    grid = problem.bg.grid
    d = periodic_distance(grid, center)
    d[d == 0] = grid.spacing / 2
    log_rho = exponent * np.log(d)
    # density_values = coefficient * e^v, so invert for v at eps = 0
    p0 = replace(problem, epsilon=0.0)
    v = log_rho - np.log(p0.coefficient_values())
    return KESolution(problem=p0, v=ScalarField(grid, v),
                      phi=ScalarField(grid, v - p0.cone_field_values()),
                      residual_sup=0.0, newton_iters=0)


def test_cone_angle_synthetic_power_law(solved_product_128):
    p = solved_product_128.problem
    for beta in (0.3, 0.5, 0.8):
        prob = replace(p, beta=beta)
        sol = synthetic_power_solution(prob, -2 * (1 - beta), (0.5, 0.5))
        slope = cone_angle(sol)
        assert slope == pytest.approx(2 * beta, abs=0.02 * 2 * beta)


def test_multiplicity_exponent_synthetic(solved_product_128):
    p = solved_product_128.problem
    sol = synthetic_power_solution(p, -1.0, (0.25, 0.25))
    est = multiplicity_exponent(sol, (0.25, 0.25))
    assert est == pytest.approx(-1.0, abs=0.02)


def test_cone_angle_rejects_large_eps(solved_product_128):
    with pytest.raises(ConfigurationError):
        cone_angle(replace(solved_product_128,
                           problem=solved_product_128.problem),
                   r_min=0.01)


# ---------------------------------------------------------------------------
# convergence report and determinism
# ---------------------------------------------------------------------------

class _FakeTraj:
    def __init__(self, times, gaps):
        self.times = times
        self.gaps = gaps


def test_c0_convergence_trivial_stationary():
    t = [0.05 * k for k in range(1, 41)]
    gaps = {f"sigma>={lvl}": [1e-9] * 40 for lvl in (0.2, 0.4, 0.6)}
    rep = verify_c0_convergence(_FakeTraj(t, gaps))
    assert rep.passed


def test_c0_convergence_needs_samples():
    t = [0.1, 0.2]
    gaps = {f"sigma>={lvl}": [1e-9, 1e-9] for lvl in (0.2, 0.4, 0.6)}
    with pytest.raises(ConfigurationError):
        verify_c0_convergence(_FakeTraj(t, gaps))


def test_c0_convergence_detects_slow_decay():
    t = [0.1 * k for k in range(1, 201)]
    slow = [0.05 * np.exp(-0.3 * tt) for tt in t]           # slope -0.3
    gaps = {f"sigma>={lvl}": slow for lvl in (0.2, 0.4, 0.6)}
    rep = verify_c0_convergence(_FakeTraj(t, gaps))
    assert not rep.passed


def test_c0_shrinking_mask_has_larger_constant():
    # the mask closer to the degenerate set carries a (slightly) larger
    # fitted constant: the barrier degrades toward the marked points
    from coneflow.fibration_model import (assemble_density, build_background,
                                          product_model)
    from coneflow.flow_engine import run_flow
    from coneflow.ke_solver import KEProblem, newton_solve
    g = make_grid(64)
    model = product_model()
    bg = build_background(model, g)
    dens = assemble_density(model, bg, g)
    p = KEProblem(bg=bg, density=dens, beta=model.beta, delta=model.delta,
                  epsilon=0.1)
    b = sigma_barrier(g, [model.cone_point], reference_area=bg.area)
    masks = {f"sigma>={lvl}": b.level_mask(lvl) for lvl in (0.2, 0.4, 0.6)}
    target = newton_solve(p)
    _, traj, decay = run_flow(p, T=12.0, dt=0.05, masks=masks,
                              target_phi=target.phi)
    c02 = decay["sigma>=0.2"]["intercept_constant"]
    c04 = decay["sigma>=0.4"]["intercept_constant"]
    c06 = decay["sigma>=0.6"]["intercept_constant"]
    assert c02 > c06
    assert c02 >= c04 >= c06
    rep = verify_c0_convergence(traj)
    assert rep.passed


def test_estimate_report_flag_consistency():
    with pytest.raises(ConfigurationError):
        EstimateReport(name="x", constants={}, max_violation=1.0, passed=True)


def test_report_json_deterministic(grid64):
    b = sigma_barrier(grid64, [(0.5, 0.5)])
    f = constant_field(grid64, 1.0)
    r1 = verify_trace_bound(f, b)
    r2 = verify_trace_bound(f, b)
    assert json.dumps(r1.to_json_dict(), sort_keys=True) == \
        json.dumps(r2.to_json_dict(), sort_keys=True)
