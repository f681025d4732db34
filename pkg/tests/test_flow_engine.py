import numpy as np
import pytest
from dataclasses import replace

from coneflow.errors import (ConfigurationError, PositivityError,
                             StabilityGuardError)
from coneflow.fibration_model import (assemble_density, build_background,
                                      product_model)
from coneflow.flow_engine import (FlowOps, FlowState, ProductFlow4D,
                                  fit_decay_slope, flow_step, reduced_rhs,
                                  run_flow)
from coneflow.ke_solver import KEProblem, newton_solve
from coneflow.torus_field import ScalarField, field_from_values, make_grid


def make_problem(n=64, eps=0.1, beta=0.5, delta=0.1):
    grid = make_grid(n)
    model = product_model(beta=beta, delta=delta)
    bg = build_background(model, grid)
    dens = assemble_density(model, bg, grid)
    return KEProblem(bg=bg, density=dens, beta=beta, delta=delta, epsilon=eps)


@pytest.fixture(scope="module")
def problem64():
    return make_problem(64)


@pytest.fixture(scope="module")
def solved64(problem64):
    return newton_solve(problem64)


def state_of(problem, phi_values, t=0.0, dt=0.05):
    return FlowState(phi=ScalarField(problem.bg.grid, phi_values), t=t,
                     epsilon=problem.epsilon, dt=dt)


def test_rhs_vanishes_at_solution(problem64, solved64):
    st = state_of(problem64, solved64.phi.values)
    rhs = reduced_rhs(st, problem64)
    assert np.abs(rhs.values).max() <= 1e-8


def test_rhs_shift_by_constant(problem64):
    n = problem64.bg.grid.n
    rng = np.random.default_rng(2)
    x, y = problem64.bg.grid.mesh()
    phi = 0.02 * np.cos(2 * np.pi * x)
    r0 = reduced_rhs(state_of(problem64, phi), problem64)
    c = 0.37
    r1 = reduced_rhs(state_of(problem64, phi + c), problem64)
    assert np.abs((r0.values - c) - r1.values).max() < 1e-12


def test_rhs_identity_case_formula(problem64):
    # with F = (q + eps^2)^(1-beta) the rhs at phi = 0 has a closed form
    from coneflow.fibration_model import DensityData
    from coneflow.torus_field import field_from_values, lap_values
    bg = problem64.bg
    eps, beta, delta = problem64.epsilon, problem64.beta, problem64.delta
    log_f = (1 - beta) * np.log(bg.q.values + eps * eps)
    p = replace(problem64,
                density=DensityData(field_from_values(bg.grid, log_f),
                                    (), 0.0))
    ops = FlowOps(p)
    rhs = ops.rhs_values(np.zeros((bg.grid.n,) * 2))
    cone = p.cone_field_values()      # already delta * chi
    expected = np.log(1.0 + 0.5 * lap_values(cone) / bg.area) - cone
    assert np.abs(rhs - expected).max() < 1e-12


def test_step_fixed_point(problem64, solved64):
    st = state_of(problem64, solved64.phi.values, dt=0.1)
    out = flow_step(st, problem64)
    assert np.abs(out.phi.values - st.phi.values).max() <= 1e-8
    assert out.t == pytest.approx(0.1)


def test_step_rejects_unknown_scheme(problem64):
    st = state_of(problem64, np.zeros((64, 64)))
    with pytest.raises(ConfigurationError):
        flow_step(st, problem64, scheme="leapfrog")


def test_backward_euler_vs_rk4_cross_check():
    # N = 16 so the rk4 guard admits dt = 1e-4
    p = make_problem(16, eps=0.4)
    x, y = p.bg.grid.mesh()
    phi = 0.02 * np.cos(2 * np.pi * x)
    dt = 1e-4
    st = state_of(p, phi, dt=dt)
    out_be = flow_step(st, p, "backward-euler-newton")
    out_rk = flow_step(st, p, "rk4-explicit")
    assert np.abs(out_be.phi.values - out_rk.phi.values).max() <= 1e-6


def test_backward_euler_first_order():
    # Richardson: halving dt halves the one-step defect against rk4
    p = make_problem(16, eps=0.4)
    x, y = p.bg.grid.mesh()
    phi = 0.02 * np.cos(2 * np.pi * x)
    errs = []
    for dt in (4e-4, 2e-4):
        be = flow_step(state_of(p, phi, dt=dt), p, "backward-euler-newton")
        rk = flow_step(state_of(p, phi, dt=dt), p, "rk4-explicit")
        errs.append(np.abs(be.phi.values - rk.phi.values).max())
    ratio = errs[0] / errs[1]
    assert 3.0 < ratio < 5.0    # local error O(dt^2): ratio ~ 4


def test_backward_euler_global_first_order():
    # reaching a fixed time with halved dt halves the defect against rk4
    p = make_problem(16, eps=0.4)
    x, y = p.bg.grid.mesh()
    phi0 = 0.02 * np.cos(2 * np.pi * x)
    t_final = 8e-3
    errs = []
    for dt in (2e-4, 1e-4):
        a = state_of(p, phi0, dt=dt)
        b = state_of(p, phi0, dt=1e-4)
        for _ in range(int(round(t_final / dt))):
            a = flow_step(a, p, "backward-euler-newton")
        for _ in range(int(round(t_final / 1e-4))):
            b = flow_step(b, p, "rk4-explicit")
        errs.append(np.abs(a.phi.values - b.phi.values).max())
    ratio = errs[0] / errs[1]
    assert 1.6 < ratio < 2.4


def test_rk4_stability_guard(problem64):
    st = state_of(problem64, np.zeros((64, 64)), dt=0.01)
    with pytest.raises(StabilityGuardError, match="stability guard"):
        flow_step(st, problem64, "rk4-explicit")


def test_positivity_error_surfaces(problem64):
    x, y = problem64.bg.grid.mesh()
    bad = 0.2 * np.cos(2 * np.pi * 4 * x)   # curvature kills the density
    st = state_of(problem64, bad)
    with pytest.raises(PositivityError):
        reduced_rhs(st, problem64)


def test_run_flow_converges_and_reports(problem64, solved64):
    masks = {"all": np.ones((64, 64), dtype=bool),
             "qr>=0.1": problem64.bg.q.values >= 0.1}
    state, traj, decay = run_flow(problem64, T=6.0, dt=0.05, masks=masks,
                                  target_phi=solved64.phi,
                                  monitor_mask=masks["qr>=0.1"])
    gaps = traj.gaps["qr>=0.1"]
    assert gaps[-1] < 5e-3
    assert all(b < a for a, b in zip(gaps[40:], gaps[41:]))  # monotone tail
    fit = decay["qr>=0.1"]
    assert fit is not None and -1.15 < fit["slope"] < -0.85
    assert len(traj.times) == 120
    assert min(traj.min_density) > 0
    for key in ("sup_psi", "sup_dt_psi", "trace_ref"):
        assert np.isfinite(traj.monitors[key]).all()


def test_run_flow_rejects_long_horizon(problem64):
    with pytest.raises(ConfigurationError):
        run_flow(problem64, T=60.0, dt=0.05)


def test_dt_phi_decay_rate(problem64, solved64):
    masks = {"qr>=0.1": problem64.bg.q.values >= 0.1}
    _, traj, _ = run_flow(problem64, T=8.0, dt=0.05, masks=masks,
                          target_phi=solved64.phi,
                          monitor_mask=masks["qr>=0.1"])
    t = np.array(traj.times)
    d = np.array(traj.monitors["sup_dt_psi"])
    sel = (t >= 2.0) & (d > 1e-12)
    slope = np.polyfit(t[sel], np.log(d[sel]), 1)[0]
    assert slope <= -0.8


def test_shift_covariance(problem64, solved64):
    # from a near-stationary state, a constant shift decays like the
    # backward-Euler damping factor per unit time
    masks = {"all": np.ones((64, 64), dtype=bool)}
    state, traj, _ = run_flow(problem64, T=10.0, dt=0.05, masks=masks,
                              target_phi=solved64.phi)
    assert traj.gaps["all"][-1] <= 1e-4
    c = 1e-5
    phi0 = state.phi.values
    ops = FlowOps(problem64)
    a = state
    b = FlowState(phi=ScalarField(problem64.bg.grid, phi0 + c), t=state.t,
                  epsilon=problem64.epsilon, dt=0.05)
    for _ in range(20):   # one time unit
        a = flow_step(a, problem64, ops=ops)
        b = flow_step(b, problem64, ops=ops)
    drift = (b.phi.values - a.phi.values).mean()
    assert drift == pytest.approx(c * np.exp(-1.0), rel=0.1)


def test_stationarity_equivalence_long_run(problem64, solved64):
    _, traj, _ = run_flow(problem64, T=30.0, dt=0.1,
                          masks={"all": np.ones((64, 64), dtype=bool)},
                          target_phi=solved64.phi)
    assert traj.gaps["all"][-1] <= 1e-7


# ---------------------------------------------------------------------------
# 4D product oracle
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def oracle():
    p = make_problem(32, eps=0.2)
    return ProductFlow4D(p, nf=16, nb=32, fiber_area=2.0)


def test_oracle_requires_product_model(grid64):
    from coneflow.fibration_model import FibrationModel, SingularFiber
    from coneflow.fibration_model import assemble_density, build_background
    model = FibrationModel(beta=0.5, delta=0.1, cone_point=(0.5, 0.5),
                           fibers=(SingularFiber((0.25, 0.25), 2),))
    bg = build_background(model, grid64)
    dens = assemble_density(model, bg, grid64)
    p = KEProblem(bg=bg, density=dens, beta=0.5, delta=0.1, epsilon=0.2)
    with pytest.raises(ConfigurationError):
        ProductFlow4D(p)


def test_oracle_one_step_reduction_identity(oracle):
    # fiber-constant data: the 4D rhs equals the reduced rhs exactly
    phi4 = oracle.initial_state()
    r4 = oracle.rhs(phi4, 0.0)
    r_red = oracle.base_ops.rhs_values(np.zeros((32, 32)))
    assert np.abs(r4 - r_red[None, None]).max() < 1e-12


def test_oracle_preserves_fiber_constancy(oracle):
    phi4 = oracle.initial_state()
    dt = 1e-4
    phi4 = phi4 + dt * oracle.rhs(phi4, 0.0)
    assert oracle.fiber_gap(phi4) <= 1e-10


def test_oracle_stability_guard(oracle):
    with pytest.raises(StabilityGuardError):
        oracle.run(T=2.0, dt=5e-3)


def test_oracle_positivity_error(oracle):
    xw = np.arange(16) / 16.0
    bad = oracle.initial_state() + 0.4 * np.cos(2 * np.pi * 4 * xw)[
        :, None, None, None]
    with pytest.raises(PositivityError):
        oracle.rhs(bad, 0.0)


def test_oracle_short_reduction_match(oracle):
    # brief lockstep window; the acceptance suite runs the full [0, 2]
    _, samples = oracle.run(T=0.05, dt=1e-4, reduced_reference=True)
    assert samples["reduced_diff"][-1] <= 1e-10


def test_fit_decay_slope_window():
    t = np.linspace(0, 10, 201)
    g = 0.5 * np.exp(-t)
    fit = fit_decay_slope(t, g)
    assert fit["slope"] == pytest.approx(-1.0, abs=1e-9)
    assert fit_decay_slope(t, np.full_like(t, 1e-12)) is None
