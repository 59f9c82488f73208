import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from rdtrigger import harness
from rdtrigger.kernels import PlantParams, compute_kernels
from rdtrigger.pde_core import (
    CoupledSystem,
    SpatialGrid,
    apply_control,
    boundary_terms,
    holding_error,
    initial_state,
    l2_norm,
    step_coupled,
    step_m,
)
from rdtrigger.trigger_params import build_trigger_params
from rdtrigger.triggering import (
    SchemeError,
    cetc_should_fire,
    default_h,
    gamma_p,
    petc_should_fire,
    run_scheme,
    stc_constants,
    stc_next_wait,
)

from conftest import REF, kernels, prepared


@pytest.fixture(scope="module")
def ref_tp(ref_ks):
    return build_trigger_params(ref_ks, 1.0, 1.0, 0.9, 25, 1e-4, B=7.7304e4)


@pytest.fixture(scope="module")
def stc_setup():
    prep = prepared("paper-stc")
    tp, _ = harness.trigger_params_for(prep, "stc")
    return prep, tp, harness.stc_constants_for(prep)


# -- trigger rules -------------------------------------------------------------


def test_cetc_rule(ref_tp):
    assert not cetc_should_fire(0.0, 1e-4, ref_tp)
    assert not cetc_should_fire(math.sqrt(1e-4), 1e-4, ref_tp)  # strict inequality
    assert cetc_should_fire(0.011, 1e-4, ref_tp)


def test_petc_rule_examples(ref_tp):
    tp = replace(ref_tp, a=2.0, gamma=1.0, rho=966.3)
    # high-precision evaluation of (a+g rho) e^{ah} d^2 - g rho d^2 - g a m
    assert gamma_p(0.1, 0.004, tp, 0.009) == pytest.approx(0.18787210038237299, rel=1e-12)
    assert petc_should_fire(0.1, 0.004, tp, 0.009)
    assert gamma_p(0.0, 0.004, tp, 0.009) == pytest.approx(-2 * 0.004)
    assert not petc_should_fire(0.0, 0.004, tp, 0.009)


def test_default_h(ref_tp):
    assert default_h(ref_tp.tau, 1e-3) == pytest.approx(0.009)
    with pytest.raises(SchemeError):
        default_h(1e-4, 1e-3)


# -- self-trigger constants ----------------------------------------------------


def test_stc_constants_reference(stc_setup):
    prep, tp, sc = stc_setup
    assert sc.M1 == pytest.approx(15.3, rel=1e-12)
    assert sc.varrho > REF.lam
    assert sc.varrho == pytest.approx(REF.lam + prep.kernels.norms["p1_norm"] ** 2 / 2)
    assert sc.sigma_star == pytest.approx(0.001 * math.pi**2 / 4)
    assert sc.Psi0_star == pytest.approx(sc.Psi0 * math.sqrt(1e-6 * 25 / 0.01 + 0.5))
    assert sc.Psi1 == pytest.approx(0.1992, abs=1e-3)
    assert sc.Psi2 == pytest.approx(0.6901, abs=1e-3)


def test_stc_constants_reject_bad_sigma_star(ref_ks):
    g = SpatialGrid(200)
    uh = g.x**2 * (g.x - 1) ** 2
    with pytest.raises(SchemeError):
        stc_constants(ref_ks, REF, 0.2, 0.7, uh, sigma_star=1.0)
    with pytest.raises(SchemeError):
        stc_constants(ref_ks, PlantParams(0.001, 0.01, 6.0, theta1=1, theta2=0), 0.2, 0.7, uh)


def test_stc_zero_kernel_omegas():
    p = PlantParams(1.0, 0.0, 1.0)
    ks = compute_kernels(p, 16)
    assert ks.norms["Omega1"] == 1.0 and ks.norms["Omega2"] == 0.0


def test_stc_wait_matches_crossing_time(stc_setup):
    prep, tp, sc = stc_setup
    nu = l2_norm(prep.uhat0, prep.grid)
    G, H = stc_next_wait(nu, tp.m0, 0.0, tp, sc)
    assert H == pytest.approx(677705.880430643, rel=1e-9)
    c = 2 * sc.varrho + tp.eta

    def gap(s):  # d^2 envelope minus the gamma m envelope
        lower_m = tp.m0 * math.exp(-tp.eta * s) - tp.rho * H / c * math.exp(-tp.eta * s) * math.expm1(c * s)
        return H * math.exp(2 * sc.varrho * s) - tp.gamma * lower_m

    t_cross = brentq(gap, 0.0, 10.0, xtol=1e-15)
    assert G > tp.tau
    assert G == pytest.approx(t_cross, rel=1e-10)
    assert G == pytest.approx(0.15142059681966, rel=1e-9)


def test_stc_wait_floor_and_cap(stc_setup):
    _, tp, sc = stc_setup
    # gamma m <= H: log argument <= 1, the dwell floor takes over
    G, _ = stc_next_wait(1.0, 1e-30, 0.0, tp, sc)
    assert G == tp.tau
    # m underflow is clamped instead of taking log(0)
    G, _ = stc_next_wait(1.0, 0.0, 0.0, tp, sc)
    assert G == tp.tau
    zero_H = replace(sc, Psi0_star=0.0)
    G, H = stc_next_wait(0.0, 1e-4, 0.0, tp, zero_H)
    assert H == 0.0 and G == sc.t_max


@settings(max_examples=40, deadline=None)
@given(nu=st.floats(0.0, 10.0), m=st.floats(0.0, 1e3), t=st.floats(0.0, 1e3))
def test_stc_wait_never_below_tau(nu, m, t, stc_setup):
    _, tp, sc = stc_setup
    G, _ = stc_next_wait(nu, m, t, tp, sc)
    assert G >= tp.tau


# -- closed loop -----------------------------------------------------------------


def test_fast_loop_matches_reference_steps():
    """The flattened loop in run_scheme agrees with the public step functions."""
    prep = prepared("fast-ci")
    tp, _ = harness.trigger_params_for(prep, "cetc")
    dt, steps = 2e-5, 3000
    res, log = run_scheme("cetc", prep.system, tp, prep.u0, prep.uhat0, dt, steps * dt)
    s = initial_state(prep.system, prep.u0, prep.uhat0, tp.m0)
    events = [0]
    for n in range(1, steps + 1):
        s = step_coupled(s, prep.system, dt)
        d = holding_error(s, prep.system)
        m = step_m(s.m, tp, dt, d, boundary_terms(s, prep.system))
        s = replace(s, t=n * dt, m=m)
        if cetc_should_fire(d, m, tp):
            s = apply_control(s, prep.system)
            events.append(n)
    assert events == log.steps
    assert res.m[-1] == pytest.approx(s.m, rel=1e-8)
    assert res.norm_uhat[-1] == pytest.approx(l2_norm(s.uhat, prep.grid), rel=1e-10)


@pytest.mark.parametrize("scheme", ["cetc", "petc", "stc"])
def test_zero_initial_data(scheme):
    sc = harness.scenario_from_dict({**harness.BUILTINS["fast-ci"].to_dict(),
                                     "initial_data": {"preset": "zero"},
                                     "grid": {"nx": 32, "dt": 2e-5, "horizon": 0.02, "kernel_n": 128}})
    run = harness.run_scenario(sc, scheme)
    r = run.result
    assert np.all(r.norm_u == 0) and np.all(r.U_held == 0) and np.all(r.d == 0)
    if scheme == "stc":
        # nothing to bound: the next wait is the cap
        assert run.log.H == [0.0] and run.log.waits == [harness.BUILTINS["fast-ci"].scheme.t_max]
        assert len(run.log) == 1
    else:
        assert len(run.log) == 1


def test_petc_rejects_long_period(ref_tp):
    prep = prepared("paper")
    with pytest.raises(SchemeError):
        run_scheme("petc", prep.system, ref_tp, prep.u0, prep.uhat0, 1e-3, 0.1, h=0.010)
    with pytest.raises(SchemeError):
        run_scheme("petc", prep.system, ref_tp, prep.u0, prep.uhat0, 1e-3, 0.1, h=0.0085)


def test_unknown_scheme_and_missing_constants(ref_tp):
    prep = prepared("paper")
    with pytest.raises(SchemeError):
        run_scheme("etc", prep.system, ref_tp, prep.u0, prep.uhat0, 1e-3, 0.1)
    with pytest.raises(SchemeError):
        run_scheme("stc", prep.system, ref_tp, prep.u0, prep.uhat0, 1e-3, 0.1)


def test_petc_events_on_grid_short_reference_run():
    prep = prepared("paper")
    tp, _ = harness.trigger_params_for(prep, "petc")
    res, log = run_scheme("petc", prep.system, tp, prep.u0, prep.uhat0, 1e-3, 20.0, h=0.009)
    assert all(k % 9 == 0 for k in log.steps)
    te = np.asarray(log.times)
    assert np.allclose(te / 0.009, np.round(te / 0.009), atol=1e-9)


def test_event_log_monotone(fast_runs):
    for run in fast_runs.values():
        assert np.all(np.diff(run.log.times) > 0)
        assert len(run.log.inputs) == len(run.log.times)
