from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neckpinch.bryant import compare_tip
from neckpinch.flow import SolverConfig, evolve
from neckpinch.frames import ParabolicFrame
from neckpinch.geometry import FamilyId, InitialFamily, ProfileGrid, arclength, make_initial
from neckpinch.hermite import SpectralProjection, hermite, project, sigma_max_for
from neckpinch.regions import (
    BlendSpec,
    CapInversionError,
    DomainError,
    FitRejected,
    NoModeDetected,
    OutsideOuterRegionError,
    TimeDerivativeError,
    blowup_fit,
    composite_eval,
    fit_c,
    fit_dominant_mode,
    intermediate_ode_residual,
    intermediate_profile,
    matching_constants,
    outer_profile,
    region_residuals,
    region_windows,
    smooth_step,
    tip_equation_residual,
    to_intermediate,
    to_parabolic,
    to_tip,
    u_evolution_residual,
)

from .conftest import bryant, model, t_at

# matching constants and closed forms


def test_matching_constants_examples():
    mc = matching_constants(2, 3, 1.0)
    assert (mc.a, mc.b_k, mc.gamma_exponent) == (1.5, -0.5, Fraction(2, 3))
    mc = matching_constants(3, 4, 2.0)
    assert (mc.a, mc.b_k, mc.gamma_exponent) == (2.0, -1 / 32, Fraction(3, 4))
    with pytest.raises(ValueError, match="k"):
        matching_constants(2, 2, 1.0)


def test_intermediate_profile_examples():
    assert intermediate_profile(0.0, 1.3, 3) == 1.0
    assert intermediate_profile(1.3, 1.3, 3) == 0.0
    assert intermediate_profile(1.0, 2.0, 3) == pytest.approx(math.sqrt(7 / 8), abs=1e-12)
    with pytest.raises(DomainError):
        intermediate_profile(2.5, 2.0, 3)
    with pytest.raises(DomainError):
        intermediate_profile(-2.5, 2.0, 4)


@pytest.mark.parametrize("k", [3, 4, 5])
def test_intermediate_profile_solves_its_ode(k):
    rho = np.linspace(0.0, 0.999, 1000)
    assert np.max(np.abs(intermediate_ode_residual(rho, 1.0, k))) < 1e-12


def test_outer_profile_examples():
    mc = matching_constants(2, 3, 1.0)
    t = 0.75
    assert outer_profile(0.0, t, mc, 1.0) == pytest.approx(math.sqrt(2 * 0.25), rel=1e-15)
    with pytest.raises(OutsideOuterRegionError):
        outer_profile(0.7, t, mc, 1.0)


# frames


def cylinder_grid(theta: float, nodes: int = 801, n: int = 2, T: float = 1.0) -> ProfileGrid:
    """Long cylinder of radius sqrt(2(n-1) theta) closed by round caps of that radius."""
    r = math.sqrt(2 * (n - 1) * theta)
    x = np.linspace(-1, 1, nodes)
    half = 5.0
    s = x * (half + r * math.pi / 2)
    psi = np.where(np.abs(s) <= half, r, r * np.cos(np.clip(np.abs(s) - half, 0, None) / r))
    psi[0] = psi[-1] = 0.0
    return ProfileGrid(n, x, np.full(nodes, half + r * math.pi / 2), np.abs(psi), T - theta)


def test_cylinder_frame_is_constant_and_tau_is_log():
    g = cylinder_grid(math.exp(-5))
    f = to_parabolic(g, 1.0, 0.0, sigma_max=12.0, points=401)
    assert f.tau == pytest.approx(5.0, abs=1e-12)
    assert np.max(np.abs(f.U - 1)) < 1e-12 and not f.early
    assert to_parabolic(cylinder_grid(0.5), 1.0, 0.0, sigma_max=4.0).early


def test_cylinder_frames_have_zero_residual():
    frames = [to_parabolic(cylinder_grid(math.exp(-tau)), 1.0, 0.0, sigma_max=6.0, points=601)
              for tau in (3.0, 3.25, 3.5)]
    for r in u_evolution_residual(frames):
        assert r.sup() < 1e-10
    with pytest.raises(TimeDerivativeError):
        u_evolution_residual([frames[0], to_parabolic(cylinder_grid(math.exp(-4)), 1.0, 0.0, sigma_max=6.0)])


@pytest.fixture(scope="module")
def dumbbell_run():
    g = make_initial(InitialFamily(FamilyId.DUMBBELL, 0.0, {"waist": 0.2}), 400, 2)
    return evolve(g, SolverConfig(snapshot_factor=1.2, K_stop=1e5))


def test_simulated_neck_satisfies_the_rescaled_equation(dumbbell_run):
    T = dumbbell_run.report.T_est
    frames = [to_parabolic(s, T, s.psi_min_s, sigma_max=4.0, points=801)
              for s in dumbbell_run.snapshots if s.t < T and s.psi_min_s is not None]
    frames = [f for f in frames if 4.0 <= f.tau <= 6.0]
    assert frames[0].tau < 4.5 and frames[-1].tau > 5.5
    res = u_evolution_residual(frames)
    assert max(r.sup(2.0) for r in res) < 0.05


# mode fit


def synthetic_projections(terms, taus, k_max=6):
    s = np.linspace(-sigma_max_for(k_max), sigma_max_for(k_max), 1201)
    out = []
    for tau in taus:
        V = sum(b * math.exp(lam * tau) * hermite(k)(s) for k, b, lam in terms)
        out.append(project(s, V, k_max=k_max, tau=tau))
    return out


def test_dominant_mode_from_synthetic_data():
    taus = np.linspace(3, 6, 7)
    projs = synthetic_projections([(3, -0.5, -0.5), (4, 1e-4, -1.0)], taus)
    rep = fit_dominant_mode(projs)
    assert rep.extra["k"] == 3
    assert rep.fitted_value == pytest.approx(-0.5, abs=1e-3)
    assert not rep.extra["b0_nonzero"]


def test_b0_is_flagged():
    taus = np.linspace(3, 6, 7)
    rep = fit_dominant_mode(synthetic_projections([(3, -0.5, -0.5), (0, 0.05, 1.0)], taus))
    assert rep.extra["b0_nonzero"] and "T_est" in rep.extra["advice"]


def test_no_mode_below_the_noise_floor():
    projs = [SpectralProjection(tau, (0.0,) * 7, 10, 15.25, 0.0, (1.0,) * 7, 0.0, 0.0)
             for tau in (1.0, 2.0, 3.0, 4.0)]
    with pytest.raises(NoModeDetected):
        fit_dominant_mode(projs)


def composite_projections(n, k, c, k_max=6):
    m = model(n, k, c)
    smax = sigma_max_for(k_max)
    tau0 = m.tau_for_sigma(smax + 1)
    projs = []
    for tau in np.linspace(tau0, tau0 + 3, 7):
        g, neck = m.snapshot(t_at(tau))
        f = to_parabolic(g, 1.0, neck, sigma_max=smax + 0.5, points=4001)
        projs.append(project(f.sigma, f.V, k_max=k_max, tau=f.tau))
    return projs


def test_composite_recovers_b4():
    rep = fit_dominant_mode(composite_projections(2, 4, 2.0))
    assert rep.extra["k"] == 4
    assert rep.fitted_value == pytest.approx(-1 / 32, rel=0.02)


# fit_c


def test_fit_c_on_exact_samples():
    rho = np.linspace(-0.5, 1.5, 801)
    W = np.where(rho < 1.5, np.sqrt(np.clip(1 - (np.clip(rho, 0, None) / 1.5) ** 3, 0, None)), 0.0)
    frame = to_intermediate(ParabolicFrame(2, 0.0, 1.0, rho, W), 3)
    # tau = 0 makes rho = sigma
    assert fit_c(frame).fitted_value == pytest.approx(1.5, abs=1e-10)


def test_fit_c_under_noise():
    rng = np.random.default_rng(2024)
    rho = np.linspace(0.0, 1.5, 601)
    base = np.sqrt(np.clip(1 - (rho / 1.5) ** 3, 0, None))
    worst = 0.0
    for _ in range(100):
        W = base * (1 + 0.01 * rng.standard_normal(rho.size))
        frame = to_intermediate(ParabolicFrame(2, 0.0, 1.0, rho, W), 3)
        worst = max(worst, abs(fit_c(frame).fitted_value / 1.5 - 1))
    assert worst < 0.02


def test_fit_c_rejects_non_monotone_profiles():
    rho = np.linspace(0.0, 1.5, 601)
    W = 0.55 + 0.4 * np.cos(6 * rho)
    with pytest.raises(FitRejected):
        fit_c(to_intermediate(ParabolicFrame(2, 0.0, 1.0, rho, W), 3))


@pytest.mark.parametrize("tau", [6.0, 7.0, 8.0])
def test_fit_c_on_composite_frames(tau):
    m = model(2, 3, 1.0)
    g, neck = m.snapshot(t_at(tau))
    reach = (arclength(g).s_right - neck) / math.exp(-tau / 2)
    f = to_parabolic(g, 1.0, neck, sigma_max=reach, points=4001)
    assert fit_c(to_intermediate(f, 3)).fitted_value == pytest.approx(1.0, rel=0.01)


# tip


def test_tip_frame_round_trip_from_soliton_form():
    prof = bryant(2)
    m = model(2, 3, 1.0)
    t = t_at(8.0)
    g, _ = m.snapshot(t)
    tip = to_tip(g, 1.0, 3, gamma_max=2.0)
    assert tip.Z[0] == 1.0
    assert tip.Gamma == pytest.approx(m.Gamma(t), rel=1e-14)
    rep = compare_tip(tip, prof, m.a)
    assert rep.fitted_value < 0.05


def test_tip_needs_a_monotone_cap():
    x = np.linspace(-1, 1, 101)
    psi = np.full_like(x, 0.5)
    # a dip two cells from the pole breaks monotonicity almost immediately
    psi[-4], psi[-3], psi[-2] = 1e-4, 0.5, 1e-3
    psi[0] = psi[-1] = 0.0
    g = ProfileGrid(2, x, np.ones_like(x), psi, 0.5)
    with pytest.raises(CapInversionError):
        to_tip(g, 1.0, 3)


# blow-up rate


def test_blowup_fit_exact_power():
    t = 1 - np.geomspace(1e-1, 1e-5, 12)
    rep = blowup_fit(t, (1 - t) ** (-4 / 3), 1.0, k=3)
    assert rep.fitted_value == pytest.approx(4 / 3, abs=1e-10)
    assert rep.extra["q_predicted"] == pytest.approx(4 / 3)
    assert blowup_fit(t, (1 - t) ** -1.5, 1.0, k=4).extra["q_predicted"] == 1.5


@pytest.mark.parametrize("k", [3, 4])
def test_composite_pole_curvature_rate(k):
    m = model(2, k, 1.0)
    t = np.array([t_at(tau) for tau in np.linspace(4, 12, 17)])
    K = np.array([m.pole_curvature(v) for v in t])
    rep = blowup_fit(t, K, 1.0, k=k)
    assert rep.fitted_value == pytest.approx(2 - 2 / k, rel=0.01)
    delta = 1e-4 * (1 - t[-1])
    for T in (1 - delta, 1 + delta):
        assert blowup_fit(t, K, T).fitted_value == pytest.approx(rep.fitted_value, rel=0.01)


# composite model


def test_blend_is_C1():
    m = model(2, 3, 1.0)
    t = t_at(8.0)
    for lo, hi in m.zones(t).values():
        for s0 in (lo, hi, 0.5 * (lo + hi)):
            h = 1e-7 * s0
            slope_l = (composite_eval(m, s0, t) - composite_eval(m, s0 - h, t)) / h
            slope_r = (composite_eval(m, s0 + h, t) - composite_eval(m, s0, t)) / h
            assert abs(slope_l - slope_r) < 1e-6 * max(1.0, abs(slope_l))


def test_even_k_is_mirror_symmetric_and_odd_k_is_not():
    t = t_at(6.0)
    even = model(2, 4, 1.0)
    lo, hi = even.domain(t)
    s = np.linspace(0, 0.999 * hi, 200)
    assert np.allclose(composite_eval(even, s, t), composite_eval(even, -s, t), rtol=0, atol=1e-15)
    odd = model(2, 3, 1.0)
    # beyond sigma = sqrt(3) the cubic term of H_3 wins and the pole side drops
    s = np.linspace(0.35, 0.8, 5) * odd.domain(t)[1]
    assert np.all(composite_eval(odd, -s, t) > composite_eval(odd, s, t))


def test_evaluation_outside_the_domain():
    m = model(2, 3, 1.0)
    t = t_at(6.0)
    with pytest.raises(DomainError):
        composite_eval(m, m.domain(t)[1] * 1.01, t)
    with pytest.raises(DomainError):
        m.theta(1.5)


def test_blend_validation():
    with pytest.raises(ValueError):
        BlendSpec(rho_inner=0.8, rho_tip=0.9)
    with pytest.raises(ValueError):
        BlendSpec(rho_tip=0.95)


@pytest.mark.parametrize("tau", [4.0, 6.0, 8.0])
def test_region_windows_are_ordered_and_nonempty(tau):
    m = model(2, 3, 1.0)
    w = region_windows(m, t_at(tau))
    for lo, hi in w.values():
        assert lo < hi
    assert w["parabolic"][1] <= w["intermediate"][0] < w["intermediate"][1] <= w["tip"][0]


def test_parabolic_residual_halves_per_unit_tau():
    m = model(2, 3, 1.0)
    r = [region_residuals(m, t_at(tau), 120)["parabolic"] for tau in (6.0, 7.0, 8.0)]
    assert r[1] <= 0.5 * r[0] and r[2] <= 0.5 * r[1]


def test_gauge_free_tip_residual_decays_at_the_matching_rate():
    m = model(2, 3, 1.0)
    vals = []
    for tau in (4.0, 6.0, 8.0):
        t = t_at(tau)
        s = m.s_pole(t) - np.geomspace(1e-3, 0.5, 60) * m.a / m.Gamma(t)
        vals.append(tip_equation_residual(m, t, s).relative())
    rate = [math.log(vals[i] / vals[i + 1]) / 2 for i in range(2)]
    # expected exp(-(1 - 2/k) tau): 1/3 per unit tau for k = 3
    assert all(0.1 < r < 0.6 for r in rate)


def test_consistent_cap_scale_lowers_the_tip_residual():
    t = t_at(8.0)
    # cap_scale 3 is k(n-1)/c, the scale consistent with the intermediate profile
    default = region_residuals(model(2, 3, 1.0), t, 120)["tip"]
    consistent = region_residuals(model(2, 3, 1.0, cap_scale=3.0), t, 120)["tip"]
    assert consistent < default


# properties


@settings(max_examples=50, deadline=None)
@given(u=st.floats(-1, 2))
def test_smooth_step_is_a_partition(u):
    a, b = float(smooth_step(u)), float(smooth_step(1 - u))
    assert 0.0 <= a <= 1.0 and a + b == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.2, 5.0), k=st.integers(3, 9))
def test_intermediate_ode_for_any_scale(c, k):
    rho = np.linspace(0, 0.99 * c, 200)
    assert np.max(np.abs(intermediate_ode_residual(rho, c, k))) < 1e-10


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 8), k=st.integers(3, 12), c=st.floats(0.1, 10.0))
def test_matching_constants_relations(n, k, c):
    mc = matching_constants(n, k, c)
    assert mc.a * 2 * c == pytest.approx(k * (n - 1))
    assert mc.b_k * -2 * c**k == pytest.approx(1.0)
    assert mc.gamma_exponent == 1 - Fraction(1, k)
    assert mc.Gamma(0.01) == pytest.approx(0.01 ** -(1 - 1 / k))
