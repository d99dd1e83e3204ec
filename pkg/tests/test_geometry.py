from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from neckpinch.geometry import (
    FamilyId,
    InitialFamily,
    InvalidFamilyError,
    InvalidMetricError,
    ProfileGrid,
    SingularProfileError,
    arclength,
    check_assumptions,
    curvatures,
    detect_extrema,
    dump_profile,
    make_initial,
    parse_profile,
    round_sphere,
    scalar_curvature_direct,
)


def unit_sphere(nodes: int = 401, n: int = 2) -> ProfileGrid:
    x = np.linspace(-1, 1, nodes)
    psi = np.cos(np.pi * x / 2)
    psi[0] = psi[-1] = 0.0
    return ProfileGrid(n, x, np.full(nodes, np.pi / 2), psi)


def dumbbell(lam: float = 0.0, nodes: int = 400, n: int = 2, **shape) -> ProfileGrid:
    return make_initial(InitialFamily(FamilyId.DUMBBELL, lam, shape), nodes, n)


# arclength


def test_unit_sphere_arclength_is_pi():
    assert arclength(unit_sphere()).s_total == pytest.approx(math.pi, rel=1e-14)


def test_constant_phi_gives_identity_arclength():
    x = np.linspace(-1, 1, 101)
    psi = 1 - x**2
    fr = arclength(ProfileGrid(2, x, np.ones_like(x), psi))
    assert np.allclose(fr.s, x, atol=1e-15)


def test_arclength_matches_adaptive_quadrature_of_piecewise_linear_phi():
    rng = np.random.default_rng(7)
    x = np.linspace(-1, 1, 1000)
    phi = 0.5 + rng.random(x.size)
    psi = np.cos(np.pi * x / 2)
    psi[0] = psi[-1] = 0.0
    fr = arclength(ProfileGrid(2, x, phi, psi))
    f = lambda v: np.interp(v, x, phi)  # noqa: E731
    total = sum(quad(f, a, b, epsabs=0, epsrel=1e-13)[0] for a, b in zip(x[:-1], x[1:]))
    assert fr.s_total == pytest.approx(total, rel=1e-10)
    to_zero = sum(quad(f, a, min(b, 0.0), epsrel=1e-13)[0] for a, b in zip(x[:-1], x[1:]) if a < 0)
    assert -fr.s[0] == pytest.approx(to_zero, rel=1e-10)


def test_non_positive_phi_is_rejected():
    x = np.linspace(-1, 1, 11)
    phi = np.ones_like(x)
    phi[4] = 0.0
    with pytest.raises(InvalidMetricError):
        ProfileGrid(2, x, phi, np.r_[0.0, np.ones(9), 0.0])


# curvatures


def test_unit_sphere_curvatures_at_equator():
    cf = curvatures(unit_sphere(801))
    mid = 400
    assert cf.K[mid] == pytest.approx(1.0, rel=1e-5)
    assert cf.L[mid] == pytest.approx(1.0, rel=1e-12)
    assert cf.R[mid] == pytest.approx(6.0, rel=1e-5)


def test_cylinder_segment_curvatures():
    x = np.linspace(-1, 1, 201)
    r0 = 0.3
    # cylinder in the middle, caps near the poles: check only the flat part
    psi = r0 * np.minimum(1.0, (1 - np.abs(x)) / 0.2)
    psi = np.where(np.abs(x) < 0.8, r0, r0 * np.sin(np.pi / 2 * (1 - np.abs(x)) / 0.2))
    g = ProfileGrid(2, x, np.full(x.size, 1.0), psi)
    cf = curvatures(g)
    flat = np.abs(x) < 0.7
    assert np.max(np.abs(cf.K[flat])) < 1e-12
    assert np.allclose(cf.L[flat], 1 / r0**2, rtol=1e-12)


def test_interior_zero_raises_singular_profile():
    g = unit_sphere(101)
    psi = g.psi.copy()
    psi[50] = 0.0
    with pytest.raises(SingularProfileError):
        curvatures(ProfileGrid(2, g.x, g.phi, psi))


def test_dumbbell_curvature_converges_at_second_order():
    grids = [dumbbell(nodes=m) for m in (401, 801, 1601)]
    # compare at the shared nodes x in {-1, -0.995, ...}
    K = [curvatures(g).K for g in grids]
    coarse, mid, fine = K[0], K[1][::2], K[2][::4]
    e1 = np.max(np.abs(coarse - mid)[1:-1])
    e2 = np.max(np.abs(mid - fine)[1:-1])
    assert math.log2(e1 / e2) >= 1.9


# extrema and families


def test_round_sphere_has_one_bump_and_no_neck():
    ext = detect_extrema(round_sphere(2, 401))
    assert ext.necks == []
    assert len(ext.bumps) == 1 and abs(ext.bumps[0][0]) < 1e-12


def test_symmetric_dumbbell_extrema():
    g = dumbbell(nodes=401)
    ext = detect_extrema(g)
    assert len(ext.necks) == 1 and abs(ext.necks[0][0]) < 1e-12
    assert ext.necks[0][1] == pytest.approx(0.1, rel=1e-3)
    (sl, pl), (sr, pr) = ext.bumps
    assert sl == pytest.approx(-sr, rel=1e-12) and pl == pytest.approx(pr, rel=1e-12)


def test_perturbed_sphere_amplitude_zero_is_round():
    g = make_initial(InitialFamily(FamilyId.PERTURBED_SPHERE, 0.3, {"amplitude": 0.0}), 201, 2)
    x = g.x
    assert np.allclose(g.psi, np.cos(np.pi * x / 2) * (np.abs(x) < 1), atol=1e-15)
    assert np.allclose(g.phi, np.pi / 2, rtol=1e-14)


def test_assumption_checks():
    rs = check_assumptions(round_sphere(2, 201))
    assert rs.conditions_1_to_3 and not rs.has_neck
    db = check_assumptions(dumbbell())
    assert db.conditions_1_to_3 and db.has_neck
    assert check_assumptions(dumbbell(lam=0.5)).conditions_1_to_3


def test_slope_above_one_breaks_condition_one():
    x = np.linspace(-1, 1, 401)
    psi = np.cos(np.pi * x / 2) * (1 + 0.6 * np.sin(6 * np.pi * x) ** 2)
    psi[0] = psi[-1] = 0.0
    g = ProfileGrid(2, x, np.full(x.size, 0.2), psi)
    assert not check_assumptions(g).positive_L


def test_bad_family_parameters():
    with pytest.raises(InvalidFamilyError):
        dumbbell(waist=1.5)
    with pytest.raises(InvalidFamilyError):
        make_initial(InitialFamily(FamilyId.DUMBBELL), 50, 2)
    with pytest.raises(InvalidFamilyError):
        InitialFamily(FamilyId.DUMBBELL, 1.5)


def test_profile_text_round_trip():
    g = dumbbell(nodes=200).replace(t=0.125, meta={"neck_s": 0.25})
    back = parse_profile(dump_profile(g))
    assert back.n == g.n and back.t == g.t and back.meta["neck_s"] == 0.25
    assert np.array_equal(back.psi, g.psi) and np.array_equal(back.phi, g.phi)


# properties


shapes = st.builds(
    lambda frac, cap, width: {"waist": frac * cap, "cap": cap, "neck_width": width},
    st.floats(0.05, 0.6), st.floats(0.5, 2.0), st.floats(0.3, 1.5),
)


@settings(max_examples=25, deadline=None)
@given(shape=shapes, nodes=st.integers(150, 500), n=st.integers(2, 5))
def test_pole_slope_is_unit(shape, nodes, n):
    g = dumbbell(nodes=nodes, n=n, **shape)
    cf = curvatures(g)
    ds = arclength(g).s_total / (nodes - 1)
    assert abs(cf.psi_s[0] - 1) < 10 * ds and abs(cf.psi_s[-1] + 1) < 10 * ds


@settings(max_examples=25, deadline=None)
@given(shape=shapes, nodes=st.integers(150, 500), n=st.integers(2, 5))
def test_curvatures_commute_with_reflection(shape, nodes, n):
    g = dumbbell(nodes=nodes, n=n, **shape)
    a = curvatures(g.mirrored())
    b = curvatures(g)
    for name in ("K", "L", "R"):
        u, v = getattr(a, name), getattr(b, name)[::-1]
        assert np.allclose(u, v, rtol=1e-12, atol=1e-12 * np.max(np.abs(v)))


@settings(max_examples=25, deadline=None)
@given(shape=shapes, nodes=st.integers(150, 500), n=st.integers(2, 5))
def test_scalar_curvature_two_ways(shape, nodes, n):
    g = dumbbell(nodes=nodes, n=n, **shape)
    R1 = curvatures(g).R[1:-1]
    R2 = scalar_curvature_direct(g)
    assert np.max(np.abs(R1 - R2)) <= 1e-12 * np.max(np.abs(R2))
