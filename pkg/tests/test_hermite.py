from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from neckpinch.hermite import (
    HermiteBasis,
    IntegrandPoleError,
    OutOfRegimeError,
    Poly,
    SpectralProjection,
    StencilError,
    TruncationError,
    apply_A,
    eigenvalue,
    hermite,
    nonlinear_N,
    nonlocal_I,
    norm_sq_closed_form,
    project,
    second_derivative,
    sigma_max_for,
)


def grid(r=None, k_max=6, per_unit=40):
    r = r or sigma_max_for(k_max)
    return np.linspace(-r, r, int(2 * r * per_unit) + 1)


def test_low_order_polynomials():
    assert hermite(2).integer_coeffs() == (-2, 0, 1)
    assert hermite(3).integer_coeffs() == (0, -6, 0, 1)
    assert hermite(4).integer_coeffs() == (12, 0, -12, 0, 1)
    assert str(hermite(3)) == "sigma^3 - 6*sigma"


@pytest.mark.parametrize("k", range(11))
def test_eigenrelation_is_exact(k):
    diff = apply_A(hermite(k)) - eigenvalue(k) * hermite(k)
    assert diff.is_zero()


def test_eigenrelation_on_samples():
    s = np.linspace(-4, 4, 4001)
    h = hermite(4)
    out = apply_A(h(s), s)
    assert np.max(np.abs(out + h(s))[2:-2]) < 1e-3  # O(h^2) stencil error


def test_short_samples_are_rejected():
    with pytest.raises(StencilError):
        second_derivative(np.arange(4.0), np.ones(4))


def test_gram_matrix_is_diagonal():
    G = HermiteBasis(10).gram()
    off = G - np.diag(np.diag(G))
    assert np.max(np.abs(off) / np.sqrt(np.outer(np.diag(G), np.diag(G)))) < 1e-8


@pytest.mark.parametrize("k", range(9))
def test_norms_match_closed_form_and_adaptive_integration(k):
    h = hermite(k)
    oracle, _ = quad(lambda v: h(v) ** 2 * math.exp(-v * v / 4), -np.inf, np.inf, epsabs=0, epsrel=1e-12)
    assert oracle == pytest.approx(norm_sq_closed_form(k), rel=1e-9)
    assert HermiteBasis(k).gram()[k, k] == pytest.approx(norm_sq_closed_form(k), rel=1e-6)


def test_project_single_mode():
    s = grid()
    p = project(s, hermite(3)(s), k_max=6)
    assert p.coefficients[3] == pytest.approx(1.0, abs=1e-10)
    assert max(abs(b) for j, b in enumerate(p.coefficients) if j != 3) < 1e-10


def test_project_is_linear():
    s = grid()
    p = project(s, 2 * hermite(0)(s) - 0.5 * hermite(2)(s), k_max=6)
    assert p.coefficients[0] == pytest.approx(2.0, abs=1e-10)
    assert p.coefficients[2] == pytest.approx(-0.5, abs=1e-10)


def test_narrow_window_is_a_truncation_error():
    s = np.linspace(-9, 9, 721)
    with pytest.raises(TruncationError) as info:
        project(s, np.ones_like(s), k_max=6, sigma_max=9.0)
    assert info.value.report["k_max"] == 6
    with pytest.raises(TruncationError):
        project(s, np.ones_like(s), k_max=2)


def test_projection_json_round_trip():
    s = grid()
    p = project(s, hermite(2)(s), k_max=4, tau=3.5)
    import json
    assert SpectralProjection.from_dict(json.loads(p.to_json())) == p


def test_nonlocal_integral_examples():
    s = np.linspace(-3, 3, 6001)
    assert np.max(np.abs(nonlocal_I(s, np.ones_like(s)))) == 0.0
    eps = 1e-3
    I = nonlocal_I(s, 1 + eps * hermite(2)(s))
    far = np.abs(s) > 0.5
    assert np.max(np.abs(I[far] / (2 * eps * s[far]) - 1)) < 1e-2
    with pytest.raises(IntegrandPoleError):
        nonlocal_I(s, s**2)


def test_nonlinear_term_examples():
    s = np.linspace(-3, 3, 601)
    zero = np.zeros_like(s)
    assert np.max(np.abs(nonlinear_N(s, zero, zero, 2))) == 0.0
    v = 0.2
    N = nonlinear_N(s, np.full_like(s, v), zero, 3)
    assert np.allclose(N, -v * v / (2 * (1 + v)), rtol=1e-14)
    with pytest.raises(OutOfRegimeError):
        nonlinear_N(s, np.full_like(s, -1.0), zero, 2)


coeffs = st.lists(st.floats(-5, 5, allow_nan=False), min_size=7, max_size=7)


@settings(max_examples=40, deadline=None)
@given(b=coeffs)
def test_projection_inverts_reconstruction(b):
    s = grid()
    p = project(s, HermiteBasis(6).evaluate(b, s), k_max=6)
    assert np.allclose(p.coefficients, b, atol=1e-9 * max(1.0, max(map(abs, b))))


@settings(max_examples=40, deadline=None)
@given(b=coeffs, odd=st.booleans())
def test_parity_of_projection(b, odd):
    s = grid()
    b = [v if (j % 2 == 1) == odd else 0.0 for j, v in enumerate(b)]
    p = project(s, HermiteBasis(6).evaluate(b, s), k_max=6)
    other = [c for j, c in enumerate(p.coefficients) if (j % 2 == 1) != odd]
    assert max(map(abs, other)) < 1e-10 * max(1.0, max(map(abs, b)))


@settings(max_examples=30, deadline=None)
@given(c=st.lists(st.fractions(max_denominator=50), min_size=1, max_size=8))
def test_A_is_diagonal_in_the_hermite_basis(c):
    # any polynomial combination of h_k maps to the combination scaled by eigenvalues
    P, AP = Poly(()), Poly(())
    for k, ck in enumerate(c):
        P = P + ck * hermite(k)
        AP = AP + (ck * eigenvalue(k)) * hermite(k)
    assert (apply_A(P) - AP).is_zero()
