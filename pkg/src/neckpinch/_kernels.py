"""Compiled inner loops for the flow solver.

These reproduce, node by node, the stencils of :mod:`neckpinch.geometry`
(conservative psi_ss, three-point psi_x) and the upwinded phi transport of
:mod:`neckpinch.flow`. The numpy versions stay the reference; tests compare
both.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _xe(x, j):
    m = x.size - 1
    if j < 0:
        return 2.0 * x[0] - x[-j]
    if j > m:
        return 2.0 * x[m] - x[2 * m - j]
    return x[j]


@njit(cache=True, inline="always")
def _even(f, j):
    m = f.size - 1
    if j < 0:
        return f[-j]
    if j > m:
        return f[2 * m - j]
    return f[j]


@njit(cache=True, inline="always")
def _odd(f, j):
    m = f.size - 1
    if j < 0:
        return -f[-j]
    if j > m:
        return -f[2 * m - j]
    return f[j]


@njit(cache=True)
def pole_phi(x, psi):
    m = x.size - 1
    d1 = x[1] - x[0]
    d2 = x[2] - x[0]
    left = (psi[1] * d2**3 - psi[2] * d1**3) / (d1 * d2**3 - d2 * d1**3)
    d1 = x[m] - x[m - 1]
    d2 = x[m] - x[m - 2]
    right = (psi[m - 1] * d2**3 - psi[m - 2] * d1**3) / (d1 * d2**3 - d2 * d1**3)
    return left, right


@njit(cache=True)
def rhs(x, phi, psi, n, dphi, dpsi):
    """Fill dphi, dpsi; phi's pole entries must already satisfy |psi_s| = 1."""
    m = x.size - 1
    dphi[0] = 0.0
    dphi[m] = 0.0
    dpsi[0] = 0.0
    dpsi[m] = 0.0
    for i in range(1, m):
        xm, x0, xp = x[i - 1], x[i], x[i + 1]
        hp = xp - x0
        hm = x0 - xm
        fm, f0, fp = psi[i - 1], psi[i], psi[i + 1]
        pm, p0, pp = phi[i - 1], phi[i], phi[i + 1]
        psi_x = (hm * hm * fp - hp * hp * fm - (hm * hm - hp * hp) * f0) / (hp * hm * (hp + hm))
        flux_p = (fp - f0) / (0.5 * (pp + p0) * hp)
        flux_m = (f0 - fm) / (0.5 * (pm + p0) * hm)
        psi_ss = 2.0 * (flux_p - flux_m) / (p0 * (hp + hm))
        psi_s = psi_x / p0
        dpsi[i] = psi_ss - (n - 1) * (1.0 - psi_s * psi_s) / f0
        # second-order one-sided phi_x from the upwind side
        if psi_x > 0:
            a0, a1, a2 = x0, xm, _xe(x, i - 2)
            g0, g1, g2 = p0, pm, _even(phi, i - 2)
            h1 = a0 - a1
            h2 = a1 - a2
            phi_x = ((2 * h1 + h2) / (h1 * (h1 + h2)) * g0 - (h1 + h2) / (h1 * h2) * g1
                     + h1 / (h2 * (h1 + h2)) * g2)
        else:
            a1, a2 = xp, _xe(x, i + 2)
            g1, g2 = pp, _even(phi, i + 2)
            h1 = a1 - x0
            h2 = a2 - a1
            phi_x = -((2 * h1 + h2) / (h1 * (h1 + h2)) * p0 - (h1 + h2) / (h1 * h2) * g1
                      + h1 / (h2 * (h1 + h2)) * g2)
        psi_xx = 2.0 * ((fp - f0) / hp - (f0 - fm) / hm) / (hp + hm)
        up_ss = psi_xx / (p0 * p0) - psi_x * phi_x / (p0 * p0 * p0)
        dphi[i] = n * up_ss / f0 * p0


@njit(cache=True)
def rk4_step(x, phi, psi, n, dt, psi_floor):
    """One classical RK4 step; returns (phi, psi, bad) with bad = first bad node or -1."""
    m = x.size
    k1p = np.empty(m)
    k1q = np.empty(m)
    k2p = np.empty(m)
    k2q = np.empty(m)
    k3p = np.empty(m)
    k3q = np.empty(m)
    k4p = np.empty(m)
    k4q = np.empty(m)
    tp = np.empty(m)
    tq = np.empty(m)
    rhs(x, phi, psi, n, k1p, k1q)
    for stage in range(3):
        if stage == 0:
            cp, cq, w = k1p, k1q, 0.5
        elif stage == 1:
            cp, cq, w = k2p, k2q, 0.5
        else:
            cp, cq, w = k3p, k3q, 1.0
        for i in range(m):
            tp[i] = phi[i] + w * dt * cp[i]
            tq[i] = psi[i] + w * dt * cq[i]
        tp[0], tp[m - 1] = pole_phi(x, tq)
        if stage == 0:
            rhs(x, tp, tq, n, k2p, k2q)
        elif stage == 1:
            rhs(x, tp, tq, n, k3p, k3q)
        else:
            rhs(x, tp, tq, n, k4p, k4q)
    new_phi = np.empty(m)
    new_psi = np.empty(m)
    bad = -1
    for i in range(m):
        new_phi[i] = phi[i] + dt / 6.0 * (k1p[i] + 2 * k2p[i] + 2 * k3p[i] + k4p[i])
        new_psi[i] = psi[i] + dt / 6.0 * (k1q[i] + 2 * k2q[i] + 2 * k3q[i] + k4q[i])
    new_psi[0] = 0.0
    new_psi[m - 1] = 0.0
    new_phi[0], new_phi[m - 1] = pole_phi(x, new_psi)
    for i in range(1, m - 1):
        v = new_psi[i]
        if not np.isfinite(v) or v < psi_floor or not np.isfinite(new_phi[i]) or new_phi[i] <= 0:
            bad = i
            break
    return new_phi, new_psi, bad


@njit(cache=True)
def max_curvature(x, phi, psi):
    """max(|K|, |L|) over interior nodes and the even-extrapolated pole values of K."""
    m = x.size - 1
    best = 0.0
    K1 = K2 = Km1 = Km2 = 0.0
    for i in range(1, m):
        hp = x[i + 1] - x[i]
        hm = x[i] - x[i - 1]
        fm, f0, fp = psi[i - 1], psi[i], psi[i + 1]
        pm, p0, pp = phi[i - 1], phi[i], phi[i + 1]
        psi_x = (hm * hm * fp - hp * hp * fm - (hm * hm - hp * hp) * f0) / (hp * hm * (hp + hm))
        flux_p = (fp - f0) / (0.5 * (pp + p0) * hp)
        flux_m = (f0 - fm) / (0.5 * (pm + p0) * hm)
        psi_ss = 2.0 * (flux_p - flux_m) / (p0 * (hp + hm))
        psi_s = psi_x / p0
        K = -psi_ss / f0
        L = (1.0 - psi_s * psi_s) / (f0 * f0)
        best = max(best, abs(K), abs(L))
        if i == 1:
            K1 = K
        elif i == 2:
            K2 = K
        if i == m - 1:
            Km1 = K
        elif i == m - 2:
            Km2 = K
    for k1, k2, d1, d2 in ((K1, K2, x[1] - x[0], x[2] - x[0]),
                           (Km1, Km2, x[m] - x[m - 1], x[m] - x[m - 2])):
        pole = (d2 * d2 * k1 - d1 * d1 * k2) / (d2 * d2 - d1 * d1)
        best = max(best, abs(pole))
    return best
