"""Hermite eigenbasis of the linearized cylinder operator.

The operator is ``A V = V'' - (sigma/2) V' + V``, self-adjoint for the weight
``exp(-sigma^2/4)``. Its eigenfunctions are monic Hermite polynomials h_k with
eigenvalues ``1 - k/2``. Polynomials are kept with exact rational coefficients
so the eigenrelation can be checked with no rounding at all.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.special import erfc

SIGMA_MAX_DEFAULT = 10.0
SIGMA_MAX_MIN = 8.0
TAIL_TOL = 1e-12


class StencilError(ValueError):
    """Too few samples for the finite-difference stencil."""


class TruncationError(ValueError):
    """Sample window too narrow for the requested number of modes."""

    def __init__(self, msg: str, report: dict):
        super().__init__(msg)
        self.report = report


class IntegrandPoleError(ValueError):
    """U vanishes somewhere, so U''/U is not integrable."""


class OutOfRegimeError(ValueError):
    """1 + V <= 0: the expansion about the cylinder does not apply."""


# --------------------------------------------------------------------------
# exact polynomials


@dataclass(frozen=True)
class Poly:
    """Polynomial in sigma with exact rational coefficients, lowest degree first."""

    coeffs: tuple[Fraction, ...] = ()

    def __post_init__(self):
        c = [Fraction(v) for v in self.coeffs]
        while c and c[-1] == 0:
            c.pop()
        object.__setattr__(self, "coeffs", tuple(c))

    @classmethod
    def sigma(cls) -> Poly:
        return cls((0, 1))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def is_zero(self) -> bool:
        return not self.coeffs

    def integer_coeffs(self) -> tuple[int, ...]:
        if any(c.denominator != 1 for c in self.coeffs):
            raise ValueError("polynomial has non-integer coefficients")
        return tuple(int(c) for c in self.coeffs)

    def derivative(self) -> Poly:
        return Poly(tuple(i * c for i, c in enumerate(self.coeffs))[1:])

    def times_sigma(self) -> Poly:
        return Poly((Fraction(0),) + self.coeffs)

    def __add__(self, other: Poly) -> Poly:
        m = max(len(self.coeffs), len(other.coeffs))
        a = self.coeffs + (Fraction(0),) * (m - len(self.coeffs))
        b = other.coeffs + (Fraction(0),) * (m - len(other.coeffs))
        return Poly(tuple(x + y for x, y in zip(a, b)))

    def __neg__(self) -> Poly:
        return Poly(tuple(-c for c in self.coeffs))

    def __sub__(self, other: Poly) -> Poly:
        return self + (-other)

    def __mul__(self, scalar) -> Poly:
        f = Fraction(scalar)
        return Poly(tuple(f * c for c in self.coeffs))

    __rmul__ = __mul__

    def __call__(self, sigma):
        s = np.asarray(sigma, dtype=float)
        out = np.zeros_like(s)
        for c in reversed(self.coeffs):
            out = out * s + float(c)
        return out

    def __str__(self) -> str:
        if not self.coeffs:
            return "0"
        terms = []
        for i, c in reversed(list(enumerate(self.coeffs))):
            if c == 0:
                continue
            mono = "" if i == 0 else ("sigma" if i == 1 else f"sigma^{i}")
            mag = abs(c)
            txt = str(mag) if (mag != 1 or i == 0) else ""
            body = f"{txt}*{mono}" if txt and mono else (txt or mono)
            terms.append(("-" if c < 0 else "+", body))
        first_sign, first = terms[0]
        out = ("-" if first_sign == "-" else "") + first
        for sign, body in terms[1:]:
            out += f" {sign} {body}"
        return out


@lru_cache(maxsize=None)
def hermite(k: int) -> Poly:
    """Monic h_k from h_{k+1} = sigma h_k - 2k h_{k-1}."""
    if k < 0:
        raise ValueError("k must be non-negative")
    prev, cur = Poly((1,)), Poly.sigma()
    if k == 0:
        return prev
    for j in range(1, k):
        prev, cur = cur, cur.times_sigma() - 2 * j * prev
    return cur


def eigenvalue(k: int) -> Fraction:
    return 1 - Fraction(k, 2)


def norm_sq_closed_form(k: int) -> float:
    """<h_k, h_k>_w = 2^(k+1) sqrt(pi) k!."""
    return 2.0 ** (k + 1) * math.sqrt(math.pi) * math.factorial(k)


def _uniform_step(sigma: np.ndarray) -> float:
    d = np.diff(sigma)
    if d.size == 0 or np.any(d <= 0):
        raise ValueError("sigma grid must be strictly increasing")
    h = float(np.mean(d))
    if np.max(np.abs(d - h)) > 1e-9 * max(h, 1.0):
        raise ValueError("sampled operators need a uniform sigma grid")
    return h


def second_derivative(sigma: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Centered three-point second difference, four-point one-sided at the ends."""
    v = np.asarray(values, dtype=float)
    if v.size < 5:
        raise StencilError("need at least 5 samples")
    h = _uniform_step(np.asarray(sigma, dtype=float))
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / h**2
    out[0] = (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / h**2
    out[-1] = (2 * v[-1] - 5 * v[-2] + 4 * v[-3] - v[-4]) / h**2
    return out


def first_derivative(sigma: np.ndarray, values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.size < 5:
        raise StencilError("need at least 5 samples")
    h = _uniform_step(np.asarray(sigma, dtype=float))
    return np.gradient(v, h, edge_order=2)


def apply_A(V, sigma: np.ndarray | None = None):
    """A V = V'' - (sigma/2) V' + V.

    A :class:`Poly` is mapped exactly; an array needs its (uniform) sigma grid.
    """
    if isinstance(V, Poly):
        d1 = V.derivative()
        return d1.derivative() - Fraction(1, 2) * d1.times_sigma() + V
    if sigma is None:
        raise ValueError("sampled input requires its sigma grid")
    s = np.asarray(sigma, dtype=float)
    v = np.asarray(V, dtype=float)
    return second_derivative(s, v) - 0.5 * s * first_derivative(s, v) + v


# --------------------------------------------------------------------------
# basis and quadrature


def tail_fraction(k: int, sigma_max: float) -> float:
    """Share of <h_k, h_k>_w lying outside |sigma| <= sigma_max."""
    if k == 0:
        return float(erfc(sigma_max / 2))
    # h_k^2 w beyond sigma_max, by a fine trapezoid out to where it is negligible
    hi = sigma_max + 40.0
    s = np.linspace(sigma_max, hi, 40001)
    f = hermite(k)(s) ** 2 * np.exp(-s * s / 4)
    return float(2 * np.trapezoid(f, s) / norm_sq_closed_form(k))


def sigma_max_for(k_max: int, tol: float = TAIL_TOL) -> float:
    """Smallest radius (on a 0.25 lattice, at least the default) meeting ``tol``."""
    r = SIGMA_MAX_DEFAULT
    while max(tail_fraction(k, r) for k in range(k_max + 1)) > tol:
        r += 0.25
    return r


@dataclass(frozen=True)
class HermiteBasis:
    k_max: int
    polys: tuple[Poly, ...] = field(init=False)
    coeffs: tuple[tuple[int, ...], ...] = field(init=False)
    eigenvalues: tuple[Fraction, ...] = field(init=False)

    def __post_init__(self):
        if self.k_max < 0:
            raise ValueError("k_max must be non-negative")
        polys = tuple(hermite(k) for k in range(self.k_max + 1))
        object.__setattr__(self, "polys", polys)
        object.__setattr__(self, "coeffs", tuple(p.integer_coeffs() for p in polys))
        object.__setattr__(self, "eigenvalues", tuple(eigenvalue(k) for k in range(self.k_max + 1)))

    def quadrature_grid(self, nodes_per_unit: int = 40) -> np.ndarray:
        r = sigma_max_for(self.k_max)
        return np.linspace(-r, r, int(2 * r * nodes_per_unit) + 1)

    def gram(self, sigma: np.ndarray | None = None) -> np.ndarray:
        """Weighted trapezoid Gram matrix of h_0..h_kmax."""
        s = self.quadrature_grid() if sigma is None else np.asarray(sigma, dtype=float)
        w = np.exp(-s * s / 4)
        H = np.array([p(s) for p in self.polys])
        return np.array([[np.trapezoid(a * b * w, s) for b in H] for a in H])

    def evaluate(self, coefficients, sigma) -> np.ndarray:
        s = np.asarray(sigma, dtype=float)
        out = np.zeros_like(s)
        for b, p in zip(coefficients, self.polys):
            out = out + b * p(s)
        return out


# --------------------------------------------------------------------------
# projection


@dataclass(frozen=True)
class SpectralProjection:
    tau: float | None
    coefficients: tuple[float, ...]
    nodes: int
    sigma_max: float
    tail_mass: float
    norms: tuple[float, ...]
    norm_rel_dev: float
    residual: float

    @property
    def k_max(self) -> int:
        return len(self.coefficients) - 1

    def reconstruct(self, sigma) -> np.ndarray:
        return HermiteBasis(self.k_max).evaluate(self.coefficients, sigma)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "b": list(self.coefficients),
            "quadrature": {
                "nodes": self.nodes,
                "sigma_max": self.sigma_max,
                "tail_mass": self.tail_mass,
                "norm_rel_dev": self.norm_rel_dev,
            },
            "norms": list(self.norms),
            "residual": self.residual,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> SpectralProjection:
        q = d["quadrature"]
        return cls(d.get("tau"), tuple(d["b"]), q["nodes"], q["sigma_max"], q["tail_mass"],
                   tuple(d["norms"]), q["norm_rel_dev"], d["residual"])


def project(sigma, values, k_max: int = 6, tau: float | None = None,
            sigma_max: float | None = None, tail_tol: float = TAIL_TOL) -> SpectralProjection:
    """Weighted-L2 coefficients b_k = <V, h_k>_w / <h_k, h_k>_w on |sigma| <= sigma_max.

    Both inner products use the trapezoid rule on the sample nodes. With no
    ``sigma_max`` the window is the smallest radius (>= 10) whose weighted tail
    for h_kmax is below ``tail_tol``.
    """
    s = np.asarray(sigma, dtype=float)
    v = np.asarray(values, dtype=float)
    if s.shape != v.shape:
        raise ValueError("sigma and values differ in shape")
    if sigma_max is None:
        sigma_max = sigma_max_for(k_max, tail_tol)
    if sigma_max < SIGMA_MAX_MIN:
        raise ValueError(f"sigma_max must be at least {SIGMA_MAX_MIN}")
    tail = max(tail_fraction(k, sigma_max) for k in range(k_max + 1))
    covered = s.min() <= -sigma_max * (1 - 1e-12) and s.max() >= sigma_max * (1 - 1e-12)
    report = {"sigma_max": sigma_max, "tail_mass": tail, "k_max": k_max,
              "data_range": [float(s.min()), float(s.max())]}
    if tail > tail_tol:
        raise TruncationError(f"weighted tail {tail:.2e} beyond |sigma|={sigma_max} exceeds {tail_tol:.0e}", report)
    if not covered:
        raise TruncationError(f"samples do not cover |sigma| <= {sigma_max}", report)
    keep = np.abs(s) <= sigma_max * (1 + 1e-12)
    s, v = s[keep], v[keep]
    w = np.exp(-s * s / 4)
    basis = HermiteBasis(k_max)
    b, norms = [], []
    for p in basis.polys:
        hk = p(s)
        nk = float(np.trapezoid(hk * hk * w, s))
        norms.append(nk)
        b.append(float(np.trapezoid(v * hk * w, s)) / nk)
    dev = max(abs(nk / norm_sq_closed_form(k) - 1) for k, nk in enumerate(norms))
    recon = basis.evaluate(b, s)
    resid = float(np.sqrt(np.trapezoid((v - recon) ** 2 * w, s) / np.trapezoid(w, s)))
    return SpectralProjection(tau, tuple(b), int(s.size), float(sigma_max), tail,
                              tuple(norms), dev, resid)


# --------------------------------------------------------------------------
# nonlinear pieces


def nonlocal_I(sigma, U) -> np.ndarray:
    """I(sigma) = integral from 0 to sigma of U''/U, trapezoid rule, I(0) = 0."""
    s = np.asarray(sigma, dtype=float)
    u = np.asarray(U, dtype=float)
    if np.any(u <= 0):
        raise IntegrandPoleError("U must be positive on the whole grid")
    if not s[0] <= 0 <= s[-1]:
        raise ValueError("sigma grid must contain 0 in its range")
    f = second_derivative(s, u) / u
    cum = np.concatenate(([0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(s))))
    return cum - np.interp(0.0, s, cum)


def nonlinear_N(sigma, V, I, n: int) -> np.ndarray:
    """N(V) = [2(n-1) V'^2 - V^2] / [2(1+V)] - n I V'."""
    v = np.asarray(V, dtype=float)
    if np.any(1 + v <= 0):
        raise OutOfRegimeError("1 + V must stay positive")
    dv = first_derivative(sigma, v)
    return (2 * (n - 1) * dv**2 - v**2) / (2 * (1 + v)) - n * np.asarray(I) * dv
