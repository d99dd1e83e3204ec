"""Region rescalings, matching constants, asymptotic fits and the composite model.

The singular profile is described in four overlapping zones: a parabolic
zone around the neck (sigma = s / sqrt(T-t)), an intermediate zone
(rho = (T-t)^(-1/k) s), the outer death profile, and a tip zone near the
pole rescaled by Gamma = (T-t)^(-(1-1/k)) where the steady soliton profile
takes over. This module converts simulation snapshots into each frame, fits
the free constants, and evaluates a blended model of all four zones.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import least_squares

from .frames import FitReport, IntermediateFrame, ParabolicFrame, TipFrame
from .geometry import ProfileGrid, arclength, arclength_derivatives
from .hermite import (
    SpectralProjection,
    eigenvalue,
    first_derivative,
    hermite,
    nonlocal_I,
    second_derivative,
)


class DomainError(ValueError):
    """Argument outside the region where a formula is defined."""


class OutsideOuterRegionError(DomainError):
    pass


class TimeDerivativeError(ValueError):
    """Frames too far apart in tau for a difference quotient."""


class NoModeDetected(ValueError):
    pass


class FitRejected(ValueError):
    pass


class CapInversionError(ValueError):
    pass


class BlendWidthWarning(UserWarning):
    pass


def _grid_of(snapshot) -> ProfileGrid:
    return getattr(snapshot, "grid", snapshot)


def _frame_s(snapshot) -> np.ndarray:
    frame = getattr(snapshot, "frame", None)
    return frame.s if frame is not None else arclength(_grid_of(snapshot)).s


# --------------------------------------------------------------------------
# matching constants


@dataclass(frozen=True)
class MatchingConstants:
    n: int
    k: int
    c: float
    a: float
    b_k: float
    gamma_exponent: Fraction

    def Gamma(self, theta):
        """Tip expansion factor for time-to-singularity theta = T - t."""
        return np.asarray(theta, dtype=float) ** (-float(self.gamma_exponent))

    def to_dict(self) -> dict:
        return {"n": self.n, "k": self.k, "c": self.c, "a": self.a, "b_k": self.b_k,
                "gamma_exponent": str(self.gamma_exponent)}


def matching_constants(n: int, k: int, c: float) -> MatchingConstants:
    """Constants that glue the tip, parabolic and intermediate expansions."""
    if int(n) != n or n < 2:
        raise ValueError(f"n must be an integer >= 2, got {n}")
    if int(k) != k or k <= 2:
        raise ValueError(f"k must be an integer >= 3, got {k}")
    if not c > 0:
        raise ValueError(f"c must be positive, got {c}")
    n, k, c = int(n), int(k), float(c)
    return MatchingConstants(n=n, k=k, c=c, a=k * (n - 1) / (2 * c), b_k=-0.5 * c ** (-k),
                             gamma_exponent=Fraction(k - 1, k))


# --------------------------------------------------------------------------
# closed-form profiles


def _check_rho(rho: np.ndarray, c: float, k: int):
    bad = np.abs(rho) > c if k % 2 == 0 else rho > c
    if np.any(bad):
        raise DomainError(f"rho outside the intermediate profile's domain (c = {c}, k = {k})")


def intermediate_profile(rho, c: float, k: int):
    """sqrt(1 - (rho/c)^k), the first-order intermediate solution."""
    r = np.asarray(rho, dtype=float)
    _check_rho(r, c, k)
    out = np.sqrt(np.maximum(1.0 - (r / c) ** k, 0.0))
    return float(out) if out.ndim == 0 else out


def intermediate_profile_dr(rho, c: float, k: int):
    """Exact rho-derivative of :func:`intermediate_profile` (for |rho| < c)."""
    r = np.asarray(rho, dtype=float)
    _check_rho(r, c, k)
    w = np.sqrt(1.0 - (r / c) ** k)
    out = -0.5 * k * r ** (k - 1) * c ** (-k) / w
    return float(out) if out.ndim == 0 else out


def intermediate_ode_residual(rho, c: float, k: int):
    """(rho/k) W' - W/2 + 1/(2W) evaluated on the closed form."""
    r = np.asarray(rho, dtype=float)
    w = intermediate_profile(r, c, k)
    dw = intermediate_profile_dr(r, c, k)
    return r / k * dw - 0.5 * w + 0.5 / w


def outer_profile_squared(s, t: float, mc: MatchingConstants, T: float):
    """2(n-1)[(T-t) - (s/c)^k]; may be negative outside the outer region."""
    s = np.asarray(s, dtype=float)
    return 2 * (mc.n - 1) * ((T - t) - (s / mc.c) ** mc.k)


def outer_profile(s, t: float, mc: MatchingConstants, T: float):
    """Death-profile radius sqrt(2(n-1)[(T-t) - (s/c)^k])."""
    q = outer_profile_squared(s, t, mc, T)
    if np.any(q < 0) or not np.all(np.isfinite(q)):
        raise OutsideOuterRegionError("square-root argument is negative: point lies beyond the outer region")
    out = np.sqrt(q)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# frames from snapshots


def to_parabolic(snapshot, T_est: float, neck_s: float, sigma_max: float = 16.0,
                 points: int = 3201) -> ParabolicFrame:
    """Sample U = psi / sqrt(2(n-1)(T-t)) on a uniform sigma grid.

    ``neck_s`` is the arclength (in the snapshot's own frame) taken as sigma = 0.
    The grid is the symmetric window |sigma| <= sigma_max, clipped to the
    interior nodes the snapshot actually covers.
    """
    grid = _grid_of(snapshot)
    t = grid.t
    if not t < T_est:
        raise ValueError(f"snapshot time {t} is not before T_est = {T_est}")
    theta = T_est - t
    s = _frame_s(snapshot)
    sig = (s - neck_s) / math.sqrt(theta)
    lo = max(-sigma_max, sig[1])
    hi = min(sigma_max, sig[-2])
    if not lo < 0 < hi:
        raise ValueError("the neck does not lie inside the snapshot's interior")
    sigma = np.linspace(lo, hi, points)
    psi = CubicSpline(s, grid.psi)(neck_s + sigma * math.sqrt(theta))
    U = psi / math.sqrt(2 * (grid.n - 1) * theta)
    return ParabolicFrame(n=grid.n, t=t, T_used=T_est, sigma=sigma, U=U,
                          early=bool(-math.log(theta) < 1.0))


def to_intermediate(frame: ParabolicFrame, k: int) -> IntermediateFrame:
    tau = frame.tau
    return IntermediateFrame(rho=math.exp((1.0 / k - 0.5) * tau) * frame.sigma, W=frame.U,
                             k_used=k, tau=tau)


@dataclass(frozen=True)
class ResidualField:
    tau: float
    sigma: np.ndarray
    residual: np.ndarray

    def sup(self, window: float | None = None) -> float:
        m = np.ones_like(self.sigma, dtype=bool) if window is None else np.abs(self.sigma) <= window
        return float(np.max(np.abs(self.residual[m])))


def u_evolution_rhs(sigma: np.ndarray, U: np.ndarray, n: int) -> np.ndarray:
    """U_ss - (sigma/2 + n I) U_s + (n-1) U_s^2 / U + (U - 1/U)/2."""
    I = nonlocal_I(sigma, U)
    du = first_derivative(sigma, U)
    d2u = second_derivative(sigma, U)
    return d2u - (0.5 * sigma + n * I) * du + (n - 1) * du**2 / U + 0.5 * (U - 1.0 / U)


def u_evolution_residual(frames: list[ParabolicFrame], max_dtau: float = 0.5) -> list[ResidualField]:
    """Pointwise residual of the rescaled-radius evolution between consecutive frames.

    U_tau is the difference quotient of adjacent frames; the right-hand side
    is evaluated on their average, so the check is centered at the mid-time.
    Frames are brought onto the common sigma window of each pair.
    """
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    frames = sorted(frames, key=lambda f: f.tau)
    out = []
    for f0, f1 in zip(frames[:-1], frames[1:]):
        dtau = f1.tau - f0.tau
        if dtau > max_dtau:
            raise TimeDerivativeError(f"frames {dtau:.3f} apart in tau (limit {max_dtau})")
        if dtau <= 0:
            raise TimeDerivativeError("frames share the same tau")
        if f0.sigma.shape == f1.sigma.shape and np.array_equal(f0.sigma, f1.sigma):
            sigma, u0, u1 = f0.sigma, f0.U, f1.U
        else:
            lo = max(f0.sigma[0], f1.sigma[0])
            hi = min(f0.sigma[-1], f1.sigma[-1])
            sigma = np.linspace(lo, hi, max(f0.sigma.size, f1.sigma.size))
            u0 = np.interp(sigma, f0.sigma, f0.U)
            u1 = np.interp(sigma, f1.sigma, f1.U)
        mid = 0.5 * (u0 + u1)
        res = (u1 - u0) / dtau - u_evolution_rhs(sigma, mid, f0.n)
        out.append(ResidualField(tau=0.5 * (f0.tau + f1.tau), sigma=sigma, residual=res))
    return out


# --------------------------------------------------------------------------
# fits


def _line(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    rms = float(np.sqrt(np.mean((A @ np.array([slope, icpt]) - y) ** 2)))
    return float(slope), float(icpt), rms


def fit_dominant_mode(projections: list[SpectralProjection], noise_floor: float = 1e-12,
                      slope_tol: float = 0.2, b0_ratio: float = 1e-2) -> FitReport:
    """Identify the decaying Hermite mode k >= 3 that dominates late in tau.

    Each coefficient history is regressed as log|b_k(tau)| = const + slope * tau.
    Modes whose slope is within ``slope_tol`` of the eigenvalue 1 - k/2 are
    candidates; the one with the largest amplitude at the last tau wins. The
    reported constant is the mean of b_k(tau) exp(-(1 - k/2) tau).
    """
    projs = sorted(projections, key=lambda p: p.tau)
    if len(projs) < 4:
        raise ValueError("need at least 4 projections")
    tau = np.array([p.tau for p in projs], dtype=float)
    if np.any(~np.isfinite(tau)):
        raise ValueError("every projection needs its tau")
    if tau[-1] - tau[0] < 1.0:
        raise ValueError("projections must span at least one unit of tau")
    k_max = min(len(p.coefficients) for p in projs) - 1
    B = np.array([p.coefficients[: k_max + 1] for p in projs])
    if np.all(np.abs(B) < noise_floor):
        raise NoModeDetected("all coefficients are below the noise floor")

    modes = {}
    for k in range(3, k_max + 1):
        col = B[:, k]
        ok = np.abs(col) >= noise_floor
        if ok.sum() < 3:
            continue
        slope, _, rms = _line(tau[ok], np.log(np.abs(col[ok])))
        lam = float(eigenvalue(k))
        const = col[ok] * np.exp(-lam * tau[ok])
        modes[k] = {"slope": slope, "lambda": lam, "rms": rms, "late": float(abs(col[-1])),
                    "b": float(np.mean(const)), "spread": float(np.std(const))}
    if not modes:
        raise NoModeDetected("no mode k >= 3 rises above the noise floor")
    cands = [k for k, m in modes.items() if abs(m["slope"] - m["lambda"]) <= slope_tol]
    low = not cands
    if low:
        cands = [min(modes, key=lambda k: abs(modes[k]["slope"] - modes[k]["lambda"]))]
    k = max(cands, key=lambda k: modes[k]["late"])
    m = modes[k]
    b0_late = float(abs(B[-1, 0]))
    b0_flag = b0_late > max(noise_floor, b0_ratio * m["late"])
    return FitReport(
        fitted_value=m["b"], window=(float(tau[0]), float(tau[-1])), residual=m["rms"],
        low_confidence=low,
        extra={"k": k, "slope": m["slope"], "lambda_k": m["lambda"], "spread": m["spread"],
               "b0_nonzero": b0_flag, "b0_late": b0_late,
               "advice": "adjust T_est so that b_0 vanishes" if b0_flag else "",
               "modes": {str(j): v for j, v in modes.items()}},
    )


def _monotone_bins(r: np.ndarray, w: np.ndarray, bins: int = 8) -> bool:
    edges = np.linspace(r.min(), r.max(), bins + 1)
    means = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        m = (r >= lo) & (r <= hi)
        if m.any():
            means.append(float(np.mean(w[m])))
    return bool(np.all(np.diff(means) < 0))


def fit_c(frame: IntermediateFrame, c_guess: float | None = None,
          window: tuple[float, float] = (0.2, 0.9), min_samples: int = 10) -> FitReport:
    """Least-squares fit of W^2 = 1 - (rho/c)^k for the scale c.

    Only rho > 0 is used for odd k; for even k both sides enter through |rho|.
    Without ``c_guess`` the start value is the median of rho / (1 - W^2)^(1/k)
    over samples with W^2 between 0.05 and 0.95. Monotonicity is tested on bin
    means so that sample noise does not reject the window.
    """
    k = frame.k_used
    rho, W = frame.rho, frame.W
    if k % 2 == 0:
        rho = np.abs(rho)
    keep = (rho > 0) & np.isfinite(W)
    rho, W = rho[keep], W[keep]
    if c_guess is None:
        q = 1.0 - W**2
        mid = (q > 0.05) & (q < 0.95)
        if mid.sum() < 3:
            raise FitRejected("W does not fall far enough to locate c")
        c_guess = float(np.median(rho[mid] / q[mid] ** (1.0 / k)))
    lo, hi = window[0] * c_guess, window[1] * c_guess
    m = (rho >= lo) & (rho <= hi)
    if m.sum() < min_samples:
        raise ValueError(f"fewer than {min_samples} samples in [{lo:.4g}, {hi:.4g}]")
    r, w = rho[m], W[m]
    if not _monotone_bins(r, w):
        raise FitRejected("W is not monotone in the fit window")

    def resid(p):
        return w**2 - 1.0 + (r / math.exp(p[0])) ** k

    sol = least_squares(resid, [math.log(c_guess)], xtol=1e-15, ftol=1e-15, gtol=1e-15)
    c = math.exp(sol.x[0])
    rms = float(np.sqrt(np.mean(sol.fun**2)))
    return FitReport(fitted_value=c, window=(float(lo), float(hi)), residual=rms,
                     extra={"k": k, "tau": frame.tau, "c_guess": c_guess,
                            "b_k_implied": -0.5 * c ** (-k), "samples": int(m.sum())})


def to_tip(snapshot, T_est: float, k: int, gamma_max: float | None = None) -> TipFrame:
    """Z = psi_s^2 against gamma = Gamma psi on the monotone cap at the right pole.

    Walks inward from the pole while psi_s < 0 and psi grows. The cap ends at
    the first violation; when ``gamma_max`` is given and the cap stops short
    of it the frame is flagged ``truncated``. Z at the pole is the boundary
    value 1.
    """
    grid = _grid_of(snapshot)
    theta = T_est - grid.t
    if not theta > 0:
        raise ValueError("snapshot is not before T_est")
    psi_s, _ = arclength_derivatives(grid.x, grid.phi, grid.psi)
    psi = grid.psi
    m = psi.size - 1
    i = m - 1
    while i >= 1 and psi_s[i] < 0 and psi[i] > psi[i + 1]:
        i -= 1
    first = i + 1
    if m - first < 2:
        raise CapInversionError("no monotone cap next to the right pole")
    idx = np.arange(m, first - 1, -1)
    Gamma = float(theta ** (-(1.0 - 1.0 / k)))
    gamma = Gamma * psi[idx]
    Z = psi_s[idx] ** 2
    Z[0] = 1.0
    truncated = gamma_max is not None and gamma[-1] < gamma_max
    return TipFrame(Gamma=Gamma, gamma=gamma, Z=Z, t=grid.t, T_used=T_est, k_used=k,
                    truncated=bool(truncated))


def blowup_fit(t, K_pole, T_est: float, k: int | None = None, a: float | None = None,
               b2: float | None = None, delta: float | None = None, tol: float = 0.01) -> FitReport:
    """Power-law exponent q in K_pole ~ C (T - t)^(-q).

    ``sensitivity`` is the largest change of q when T_est moves by +-delta
    (default 1e-4 of the latest time-to-singularity); beyond ``tol`` relative
    the fit is marked low-confidence. With k, a and b2 the report also carries
    the predicted exponent 2 - 2/k and the prefactors a^-2 and -b2 a^-2.
    """
    t = np.asarray(t, dtype=float)
    K = np.asarray(K_pole, dtype=float)
    if t.size < 6 or t.shape != K.shape:
        raise ValueError("need at least 6 (t, K_pole) samples")
    if np.any(K <= 0) or np.any(t >= T_est):
        raise ValueError("K_pole must be positive and t < T_est")
    if math.log10(K.max() / K.min()) < 2:
        raise ValueError("K_pole must span at least two decades")
    if delta is None:
        delta = 1e-4 * (T_est - t.max())

    def fit(T):
        slope, icpt, rms = _line(-np.log(T - t), np.log(K))
        return slope, icpt, rms

    q, icpt, rms = fit(T_est)
    shifts = [fit(T_est + d)[0] for d in (-delta, delta) if np.all(T_est + d > t)]
    sens = max((abs(v - q) for v in shifts), default=math.inf)
    extra = {"prefactor": math.exp(icpt), "delta": delta}
    if k is not None:
        extra["q_predicted"] = 2.0 - 2.0 / k
        extra["q_rel_error"] = abs(q / extra["q_predicted"] - 1)
    if a is not None:
        extra["prefactor_a"] = a**-2
        if b2 is not None:
            extra["prefactor_b2_a"] = -b2 * a**-2
    return FitReport(fitted_value=q, window=(float(t.min()), float(t.max())), residual=rms,
                     sensitivity=sens, low_confidence=bool(sens > tol * abs(q)), extra=extra)


# --------------------------------------------------------------------------
# composite model


@dataclass(frozen=True)
class BlendSpec:
    """Interface placement for the composite model.

    ``rho_inner`` and ``rho_tip`` are the centers (in units of c on the rho
    scale) of the parabolic/intermediate and intermediate/tip transition
    zones; each zone spans ``width`` times its center. ``left_extent`` bounds
    the modeled left half for odd k, where only the outer formula applies.
    ``eps`` is the small constant that sets the widths of the region windows.
    """

    eps: float = 0.1
    rho_inner: float = 0.3
    rho_tip: float = 0.9
    width: float = 0.2
    left_extent: float = 1.0

    def __post_init__(self):
        if not 0 < self.width < 1:
            raise ValueError("width must lie in (0, 1)")
        if not 0 < self.rho_inner * (1 + self.width / 2) < self.rho_tip * (1 - self.width / 2):
            raise ValueError("the transition zones overlap")
        if not self.rho_tip * (1 + self.width / 2) < 1:
            raise ValueError("the tip transition must end before rho = c")
        if not (0 < self.eps < 1 and self.left_extent > 0):
            raise ValueError("eps must lie in (0, 1) and left_extent must be positive")

    def to_dict(self) -> dict:
        return {"eps": self.eps, "rho_inner": self.rho_inner, "rho_tip": self.rho_tip,
                "width": self.width, "left_extent": self.left_extent}


def smooth_step(u):
    """C-infinity step: 0 for u <= 0, 1 for u >= 1."""
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        f = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
        g = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
    return f / (f + g)


class CapArclength:
    """S(r) = int_0^r B^(-1/2): arclength from the pole of the soliton cap.

    Built once from a normalized profile. The table part uses five-point
    Gauss-Legendre on each table interval; below the first node the interior
    series is integrated, and beyond the last node the far-field series is
    integrated in closed form.
    """

    def __init__(self, profile):
        self.profile = profile
        r_in, r_out = profile.switch_radii
        nodes = profile.r_table[(profile.r_table >= r_in) & (profile.r_table <= r_out)]
        nodes = np.concatenate(([0.0], np.linspace(0, r_in, 41)[1:-1], nodes))
        x, wts = np.polynomial.legendre.leggauss(5)
        a, b = nodes[:-1], nodes[1:]
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        pts = mid[:, None] + half[:, None] * x[None, :]
        vals = profile(pts.ravel()).reshape(pts.shape) ** -0.5
        pieces = half * (vals @ wts)
        self.r_nodes = nodes
        self.S_nodes = np.concatenate(([0.0], np.cumsum(pieces)))
        self._spline = CubicSpline(nodes, self.S_nodes)
        self._inverse = CubicSpline(self.S_nodes, nodes)
        self.r_out = float(nodes[-1])
        self.S_out = float(self.S_nodes[-1])
        c = profile.series_outer
        self._alpha = c[1] / c[0]
        self._beta = c[2] / c[0]

    def _far(self, r):
        al, be = self._alpha, self._beta
        return 0.5 * r**2 - 0.5 * al * np.log(r) - 0.5 * (0.375 * al**2 - 0.5 * be) / r**2

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        inside = r <= self.r_out
        out = np.empty_like(r)
        out[inside] = self._spline(r[inside])
        far = r[~inside]
        out[~inside] = self.S_out + self._far(far) - self._far(self.r_out)
        return out

    def inverse(self, S):
        """r with S(r) = S, by Newton from a spline guess."""
        S = np.asarray(S, dtype=float)
        if np.any(S < 0):
            raise DomainError("cap arclength must be nonnegative")
        r = np.where(S <= self.S_out, self._inverse(np.minimum(S, self.S_out)),
                     np.sqrt(2 * np.maximum(S - self.S_out, 0) + self.r_out**2))
        r = np.maximum(r, 0.0)
        for _ in range(4):
            r = np.maximum(r - (self(r) - S) * np.sqrt(self.profile(r)), 0.0)
        return r


@dataclass(frozen=True)
class CompositeModel:
    """Blended four-zone profile psi(s, t), s measured from the neck.

    Branches: parabolic sqrt(2(n-1)theta)[1 + b_k theta^(k/2-1) h_k(sigma)];
    intermediate and outer share sqrt(2(n-1)(theta - (s/c)^k)); the tip is the
    soliton cap, psi = (a/Gamma) S^-1(Gamma (s_pole - s)/a), with the pole
    position chosen so the cap meets the square-root branch at the center of
    the tip transition zone.
    """

    constants: MatchingConstants
    T: float
    bryant: object
    blend: BlendSpec = field(default_factory=BlendSpec)
    cap_scale: float | None = None

    def __post_init__(self):
        if self.bryant.n != self.constants.n:
            raise ValueError("soliton profile dimension differs from the model's n")
        object.__setattr__(self, "_cap", CapArclength(self.bryant))

    @property
    def a(self) -> float:
        """Scale of the soliton cap: the matching constant unless overridden."""
        return self.constants.a if self.cap_scale is None else self.cap_scale

    # time-dependent scales
    def theta(self, t: float) -> float:
        th = self.T - t
        if not th > 0:
            raise DomainError(f"t = {t} is not before T = {self.T}")
        return th

    def Gamma(self, t: float) -> float:
        return float(self.constants.Gamma(self.theta(t)))

    def rho_scale(self, t: float) -> float:
        """s per unit rho."""
        return self.theta(t) ** (1.0 / self.constants.k)

    def tau_for_sigma(self, sigma_inner: float) -> float:
        """Smallest tau at which the inner transition starts beyond sigma_inner."""
        k, c = self.constants.k, self.constants.c
        lo = self.blend.rho_inner * (1 - self.blend.width / 2) * c
        return math.log(sigma_inner / lo) / (0.5 - 1.0 / k)

    def _zone(self, center: float) -> tuple[float, float]:
        w = self.blend.width / 2
        return center * (1 - w), center * (1 + w)

    def zones(self, t: float) -> dict:
        """Transition zones in s (right side) for time t."""
        c, sc = self.constants.c, self.rho_scale(t)
        return {"inner": self._zone(self.blend.rho_inner * c * sc),
                "tip": self._zone(self.blend.rho_tip * c * sc)}

    # branches
    def parabolic(self, s, t):
        mc = self.constants
        th = self.theta(t)
        sig = np.asarray(s, dtype=float) / math.sqrt(th)
        return math.sqrt(2 * (mc.n - 1) * th) * (1 + mc.b_k * th ** (mc.k / 2 - 1) * hermite(mc.k)(sig))

    def square_root(self, s, t):
        return np.sqrt(np.maximum(outer_profile_squared(s, t, self.constants, self.T), 0.0))

    def s_pole(self, t: float) -> float:
        mc = self.constants
        sb = self.blend.rho_tip * mc.c * self.rho_scale(t)
        G = self.Gamma(t)
        rb = G * float(self.square_root(sb, t)) / self.a
        return sb + self.a / G * float(self._cap(rb))

    def tip(self, d, t):
        """Cap radius at distance d >= 0 from the pole."""
        G = self.Gamma(t)
        return self.a / G * self._cap.inverse(G * np.asarray(d, dtype=float) / self.a)

    def domain(self, t: float) -> tuple[float, float]:
        sp = self.s_pole(t)
        if self.constants.k % 2 == 0:
            return -sp, sp
        return -self.blend.left_extent, sp

    def __call__(self, s, t):
        return composite_eval(self, s, t)

    def pole_curvature(self, t: float, gamma_probe: float = 1e-3) -> float:
        """lim (1 - Z)/psi^2 at the pole, with Z = B(gamma/a) on the cap."""
        G = self.Gamma(t)
        psi = gamma_probe / G
        return float((1.0 - self.bryant(gamma_probe / self.a)) / psi**2)

    def snapshot(self, t: float, density: float = 100.0, cap_nodes: int = 200) -> tuple[ProfileGrid, float]:
        """Closed profile sampled from the model, with the neck's frame arclength.

        Node spacing follows the local length scale (distance from the neck
        plus sqrt(theta), distance from each pole plus the cap size), divided
        by ``density``. For odd k a synthetic polynomial cap of odd form
        d + alpha d^3 + beta d^5 closes the left end at s = -left_extent with
        matching value and slope; it carries no asymptotic content.
        """
        return _snapshot(self, t, density, cap_nodes)


def composite_eval(model: CompositeModel, s, t: float):
    """Evaluate the blended profile at arclength(s) s from the neck."""
    mc = model.constants
    s_arr = np.asarray(s, dtype=float)
    lo, hi = model.domain(t)
    tol = 1e-12 * (hi - lo)
    if np.any(s_arr < lo - tol) or np.any(s_arr > hi + tol):
        raise DomainError(f"s outside the modeled range [{lo:.6g}, {hi:.6g}] at t = {t}")
    s_arr = np.clip(s_arr, lo, hi)
    even = mc.k % 2 == 0
    z = model.zones(t)
    a_in, b_in = z["inner"]
    a_tip, b_tip = z["tip"]
    dist = np.abs(s_arr)
    chi_in = smooth_step((dist - a_in) / (b_in - a_in))
    tip_side = dist if even else s_arr
    chi_tip = smooth_step((tip_side - a_tip) / (b_tip - a_tip))
    out = np.zeros_like(s_arr)

    m_p = chi_in < 1
    if np.any(m_p):
        out[m_p] += (1 - chi_in[m_p]) * model.parabolic(s_arr[m_p], t)
    m_q = (chi_in > 0) & (chi_tip < 1)
    if np.any(m_q):
        out[m_q] += chi_in[m_q] * (1 - chi_tip[m_q]) * model.square_root(s_arr[m_q], t)
    m_t = chi_tip > 0
    if np.any(m_t):
        sp = model.s_pole(t)
        d = np.maximum(sp - tip_side[m_t], 0.0)
        out[m_t] += chi_tip[m_t] * model.tip(d, t)
    return float(out) if out.ndim == 0 else out


def _left_cap(q0: float, q1: float):
    """Odd polynomial cap d + alpha d^3 + beta d^5 of length q0 with end slope q1."""
    length = q0
    beta = (q1 - 1.0) / (2 * length**4)
    alpha = -beta * length**2
    return length, lambda d: d + alpha * d**3 + beta * d**5


def _snapshot(model: CompositeModel, t: float, density: float, cap_nodes: int):
    mc = model.constants
    th = model.theta(t)
    lo, sp = model.domain(t)
    tip_len = model.a / model.Gamma(t)
    even = mc.k % 2 == 0
    if not even and model.zones(t)["inner"][1] >= model.blend.left_extent:
        raise DomainError("left_extent does not clear the inner transition zone")

    def spacing(s):
        h = (math.sqrt(th) + abs(s)) / density
        h = min(h, (sp - s + tip_len) / density)
        return max(h, 1e-3 * tip_len / density)

    # even k: walk out from the neck and mirror, so the grid is exactly symmetric
    nodes = [0.0 if even else lo]
    while True:
        h = spacing(nodes[-1])
        nxt = nodes[-1] + h
        if nxt >= sp - 0.5 * spacing(sp):
            break
        nodes.append(nxt)
    nodes.append(sp)
    s = np.array(nodes)
    psi = composite_eval(model, s, t)
    psi[-1] = 0.0
    if even:
        s = np.concatenate((-s[:0:-1], s))
        psi = np.concatenate((psi[:0:-1], psi))
    else:
        h = 1e-6 * model.blend.left_extent
        q0 = float(psi[0])
        q1 = float((model.square_root(lo + h, t) - model.square_root(lo - h, t)) / (2 * h))
        q1 = abs(q1)
        length, cap = _left_cap(q0, q1)
        d = np.linspace(0.0, length, cap_nodes)[:-1]
        s = np.concatenate((lo - length + d, s))
        psi = np.concatenate((cap(d), psi))
    s_total = s[-1] - s[0]
    x = -1.0 + 2.0 * (s - s[0]) / s_total
    x[0], x[-1] = -1.0, 1.0
    phi = np.full_like(x, 0.5 * s_total)
    grid = ProfileGrid(mc.n, x, phi, psi, t, meta={"source": "composite"})
    s_mid = s[0] + 0.5 * s_total
    return grid, -s_mid


# --------------------------------------------------------------------------
# PDE residual of the model


REGIONS = ("parabolic", "intermediate", "outer", "tip")


@dataclass(frozen=True)
class ModelResidual:
    """Residual of the arclength-gauge evolution on a set of points.

    ``residual`` is psi_t - psi_ss + (n-1)(1 - psi_s^2)/psi + n psi_s J, with
    psi_t taken at fixed distance from the neck and J(s) = int_0^s psi_ss/psi
    (the drift of arclength along the flow). ``scale`` is the largest of the
    individual terms at each point.
    """

    t: float
    s: np.ndarray
    residual: np.ndarray
    scale: np.ndarray
    terms: dict

    def relative(self) -> float:
        """sup |residual| over sup scale: the region-local nondimensional size."""
        return float(np.max(np.abs(self.residual)) / np.max(self.scale))


def _length_scale(model: CompositeModel, s: np.ndarray, t: float) -> np.ndarray:
    th = model.theta(t)
    lo, sp = model.domain(t)
    tip_len = model.a / model.Gamma(t)
    ell = np.minimum(math.sqrt(th) + np.abs(s), sp - s + tip_len)
    if model.constants.k % 2 == 0:
        ell = np.minimum(ell, s - lo + tip_len)
    return ell


def _first_two(model: CompositeModel, s: np.ndarray, t: float, ds_rel: float):
    lo, sp = model.domain(t)
    h = ds_rel * _length_scale(model, s, t)
    h = np.minimum(h, 0.5 * np.minimum(sp - s, s - lo))
    f0 = composite_eval(model, s, t)
    fp = composite_eval(model, s + h, t)
    fm = composite_eval(model, s - h, t)
    return f0, (fp - fm) / (2 * h), (fp - 2 * f0 + fm) / h**2


def _drift_integral(model: CompositeModel, s: np.ndarray, t: float, ds_rel: float,
                    density: float = 400.0) -> np.ndarray:
    """J(s) = int_0^s psi_ss/psi by the trapezoid rule on a graded auxiliary grid.

    The integrand is -K, which stays finite at the pole, so it is integrated
    directly rather than by parts.
    """
    out = np.zeros_like(s)
    th = model.theta(t)
    for sign in (1.0, -1.0):
        sel = sign * s > 0
        if not np.any(sel):
            continue
        far = float(np.max(sign * s[sel]))
        u = [0.0]
        while u[-1] < far:
            ell = float(_length_scale(model, np.array([sign * u[-1]]), t)[0])
            u.append(min(u[-1] + max(ell, 1e-6 * math.sqrt(th)) / density, far))
        u = np.array(u)
        f, _, fss = _first_two(model, sign * u, t, ds_rel)
        g = fss / f
        cum = np.concatenate(([0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * np.diff(u))))
        out[sel] = sign * np.interp(sign * s[sel], u, cum)
    return out


def pde_residual(model: CompositeModel, t: float, s, ds_rel: float = 1e-3, dt_rel: float = 1e-5,
                 spike_ratio: float = 50.0) -> ModelResidual:
    """Evaluate the evolution residual of the composite profile at points s.

    Derivatives are centered differences: in s with a step proportional to
    the local length scale, in t with a step proportional to T - t. A
    ``BlendWidthWarning`` is issued when the residual inside a transition zone
    exceeds ``spike_ratio`` times the largest residual outside the zones.
    """
    mc = model.constants
    s = np.atleast_1d(np.asarray(s, dtype=float))
    th = model.theta(t)
    dt = dt_rel * th
    psi, psi_s, psi_ss = _first_two(model, s, t, ds_rel)
    psi_t = (composite_eval(model, s, t + dt) - composite_eval(model, s, t - dt)) / (2 * dt)
    J = _drift_integral(model, s, t, ds_rel)
    reaction = (mc.n - 1) * (1 - psi_s**2) / psi
    drift = mc.n * psi_s * J
    res = psi_t - psi_ss + reaction + drift
    scale = np.max(np.abs(np.vstack([psi_t, psi_ss, reaction, drift])), axis=0)
    z = model.zones(t)
    dist = np.abs(s) if mc.k % 2 == 0 else s
    in_zone = np.zeros_like(s, dtype=bool)
    for lo_z, hi_z in z.values():
        in_zone |= ((np.abs(s) >= lo_z) & (np.abs(s) <= hi_z)) if lo_z == z["inner"][0] else \
            ((dist >= lo_z) & (dist <= hi_z))
    rel = np.abs(res) / scale
    if np.any(in_zone) and np.any(~in_zone):
        if rel[in_zone].max() > spike_ratio * rel[~in_zone].max():
            warnings.warn("residual spikes inside a transition zone; consider wider blends",
                          BlendWidthWarning, stacklevel=2)
    return ModelResidual(t=t, s=s, residual=res, scale=scale,
                         terms={"psi": psi, "psi_t": psi_t, "psi_s": psi_s, "psi_ss": psi_ss,
                                "reaction": reaction, "drift": drift})


def region_windows(model: CompositeModel, t: float) -> dict:
    """s-intervals of the four regions at time t, between the transition zones.

    parabolic: eps sqrt(T-t) up to the inner zone; intermediate: between the
    zones; outer: on the left, the square-root branch beyond the inner zone
    (out to 3c(T-t)^(1/k) for odd k, up to the mirrored tip zone for even k);
    tip: from the tip zone to the pole.
    """
    mc, bl = model.constants, model.blend
    th = model.theta(t)
    z = model.zones(t)
    lo, sp = model.domain(t)
    left = max(0.98 * lo, -3 * mc.c * model.rho_scale(t)) if mc.k % 2 else -z["tip"][0]
    return {
        "parabolic": (bl.eps * math.sqrt(th), z["inner"][0]),
        "intermediate": (z["inner"][1], z["tip"][0]),
        "outer": (left, -z["inner"][1]),
        "tip": (z["tip"][1], sp),
    }


def region_points(model: CompositeModel, t: float, points: int = 200) -> dict:
    out = {}
    tip_len = model.a / model.Gamma(t)
    for name, (lo, hi) in region_windows(model, t).items():
        if hi <= lo:
            out[name] = np.empty(0)
        elif name == "tip":
            d = np.geomspace(1e-3 * tip_len, hi - lo, points)
            out[name] = np.sort(hi - d)
        else:
            out[name] = np.linspace(lo, hi, points)
    return out


def tip_equation_residual(model: CompositeModel, t: float, s, ds_rel: float = 1e-3,
                          dt_rel: float = 1e-5) -> ModelResidual:
    """Residual of z_t = F_psi[z] for z = psi_s^2 with psi as the radial coordinate.

    This form carries no arclength gauge, so cap translation drops out. With
    z_psi = 2 psi_ss and z_psipsi = 2 psi_sss / psi_s, the operator needs
    three s-derivatives; z_t at fixed psi is 2 psi_s psi_st - 2 psi_ss psi_t.
    ``scale`` is the largest of z_t and the four operator terms.
    """
    n = model.constants.n
    s = np.atleast_1d(np.asarray(s, dtype=float))
    lo, sp = model.domain(t)
    h = ds_rel * _length_scale(model, s, t)
    h = np.minimum(h, 0.25 * np.minimum(sp - s, s - lo))
    dt = dt_rel * model.theta(t)

    def derivs(tt):
        f = [composite_eval(model, s + j * h, tt) for j in (-2, -1, 0, 1, 2)]
        d1 = (f[3] - f[1]) / (2 * h)
        d2 = (f[3] - 2 * f[2] + f[1]) / h**2
        d3 = (f[4] - 2 * f[3] + 2 * f[1] - f[0]) / (2 * h**3)
        return f[2], d1, d2, d3

    psi, ps, pss, psss = derivs(t)
    _, ps_p, _, _ = derivs(t + dt)
    _, ps_m, _, _ = derivs(t - dt)
    psi_t = (composite_eval(model, s, t + dt) - composite_eval(model, s, t - dt)) / (2 * dt)
    z = ps**2
    z_psi = 2 * pss
    z_psipsi = 2 * psss / ps
    terms = np.vstack([z * z_psipsi, -0.5 * z_psi**2, (n - 1 - z) * z_psi / psi,
                       2 * (n - 1) * (1 - z) * z / psi**2])
    z_t = 2 * ps * (ps_p - ps_m) / (2 * dt) - 2 * pss * psi_t
    res = z_t - terms.sum(axis=0)
    scale = np.max(np.abs(np.vstack([terms, z_t])), axis=0)
    return ModelResidual(t=t, s=s, residual=res, scale=scale,
                         terms={"psi": psi, "z": z, "z_t": z_t, "F": terms.sum(axis=0)})


def region_residuals(model: CompositeModel, t: float, points: int = 200, **kw) -> dict:
    """Region-local nondimensional residual for each of the four regions.

    The extra key ``tip_z`` is the gauge-free tip measure from
    :func:`tip_equation_residual` on the same tip points.
    """
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BlendWidthWarning)
        for name, s in region_points(model, t, points).items():
            out[name] = pde_residual(model, t, s, **kw).relative() if s.size else math.nan
            if name == "tip":
                out["tip_z"] = tip_equation_residual(model, t, s).relative() if s.size else math.nan
    return out
