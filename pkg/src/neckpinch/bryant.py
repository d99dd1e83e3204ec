"""Steady soliton profile for the tip region.

The profile B(r) solves F_r[B] = 0 with B(0) = 1 and B -> 0 at infinity. We
integrate the ODE once from a small radius, read off the far-field coefficient
and rescale r so that r^2 B(r) -> 1.

Internally the ODE is written for w = r^2 z against u = log r:

    w w'' = w'^2/2 + 4 w w' - (8 - 2n) w^2 - (n-1) e^{2u} w'

which keeps the unknown of order one at both ends. The far field is stiff
(a fast mode decays like exp(-(n-1) r^2 / (2 c2))), so an implicit method is used.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import PchipInterpolator

from .frames import FitReport, TipFrame

FORMAT_VERSION = 1
R_IN = 0.05
R_MAX = 100.0


class SeriesRangeError(ValueError):
    """Series evaluated where its terms do not decrease."""


class BryantSolveError(RuntimeError):
    """Integration left (0, 1) or the far-field coefficient did not settle."""


def F_apply(n: int, r, z, z_r, z_rr):
    """F_r[z] = r^-2 { r^2 z z_rr - (r z_r)^2/2 + (n-1-z) r z_r + 2(n-1)(1-z) z }."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("F is defined for r > 0")
    rz = r * z_r
    return (r * r * z * z_rr - 0.5 * rz * rz + (n - 1 - z) * rz + 2 * (n - 1) * (1 - z) * z) / (r * r)


# --------------------------------------------------------------------------
# series


def inner_coefficients(n: int, b2: float) -> tuple[float, float, float, float]:
    """Coefficients of 1, r^2, r^4, r^6 near the origin."""
    return (1.0, b2, n / (n + 3) * b2**2, n * (n - 1) / ((n + 3) * (n + 5)) * b2**3)


def outer_coefficients(n: int, c2: float) -> tuple[float, float, float]:
    """Coefficients of r^-2, r^-4, r^-6 at infinity."""
    return (c2, (4 - n) / (n - 1) * c2**2, (n - 4) * (n - 7) / (n - 1) ** 2 * c2**3)


def _check_terms(terms: np.ndarray, where: str):
    # consecutive non-zero terms must shrink
    mags = np.abs(terms)
    for j in range(1, mags.shape[0]):
        prev, cur = mags[j - 1], mags[j]
        bad = (prev > 0) & (cur >= prev)
        if np.any(bad):
            raise SeriesRangeError(f"{where} series does not converge at the requested radius")


def series_inner(n: int, b2: float, r, check: bool = True):
    r = np.asarray(r, dtype=float)
    c = inner_coefficients(n, b2)
    terms = np.array([cj * r ** (2 * j) for j, cj in enumerate(c)])
    if check:
        _check_terms(terms[1:], "interior")
    return terms.sum(axis=0)


def series_inner_dr(n: int, b2: float, r):
    r = np.asarray(r, dtype=float)
    c = inner_coefficients(n, b2)
    return sum(2 * j * cj * r ** (2 * j - 1) for j, cj in enumerate(c) if j)


def series_outer(n: int, c2: float, r, check: bool = True):
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise SeriesRangeError("far-field series needs r > 0")
    c = outer_coefficients(n, c2)
    terms = np.array([cj * r ** (-2 * (j + 1)) for j, cj in enumerate(c)])
    if check:
        _check_terms(terms, "far-field")
    return terms.sum(axis=0)


# --------------------------------------------------------------------------
# profile


@dataclass(frozen=True)
class BryantProfile:
    n: int
    r_table: np.ndarray
    B_table: np.ndarray
    b2_used: float
    c2_measured: float
    switch_radii: tuple[float, float]
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("r_table", "B_table"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "_interp", PchipInterpolator(self.r_table, self.B_table))

    @property
    def normalization(self) -> float:
        """Scale rho with B(r) = z_raw(r / rho)."""
        return 1.0 / math.sqrt(self.c2_measured)

    @property
    def b2(self) -> float:
        """Interior coefficient of the normalized profile."""
        return self.b2_used * self.c2_measured

    @property
    def series_inner(self) -> tuple[float, ...]:
        return inner_coefficients(self.n, self.b2)

    @property
    def series_outer(self) -> tuple[float, ...]:
        return outer_coefficients(self.n, 1.0)

    def __call__(self, r):
        return bryant_eval(self, r)

    def derivative(self, r):
        """dB/dr, from the series tails or the table interpolant."""
        r = np.asarray(r, dtype=float)
        r_in, r_out = self.switch_radii
        out = np.asarray(self._interp(np.clip(r, r_in, r_out), 1), dtype=float)
        inner = r < r_in
        outer = r > r_out
        if np.any(inner):
            out = np.where(inner, series_inner_dr(self.n, self.b2, r), out)
        if np.any(outer):
            c = self.series_outer
            rr = np.where(outer, r, 1.0)
            d = sum(-2 * (j + 1) * cj * rr ** (-2 * j - 3) for j, cj in enumerate(c))
            out = np.where(outer, d, out)
        return out


def bryant_eval(profile: BryantProfile, r):
    """B(r): interior series, monotone cubic through the table, far-field series."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("r must be non-negative")
    r_in, r_out = profile.switch_radii
    out = np.asarray(profile._interp(np.clip(r, r_in, r_out)), dtype=float)
    inner = r < r_in
    outer = r > r_out
    if np.any(inner):
        out = np.where(inner, series_inner(profile.n, profile.b2, r, check=False), out)
    if np.any(outer):
        out = np.where(outer, series_outer(profile.n, 1.0, np.where(outer, r, 1.0), check=False), out)
    return out if out.ndim else float(out)


def _rhs(n):
    def f(u, y):
        w, wu = y
        e = (n - 1) * math.exp(2 * u)
        return [wu, (0.5 * wu * wu + 4 * w * wu - (8 - 2 * n) * w * w - e * wu) / w]

    def jac(u, y):
        w, wu = y
        e = (n - 1) * math.exp(2 * u)
        num = 0.5 * wu * wu + 4 * w * wu - (8 - 2 * n) * w * w - e * wu
        return [[0.0, 1.0], [(4 * wu - 2 * (8 - 2 * n) * w) / w - num / w**2, (wu + 4 * w - e) / w]]

    return f, jac


def _richardson(r: np.ndarray, w: np.ndarray) -> float:
    """Limit of w = c + A r^-2 + B r^-4 through three samples."""
    M = np.vstack([np.ones(3), r**-2.0, r**-4.0]).T
    return float(np.linalg.solve(M, w)[0])


def solve_bryant(n: int, tol: float = 1e-8, b2: float = -1.0, points_per_unit: int = 500,
                 rtol: float = 3e-14) -> BryantProfile:
    """Integrate the profile ODE and normalize the far field to r^-2.

    Launch radius and r_max scale with 1/sqrt(-b2) (0.05 and 100 at b2 = -1),
    so every member of the scaling family is sampled on the same normalized nodes.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    if b2 >= 0:
        raise ValueError("interior coefficient b2 must be negative")
    scale = 1.0 / math.sqrt(-b2)
    r0, r_max = R_IN * scale, R_MAX * scale
    z0 = float(series_inner(n, b2, r0))
    z0r = float(series_inner_dr(n, b2, r0))
    y0 = [r0 * r0 * z0, 2 * r0 * r0 * z0 + r0**3 * z0r]
    f, jac = _rhs(n)
    sol = solve_ivp(f, (math.log(r0), math.log(r_max)), y0, method="LSODA", jac=jac,
                    rtol=rtol, atol=rtol * 1e-2, dense_output=True)
    if sol.status != 0:
        raise BryantSolveError(f"integration failed: {sol.message}")
    u = sol.t
    z = sol.y[0] * np.exp(-2 * u)
    if np.any(z <= 0) or np.any(z > 1 + 1e-12):
        i = int(np.flatnonzero((z <= 0) | (z > 1 + 1e-12))[0])
        raise BryantSolveError(f"z left (0, 1] at r={math.exp(u[i]):.4g}")
    probe = r_max / np.array([8.0, 4.0, 2.0, 1.0])
    wp = sol.sol(np.log(probe))[0]
    c_lo = _richardson(probe[:3], wp[:3])
    c_hi = _richardson(probe[1:], wp[1:])
    drift = abs(c_hi - c_lo) / c_hi
    if drift > 1e-8:
        raise BryantSolveError(f"far-field coefficient unsettled (relative change {drift:.2e}); r_max too small")
    c2 = c_hi
    rho = 1.0 / math.sqrt(c2)
    r_in, r_out = r0 * rho, r_max * rho
    m = int(round(math.log(r_out / r_in) * points_per_unit)) + 1
    r_norm = np.geomspace(r_in, r_out, m)
    r_norm[0], r_norm[-1] = r_in, r_out
    u_raw = np.log(r_norm / rho)
    u_raw[0], u_raw[-1] = math.log(r0), math.log(r_max)
    B = sol.sol(u_raw)[0] * np.exp(-2 * u_raw)
    B[0] = z0
    r2B = r_norm**2 * B
    diag = {
        "far_field_drift": drift,
        # r^2 B overshoots 1 for n < 4; only the far tail is checked, with rounding slack
        "r2B_peak": [float(r_norm[np.argmax(r2B)]), float(np.max(r2B))],
        "r2B_tail_monotone": bool(np.all(np.diff(r2B[r_norm > 5]) <= 1e-12)
                                  or np.all(np.diff(r2B[r_norm > 5]) >= -1e-12)),
        "steps": int(sol.t.size),
    }
    prof = BryantProfile(n, r_norm, B, b2, c2, (float(r_in), float(r_out)), diag)
    if np.any(np.diff(B) >= 0):
        raise BryantSolveError("profile table is not strictly decreasing")
    res = table_residual(prof)
    diag["ode_residual"] = res
    diag["residual_ok"] = bool(res < tol)
    return prof


def _log_derivatives(f: np.ndarray, h: float):
    """First and second derivatives on a uniform grid, sixth-order central stencils."""
    d1 = (-f[:-6] + 9 * f[1:-5] - 45 * f[2:-4] + 45 * f[4:-2] - 9 * f[5:-1] + f[6:]) / (60 * h)
    d2 = (2 * f[:-6] - 27 * f[1:-5] + 270 * f[2:-4] - 490 * f[3:-3] + 270 * f[4:-2]
          - 27 * f[5:-1] + 2 * f[6:]) / (180 * h * h)
    return d1, d2


def _residual_on(profile: BryantProfile, stride: int) -> tuple[np.ndarray, np.ndarray]:
    u = np.log(profile.r_table)[::stride]
    z = profile.B_table[::stride]
    h = float(np.mean(np.diff(u)))
    zu, zuu = _log_derivatives(z, h)
    zc = z[3:-3]
    r = np.exp(u[3:-3])
    # r z_r = z_u and r^2 z_rr = z_uu - z_u
    F = (zc * (zuu - zu) - 0.5 * zu * zu + (profile.n - 1 - zc) * zu
         + 2 * (profile.n - 1) * (1 - zc) * zc) / (r * r)
    return r, F


def table_residual(profile: BryantProfile, split: float = 0.2) -> float:
    """max |F_r[B]| on the table, derivatives rebuilt from the table in log r.

    Sixth-order differences in log r. Below r = ``split`` the r^-2 factor
    amplifies rounding, so a spacing of 0.04 is used there; beyond it 0.01
    keeps truncation error small.
    """
    h0 = float(np.mean(np.diff(np.log(profile.r_table))))
    r_c, F_c = _residual_on(profile, max(1, int(round(0.04 / h0))))
    r_f, F_f = _residual_on(profile, max(1, int(round(0.01 / h0))))
    worst = max(np.max(np.abs(F_c[r_c < split]), initial=0.0),
                np.max(np.abs(F_f[r_f >= split]), initial=0.0))
    return float(worst)


# --------------------------------------------------------------------------
# tip comparison


def compare_tip(tip: TipFrame, profile: BryantProfile, a: float, gamma_max: float = 2.0,
                fit_a: bool = False, a_predicted: float | None = None) -> FitReport:
    """sup and rms of |Z(gamma) - B(gamma/a)| over 0 <= gamma <= gamma_max."""
    warn = tip.gamma_max < 1.0
    hi = min(gamma_max, tip.gamma_max)
    sel = tip.gamma <= hi
    g, Z = tip.gamma[sel], tip.Z[sel]
    if g.size == 0:
        raise ValueError("tip frame has no samples in the requested window")
    dev = np.abs(Z - bryant_eval(profile, g / a))
    extra = {"sup": float(np.max(dev)), "rms": float(np.sqrt(np.mean(dev**2))),
             "a_used": a, "gamma_max_covered": tip.gamma_max, "insufficient_coverage": warn}
    if a_predicted is not None:
        extra["a_predicted"] = a_predicted
    if fit_a:
        from scipy.optimize import minimize_scalar

        res = minimize_scalar(lambda aa: float(np.mean((Z - bryant_eval(profile, g / aa)) ** 2)),
                              bounds=(a / 10, a * 10), method="bounded", options={"xatol": 1e-10})
        extra["a_best"] = float(res.x)
        extra["rms_best"] = float(math.sqrt(res.fun))
    return FitReport(fitted_value=extra["sup"], window=(0.0, float(hi)), residual=extra["rms"],
                     low_confidence=warn, extra=extra)


# --------------------------------------------------------------------------
# text table


def dump_bryant(profile: BryantProfile, path: str | Path | None = None) -> str:
    lines = [f"# neckpinch bryant profile v{FORMAT_VERSION}", f"version={FORMAT_VERSION}",
             f"n={profile.n}", f"b2_used={profile.b2_used!r}", f"c2_measured={profile.c2_measured!r}",
             f"r_in={profile.switch_radii[0]!r}", f"r_out={profile.switch_radii[1]!r}",
             f"nodes={profile.r_table.size}", "r B"]
    lines += [f"{a!r} {b!r}" for a, b in zip(profile.r_table.tolist(), profile.B_table.tolist())]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_bryant(text: str) -> BryantProfile:
    header: dict[str, str] = {}
    rows = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#") or line == "r B":
            continue
        if "=" in line:
            k, v = line.split("=", 1)
            header[k.strip()] = v.strip()
        else:
            rows.append([float(v) for v in line.split()])
    missing = [k for k in ("n", "b2_used", "c2_measured", "r_in", "r_out", "nodes") if k not in header]
    if missing:
        raise ValueError(f"bryant table missing header fields {missing}")
    if int(header.get("version", FORMAT_VERSION)) > FORMAT_VERSION:
        raise ValueError("unsupported bryant table version")
    data = np.array(rows, dtype=float)
    if data.shape != (int(header["nodes"]), 2):
        raise ValueError(f"expected {header['nodes']} rows of 'r B', got {data.shape}")
    return BryantProfile(int(header["n"]), data[:, 0], data[:, 1], float(header["b2_used"]),
                         float(header["c2_measured"]), (float(header["r_in"]), float(header["r_out"])))


def load_bryant(path: str | Path) -> BryantProfile:
    return parse_bryant(Path(path).read_text())
