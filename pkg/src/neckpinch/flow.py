"""Explicit integration of the rotationally symmetric Ricci flow system.

    psi_t = psi_ss - (n-1)(1 - psi_s^2)/psi
    phi_t = n (psi_ss/psi) phi

on the fixed x-grid of :mod:`neckpinch.geometry`, with classical RK4 in time.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import minimize_scalar

from . import _kernels
from .geometry import (
    ArclengthFrame,
    ExtremaReport,
    InitialFamily,
    ProfileGrid,
    arclength,
    arclength_derivatives,
    curvatures,
    detect_extrema,
    make_initial,
)

log = logging.getLogger(__name__)


class SingularStep(Exception):
    """psi dropped below the floor at an interior node during a step."""

    def __init__(self, index: int, x: float, psi: float):
        super().__init__(f"psi={psi:.3e} below floor at node {index} (x={x:.6g})")
        self.index = index
        self.x = x
        self.psi = psi


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    cfl_safety: float = 0.2
    K_stop: float = 1e6
    psi_floor: float = 1e-8
    t_horizon: float = math.inf
    snapshot_factor: float = 2.0
    snapshot_dt: float = math.inf
    max_steps: int = 50_000_000
    stop_on_neck_loss: bool = False

    def __post_init__(self):
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must lie in (0, 1]")
        if self.K_stop <= 0:
            raise ValueError("K_stop must be positive")
        if self.snapshot_factor <= 1:
            raise ValueError("snapshot_factor must exceed 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Snapshot:
    grid: ProfileGrid
    frame: ArclengthFrame
    extrema: ExtremaReport
    psi_min: float | None
    psi_min_s: float | None
    psi_max: float
    K_pole: float
    K_max: float
    K_max_s: float
    slope_gap: float
    step: int

    @property
    def t(self) -> float:
        return self.grid.t

    def diagnostics(self) -> dict:
        return {
            "t": self.t,
            "step": self.step,
            "psi_min": self.psi_min,
            "psi_min_s": self.psi_min_s,
            "psi_max": self.psi_max,
            "K_pole": self.K_pole,
            "K_max": self.K_max,
            "K_max_s": self.K_max_s,
            "s_left": self.frame.s_left,
            "s_right": self.frame.s_right,
            "slope_gap": self.slope_gap,
            "extrema": self.extrema.to_dict(),
        }


class SingularityKind(str, Enum):
    INTERIOR_NECKPINCH = "InteriorNeckpinch"
    POLAR_DEGENERATE = "PolarDegenerateCandidate"
    TOTAL_SHRINK = "TotalShrink"
    NONE = "NoneBeforeHorizon"


@dataclass
class SingularityReport:
    kind: SingularityKind
    T_est: float | None
    T_est_method: str
    location_s: float | None
    evidence: dict = field(default_factory=dict)
    stop_reason: str = ""
    aborted: bool = False
    low_confidence: bool = False

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "T_est": self.T_est,
            "T_est_method": self.T_est_method,
            "location_s": self.location_s,
            "evidence": self.evidence,
            "stop_reason": self.stop_reason,
            "aborted": self.aborted,
            "low_confidence": self.low_confidence,
        }


# --------------------------------------------------------------------------
# time stepping


def pole_phi(x: np.ndarray, psi: np.ndarray) -> tuple[float, float]:
    """phi at both poles from the regularity condition |psi_s| = 1.

    psi is odd about each pole, so psi = a*d + b*d^3 is fitted through the
    first two interior nodes (d = distance to the pole); a is psi_x there.
    """
    out = []
    for i1, i2, xp in ((1, 2, x[0]), (-2, -3, x[-1])):
        d1, d2 = abs(x[i1] - xp), abs(x[i2] - xp)
        out.append((psi[i1] * d2**3 - psi[i2] * d1**3) / (d1 * d2**3 - d2 * d1**3))
    return out[0], out[1]


def _one_sided(f: np.ndarray, x: np.ndarray, backward: bool) -> np.ndarray:
    """Second-order one-sided first derivative at every node of an extended array."""
    out = np.full(f.shape, np.nan)
    if backward:
        h1 = x[2:] - x[1:-1]
        h2 = x[1:-1] - x[:-2]
        f0, f1, f2 = f[2:], f[1:-1], f[:-2]
        out[2:] = ((2 * h1 + h2) / (h1 * (h1 + h2)) * f0 - (h1 + h2) / (h1 * h2) * f1
                   + h1 / (h2 * (h1 + h2)) * f2)
    else:
        h1 = x[1:-1] - x[:-2]
        h2 = x[2:] - x[1:-1]
        f0, f1, f2 = f[:-2], f[1:-1], f[2:]
        out[:-2] = -((2 * h1 + h2) / (h1 * (h1 + h2)) * f0 - (h1 + h2) / (h1 * h2) * f1
                     + h1 / (h2 * (h1 + h2)) * f2)
    return out


def _upwind_psi_ss(x: np.ndarray, phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """psi_ss = psi_xx/phi^2 - psi_x phi_x/phi^3 with phi_x differenced upwind.

    In the phi equation, phi is transported with x-velocity proportional to
    psi_x, away from the poles and necks. Centered differencing of that
    transport is unstable next to a pole, where the speed grows like 1/d.
    """
    m = x.size
    # two ghost nodes per side: psi odd, phi even about each pole
    xe = np.concatenate((2 * x[0] - x[2:0:-1], x, 2 * x[-1] - x[-2:-4:-1]))
    pe = np.concatenate((phi[2:0:-1], phi, phi[-2:-4:-1]))
    qe = np.concatenate((-psi[2:0:-1], psi, -psi[-2:-4:-1]))
    j = np.arange(m) + 2
    hp = xe[j + 1] - xe[j]
    hm = xe[j] - xe[j - 1]
    fp, f0, fm = qe[j + 1], qe[j], qe[j - 1]
    psi_x = (hm**2 * fp - hp**2 * fm - (hm**2 - hp**2) * f0) / (hp * hm * (hp + hm))
    psi_xx = 2.0 * ((fp - f0) / hp - (f0 - fm) / hm) / (hp + hm)
    back = _one_sided(pe, xe, True)[j]
    fwd = _one_sided(pe, xe, False)[j]
    phi_x = np.where(psi_x > 0, back, fwd)
    return psi_xx / phi**2 - psi_x * phi_x / phi**3


def _rhs(x, phi, psi, n):
    phi = phi.copy()
    phi[0], phi[-1] = pole_phi(x, psi)
    psi_s, psi_ss = arclength_derivatives(x, phi, psi)
    dpsi = np.zeros_like(psi)
    inner = psi[1:-1]
    dpsi[1:-1] = psi_ss[1:-1] - (n - 1) * (1.0 - psi_s[1:-1] ** 2) / inner
    dphi = np.zeros_like(phi)
    dphi[1:-1] = n * _upwind_psi_ss(x, phi, psi)[1:-1] / inner * phi[1:-1]
    return dphi, dpsi


def rhs_reference(x, phi, psi, n):
    """Numpy form of the compiled right-hand side (used for cross-checks)."""
    return _rhs(x, phi, psi, n)


def step(grid: ProfileGrid, dt: float, psi_floor: float = 1e-8) -> ProfileGrid:
    """One RK4 step of the coupled (phi, psi) system."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    phi, psi, bad = _kernels.rk4_step(grid.x, grid.phi, grid.psi, float(grid.n), dt, psi_floor)
    if bad >= 0:
        raise SingularStep(bad, float(grid.x[bad]), float(psi[bad]))
    return ProfileGrid(grid.n, grid.x, phi, psi, grid.t + dt)


def _dt(x, phi, curv_max, cfl):
    ds_min = float(np.min(np.minimum(phi[:-1], phi[1:]) * np.diff(x)))
    return cfl * min(0.5 * ds_min**2, 1.0 / max(curv_max, 1.0))


def choose_dt(grid: ProfileGrid, cfg: SolverConfig, curv_max: float | None = None) -> float:
    """Diffusive limit on the smallest arclength cell, capped by 1/curvature."""
    if curv_max is None:
        curv_max = curvatures(grid).max_abs()
    return _dt(grid.x, grid.phi, curv_max, cfg.cfl_safety)


def _nyquist_ratio(psi: np.ndarray) -> float:
    d2 = np.diff(psi[1:-1], 2)
    d4 = np.diff(d2, 2)
    return float(np.max(np.abs(d4)) / (np.max(np.abs(d2)) + 1e-300))


def make_snapshot(grid: ProfileGrid, step_index: int = 0, flat_tol: float = 1e-3) -> Snapshot:
    frame = arclength(grid)
    cf = curvatures(grid)
    ext = detect_extrema(grid, frame, flat_tol)
    if ext.necks:
        s_min, p_min = min(ext.necks, key=lambda p: p[1])
    else:
        s_min = p_min = None
    curv = np.maximum(np.abs(cf.K), np.abs(cf.L))
    imax = int(np.argmax(curv))
    gap = float(np.min(1.0 - cf.psi_s[1:-1] ** 2))
    return Snapshot(grid=grid, frame=frame, extrema=ext, psi_min=p_min, psi_min_s=s_min,
                    psi_max=float(np.max(grid.psi)), K_pole=cf.K_right_pole,
                    K_max=float(curv[imax]), K_max_s=float(frame.s[imax]),
                    slope_gap=gap, step=step_index)


@dataclass
class RunResult:
    snapshots: list[Snapshot]
    report: SingularityReport
    steps: int


def evolve(grid: ProfileGrid, cfg: SolverConfig = SolverConfig(),
           on_snapshot=None) -> RunResult:
    """Integrate until curvature reaches K_stop, psi hits the floor, or the horizon.

    ``on_snapshot`` (optional) is called with each Snapshot as it is taken.
    """
    snaps = [make_snapshot(grid, 0)]
    if on_snapshot:
        on_snapshot(snaps[0])
    last_snap_curv = snaps[0].K_max
    last_snap_t = grid.t
    had_neck = bool(snaps[0].extrema.necks)
    stop_reason = "max_steps"
    aborted = False
    x, n = grid.x, float(grid.n)
    phi, psi, t = grid.phi, grid.psi, grid.t
    g = grid
    k = 0
    curv = _kernels.max_curvature(x, phi, psi)
    for k in range(1, cfg.max_steps + 1):
        if curv >= cfg.K_stop:
            stop_reason = "K_stop"
            break
        dt = _dt(x, phi, curv, cfg.cfl_safety)
        if t + dt >= cfg.t_horizon:
            dt = cfg.t_horizon - t
            if dt <= 0:
                stop_reason = "horizon"
                break
        new_phi, new_psi, bad = _kernels.rk4_step(x, phi, psi, n, dt, cfg.psi_floor)
        if bad >= 0:
            v = new_psi[bad]
            if np.isfinite(v) and np.isfinite(new_phi[bad]) and new_phi[bad] > 0:
                stop_reason = "psi_floor"
            else:
                stop_reason = "instability"
                aborted = True
            log.info("evolve stopped at node %d (x=%.6g): psi=%.3e", bad, x[bad], v)
            break
        phi, psi, t = new_phi, new_psi, t + dt
        curv = _kernels.max_curvature(x, phi, psi)
        if curv >= cfg.snapshot_factor * last_snap_curv or t - last_snap_t >= cfg.snapshot_dt:
            g = ProfileGrid(grid.n, x, phi, psi, t)
            snap = make_snapshot(g, k)
            snaps.append(snap)
            if on_snapshot:
                on_snapshot(snap)
            if _nyquist_ratio(psi) > 3.0:
                stop_reason = "instability"
                aborted = True
                break
            last_snap_curv = snap.K_max
            last_snap_t = t
            if cfg.stop_on_neck_loss and had_neck and not snap.extrema.necks:
                stop_reason = "neck_lost"
                break
        if t >= cfg.t_horizon:
            stop_reason = "horizon"
            break
    if snaps[-1].grid.t != t:
        try:
            g = ProfileGrid(grid.n, x, phi, psi, t)
            snap = make_snapshot(g, k)
            snaps.append(snap)
            if on_snapshot:
                on_snapshot(snap)
        except ValueError:
            pass
    if len(snaps) >= 3:
        report = classify(snaps, stop_reason=stop_reason)
    else:
        report = SingularityReport(SingularityKind.NONE, None, "none", None,
                                   {"snapshots": len(snaps)}, stop_reason=stop_reason)
    report.aborted = report.aborted or aborted
    if aborted:
        report.evidence["aborted_settings"] = {"nodes": grid.size, "cfl_safety": cfg.cfl_safety}
    return RunResult(snapshots=snaps, report=report, steps=k)


# --------------------------------------------------------------------------
# classification and singular-time estimation


def _interior_neck_evidence(last: Snapshot) -> dict:
    ext = last.extrema
    s_neck = last.psi_min_s
    left = [b for b in ext.bumps if b[0] < s_neck]
    right = [b for b in ext.bumps if b[0] > s_neck]
    return {
        "psi_neck": last.psi_min,
        "s_neck": s_neck,
        "left_bump_psi": left[-1][1] if left else None,
        "right_bump_psi": right[0][1] if right else None,
        "dist_to_right_pole": last.frame.s_right - s_neck,
        "dist_to_left_pole": s_neck - last.frame.s_left,
    }


def classify(snapshots: list[Snapshot], stop_reason: str = "") -> SingularityReport:
    if len(snapshots) < 3:
        raise PreconditionError("classify needs at least 3 snapshots")
    first, last = snapshots[0], snapshots[-1]
    blew_up = stop_reason in ("K_stop", "psi_floor") or last.K_max > 100 * max(first.K_max, 1.0)
    shrink_ratio = last.psi_max / first.psi_max
    ev: dict = {
        "shrink_ratio": shrink_ratio,
        "K_max_growth": last.K_max / max(first.K_max, 1e-300),
        "K_pole_share": last.K_pole / last.K_max,
        "K_max_s": last.K_max_s,
        "s_right": last.frame.s_right,
        "slope_gap": last.slope_gap,
    }
    kind = SingularityKind.NONE
    location = None
    if blew_up:
        if shrink_ratio < 0.2 and last.psi_max**2 * last.K_max < 50:
            kind = SingularityKind.TOTAL_SHRINK
            location = None
        elif last.psi_min is not None:
            nev = _interior_neck_evidence(last)
            ev.update(nev)
            # the interpolated minimum can undershoot on coarse grids; the node
            # values bound it from below, and locations are only known to a few cells
            p = max(last.psi_min, float(np.min(last.grid.psi[1:-1])))
            i_neck = int(np.argmin(np.abs(last.frame.s - nev["s_neck"])))
            ds = float(np.max(np.diff(last.frame.s[max(i_neck - 2, 0):i_neck + 3])))
            bumps = [b for b in (nev["left_bump_psi"], nev["right_bump_psi"]) if b is not None]
            right_b = nev["right_bump_psi"]
            neck_is_max = abs(last.K_max_s - nev["s_neck"]) < max(10 * p, 3 * ds)
            if right_b is not None and right_b < 3 * p and last.K_pole > 0.1 * last.K_max:
                kind = SingularityKind.POLAR_DEGENERATE
                location = last.frame.s_right
            elif neck_is_max and bumps and min(bumps) > 3 * p and min(nev["dist_to_right_pole"], nev["dist_to_left_pole"]) > 3 * p:
                kind = SingularityKind.INTERIOR_NECKPINCH
                location = nev["s_neck"]
        # a sharpening cap, as opposed to a round shrink (checked above)
        if kind is SingularityKind.NONE and last.K_pole > 0.5 * last.K_max and \
                (shrink_ratio >= 0.2 or last.psi_max**2 * last.K_pole >= 50):
            kind = SingularityKind.POLAR_DEGENERATE
            location = last.frame.s_right
    if kind is SingularityKind.POLAR_DEGENERATE:
        ev.update(_polar_evidence(snapshots))
    report = SingularityReport(kind=kind, T_est=None, T_est_method="none", location_s=location,
                               evidence=ev, stop_reason=stop_reason)
    if kind is not SingularityKind.NONE:
        try:
            fit = estimate_T(snapshots, kind)
            report.T_est = fit.T
            report.T_est_method = fit.method
            report.low_confidence = fit.low_confidence
            report.evidence.update(fit.extra)
        except PreconditionError as exc:
            report.evidence["T_fit_error"] = str(exc)
            report.low_confidence = True
    return report


def _polar_evidence(snapshots: list[Snapshot]) -> dict:
    hats = [(s.t, s.extrema.s_hat, s.frame.s_right) for s in snapshots if s.extrema.s_hat is not None]
    out = {}
    if hats:
        out["s_hat_gap_first"] = hats[0][2] - hats[0][1]
        out["s_hat_gap_last"] = hats[-1][2] - hats[-1][1]
    return out


@dataclass
class TFit:
    T: float
    method: str
    low_confidence: bool
    extra: dict


def _line_fit(t, y):
    A = np.vstack([t, np.ones_like(t)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * t + icpt)
    return slope, icpt, float(np.sqrt(np.mean(resid**2)))


def _fit_power_to_zero(t: np.ndarray, y: np.ndarray, window: int):
    """Fit y = A (T - t) on the last `window` samples; returns (T, slope, rel_rms)."""
    t, y = t[-window:], y[-window:]
    slope, icpt, rms = _line_fit(t, y)
    T = -icpt / slope if slope != 0 else math.nan
    return T, slope, rms / max(np.max(np.abs(y)), 1e-300)


def estimate_T(snapshots: list[Snapshot], kind: SingularityKind, window: int = 5,
               rel_rms_tol: float = 0.02) -> TFit:
    if len(snapshots) < window:
        raise PreconditionError(f"estimate_T needs >= {window} snapshots, got {len(snapshots)}")
    t = np.array([s.t for s in snapshots])
    if kind is SingularityKind.INTERIOR_NECKPINCH:
        vals = [s.psi_min for s in snapshots]
        keep = np.array([v is not None for v in vals])
        if keep.sum() < window:
            raise PreconditionError("too few snapshots with a neck")
        y = np.array([v for v in vals if v is not None]) ** 2
        T, slope, rel = _fit_power_to_zero(t[keep], y, window)
        return TFit(T, "psi_min_squared_linear", rel > rel_rms_tol,
                    {"psi_min_sq_slope": slope, "fit_rel_rms": rel})
    if kind is SingularityKind.TOTAL_SHRINK:
        y = np.array([s.psi_max for s in snapshots]) ** 2
        T, slope, rel = _fit_power_to_zero(t, y, window)
        return TFit(T, "psi_max_squared_linear", rel > rel_rms_tol,
                    {"psi_max_sq_slope": slope, "fit_rel_rms": rel})
    if kind is SingularityKind.POLAR_DEGENERATE:
        K = np.array([s.K_pole for s in snapshots])
        tw, Kw = t[-window:], K[-window:]
        if np.any(Kw <= 0):
            raise PreconditionError("non-positive pole curvature in fit window")

        def rel_rms(q):
            y = Kw ** (-1.0 / q)
            _, _, rms = _line_fit(tw, y)
            return rms / np.max(y)

        res = minimize_scalar(rel_rms, bounds=(0.5, 3.0), method="bounded",
                              options={"xatol": 1e-6})
        q = float(res.x)
        y = Kw ** (-1.0 / q)
        slope, icpt, _ = _line_fit(tw, y)
        T = -icpt / slope
        return TFit(T, "K_pole_power_free_q", float(res.fun) > rel_rms_tol,
                    {"q_fit": q, "fit_rel_rms": float(res.fun)})
    raise PreconditionError(f"no singular-time estimate for kind {kind.value}")


# --------------------------------------------------------------------------
# critical parameter search


@dataclass
class SearchResult:
    lam_star: float
    lam_lo: float
    lam_hi: float
    kind_lo: SingularityKind
    kind_hi: SingularityKind
    run_lo: RunResult
    run_hi: RunResult
    history: list[dict]


_PINCH = {SingularityKind.INTERIOR_NECKPINCH}
_NOPINCH = {SingularityKind.TOTAL_SHRINK, SingularityKind.NONE}


def critical_search(fam: InitialFamily, lam_lo: float, lam_hi: float, iters: int,
                    cfg: SolverConfig, resolution: int, n: int, run=None) -> SearchResult:
    """Bisection in the family parameter between a neckpinch and a non-pinching run."""
    run = run or (lambda lam: evolve(make_initial(fam.with_lambda(lam), resolution, n), cfg))
    r_lo, r_hi = run(lam_lo), run(lam_hi)
    k_lo, k_hi = r_lo.report.kind, r_hi.report.kind

    def side(kind):
        if kind in _PINCH:
            return "pinch"
        if kind in _NOPINCH:
            return "nopinch"
        return "other"

    if {side(k_lo), side(k_hi)} != {"pinch", "nopinch"}:
        raise PreconditionError(
            f"invalid bracket: lambda_lo={lam_lo} -> {k_lo.value}, lambda_hi={lam_hi} -> {k_hi.value}")
    side_lo = side(k_lo)
    history = []
    for i in range(iters):
        mid = 0.5 * (lam_lo + lam_hi)
        r_mid = run(mid)
        k_mid = r_mid.report.kind
        history.append({"iter": i, "lambda": mid, "kind": k_mid.value, "T_est": r_mid.report.T_est})
        log.info("bisection %d: lambda=%.12f -> %s", i, mid, k_mid.value)
        # a degenerate candidate still pinches; keep it on the pinch side
        m = "pinch" if side(k_mid) == "other" else side(k_mid)
        if m == side_lo:
            lam_lo, r_lo, k_lo = mid, r_mid, k_mid
        else:
            lam_hi, r_hi, k_hi = mid, r_mid, k_mid
    return SearchResult(0.5 * (lam_lo + lam_hi), lam_lo, lam_hi, k_lo, k_hi, r_lo, r_hi, history)
