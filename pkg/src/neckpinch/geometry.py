"""Rotationally symmetric metrics g = phi^2 dx^2 + psi^2 g_can on S^{n+1}.

The profile is stored on a fixed grid x in [-1, 1] with the poles at the two
endpoints.  Arclength derivatives are taken on the fly, d/ds = (1/phi) d/dx,
using ghost nodes (odd extension of psi, even extension of phi) at the poles.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
PSI_SAFE_FLOOR = 1e-300


class InvalidMetricError(ValueError):
    pass


class SingularProfileError(ValueError):
    pass


class InvalidFamilyError(ValueError):
    pass


@dataclass(frozen=True)
class ProfileGrid:
    n: int
    x: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    t: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        phi = np.asarray(self.phi, dtype=float)
        psi = np.asarray(self.psi, dtype=float)
        for arr in (x, phi, psi):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "psi", psi)
        if self.n < 2:
            raise InvalidMetricError(f"fiber dimension n must be >= 2, got {self.n}")
        if not (x.shape == phi.shape == psi.shape) or x.ndim != 1 or x.size < 5:
            raise InvalidMetricError("x, phi, psi must be 1-d arrays of equal length >= 5")
        if x[0] != -1.0 or x[-1] != 1.0 or np.any(np.diff(x) <= 0):
            raise InvalidMetricError("x must increase strictly from -1 to 1")
        if not np.all(np.isfinite(phi)) or np.any(phi <= 0):
            raise InvalidMetricError("phi must be finite and positive everywhere")
        if psi[0] != 0.0 or psi[-1] != 0.0:
            raise InvalidMetricError("psi must vanish at the poles x = +-1")
        if not np.all(np.isfinite(psi)):
            raise InvalidMetricError("psi contains non-finite values")

    @property
    def size(self) -> int:
        return self.x.size

    @property
    def uniform(self) -> bool:
        h = np.diff(self.x)
        return bool(np.allclose(h, h[0], rtol=1e-12, atol=0.0))

    def mirrored(self) -> ProfileGrid:
        """Reflection x -> -x."""
        return ProfileGrid(self.n, -self.x[::-1], self.phi[::-1], self.psi[::-1], self.t)

    def replace(self, **kw) -> ProfileGrid:
        d = dict(n=self.n, x=self.x, phi=self.phi, psi=self.psi, t=self.t, meta=self.meta)
        d.update(kw)
        return ProfileGrid(**d)


@dataclass(frozen=True)
class ArclengthFrame:
    s: np.ndarray
    s_total: float

    @property
    def s_left(self) -> float:
        return float(self.s[0])

    @property
    def s_right(self) -> float:
        return float(self.s[-1])


@dataclass(frozen=True)
class CurvatureField:
    """Sectional and Ricci curvatures at every node.

    Pole entries are one-sided limits (even extrapolation of the interior
    values); there K = L.
    """

    K: np.ndarray
    L: np.ndarray
    R: np.ndarray
    ricci_radial: np.ndarray
    ricci_spherical: np.ndarray
    psi_s: np.ndarray
    psi_ss: np.ndarray

    @property
    def K_right_pole(self) -> float:
        return float(self.K[-1])

    @property
    def K_left_pole(self) -> float:
        return float(self.K[0])

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(self.K)), np.max(np.abs(self.L))))


@dataclass(frozen=True)
class ExtremaReport:
    necks: list[tuple[float, float]]
    bumps: list[tuple[float, float]]
    s_hat: float | None
    flat_points: list[float]

    def to_dict(self) -> dict:
        return {
            "necks": [list(p) for p in self.necks],
            "bumps": [list(p) for p in self.bumps],
            "s_hat": self.s_hat,
            "flat_points": list(self.flat_points),
        }


class FamilyId(str, Enum):
    DUMBBELL = "dumbbell"
    PERTURBED_SPHERE = "perturbed_sphere"
    CUSTOM_TABLE = "custom_table"


DEFAULT_SHAPE = {
    "waist": 0.1,
    "cap": 1.0,
    "neck_position": 0.0,
    "neck_width": 0.9,
    "asymmetry": 0.0,
    "amplitude": 0.0,
}


@dataclass(frozen=True)
class InitialFamily:
    family_id: FamilyId
    lam: float = 0.0
    shape: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "family_id", FamilyId(self.family_id))
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidFamilyError(f"lambda must lie in [0, 1], got {self.lam}")

    def param(self, key):
        return self.shape.get(key, DEFAULT_SHAPE.get(key))

    def with_lambda(self, lam: float) -> InitialFamily:
        return InitialFamily(self.family_id, lam, dict(self.shape))


# --------------------------------------------------------------------------
# finite differences


def _ghosted(x: np.ndarray, phi: np.ndarray, psi: np.ndarray):
    """Extend by one ghost node per pole: psi odd, phi even."""
    xg = np.concatenate(([2 * x[0] - x[1]], x, [2 * x[-1] - x[-2]]))
    phig = np.concatenate(([phi[1]], phi, [phi[-2]]))
    psig = np.concatenate(([-psi[1]], psi, [-psi[-2]]))
    return xg, phig, psig


def arclength_derivatives(x: np.ndarray, phi: np.ndarray, psi: np.ndarray):
    """Return (psi_s, psi_ss) at every node; second order on smooth grids."""
    xg, phig, psig = _ghosted(x, phi, psi)
    hp = xg[2:] - xg[1:-1]
    hm = xg[1:-1] - xg[:-2]
    fp, f0, fm = psig[2:], psig[1:-1], psig[:-2]
    psi_x = (hm**2 * fp - hp**2 * fm - (hm**2 - hp**2) * f0) / (hp * hm * (hp + hm))
    phi0 = phig[1:-1]
    phi_p = 0.5 * (phig[2:] + phi0)
    phi_m = 0.5 * (phig[:-2] + phi0)
    flux_p = (fp - f0) / (phi_p * hp)
    flux_m = (f0 - fm) / (phi_m * hm)
    psi_ss = 2.0 * (flux_p - flux_m) / (phi0 * (hp + hm))
    return psi_x / phi0, psi_ss


def _pole_limit(values: np.ndarray, x: np.ndarray) -> tuple[float, float]:
    """Even extrapolation to both poles from the first two interior nodes."""
    out = []
    for i1, i2, xp in ((1, 2, x[0]), (-2, -3, x[-1])):
        d1, d2 = (x[i1] - xp) ** 2, (x[i2] - xp) ** 2
        out.append((d2 * values[i1] - d1 * values[i2]) / (d2 - d1))
    return out[0], out[1]


# --------------------------------------------------------------------------
# operations


def arclength(grid: ProfileGrid) -> ArclengthFrame:
    """Arclength s(x) = int_0^x phi, composite trapezoid, s(0) = 0."""
    if np.any(grid.phi <= 0):
        raise InvalidMetricError("phi must be positive")
    x, phi = grid.x, grid.phi
    cum = np.concatenate(([0.0], np.cumsum(0.5 * (phi[1:] + phi[:-1]) * np.diff(x))))
    # exact integral of the piecewise-linear phi up to x = 0
    j = int(np.searchsorted(x, 0.0, side="right"))
    xl = x[j - 1]
    phi0 = phi[j - 1] + (phi[j] - phi[j - 1]) * (0.0 - xl) / (x[j] - xl)
    s0 = cum[j - 1] + 0.5 * (phi[j - 1] + phi0) * (0.0 - xl)
    s = cum - s0
    return ArclengthFrame(s=s, s_total=float(s[-1] - s[0]))


def curvatures(grid: ProfileGrid) -> CurvatureField:
    psi = grid.psi
    interior = psi[1:-1]
    if np.any(interior <= PSI_SAFE_FLOOR):
        i = int(np.argmin(interior)) + 1
        raise SingularProfileError(f"psi vanishes at interior node {i} (x={grid.x[i]:.6g})")
    psi_s, psi_ss = arclength_derivatives(grid.x, grid.phi, psi)
    n = grid.n
    K = np.empty_like(psi)
    L = np.empty_like(psi)
    K[1:-1] = -psi_ss[1:-1] / interior
    L[1:-1] = (1.0 - psi_s[1:-1] ** 2) / interior**2
    K[0], K[-1] = _pole_limit(K, grid.x)
    # at a smooth pole the two sectional curvatures coincide; L's own stencil
    # loses accuracy there, so use K
    L[0], L[-1] = K[0], K[-1]
    R = 2 * n * K + n * (n - 1) * L
    return CurvatureField(
        K=K, L=L, R=R,
        ricci_radial=n * K,
        ricci_spherical=K + (n - 1) * L,
        psi_s=psi_s, psi_ss=psi_ss,
    )


def scalar_curvature_direct(grid: ProfileGrid) -> np.ndarray:
    """R = [-2n psi psi_ss + n(n-1)(1 - psi_s^2)] / psi^2 on interior nodes."""
    psi_s, psi_ss = arclength_derivatives(grid.x, grid.phi, grid.psi)
    p = grid.psi[1:-1]
    n = grid.n
    return (-2 * n * p * psi_ss[1:-1] + n * (n - 1) * (1 - psi_s[1:-1] ** 2)) / p**2


def _refine(s3, f3):
    """Vertex of the parabola through three points; falls back to the middle."""
    (s0, s1, s2), (f0, f1, f2) = s3, f3
    denom = (s0 - s1) * (s0 - s2) * (s1 - s2)
    a = (s2 * (f1 - f0) + s1 * (f0 - f2) + s0 * (f2 - f1)) / denom
    b = (s2**2 * (f0 - f1) + s1**2 * (f2 - f0) + s0**2 * (f1 - f2)) / denom
    if a == 0:
        return s1, f1
    sv = -b / (2 * a)
    if not (min(s0, s2) <= sv <= max(s0, s2)):
        return s1, f1
    c = f0 - a * s0**2 - b * s0
    return sv, a * sv**2 + b * sv + c


def detect_extrema(grid: ProfileGrid, frame: ArclengthFrame | None = None,
                   flat_tol: float = 1e-3) -> ExtremaReport:
    if frame is None:
        frame = arclength(grid)
    s, psi = frame.s, grid.psi
    d = np.sign(np.diff(psi))
    necks, bumps = [], []
    # walk sign runs; zero-difference plateaus are attached to the extremum
    i = 0
    m = d.size
    prev_sign = d[0]
    while i < m:
        if d[i] == 0:
            j = i
            while j < m and d[j] == 0:
                j += 1
            nxt = d[j] if j < m else 0
            if prev_sign != 0 and nxt != 0 and nxt != prev_sign:
                nodes = np.arange(i, j + 1)
                w = psi[nodes]
                loc = float(np.sum(w * s[nodes]) / np.sum(w)) if np.sum(w) > 0 else float(s[nodes].mean())
                (bumps if prev_sign > 0 else necks).append((loc, float(psi[i])))
            i = j
            continue
        if prev_sign != 0 and d[i] != prev_sign:
            k = i  # node k is the extremum
            loc, val = _refine(s[k - 1:k + 2], psi[k - 1:k + 2])
            (bumps if prev_sign > 0 else necks).append((float(loc), float(val)))
        prev_sign = d[i]
        i += 1
    psi_s, _ = arclength_derivatives(grid.x, grid.phi, psi)
    flat = [float(v) for v in s[1:-1][np.abs(psi_s[1:-1]) < flat_tol]]
    s_hat = bumps[-1][0] if bumps else None
    return ExtremaReport(necks=necks, bumps=bumps, s_hat=s_hat, flat_points=flat)


# --------------------------------------------------------------------------
# initial data


def _from_shape_function(G, dG, R: float, n: int, resolution: int, t: float = 0.0) -> ProfileGrid:
    """psi = R cos(pi x/2) G(u), u = sin(pi x/2); phi^2 = psi_x^2 + (R pi/2)^2 cos^2(pi x/2).

    Any smooth positive G of u gives a profile that is odd about each pole with
    psi_s = -+1 there, and L = (1 - psi_s^2)/psi^2 > 0 everywhere.  G = 1 is the
    round sphere of radius R.
    """
    x = np.linspace(-1.0, 1.0, resolution)
    c = np.cos(0.5 * np.pi * x)
    c[0] = c[-1] = 0.0
    u = np.sin(0.5 * np.pi * x)
    du = 0.5 * np.pi * c
    g = G(u)
    psi = R * c * g
    psi_x = R * (-0.5 * np.pi * u * g + c * dG(u) * du)
    phi = np.sqrt(psi_x**2 + (0.5 * np.pi * R * c) ** 2)
    psi[0] = psi[-1] = 0.0
    if np.any(psi[1:-1] <= 0):
        raise InvalidFamilyError("shape parameters give psi <= 0 in the interior")
    return ProfileGrid(n=n, x=x, phi=phi, psi=psi, t=t)


def make_initial(fam: InitialFamily, resolution: int, n: int) -> ProfileGrid:
    if resolution < 100:
        raise InvalidFamilyError("resolution must be >= 100")
    if fam.family_id is FamilyId.CUSTOM_TABLE:
        path = fam.param("path")
        if path is None:
            raise InvalidFamilyError("custom_table family needs shape['path']")
        return load_profile(path)
    R = float(fam.param("cap"))
    if R <= 0:
        raise InvalidFamilyError("cap radius must be positive")
    if fam.family_id is FamilyId.PERTURBED_SPHERE:
        amp = float(fam.param("amplitude"))
        if amp <= -1.0:
            raise InvalidFamilyError("amplitude must exceed -1")
        return _from_shape_function(lambda u: 1.0 + amp * (1 - u**2),
                                    lambda u: -2.0 * amp * u, R, n, resolution)

    waist = float(fam.param("waist"))
    x0 = float(fam.param("neck_position"))
    w = float(fam.param("neck_width"))
    beta0 = float(fam.param("asymmetry"))
    if not -1.0 < x0 < 1.0 or w <= 0 or not -1.0 < beta0 < 1.0:
        raise InvalidFamilyError("need |neck_position| < 1, neck_width > 0, |asymmetry| < 1")
    u0 = np.sin(0.5 * np.pi * x0)
    base = R * np.cos(0.5 * np.pi * x0) * (1 + beta0 * u0)
    A0 = 1.0 - waist / base
    if not 0.0 <= A0 < 1.0:
        raise InvalidFamilyError(f"waist {waist} incompatible with cap {R} at neck_position {x0}")
    A = (1.0 - fam.lam) * A0
    beta = (1.0 - fam.lam) * beta0

    def G(u):
        return (1 + beta * u) * (1 - A * np.exp(-(((u - u0) / w) ** 2)))

    def dG(u):
        e = np.exp(-(((u - u0) / w) ** 2))
        return beta * (1 - A * e) + (1 + beta * u) * A * e * 2 * (u - u0) / w**2

    return _from_shape_function(G, dG, R, n, resolution)


def round_sphere(n: int, resolution: int, radius: float = 1.0) -> ProfileGrid:
    return make_initial(InitialFamily(FamilyId.PERTURBED_SPHERE, 0.0, {"cap": radius}), resolution, n)


@dataclass(frozen=True)
class AssumptionReport:
    positive_L: bool
    positive_ricci_on_caps: bool
    positive_R: bool
    has_neck: bool
    left_cap_end: float | None
    right_cap_start: float | None

    @property
    def conditions_1_to_3(self) -> bool:
        return self.positive_L and self.positive_ricci_on_caps and self.positive_R

    def to_dict(self) -> dict:
        return {
            "L_positive": self.positive_L,
            "ricci_positive_on_caps": self.positive_ricci_on_caps,
            "R_positive": self.positive_R,
            "has_neck": self.has_neck,
            "left_cap_end_s": self.left_cap_end,
            "right_cap_start_s": self.right_cap_start,
        }


def check_assumptions(grid: ProfileGrid) -> AssumptionReport:
    frame = arclength(grid)
    cf = curvatures(grid)
    ext = detect_extrema(grid, frame)
    s = frame.s
    if ext.bumps:
        left_end, right_start = ext.bumps[0][0], ext.bumps[-1][0]
    else:
        left_end = right_start = None
    if left_end is None:
        caps = np.ones_like(s, dtype=bool)
    else:
        caps = (s <= left_end) | (s >= right_start)
    ricci_ok = bool(np.all(cf.ricci_radial[caps] > 0) and np.all(cf.ricci_spherical[caps] > 0))
    return AssumptionReport(
        positive_L=bool(np.all(cf.L > 0)),
        positive_ricci_on_caps=ricci_ok,
        positive_R=bool(np.all(cf.R > 0)),
        has_neck=bool(ext.necks),
        left_cap_end=left_end,
        right_cap_start=right_start,
    )


# --------------------------------------------------------------------------
# text table format


def dump_profile(grid: ProfileGrid, path: str | Path | None = None) -> str:
    lines = [f"# neckpinch profile v{FORMAT_VERSION}", f"version={FORMAT_VERSION}",
             f"n={grid.n}", f"t={grid.t!r}", f"nodes={grid.size}"]
    for k, v in sorted(grid.meta.items()):
        lines.append(f"{k}={float(v)!r}" if isinstance(v, (float, np.floating)) else f"{k}={v}")
    lines.append("x phi psi")
    lines += [f"{a!r} {b!r} {c!r}" for a, b, c in zip(grid.x.tolist(), grid.phi.tolist(), grid.psi.tolist())]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_profile(text: str) -> ProfileGrid:
    header: dict[str, str] = {}
    rows = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#") or line == "x phi psi":
            continue
        if "=" in line:
            k, v = line.split("=", 1)
            header[k.strip()] = v.strip()
        else:
            rows.append([float(v) for v in line.split()])
    for key in ("n", "t", "nodes"):
        if key not in header:
            raise InvalidMetricError(f"profile table missing header field '{key}'")
    version = int(header.pop("version", FORMAT_VERSION))
    if version > FORMAT_VERSION:
        raise InvalidMetricError(f"unsupported profile format version {version}")
    data = np.array(rows, dtype=float)
    nodes = int(header.pop("nodes"))
    if data.shape != (nodes, 3):
        raise InvalidMetricError(f"expected {nodes} rows of 'x phi psi', got {data.shape}")
    n = int(header.pop("n"))
    t = float(header.pop("t"))
    meta = {}
    for k, v in header.items():
        try:
            meta[k] = float(v)
        except ValueError:
            meta[k] = v
    return ProfileGrid(n=n, x=data[:, 0], phi=data[:, 1], psi=data[:, 2], t=t, meta=meta)


def load_profile(path: str | Path) -> ProfileGrid:
    return parse_profile(Path(path).read_text())
