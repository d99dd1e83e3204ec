"""Command-line driver: simulate, analyze, bryant, formal, search.

Every command resolves its settings as schema defaults, then an optional INI
config file, then command-line flags (flags mirror the config keys), echoes
the resolved settings into ``manifest.json`` and lists every file it wrote
there. Reports are JSON with sorted keys; tables are CSV with fixed precision.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bryant import BryantSolveError, compare_tip, dump_bryant, solve_bryant, table_residual
from .flow import (
    PreconditionError,
    SingularityKind,
    SolverConfig,
    critical_search,
    estimate_T,
    evolve,
    make_snapshot,
)
from .geometry import (
    FamilyId,
    InitialFamily,
    InvalidFamilyError,
    InvalidMetricError,
    arclength,
    dump_profile,
    load_profile,
    make_initial,
    round_sphere,
)
from .hermite import TruncationError, project, sigma_max_for
from .regions import (
    REGIONS,
    BlendSpec,
    CompositeModel,
    blowup_fit,
    fit_c,
    fit_dominant_mode,
    matching_constants,
    pde_residual,
    region_points,
    region_residuals,
    to_intermediate,
    to_parabolic,
    to_tip,
)

log = logging.getLogger("neckpinch")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PRECONDITION = 0, 2, 3, 4
CSV_FMT = "{:.12e}"


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration schema

REQUIRED = object()


def _floats(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    if ":" in text:
        lo, hi, step = (float(v) for v in text.split(":"))
        count = int(round((hi - lo) / step)) + 1
        return [lo + i * step for i in range(count)]
    return [float(v) for v in text.split(",")]


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {"n": (int, REQUIRED), "nodes": (int, 800), "seed": (int, 0)},
    "family": {
        "name": (str, "dumbbell"), "lambda": (float, 0.0), "waist": (float, 0.1),
        "cap": (float, 1.0), "neck_position": (float, 0.0), "neck_width": (float, 0.9),
        "asymmetry": (float, 0.0), "amplitude": (float, 0.0), "path": (str, ""),
    },
    "solver": {
        "cfl_safety": (float, 0.2), "K_stop": (float, 1e6), "psi_floor": (float, 1e-8),
        "t_horizon": (float, math.inf), "snapshot_factor": (float, 2.0),
        "snapshot_dt": (float, math.inf), "max_steps": (int, 50_000_000),
        "stop_on_neck_loss": (_bool, False),
    },
    "analysis": {
        "T_est": (_opt_float, None), "k": (_opt_int, None), "k_max": (int, 6),
        "tau_min": (float, 1.0), "gamma_max": (float, 2.0), "points": (int, 3201),
        "min_nodes": (int, 40),
    },
    "formal": {
        "k": (int, 3), "c": (float, 1.0), "T": (float, 1.0), "tau": (_floats, [4.0, 5.0, 6.0, 7.0, 8.0]),
        "snapshot_tau": (_floats, []), "eps": (float, 0.1), "rho_inner": (float, 0.3),
        "rho_tip": (float, 0.9), "width": (float, 0.2), "left_extent": (float, 1.0),
        "points": (int, 200),
    },
    "bryant": {"tol": (float, 1e-8)},
    "search": {"lo": (float, 0.0), "hi": (float, 1.0), "iters": (int, 20)},
}

COMMAND_SECTIONS = {
    "simulate": ("run", "family", "solver"),
    "analyze": ("analysis",),
    "bryant": ("run", "bryant"),
    "formal": ("run", "formal"),
    "search": ("run", "family", "solver", "search"),
}

# values used when no config file is given (the file schema still requires them)
FLAG_DEFAULTS = {("run", "n"): 2}


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"\[(.+)\]$", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(rf"{re.escape(key)}\s*[=:]", line):
            return i
    return None


def _where(path: str, text: str, section: str, key: str | None = None) -> str:
    line = _line_of(text, section, key)
    return f"{path}:{line}" if line else path


def load_config(path: str | None, sections: tuple[str, ...]) -> tuple[dict, set]:
    """Parse an INI file against the schema; returns (values, keys given in the file)."""
    values = {s: {} for s in sections}
    given: set = set()
    if path is None:
        return values, given
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = p.read_text()
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for sec in cp.sections():
        if sec not in sections:
            raise ConfigError(f"{_where(path, text, sec)}: unknown section [{sec}] "
                              f"(expected one of {', '.join(sections)})")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{_where(path, text, sec, key)}: unknown field '{key}' in [{sec}]")
            parser = SCHEMA[sec][key][0]
            try:
                values[sec][key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"{_where(path, text, sec, key)}: field '{key}' in [{sec}]: {exc}") from exc
            given.add((sec, key))
    for sec in sections:
        for key, (_, default) in SCHEMA[sec].items():
            if default is REQUIRED and (sec, key) not in given:
                raise ConfigError(f"{path}: missing required field '{key}' in [{sec}]")
    return values, given


def resolve(args: argparse.Namespace, command: str) -> dict:
    sections = COMMAND_SECTIONS[command]
    values, _ = load_config(getattr(args, "config", None), sections)
    out = {}
    for sec in sections:
        out[sec] = {}
        for key, (parser, default) in SCHEMA[sec].items():
            flag = getattr(args, f"{sec}__{key}", None)
            if flag is not None:
                try:
                    out[sec][key] = parser(flag) if isinstance(flag, str) else flag
                except ValueError as exc:
                    raise ConfigError(f"--{_flag(key)}: {exc}") from exc
            elif key in values[sec]:
                out[sec][key] = values[sec][key]
            elif default is REQUIRED:
                if (sec, key) in FLAG_DEFAULTS:
                    out[sec][key] = FLAG_DEFAULTS[(sec, key)]
                else:
                    raise ConfigError(f"missing required field '{key}' in [{sec}]")
            else:
                out[sec][key] = default
    return out


def _flag(key: str) -> str:
    return key.replace("_", "-")


# --------------------------------------------------------------------------
# output helpers


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str, bool)):
        return obj.value
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


@dataclass
class RunManifest:
    command: str
    config_echo: dict
    seed: int = 0
    artifact_index: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    status: str = "ok"
    out_dir: Path = Path(".")

    def write_text(self, rel: str, text: str, role: str) -> Path:
        path = self.out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.artifact_index.append({"path": rel, "role": role})
        return path

    def write_json(self, rel: str, obj, role: str) -> Path:
        return self.write_text(rel, dumps(obj), role)

    def write_csv(self, rel: str, header: list[str], columns: list, role: str) -> Path:
        rows = [",".join(header)]
        for row in zip(*columns):
            rows.append(",".join(v if isinstance(v, str) else CSV_FMT.format(float(v)) for v in row))
        return self.write_text(rel, "\n".join(rows) + "\n", role)

    def phase(self, name: str):
        manifest = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                manifest.timing[name] = round(time.perf_counter() - self.t0, 6)
                return False

        return _Timer()

    def save(self) -> Path:
        path = self.out_dir / "manifest.json"
        self.out_dir.mkdir(parents=True, exist_ok=True)
        body = {"command": self.command, "config_echo": self.config_echo, "seed": self.seed,
                "artifact_index": self.artifact_index + [{"path": "manifest.json", "role": "manifest"}],
                "timing": self.timing, "status": self.status, "version": __version__}
        path.write_text(dumps(body))
        return path


# --------------------------------------------------------------------------
# simulate


def _family(cfg: dict) -> tuple[str, InitialFamily | None]:
    fam = cfg["family"]
    name = fam["name"]
    if name == "sphere":
        return name, None
    try:
        fid = FamilyId(name)
    except ValueError as exc:
        raise ConfigError(f"unknown family '{name}' (sphere, dumbbell, perturbed_sphere, custom_table)") from exc
    shape = {k: v for k, v in fam.items() if k not in ("name", "lambda", "path")}
    if fam["path"]:
        shape["path"] = fam["path"]
    return name, InitialFamily(fid, fam["lambda"], shape)


def _initial(cfg: dict, lam: float | None = None):
    name, fam = _family(cfg)
    n, nodes = cfg["run"]["n"], cfg["run"]["nodes"]
    if fam is None:
        return round_sphere(n, nodes, cfg["family"]["cap"])
    if lam is not None:
        fam = fam.with_lambda(lam)
    return make_initial(fam, nodes, n)


def _solver(cfg: dict) -> SolverConfig:
    return SolverConfig(**cfg["solver"])


def _t_fit(run) -> dict:
    kind = run.report.kind
    if kind is SingularityKind.NONE:
        return {}
    try:
        fit = estimate_T(run.snapshots, kind)
    except PreconditionError as exc:
        return {"skipped": str(exc)}
    return {"T": fit.T, "method": fit.method, "low_confidence": fit.low_confidence, **fit.extra}


def _write_run(manifest: RunManifest, run, prefix: str = "") -> dict:
    lines = []
    for i, snap in enumerate(run.snapshots):
        manifest.write_text(f"{prefix}snapshots/snap_{i:04d}.txt", dump_profile(snap.grid), "snapshot")
        lines.append(json.dumps(_jsonable(snap.diagnostics()), sort_keys=True))
    manifest.write_text(f"{prefix}diagnostics.jsonl", "\n".join(lines) + "\n", "diagnostics")
    report = run.report.to_dict()
    report["steps"] = run.steps
    report["snapshots"] = len(run.snapshots)
    report["T_fit"] = _t_fit(run)
    manifest.write_json(f"{prefix}report.json", report, "singularity_report")
    return report


def cmd_simulate(cfg: dict, out: Path) -> int:
    manifest = RunManifest("simulate", cfg, cfg["run"]["seed"], out_dir=out)
    with manifest.phase("initial"):
        grid = _initial(cfg)
    with manifest.phase("evolve"):
        run = evolve(grid, _solver(cfg))
    with manifest.phase("write"):
        report = _write_run(manifest, run)
    manifest.status = "aborted" if report["aborted"] else "ok"
    manifest.save()
    print(f"{report['kind']} T_est={report['T_est']} snapshots={report['snapshots']} -> {out}")
    return EXIT_NUMERIC if report["aborted"] else EXIT_OK


# --------------------------------------------------------------------------
# analyze


def _load_run(run_dir: Path):
    files = sorted((run_dir / "snapshots").glob("snap_*.txt"))
    snaps = [make_snapshot(load_profile(f), i) for i, f in enumerate(files)]
    report = {}
    if (run_dir / "report.json").is_file():
        report = json.loads((run_dir / "report.json").read_text())
    return snaps, report


def _neck_of(snap):
    meta = snap.grid.meta
    if "neck_s" in meta:
        return float(meta["neck_s"])
    return snap.psi_min_s


def analyze_run(run_dir: Path, acfg: dict) -> tuple[dict, dict]:
    """All region analyses of a stored run; returns (report, csv tables)."""
    snaps, stored = _load_run(run_dir)
    if len(snaps) < 5:
        raise PreconditionError(f"{run_dir} holds {len(snaps)} snapshots; analysis needs at least 5")
    warn: list[str] = []
    tables: dict = {}
    T_est = acfg["T_est"]
    if T_est is None:
        T_est = stored.get("T_est")
    if T_est is None:
        raise PreconditionError("no T_est: pass --T-est or analyze a run whose report has one")
    n = snaps[0].grid.n
    before = [s for s in snaps if s.t < T_est]
    out: dict = {"run": str(run_dir), "T_est": T_est, "snapshots": len(snaps), "n": n,
                 "kind": stored.get("kind")}

    # parabolic frames
    k_max = acfg["k_max"]
    smax = sigma_max_for(k_max)
    frames, projections = [], []
    necked = [s for s in before if _neck_of(s) is not None]
    if not necked:
        out["parabolic"] = {"skipped": "no neck in the snapshots: the parabolic rescaling needs a local minimum of psi"}
    else:
        for s in necked:
            f = to_parabolic(s, T_est, _neck_of(s), sigma_max=smax + 0.5, points=acfg["points"])
            if f.tau < acfg["tau_min"]:
                warn.append(f"snapshot t={s.t:.6g} has tau={f.tau:.3f} < {acfg['tau_min']}: too early, skipped")
                continue
            inside = int(np.sum(np.abs(s.frame.s - _neck_of(s)) <= smax * math.sqrt(T_est - s.t)))
            if inside < acfg["min_nodes"]:
                warn.append(f"tau={f.tau:.3f}: only {inside} grid nodes inside the projection window, skipped")
                continue
            frames.append(f)
            try:
                projections.append(project(f.sigma, f.V, k_max=k_max, tau=f.tau))
            except TruncationError as exc:
                warn.append(f"tau={f.tau:.3f}: projection skipped ({exc})")
        neck_U = [[f.tau, float(np.interp(0.0, f.sigma, f.U))] for f in frames]
        par = {"frames": len(frames), "neck_U": neck_U,
               "projections": [p.to_dict() for p in projections]}
        if len(projections) >= 4 and projections[-1].tau - projections[0].tau >= 1:
            try:
                par["dominant_mode"] = fit_dominant_mode(projections).to_dict()
            except ValueError as exc:
                par["dominant_mode"] = {"skipped": str(exc)}
        else:
            par["dominant_mode"] = {"skipped": "needs >= 4 projections spanning >= 1 unit of tau"}
        if projections:
            late = np.abs(np.asarray(projections[-1].coefficients, dtype=float))
            par["late_amplitudes"] = late.tolist()
            kd = par["dominant_mode"].get("k")
            # b_2 decays only logarithmically; when it outweighs every k >= 3 mode
            # the neck is of the generic kind and k >= 3 asymptotics do not apply
            par["k2_dominates"] = bool(late.size > 2 and (kd is None or late[2] > late[kd]))
        out["parabolic"] = par
        if frames:
            f = frames[-1]
            tables["parabolic.csv"] = (["sigma", "U"], [f.sigma, f.U])
            tables["neck.csv"] = (["tau", "U_neck"], [np.array([r[0] for r in neck_U]),
                                                      np.array([r[1] for r in neck_U])])

    # intermediate: k from the mode fit unless given
    k = acfg["k"]
    dm = out.get("parabolic", {}).get("dominant_mode", {})
    if k is None and "k" in dm:
        k = int(dm["k"])
    out["k_used"] = k
    c = None
    if k is None or not frames:
        out["intermediate"] = {"skipped": "no mode index k and no parabolic frames"}
    else:
        # the intermediate zone lies far outside the projection window: resample wide
        f = frames[-1]
        snap = next(x for x in necked if x.t == f.t)
        reach = (snap.frame.s_right - _neck_of(snap)) / math.sqrt(T_est - snap.t)
        wide = to_parabolic(snap, T_est, _neck_of(snap), sigma_max=reach, points=acfg["points"])
        inter = to_intermediate(wide, k)
        try:
            rep = fit_c(inter)
            c = rep.fitted_value
            out["intermediate"] = rep.to_dict()
        except ValueError as exc:
            out["intermediate"] = {"skipped": str(exc)}
        tables["intermediate.csv"] = (["rho", "W"], [inter.rho, inter.W])

    # tip
    last = before[-1] if before else snaps[-1]
    kt = k if k is not None else 3
    if out["kind"] not in ("PolarDegenerate", "Composite"):
        out["tip"] = {"skipped": f"run kind {out['kind']}: the pole does not degenerate, no tip region"}
    else:
        try:
            tip = to_tip(last, T_est, kt, gamma_max=acfg["gamma_max"])
            profile = solve_bryant(n)
            if c is not None:
                a = kt * (n - 1) / (2 * c)
                rep = compare_tip(tip, profile, a, gamma_max=acfg["gamma_max"])
            else:
                rep = compare_tip(tip, profile, 1.0, gamma_max=acfg["gamma_max"], fit_a=True)
            out["tip"] = {**rep.to_dict(), "t": tip.t, "Gamma": tip.Gamma, "truncated": tip.truncated}
            tables["tip.csv"] = (["gamma", "Z"], [tip.gamma, tip.Z])
        except (ValueError, BryantSolveError) as exc:
            out["tip"] = {"skipped": str(exc)}

    # blow-up rate at the right pole
    t = np.array([s.t for s in before])
    K = np.array([s.K_pole for s in before])
    keep = K > 0
    try:
        rep = blowup_fit(t[keep], K[keep], T_est, k=k)
        out["blowup"] = rep.to_dict()
    except ValueError as exc:
        out["blowup"] = {"skipped": str(exc)}
    out["warnings"] = warn
    return out, tables


def cmd_analyze(cfg: dict, run_dir: Path, out: Path) -> int:
    manifest = RunManifest("analyze", {**cfg, "input": str(run_dir)}, 0, out_dir=out)
    with manifest.phase("analyze"):
        report, tables = analyze_run(run_dir, cfg["analysis"])
    manifest.write_json("analysis.json", report, "analysis_report")
    for name, (header, cols) in sorted(tables.items()):
        manifest.write_csv(name, header, cols, "profile_table")
    manifest.save()
    dm = report.get("parabolic", {}).get("dominant_mode", {})
    print(f"analysis -> {out} (k={report.get('k_used')}, b_k={dm.get('fitted_value')}, "
          f"c={report.get('intermediate', {}).get('fitted_value')})")
    return EXIT_OK


# --------------------------------------------------------------------------
# bryant


def cmd_bryant(cfg: dict, out: Path) -> int:
    n = cfg["run"]["n"]
    if n < 2:
        raise PreconditionError(f"n must be >= 2, got {n}")
    manifest = RunManifest("bryant", cfg, cfg["run"]["seed"], out_dir=out)
    with manifest.phase("solve"):
        prof = solve_bryant(n, tol=cfg["bryant"]["tol"])
    # far field: r^2 B - 1 ~ c1 r^-2; estimate c1 from the table's tail
    r = prof.r_table[(prof.r_table > 20) & (prof.r_table < 60)]
    B = prof(r)
    A = np.vstack([r**-2.0, r**-4.0]).T
    (c1, _), *_ = np.linalg.lstsq(A, r**2 * B - 1.0, rcond=None)
    report = {"n": n, "b2_used": prof.b2_used, "c2_measured": prof.c2_measured,
              "b2_normalized": prof.b2, "table_residual": table_residual(prof),
              "tail_c1_fit": float(c1), "tail_c1_predicted": (4 - n) / (n - 1),
              "diagnostics": prof.diagnostics}
    manifest.write_text(f"bryant_n{n}.txt", dump_bryant(prof), "bryant_table")
    manifest.write_json("bryant_report.json", report, "bryant_report")
    manifest.save()
    print(f"bryant n={n}: c2'={prof.c2_measured:.12g}, tail c1={c1:.6g} (predicted {(4 - n) / (n - 1):.6g})")
    return EXIT_OK


# --------------------------------------------------------------------------
# formal


def build_model(cfg: dict) -> CompositeModel:
    f = cfg["formal"]
    mc = matching_constants(cfg["run"]["n"], f["k"], f["c"])
    blend = BlendSpec(eps=f["eps"], rho_inner=f["rho_inner"], rho_tip=f["rho_tip"],
                      width=f["width"], left_extent=f["left_extent"])
    return CompositeModel(mc, f["T"], solve_bryant(mc.n), blend)


def formal_report(model: CompositeModel, taus: list[float], points: int) -> tuple[dict, dict]:
    rows = {}
    for tau in taus:
        rows[tau] = region_residuals(model, model.T - math.exp(-tau), points)
    ratios = {}
    for t0, t1 in zip(taus[:-1], taus[1:]):
        ratios[f"{t0:g}->{t1:g}"] = {
            r: (rows[t1][r] / rows[t0][r]) ** (1.0 / (t1 - t0)) if rows[t0][r] > 0 else math.nan
            for r in rows[t0]}
    decreasing = {r: all(rows[b][r] < rows[a][r] for a, b in zip(taus[:-1], taus[1:]))
                  for r in rows[taus[0]]} if len(taus) > 1 else {}
    factor2 = {r: all(v[r] <= 0.5 for v in ratios.values()) for r in REGIONS} if ratios else {}
    report = {"constants": model.constants.to_dict(), "T": model.T, "blend": model.blend.to_dict(),
              "residuals": {f"{t:g}": rows[t] for t in taus},
              "per_unit_tau_ratio": ratios, "decreasing": decreasing, "factor_two_per_unit_tau": factor2}
    return report, rows


def cmd_formal(cfg: dict, out: Path) -> int:
    manifest = RunManifest("formal", cfg, cfg["run"]["seed"], out_dir=out)
    f = cfg["formal"]
    with manifest.phase("model"):
        model = build_model(cfg)
    taus = sorted(f["tau"])
    with manifest.phase("residuals"):
        report, _ = formal_report(model, taus, f["points"])
    for tau in taus:
        t = model.T - math.exp(-tau)
        grid, neck = model.snapshot(t)
        s = arclength(grid).s - neck
        manifest.write_csv(f"profile_tau{tau:g}.csv", ["s", "psi"], [s, grid.psi], "profile")
        cols_s, cols_r, cols_v = [], [], []
        for name, pts in region_points(model, t, f["points"]).items():
            if pts.size:
                res = pde_residual(model, t, pts)
                cols_s.append(pts)
                cols_v.append(np.abs(res.residual) / np.max(res.scale))
                cols_r += [name] * pts.size
        manifest.write_csv(f"residual_tau{tau:g}.csv", ["region", "s", "relative_residual"],
                           [cols_r, np.concatenate(cols_s), np.concatenate(cols_v)], "residual")
    for i, tau in enumerate(sorted(f["snapshot_tau"])):
        t = model.T - math.exp(-tau)
        grid, neck = model.snapshot(t)
        grid = grid.replace(meta={"neck_s": neck, "source": "composite", "tau": tau})
        manifest.write_text(f"snapshots/snap_{i:04d}.txt", dump_profile(grid), "snapshot")
    if f["snapshot_tau"]:
        manifest.write_json("report.json", {"kind": "Composite", "T_est": model.T,
                                            "constants": model.constants.to_dict()}, "model_report")
    manifest.write_json("formal_report.json", report, "residual_report")
    manifest.save()
    print(f"formal n={model.constants.n} k={model.constants.k} c={model.constants.c}: "
          f"decreasing={report['decreasing']} -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# search


def cmd_search(cfg: dict, out: Path) -> int:
    manifest = RunManifest("search", cfg, cfg["run"]["seed"], out_dir=out)
    name, fam = _family(cfg)
    if fam is None:
        raise ConfigError("search needs a parametrized family, not 'sphere'")
    s = cfg["search"]
    with manifest.phase("bisection"):
        res = critical_search(fam, s["lo"], s["hi"], s["iters"], _solver(cfg),
                              cfg["run"]["nodes"], cfg["run"]["n"])
    lo = _write_run(manifest, res.run_lo, "run_lo/")
    hi = _write_run(manifest, res.run_hi, "run_hi/")
    pinch = res.run_lo if res.kind_lo is not SingularityKind.TOTAL_SHRINK else res.run_hi
    summary = {"lambda_star": res.lam_star, "lambda_lo": res.lam_lo, "lambda_hi": res.lam_hi,
               "kind_lo": res.kind_lo, "kind_hi": res.kind_hi, "history": res.history,
               "bracket_width": res.lam_hi - res.lam_lo,
               "initial_width": s["hi"] - s["lo"], "runs": {"lo": "run_lo/", "hi": "run_hi/"},
               "reports": {"lo": lo, "hi": hi}}
    snaps = pinch.snapshots
    T = pinch.report.T_est
    near = {}
    if T is not None:
        try:
            t = np.array([x.t for x in snaps if x.t < T])
            K = np.array([x.K_pole for x in snaps if x.t < T])
            fit = blowup_fit(t[K > 0], K[K > 0], T)
            near["blowup"] = fit.to_dict()
        except ValueError as exc:
            near["blowup"] = {"skipped": str(exc)}
        try:
            k = 3
            q = near.get("blowup", {}).get("fitted_value")
            if q is not None and 1 < q < 2:
                k = max(3, round(2 / (2 - q)))
            tip = to_tip([x for x in snaps if x.t < T][-1], T, k, gamma_max=2.0)
            rep = compare_tip(tip, solve_bryant(cfg["run"]["n"]), 1.0, fit_a=True)
            near["tip"] = rep.to_dict()
            near["tip"]["within_10_percent"] = bool(rep.fitted_value < 0.10)
        except (ValueError, IndexError) as exc:
            near["tip"] = {"skipped": str(exc) or "no snapshot before T_est"}
    q = near.get("blowup", {}).get("fitted_value")
    ok = q is not None and 1.05 < q < 1.95 and near.get("tip", {}).get("within_10_percent", False)
    summary["near_critical"] = near
    summary["status"] = "ok" if ok else "search-inconclusive"
    manifest.write_json("search.json", summary, "search_report")
    manifest.status = summary["status"]
    manifest.save()
    print(f"lambda* = {res.lam_star:.12f} [{res.lam_lo:.12f}, {res.lam_hi:.12f}] {summary['status']}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _add_schema_flags(p: argparse.ArgumentParser, sections: tuple[str, ...]):
    for sec in sections:
        g = p.add_argument_group(f"[{sec}]")
        for key in SCHEMA[sec]:
            flags = [f"--{_flag(key)}"]
            if sec == "family" and key == "name":
                flags = ["--family"]
            g.add_argument(*flags, dest=f"{sec}__{key}", metavar=key.upper(), default=None,
                           help=f"overrides {key} in [{sec}]")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neckpinch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"simulate": "evolve an initial profile and classify its singularity",
             "analyze": "rescale stored snapshots and fit the asymptotic constants",
             "bryant": "tabulate the normalized steady soliton profile",
             "formal": "evaluate the blended asymptotic model and its residuals",
             "search": "bisect a family parameter for the pinch threshold"}
    for cmd, sections in COMMAND_SECTIONS.items():
        sp = sub.add_parser(cmd, help=helps[cmd])
        sp.add_argument("--config", default=None, help="INI file with the sections " + ", ".join(sections))
        sp.add_argument("--out", default=None, help="output directory")
        if cmd == "analyze":
            sp.add_argument("input", help="run directory, or an analysis manifest.json to replay")
        _add_schema_flags(sp, sections)
    return p


def _replay(args) -> tuple[dict, Path]:
    data = json.loads(Path(args.input).read_text())
    if data.get("command") != "analyze":
        raise ConfigError(f"{args.input} is a '{data.get('command')}' manifest, not an analysis manifest")
    echo = data["config_echo"]
    cfg = {"analysis": echo["analysis"]}
    return cfg, Path(echo["input"])


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cmd = args.command
    out = Path(args.out or f"runs/{cmd}")
    try:
        if cmd == "analyze" and args.input.endswith(".json"):
            cfg, run_dir = _replay(args)
        else:
            cfg = resolve(args, cmd)
            run_dir = Path(args.input) if cmd == "analyze" else None
        if cmd == "simulate":
            return cmd_simulate(cfg, out)
        if cmd == "analyze":
            return cmd_analyze(cfg, run_dir, out)
        if cmd == "bryant":
            return cmd_bryant(cfg, out)
        if cmd == "formal":
            return cmd_formal(cfg, out)
        return cmd_search(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PreconditionError, InvalidFamilyError, InvalidMetricError, TruncationError) as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (BryantSolveError, NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
