from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from neckpinch import cli
from neckpinch.flow import SearchResult, SolverConfig, evolve
from neckpinch.geometry import FamilyId, InitialFamily, make_initial


def listed(out: Path) -> set[str]:
    index = json.loads((out / "manifest.json").read_text())["artifact_index"]
    return {e["path"] for e in index}


def assert_manifest_complete(out: Path):
    on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()}
    assert on_disk | {"manifest.json"} == listed(out) | {"manifest.json"}


# configuration errors


def test_missing_n_names_the_field(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\nnodes = 200\n[family]\nname = sphere\n")
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "'n'" in err and "[run]" in err


def test_unknown_field_reports_its_line(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\nn = 2\n[family]\nwiast = 0.1\n")
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "wiast" in err and ":4" in err


def test_bad_value_is_a_config_error(tmp_path):
    assert cli.main(["bryant", "--n", "two", "--out", str(tmp_path)]) == 2


def test_search_needs_a_parametrized_family(tmp_path):
    assert cli.main(["search", "--family", "sphere", "--out", str(tmp_path)]) == 2


# bryant


def test_bryant_rejects_n_1(tmp_path):
    assert cli.main(["bryant", "--n", "1", "--out", str(tmp_path)]) == 4


def test_bryant_tail_coefficient(tmp_path):
    out = tmp_path / "b5"
    assert cli.main(["bryant", "--n", "5", "--out", str(out)]) == 0
    rep = json.loads((out / "bryant_report.json").read_text())
    assert rep["tail_c1_predicted"] == pytest.approx(-0.25)
    assert rep["tail_c1_fit"] == pytest.approx(-0.25, abs=0.01)
    assert rep["table_residual"] < 1e-8
    assert_manifest_complete(out)


def test_console_script_is_installed(tmp_path):
    exe = Path(sys.executable).with_name("neckpinch")
    cmd = [str(exe)] if exe.exists() else [sys.executable, "-m", "neckpinch.cli"]
    proc = subprocess.run(cmd + ["bryant", "--n", "2", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


# formal


def test_formal_rejects_k_2(tmp_path, capsys):
    assert cli.main(["formal", "--k", "2", "--out", str(tmp_path)]) == 4
    assert ">= 3" in capsys.readouterr().err


def test_formal_even_k_profiles_are_mirror_symmetric(tmp_path):
    out = tmp_path / "f4"
    assert cli.main(["formal", "--n", "2", "--k", "4", "--tau", "6,8", "--out", str(out)]) == 0
    for tau in (6, 8):
        s, psi = np.loadtxt(out / f"profile_tau{tau}.csv", delimiter=",", skiprows=1).T
        assert np.max(np.abs(s + s[::-1])) < 1e-12
        assert np.array_equal(psi, psi[::-1])
    assert_manifest_complete(out)


def test_formal_report_lists_regions(tmp_path):
    out = tmp_path / "f3"
    assert cli.main(["formal", "--n", "2", "--k", "3", "--tau", "6,8", "--out", str(out)]) == 0
    rep = json.loads((out / "formal_report.json").read_text())
    assert set(rep["decreasing"]) >= {"parabolic", "intermediate", "outer", "tip"}


# simulate and analyze


def test_sphere_run_and_declined_parabolic_fit(tmp_path):
    run = tmp_path / "sphere"
    assert cli.main(["simulate", "--family", "sphere", "--n", "2", "--nodes", "200",
                     "--K-stop", "1e3", "--cfl-safety", "0.8", "--out", str(run)]) == 0
    rep = json.loads((run / "report.json").read_text())
    assert rep["kind"] == "TotalShrink"
    assert rep["T_est"] == pytest.approx(0.25, rel=5e-3)
    assert_manifest_complete(run)
    out = tmp_path / "sphere_an"
    assert cli.main(["analyze", str(run), "--out", str(out)]) == 0
    ana = json.loads((out / "analysis.json").read_text())
    assert "skipped" in ana["parabolic"] and "neck" in ana["parabolic"]["skipped"]


@pytest.fixture(scope="module")
def dumbbell_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("dumbbell")
    args = ["simulate", "--family", "dumbbell", "--lambda", "0.0", "--waist", "0.2", "--n", "2",
            "--nodes", "400", "--K-stop", "1e4", "--snapshot-factor", "1.2"]
    assert cli.main(args + ["--out", str(base / "a")]) == 0
    assert cli.main(args + ["--out", str(base / "b")]) == 0
    return base


def test_dumbbell_report(dumbbell_dir):
    rep = json.loads((dumbbell_dir / "a" / "report.json").read_text())
    assert rep["kind"] == "InteriorNeckpinch"
    assert_manifest_complete(dumbbell_dir / "a")


def test_simulate_is_deterministic(dumbbell_dir):
    for name in ("report.json", "diagnostics.jsonl"):
        assert (dumbbell_dir / "a" / name).read_bytes() == (dumbbell_dir / "b" / name).read_bytes()


def test_dumbbell_analysis_and_replay(dumbbell_dir):
    out = dumbbell_dir / "an"
    assert cli.main(["analyze", str(dumbbell_dir / "a"), "--out", str(out)]) == 0
    ana = json.loads((out / "analysis.json").read_text())
    U = [u for _, u in ana["parabolic"]["neck_U"]]
    assert abs(U[-1] - 1) < abs(U[0] - 1) or abs(U[-1] - 1) < 0.05
    assert abs(U[-1] - 1) < 0.1
    assert_manifest_complete(out)
    again = dumbbell_dir / "replay"
    assert cli.main(["analyze", str(out / "manifest.json"), "--out", str(again)]) == 0
    for p in out.iterdir():
        if p.name != "manifest.json":
            assert (again / p.name).read_bytes() == p.read_bytes(), p.name


def test_analysis_needs_five_snapshots(tmp_path, dumbbell_dir):
    run = tmp_path / "short"
    (run / "snapshots").mkdir(parents=True)
    src = sorted((dumbbell_dir / "a" / "snapshots").iterdir())[:4]
    for p in src:
        (run / "snapshots" / p.name).write_bytes(p.read_bytes())
    (run / "report.json").write_bytes((dumbbell_dir / "a" / "report.json").read_bytes())
    assert cli.main(["analyze", str(run), "--out", str(tmp_path / "o")]) == 4


def test_composite_snapshots_round_trip(tmp_path):
    snaps = tmp_path / "comp"
    assert cli.main(["formal", "--n", "2", "--k", "3", "--c", "1", "--tau", "6",
                     "--snapshot-tau", "24:27:0.5", "--out", str(snaps)]) == 0
    out = tmp_path / "comp_an"
    assert cli.main(["analyze", str(snaps), "--out", str(out)]) == 0
    ana = json.loads((out / "analysis.json").read_text())
    mode = ana["parabolic"]["dominant_mode"]
    assert mode["k"] == 3
    assert mode["fitted_value"] == pytest.approx(-0.5, rel=0.02)
    assert ana["intermediate"]["fitted_value"] == pytest.approx(1.0, rel=0.01)
    assert ana["tip"]["fitted_value"] < 0.05


# search


def test_search_manifest_links_bracketing_runs(tmp_path, monkeypatch):
    cfg = SolverConfig(K_stop=1e4, snapshot_factor=1.5)

    def quick(lam, waist):
        fam = InitialFamily(FamilyId.DUMBBELL, lam, {"waist": waist})
        return evolve(make_initial(fam, 200, 2), cfg)

    def fake_search(fam, lo, hi, iters, solver, nodes, n):
        r_lo, r_hi = quick(0.0, 0.2), quick(1.0, 0.9)
        width = (hi - lo) * 2.0**-iters
        return SearchResult(0.5, 0.5 - width / 2, 0.5 + width / 2, r_lo.report.kind,
                            r_hi.report.kind, r_lo, r_hi,
                            [{"iter": i} for i in range(iters)])

    monkeypatch.setattr(cli, "critical_search", fake_search)
    out = tmp_path / "search"
    assert cli.main(["search", "--family", "dumbbell", "--n", "2", "--iters", "20",
                     "--out", str(out)]) == 0
    rep = json.loads((out / "search.json").read_text())
    assert rep["bracket_width"] == pytest.approx(rep["initial_width"] * 2.0**-20)
    assert rep["runs"] == {"lo": "run_lo/", "hi": "run_hi/"}
    assert rep["status"] in {"ok", "search-inconclusive"}
    assert "tip" in rep["near_critical"] and "blowup" in rep["near_critical"]
    assert (out / "run_lo" / "report.json").exists() and (out / "run_hi" / "report.json").exists()
    assert json.loads((out / "manifest.json").read_text())["status"] == rep["status"]
    assert_manifest_complete(out)
