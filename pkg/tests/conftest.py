from __future__ import annotations

import math
from functools import lru_cache

import pytest

from neckpinch.bryant import solve_bryant
from neckpinch.regions import BlendSpec, CompositeModel, matching_constants


@lru_cache(maxsize=None)
def bryant(n: int):
    return solve_bryant(n)


@lru_cache(maxsize=None)
def model(n: int, k: int, c: float, T: float = 1.0, cap_scale: float | None = None) -> CompositeModel:
    return CompositeModel(matching_constants(n, k, c), T, bryant(n), BlendSpec(), cap_scale=cap_scale)


def t_at(tau: float, T: float = 1.0) -> float:
    return T - math.exp(-tau)


@pytest.fixture
def bryant_profile():
    return bryant


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str, soft: bool = False) -> bool:
    verdict = "PASS" if ok else ("FAIL (soft)" if soft else "FAIL")
    ACCEPTANCE[criterion] = f"acceptance {criterion:>2}: {verdict:<11} {detail}"
    return ok


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="also run checks marked slow (near-critical search)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="slow; pass --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
