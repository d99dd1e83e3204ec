"""Rescaled views of a profile and the fit report shared by the analysis modules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def _ro(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ParabolicFrame:
    """U = psi / sqrt(2(n-1)(T-t)) on a uniform grid in sigma = s / sqrt(T-t)."""

    n: int
    t: float
    T_used: float
    sigma: np.ndarray
    U: np.ndarray
    early: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sigma", _ro(self.sigma))
        object.__setattr__(self, "U", _ro(self.U))

    @property
    def tau(self) -> float:
        return -math.log(self.T_used - self.t)

    @property
    def V(self) -> np.ndarray:
        return self.U - 1.0


@dataclass(frozen=True)
class IntermediateFrame:
    """W = U against rho = exp((1/k - 1/2) tau) sigma."""

    rho: np.ndarray
    W: np.ndarray
    k_used: int
    tau: float

    def __post_init__(self):
        object.__setattr__(self, "rho", _ro(self.rho))
        object.__setattr__(self, "W", _ro(self.W))


@dataclass(frozen=True)
class TipFrame:
    """Z = psi_s^2 as a function of gamma = Gamma psi near the right pole."""

    Gamma: float
    gamma: np.ndarray
    Z: np.ndarray
    t: float = math.nan
    T_used: float = math.nan
    k_used: int = 0
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "gamma", _ro(self.gamma))
        object.__setattr__(self, "Z", _ro(self.Z))
        if self.gamma.shape != self.Z.shape:
            raise ValueError("gamma and Z differ in shape")
        if self.gamma.size and np.any(np.diff(self.gamma) <= 0):
            raise ValueError("gamma must be strictly increasing")

    @property
    def gamma_max(self) -> float:
        return float(self.gamma[-1]) if self.gamma.size else 0.0


@dataclass
class FitReport:
    fitted_value: float
    window: tuple[float, float]
    residual: float
    sensitivity: float | None = None
    low_confidence: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fitted_value": self.fitted_value,
            "window": list(self.window),
            "residual": self.residual,
            "sensitivity": self.sensitivity,
            "low_confidence": self.low_confidence,
            **self.extra,
        }
