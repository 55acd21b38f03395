"""Synthetic two-state airpath surrogate.

States are the intake manifold pressure ``p_im`` [bar] and the EGR rate
``chi_egr`` [-]; inputs are the EGR valve (percent open), the VGT (percent
closed), engine speed and fuel rate. Cycle-averaged signals only.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, DegenerateFlowError, DomainError


@dataclass(frozen=True)
class PlantParams:
    p_amb: float = 1.0
    k_b: float = 1.5
    c_c: float = 0.05
    c_e: float = 0.08
    kappa: float = 0.1
    tau_p_min: float = 0.12   # tau_p = tau_p_min + tau_p_slope * (1 - n)
    tau_p_slope: float = 0.5
    tau_chi_min: float = 0.06
    tau_chi_slope: float = 0.2
    speed_range: tuple = (0.0, 2500.0)
    fuel_range: tuple = (0.0, 120.0)
    # multipliers for model-mismatch studies
    c_c_scale: float = 1.0
    c_e_scale: float = 1.0
    k_b_scale: float = 1.0
    max_substep: float = 0.005

    def __post_init__(self):
        object.__setattr__(self, "speed_range", tuple(float(v) for v in self.speed_range))
        object.__setattr__(self, "fuel_range", tuple(float(v) for v in self.fuel_range))
        for name in ("p_amb", "k_b", "c_c", "c_e", "tau_p_min", "tau_chi_min",
                     "c_c_scale", "c_e_scale", "k_b_scale", "max_substep"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigurationError(f"must be finite and positive, got {v}", f"plant.{name}")
        for name in ("kappa", "tau_p_slope", "tau_chi_slope"):
            if not (math.isfinite(getattr(self, name)) and getattr(self, name) >= 0):
                raise ConfigurationError("must be finite and non-negative", f"plant.{name}")
        for name in ("speed_range", "fuel_range"):
            lo, hi = getattr(self, name)
            if not (0 <= lo < hi):
                raise ConfigurationError(f"need 0 <= lo < hi, got {(lo, hi)}", f"plant.{name}")
        self._check_monotone()

    def _check_monotone(self, samples=9):
        grid = np.linspace(0.0, 1.0, samples)
        for n in grid[1:]:
            for f in grid[1:]:
                p_prev = chi_prev = None
                for v in grid:
                    p, _ = _steady(self, n, f, 0.5, v)
                    if p_prev is not None and p < p_prev:
                        raise ConfigurationError("boost map not monotone in VGT position", "plant")
                    p_prev = p
                for g in grid:
                    _, chi = _steady(self, n, f, g, 0.5)
                    if chi_prev is not None and chi < chi_prev:
                        raise ConfigurationError("EGR-rate map not monotone in valve position", "plant")
                    chi_prev = chi

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speed_range"] = list(self.speed_range)
        d["fuel_range"] = list(self.fuel_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlantParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown keys {sorted(unknown)}", "plant")
        return cls(**d)

    def normalize(self, rho):
        """Map ``(speed, fuel)`` to ``(n, f)`` in [0, 1]; raise outside the envelope."""
        s, w = float(rho[0]), float(rho[1])
        s_lo, s_hi = self.speed_range
        f_lo, f_hi = self.fuel_range
        if not (s_lo <= s <= s_hi and f_lo <= w <= f_hi):
            raise DomainError(f"operating point {(s, w)} outside plant envelope "
                              f"{self.speed_range} x {self.fuel_range}")
        return (s - s_lo) / (s_hi - s_lo), (w - f_lo) / (f_hi - f_lo)


class PlantState(NamedTuple):
    p_im: float
    chi_egr: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p_im, self.chi_egr])


def egr_rate(w_egr: float, w_c: float) -> float:
    """Fraction of intake charge that is recirculated exhaust."""
    if w_egr < 0 or w_c < 0:
        raise DomainError(f"flows must be non-negative, got {(w_egr, w_c)}")
    total = w_egr + w_c
    if total == 0:
        raise DegenerateFlowError("EGR and compressor flows are both zero")
    return w_egr / total


def _steady(params: PlantParams, n, f, g, v):
    p_amb = params.p_amb
    k_b = params.k_b * params.k_b_scale
    p = p_amb * (1.0 + k_b * n * f * (0.2 + 0.8 * v ** 1.3) * (1.0 - 0.25 * g))
    speed_term = 0.3 + 0.7 * n
    w_c = params.c_c * params.c_c_scale * speed_term * (p / p_amb)
    w_egr = params.c_e * params.c_e_scale * g * speed_term * max(0.1, 1.5 - p / (2.0 * p_amb))
    return p, egr_rate(w_egr, w_c)


def _check_u(u):
    u_egr, u_vgt = float(u[0]), float(u[1])
    if not (0.0 <= u_egr <= 100.0 and 0.0 <= u_vgt <= 100.0):
        raise DomainError(f"actuator command {(u_egr, u_vgt)} outside [0, 100]^2")
    return u_egr / 100.0, u_vgt / 100.0


def plant_steady_state(params: PlantParams, rho, u) -> PlantState:
    """Equilibrium ``(p_ss, chi_ss)`` for constant operating point and actuators."""
    n, f = params.normalize(rho)
    g, v = _check_u(u)
    return PlantState(*_steady(params, n, f, g, v))


def time_constants(params: PlantParams, rho):
    n, _ = params.normalize(rho)
    return (params.tau_p_min + params.tau_p_slope * (1.0 - n),
            params.tau_chi_min + params.tau_chi_slope * (1.0 - n))


def plant_step(params: PlantParams, state, rho, u, dt: float, substep=None) -> PlantState:
    """Advance the surrogate by ``dt`` seconds with RK4 at a fixed substep."""
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    p_ss, chi_ss = plant_steady_state(params, rho, u)
    tau_p, tau_chi = time_constants(params, rho)
    kappa = params.kappa
    h_max = params.max_substep if substep is None else substep
    m = max(1, math.ceil(dt / h_max - 1e-9))
    h = dt / m

    def rhs(p, chi):
        dp = p_ss - p
        return dp / tau_p, (chi_ss - chi) / tau_chi + kappa * dp

    p, chi = float(state[0]), float(state[1])
    for _ in range(m):
        k1p, k1c = rhs(p, chi)
        k2p, k2c = rhs(p + 0.5 * h * k1p, chi + 0.5 * h * k1c)
        k3p, k3c = rhs(p + 0.5 * h * k2p, chi + 0.5 * h * k2c)
        k4p, k4c = rhs(p + h * k3p, chi + h * k3c)
        p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        chi += h / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c)

    p = max(p, 0.5 * params.p_amb)
    chi = min(max(chi, 0.0), 1.0 - 1e-9)
    return PlantState(p, chi)


def nominal_actuators(params: PlantParams, rho) -> np.ndarray:
    """Calibrated mid-authority actuator positions at ``rho``.

    EGR valve closes with load; VGT position rises with speed and load.
    The steady states reached at these positions serve as set-points and as
    the look-up-table feedforward.
    """
    n, f = params.normalize(rho)
    return np.array([65.0 - 50.0 * f, 30.0 + 15.0 * n + 45.0 * f])
