"""Least-squares identification of local LPV models from perturbation data."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import IdentificationError, StabilityError
from .lpv import (DEFAULT_FUEL_BREAKPOINTS, DEFAULT_SPEED_BREAKPOINTS, MAX_SPECTRAL_RADIUS,
                  LocalModel, ModelGrid, OperatingPoint)
from .plant import PlantParams, nominal_actuators, plant_step, plant_steady_state

log = logging.getLogger(__name__)

REGRESSOR_NAMES = ("p_im", "chi_egr", "u_egr", "u_vgt", "w_inj")
RIDGE = 1e-10
RANK_TOL = 1e-9


@dataclass
class IoRecord:
    """Equally spaced samples of states, actuators and fuel rate."""

    x: np.ndarray       # (T, 2)
    u: np.ndarray       # (T, 2)
    w_inj: np.ndarray   # (T,)
    dt: float = 0.02

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1, 2)
        self.u = np.asarray(self.u, dtype=float).reshape(-1, 2)
        self.w_inj = np.asarray(self.w_inj, dtype=float).reshape(-1)
        T = len(self.x)
        if len(self.u) != T or len(self.w_inj) != T:
            raise ValueError("x, u and w_inj must have the same length")
        if T < 10:
            raise ValueError(f"need at least 10 samples, got {T}")


@dataclass(frozen=True)
class PerturbationSpec:
    """PRBS experiment around an equilibrium.

    Actuator amplitudes are in percentage points, fuel in mg/stroke. Each
    signal holds its level for a random number of samples in
    ``[min_hold, max_hold]``.
    """

    actuator_amplitude: float = 2.0
    fuel_amplitude: float = 1.0
    duration: float = 20.0
    dt: float = 0.02
    min_hold: int = 2
    max_hold: int = 12
    seed: int = 0


def prbs(rng, n_samples, min_hold, max_hold) -> np.ndarray:
    out = np.empty(n_samples)
    level = 1.0 if rng.random() < 0.5 else -1.0
    k = 0
    while k < n_samples:
        hold = int(rng.integers(min_hold, max_hold + 1))
        out[k:k + hold] = level
        level = -level
        k += hold
    return out


def fit_local_model(data: IoRecord, equilibrium, ridge=RIDGE,
                    max_spectral_radius=MAX_SPECTRAL_RADIUS) -> LocalModel:
    """Ordinary least squares on one-step deviation regressions.

    Regresses ``x[k+1] - x_ss`` on ``[x[k] - x_ss, u[k] - u_ss, w[k] - w_ss]``.
    """
    x_ss, u_ss, w_ss = equilibrium
    x_ss = np.asarray(x_ss, dtype=float)
    u_ss = np.asarray(u_ss, dtype=float)
    w_ss = float(w_ss)
    Phi = np.column_stack([data.x[:-1] - x_ss, data.u[:-1] - u_ss, data.w_inj[:-1] - w_ss])
    Y = data.x[1:] - x_ss

    norms = np.linalg.norm(Phi, axis=0)
    for k, nrm in enumerate(norms):
        if nrm == 0.0:
            raise IdentificationError(f"regressor '{REGRESSOR_NAMES[k]}' is never excited")
    Phin = Phi / norms
    _, s, Vt = np.linalg.svd(Phin, full_matrices=False)
    if s[-1] < RANK_TOL * s[0]:
        v = Vt[-1]
        involved = [REGRESSOR_NAMES[k] for k in np.argsort(-np.abs(v)) if abs(v[k]) > 0.1]
        raise IdentificationError(
            f"rank-deficient regressors (condition {s[0] / s[-1]:.2e}); deficient direction "
            f"spans {', '.join(involved)}")

    theta = np.linalg.solve(Phin.T @ Phin + ridge * np.eye(5), Phin.T @ Y) / norms[:, None]
    model = LocalModel(A=theta[0:2].T, B=theta[2:4].T, Bf=theta[4:5].T,
                       x_ss=x_ss, u_ss=u_ss, w_inj_ss=w_ss)
    if not model.is_stable(max_spectral_radius):
        raise StabilityError(f"identified A has spectral radius {model.spectral_radius:.6f} "
                             f">= {max_spectral_radius}")
    return model


def one_step_residuals(model: LocalModel, data: IoRecord) -> np.ndarray:
    pred = (model.x_ss + (data.x[:-1] - model.x_ss) @ model.A.T
            + (data.u[:-1] - model.u_ss) @ model.B.T
            + np.outer(data.w_inj[:-1] - model.w_inj_ss, model.Bf[:, 0]))
    return data.x[1:] - pred


def perturbation_experiment(plant: PlantParams, rho, u_ss, spec: PerturbationSpec,
                            seed=None) -> IoRecord:
    """Simulate the surrogate from equilibrium under PRBS actuator and fuel perturbations."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    T = int(round(spec.duration / spec.dt))
    rho = OperatingPoint(*rho)
    du = np.column_stack([prbs(rng, T, spec.min_hold, spec.max_hold) for _ in range(2)])
    dw = prbs(rng, T, spec.min_hold, spec.max_hold)
    u = np.asarray(u_ss, dtype=float) + spec.actuator_amplitude * du
    w = rho.fuel_rate + spec.fuel_amplitude * dw
    x = np.empty((T, 2))
    state = plant_steady_state(plant, rho, u_ss)
    for k in range(T):
        x[k] = state
        state = plant_step(plant, state, (rho.engine_speed, w[k]), u[k], spec.dt)
    return IoRecord(x=x, u=u, w_inj=w, dt=spec.dt)


@dataclass
class NodeFit:
    node: tuple
    rho: OperatingPoint
    residual_rms: np.ndarray      # per state
    signal_range: np.ndarray      # per state

    @property
    def relative_residual(self) -> np.ndarray:
        return self.residual_rms / np.where(self.signal_range > 0, self.signal_range, np.inf)


def identify_node(plant: PlantParams, rho, spec: PerturbationSpec, seed=None, u_ss=None):
    rho = OperatingPoint(*rho)
    u_ss = nominal_actuators(plant, rho) if u_ss is None else np.asarray(u_ss, dtype=float)
    x_ss = plant_steady_state(plant, rho, u_ss).as_array()
    data = perturbation_experiment(plant, rho, u_ss, spec, seed=seed)
    model = fit_local_model(data, (x_ss, u_ss, rho.fuel_rate))
    res = one_step_residuals(model, data)
    fit = NodeFit(node=None, rho=rho, residual_rms=np.sqrt(np.mean(res ** 2, axis=0)),
                  signal_range=np.ptp(data.x, axis=0))
    return model, fit


def build_grid(plant: PlantParams = None, speed_breakpoints=DEFAULT_SPEED_BREAKPOINTS,
               fuel_breakpoints=DEFAULT_FUEL_BREAKPOINTS, perturbation: PerturbationSpec = None,
               state_bounds=None, report=None) -> ModelGrid:
    """Identify a local model at every mesh node of the surrogate plant.

    ``report``, if a list, receives one ``NodeFit`` per node.
    """
    plant = plant or PlantParams()
    spec = perturbation or PerturbationSpec()
    speed = np.asarray(speed_breakpoints, dtype=float)
    fuel = np.asarray(fuel_breakpoints, dtype=float)
    nodes = []
    for i, s in enumerate(speed):
        row = []
        for j, f in enumerate(fuel):
            try:
                model, fit = identify_node(plant, (s, f), spec, seed=spec.seed + 1000 * i + j)
            except IdentificationError as exc:
                raise type(exc)(str(exc), node=(i, j, float(s), float(f))) from exc
            if state_bounds is not None:
                lo, hi = state_bounds
                if np.any(model.x_ss < lo) or np.any(model.x_ss > hi):
                    raise IdentificationError(f"x_ss {model.x_ss} outside state bounds",
                                              node=(i, j, float(s), float(f)))
            fit.node = (i, j)
            if report is not None:
                report.append(fit)
            log.debug("node (%d,%d) rho=(%g,%g) rel. residual %s", i, j, s, f,
                      fit.relative_residual)
            row.append(model)
        nodes.append(row)
    return ModelGrid(speed, fuel, nodes)
