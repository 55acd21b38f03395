"""Closed-loop simulation: scenarios, set-point maps, the control loop, metrics."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DomainError
from .fb_mpc import FbGrids, FbMpcConfig, FbMpcController
from .feedforward import FfMode, FfMpc, FfMpcConfig, lut_ff
from .lpv import Mesh, ModelGrid
from .plant import PlantParams, plant_step, plant_steady_state
from .qp import QpStatus

log = logging.getLogger(__name__)

SCENARIO_KINDS = ("fuel_step", "speed_ramp", "target_override", "synthetic_cycle")
TRACE_COLUMNS = ("t", "pim", "egr", "r_pim", "r_egr", "u_egr", "u_vgt", "uff_egr", "uff_vgt",
                 "dufb_egr", "dufb_vgt", "eps1", "eps2", "fb_status", "fb_iters", "fb_kkt",
                 "ff_status")


# -- set-points -------------------------------------------------------------

class SetpointMap(Mesh):
    """Bilinear look-up table of (p_im, chi_egr) targets over the model mesh."""

    def __init__(self, speed_breakpoints, fuel_breakpoints, targets, x_min=None, x_max=None):
        super().__init__(speed_breakpoints, fuel_breakpoints)
        targets = np.array(targets, dtype=float)
        if targets.shape != self.shape + (2,):
            raise ConfigurationError(f"targets must have shape {self.shape + (2,)}", "setpoints")
        if x_min is not None and (np.any(targets < x_min) or np.any(targets > x_max)):
            raise ConfigurationError("targets outside state bounds", "setpoints")
        targets.setflags(write=False)
        self.targets = targets

    @classmethod
    def from_grid(cls, grid: ModelGrid, x_min=None, x_max=None) -> "SetpointMap":
        """Targets equal to the node equilibria, consistent with the look-up-table feedforward."""
        return cls(grid.speed, grid.fuel, grid.stack("x_ss"), x_min, x_max)

    def __call__(self, rho) -> np.ndarray:
        return self.weights(rho).blend(self.targets)


# -- scenarios ----------------------------------------------------------------

@dataclass
class Scenario:
    rho: np.ndarray                       # (T, 2): engine speed, fuel rate
    targets: Optional[np.ndarray] = None  # (T, 2) explicit override, else map-derived
    dt: float = 0.02
    label: str = ""

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float).reshape(-1, 2)
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=float).reshape(-1, 2)
            if len(self.targets) != len(self.rho):
                raise ConfigurationError("targets and operating points differ in length",
                                         "scenario")
        if len(self.rho) == 0:
            raise ConfigurationError("empty scenario", "scenario")

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self.rho)) * self.dt

    @property
    def duration(self) -> float:
        return len(self.rho) * self.dt

    def __len__(self):
        return len(self.rho)

    def checksum(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.rho).tobytes())
        if self.targets is not None:
            h.update(np.ascontiguousarray(self.targets).tobytes())
        return h.hexdigest()

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "Ne", "winj", "r_pim", "r_egr"])
            for k, (s, f) in enumerate(self.rho):
                r = ([repr(float(v)) for v in self.targets[k]] if self.targets is not None
                     else ["", ""])
                w.writerow([repr(k * self.dt), repr(float(s)), repr(float(f))] + r)

    @classmethod
    def from_csv(cls, path, dt=None, label=None) -> "Scenario":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"t", "Ne", "winj"} - set(reader.fieldnames or ())
            if missing:
                raise ConfigurationError(f"scenario file lacks columns {sorted(missing)}",
                                         "scenario.file")
            rows = list(reader)
        if not rows:
            raise ConfigurationError("scenario file has no rows", "scenario.file")
        t = np.array([float(r["t"]) for r in rows])
        rho = np.array([[float(r["Ne"]), float(r["winj"])] for r in rows])
        step = np.diff(t)
        if dt is None:
            dt = float(step[0]) if step.size else 0.02
        if step.size and not np.allclose(step, dt, rtol=1e-6, atol=1e-9):
            raise ConfigurationError(f"samples must be uniformly spaced at {dt} s",
                                     "scenario.file")
        targets = None
        if all(r.get("r_pim") not in (None, "") and r.get("r_egr") not in (None, "")
               for r in rows):
            targets = np.array([[float(r["r_pim"]), float(r["r_egr"])] for r in rows])
        return cls(rho, targets, dt, label or Path(path).stem)


def _sampled(knots_t, knots_v, T, dt):
    return np.interp(np.arange(T) * dt, knots_t, knots_v)


def _steps(levels, times, T, dt):
    """Piecewise-constant profile: ``levels[0]`` until ``times[0]``, and so on."""
    t = np.arange(T) * dt
    out = np.full(T, float(levels[0]))
    for lvl, ts in zip(levels[1:], times):
        out[t >= ts - 1e-9] = float(lvl)
    return out


def make_scenario(kind, params=None, seed=0, dt=0.02, hull=None) -> Scenario:
    """Build a test scenario.

    ``fuel_step``: constant speed, fuel levels switching at given times.
    ``speed_ramp``: optional fuel steps followed by speed ramps through knots.
    ``target_override``: fuel step with targets decoupled from the set-point map.
    ``synthetic_cycle``: seeded pseudo drive cycle of ramps and low-speed dwells.
    ``hull`` (a Mesh) bounds the admissible operating points.
    """
    p = dict(params or {})
    hull = hull or Mesh((600.0, 2400.0), (5.0, 105.0))
    if kind == "fuel_step":
        duration = p.get("duration", 6.0)
        T = int(round(duration / dt))
        speed = np.full(T, float(p.get("speed", 1500.0)))
        fuel = _steps(p.get("fuel_levels", [30.0, 60.0]), p.get("step_times", [1.0]), T, dt)
        sc = Scenario(np.column_stack([speed, fuel]), None, dt, "fuel_step")
    elif kind == "speed_ramp":
        duration = p.get("duration", 14.0)
        T = int(round(duration / dt))
        fuel = _steps(p.get("fuel_levels", [40.0]), p.get("fuel_step_times", []), T, dt)
        kt = p.get("speed_knot_times", [0.0, 2.0, 5.0, 9.0, 12.0])
        kv = p.get("speed_knots", [1200.0, 1200.0, 2000.0, 2000.0, 1200.0])
        sc = Scenario(np.column_stack([_sampled(kt, kv, T, dt), fuel]), None, dt, "speed_ramp")
    elif kind == "target_override":
        duration = p.get("duration", 6.0)
        T = int(round(duration / dt))
        speed = np.full(T, float(p.get("speed", 1500.0)))
        fuel = _steps(p.get("fuel_levels", [30.0, 60.0]), p.get("step_times", [1.0]), T, dt)
        targets = p.get("targets")
        if targets is None:
            # held at the map value of the initial point; filled in by the runner
            sc = Scenario(np.column_stack([speed, fuel]), None, dt, "target_override")
            sc.hold_initial_target = True
        else:
            targets = np.asarray(targets, dtype=float)
            if targets.shape == (2,):
                targets = np.tile(targets, (T, 1))
            sc = Scenario(np.column_stack([speed, fuel]), targets, dt, "target_override")
    elif kind == "synthetic_cycle":
        shape = CycleShape.from_dict({k: v for k, v in p.items() if k != "duration"})
        sc = synthetic_cycle(seed, p.get("duration", 600.0), dt, hull, shape)
    else:
        raise ConfigurationError(f"unknown scenario kind {kind!r}", "scenario.kind")
    _check_hull(sc, hull)
    return sc


def _check_hull(sc: Scenario, hull: Mesh):
    s, f = sc.rho[:, 0], sc.rho[:, 1]
    tol = 1e-9
    if (s.min() < hull.speed[0] - tol or s.max() > hull.speed[-1] + tol
            or f.min() < hull.fuel[0] - tol or f.max() > hull.fuel[-1] + tol):
        raise DomainError(
            f"scenario leaves the envelope [{hull.speed[0]}, {hull.speed[-1]}] rpm x "
            f"[{hull.fuel[0]}, {hull.fuel[-1]}] mg/stroke")


@dataclass(frozen=True)
class CycleShape:
    """Segment statistics of the synthetic drive cycle (durations in s)."""

    idle_probability: float = 0.2
    speed_ramp: tuple = (5.0, 15.0)
    fuel_ramp: tuple = (0.05, 0.3)
    hold: tuple = (2.0, 10.0)
    idle_hold: tuple = (4.0, 12.0)

    @classmethod
    def from_dict(cls, d) -> "CycleShape":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown keys {sorted(unknown)}", "scenario.params")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def synthetic_cycle(seed, duration=600.0, dt=0.02, hull=None, shape: CycleShape = None) -> Scenario:
    """Seeded pseudo drive cycle.

    Segments ramp speed and fuel to new levels and hold them. A share of the
    segments dwells near idle (low speed, low fuel); the others draw random
    points in the upper envelope. Fuel moves faster than speed.
    """
    hull = hull or Mesh((600.0, 2400.0), (5.0, 105.0))
    shape = shape or CycleShape()
    s_lo, s_hi = float(hull.speed[0]), float(hull.speed[-1])
    f_lo, f_hi = float(hull.fuel[0]), float(hull.fuel[-1])
    rng = np.random.default_rng(seed)
    ts, ss, fs = [0.0], [s_lo + 0.1 * (s_hi - s_lo)], [f_lo + 0.05 * (f_hi - f_lo)]
    tf, ff = [0.0], [fs[0]]
    t = 0.0
    while t < duration:
        if rng.random() < shape.idle_probability:
            s_new = rng.uniform(s_lo, s_lo + 0.12 * (s_hi - s_lo))
            f_new = rng.uniform(f_lo, f_lo + 0.1 * (f_hi - f_lo))
            hold = rng.uniform(*shape.idle_hold)
        else:
            s_new = rng.uniform(s_lo + 0.15 * (s_hi - s_lo), s_hi)
            f_new = rng.uniform(f_lo + 0.1 * (f_hi - f_lo), f_hi)
            hold = rng.uniform(*shape.hold)
        s_ramp = rng.uniform(*shape.speed_ramp)
        f_ramp = rng.uniform(*shape.fuel_ramp)
        ts += [t + s_ramp]
        ss += [s_new]
        tf += [t + f_ramp]
        ff += [f_new]
        t += max(s_ramp, f_ramp) + hold
        ts += [t]
        ss += [s_new]
        tf += [t]
        ff += [f_new]
    T = int(round(duration / dt))
    rho = np.column_stack([_sampled(ts, ss, T, dt), _sampled(tf, ff, T, dt)])
    return Scenario(rho, None, dt, f"synthetic_cycle(seed={seed})")


# -- simulation -------------------------------------------------------------

@dataclass
class SimOptions:
    egr_lag: float = 0.0             # first-order EGR-rate measurement lag [s]; 0 disables
    measurement_noise: tuple = (0.0, 0.0)

    def to_dict(self):
        return {"egr_lag": self.egr_lag, "measurement_noise": list(self.measurement_noise)}


@dataclass
class SimTrace:
    t: np.ndarray
    x: np.ndarray
    r: np.ndarray
    u: np.ndarray
    u_ff: np.ndarray
    du_fb: np.ndarray
    rho: np.ndarray
    eps: np.ndarray
    fb_status: list
    fb_iters: np.ndarray
    fb_kkt: np.ndarray
    ff_status: list
    ff_iters: np.ndarray
    ff_kkt: np.ndarray
    ff_mode: str = "none"
    label: str = ""

    def __len__(self):
        return len(self.t)

    @property
    def error(self) -> np.ndarray:
        return self.x - self.r

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for k in range(len(self.t)):
            w.writerow([repr(float(self.t[k])), *map(repr, self.x[k].tolist()),
                        *map(repr, self.r[k].tolist()), *map(repr, self.u[k].tolist()),
                        *map(repr, self.u_ff[k].tolist()), *map(repr, self.du_fb[k].tolist()),
                        *map(repr, self.eps[k].tolist()), self.fb_status[k],
                        int(self.fb_iters[k]), repr(float(self.fb_kkt[k])), self.ff_status[k]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "SimTrace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda *names: np.array([[float(r[n]) for n in names] for r in rows])
        T = len(rows)
        return cls(t=col("t")[:, 0], x=col("pim", "egr"), r=col("r_pim", "r_egr"),
                   u=col("u_egr", "u_vgt"), u_ff=col("uff_egr", "uff_vgt"),
                   du_fb=col("dufb_egr", "dufb_vgt"), rho=np.full((T, 2), np.nan),
                   eps=col("eps1", "eps2"), fb_status=[r["fb_status"] for r in rows],
                   fb_iters=np.array([int(r["fb_iters"]) for r in rows]),
                   fb_kkt=col("fb_kkt")[:, 0], ff_status=[r["ff_status"] for r in rows],
                   ff_iters=np.zeros(T, dtype=int), ff_kkt=np.zeros(T))


@dataclass
class ControllerConfigs:
    fb: FbMpcConfig = field(default_factory=FbMpcConfig)
    ff: FfMpcConfig = field(default_factory=FfMpcConfig)


def run_closed_loop(plant_params: PlantParams, grid: ModelGrid, configs: ControllerConfigs = None,
                    ff_mode=FfMode.NONE, scenario: Scenario = None, seed=0,
                    options: SimOptions = None, setpoints: SetpointMap = None,
                    fb_grids: FbGrids = None) -> SimTrace:
    """Simulate plant, feedforward and feedback MPC over a scenario.

    Per sample: read the operating point and target, evaluate the
    feedforward, hand ``u_bar = u_prev + du_ff`` to the feedback MPC, apply
    the saturated command to the plant. Solver trouble is recorded, never
    raised.
    """
    configs = configs or ControllerConfigs()
    ff_mode = FfMode.parse(ff_mode.value if isinstance(ff_mode, FfMode) else ff_mode)
    options = options or SimOptions()
    if scenario is None:
        raise ConfigurationError("a scenario is required", "scenario")
    fb_cfg = configs.fb
    if not math.isclose(scenario.dt, fb_cfg.sample_period, rel_tol=1e-9):
        raise ConfigurationError(
            f"scenario spacing {scenario.dt} s differs from the controller period "
            f"{fb_cfg.sample_period} s", "scenario")
    setpoints = setpoints or SetpointMap.from_grid(grid)
    rng = np.random.default_rng(seed)
    noise = np.asarray(options.measurement_noise, dtype=float)
    dt = scenario.dt
    T = len(scenario)

    targets = scenario.targets
    if targets is None:
        if getattr(scenario, "hold_initial_target", False):
            targets = np.tile(setpoints(scenario.rho[0]), (T, 1))
        else:
            targets = np.array([setpoints(r) for r in scenario.rho])

    fb_grids = fb_grids or FbGrids(grid, fb_cfg)
    fb = FbMpcController(fb_cfg, fb_grids)
    ffmpc = FfMpc(configs.ff, grid) if ff_mode is FfMode.MPC else None

    rho0 = grid.clamp(scenario.rho[0])
    u_prev = np.clip(lut_ff(grid, rho0), fb_cfg.u_min, fb_cfg.u_max)
    state = plant_steady_state(plant_params, scenario.rho[0], u_prev)
    x_meas_prev = np.array(state)
    fb.reset(x_meas_prev, u_prev)
    if ffmpc is not None:
        ffmpc.reset(rho=rho0)
    egr_filt = state[1]
    lag_alpha = math.exp(-dt / options.egr_lag) if options.egr_lag > 0 else 0.0

    xs = np.empty((T, 2)); us = np.empty((T, 2)); uffs = np.empty((T, 2))
    dus = np.empty((T, 2)); epss = np.empty((T, 2))
    fb_status, ff_status = [], []
    fb_iters = np.zeros(T, dtype=int); fb_kkt = np.zeros(T)
    ff_iters = np.zeros(T, dtype=int); ff_kkt = np.zeros(T)
    ff_prev = None

    for k in range(T):
        rho_k = scenario.rho[k]
        r_k = targets[k]
        x_true = np.array(state)
        egr_filt = lag_alpha * egr_filt + (1.0 - lag_alpha) * x_true[1]
        x_k = np.array([x_true[0], egr_filt])
        if noise.any():
            x_k = x_k + noise * rng.standard_normal(2)

        if ff_mode is FfMode.NONE:
            ff_now = np.zeros(2)
            ff_status.append("none")
        elif ff_mode is FfMode.LOOKUP_TABLE:
            ff_now = lut_ff(grid, rho_k)
            ff_status.append("lut")
        else:
            ff_now = ffmpc.step(rho_k, r_k)
            plan = ffmpc.last_plan
            ff_status.append("fallback" if plan.fallback else plan.status.value)
            ff_iters[k] = plan.iterations
            ff_kkt[k] = plan.kkt_residual
        if ff_prev is None:
            ff_prev = ff_now

        u_k, du0, diag = fb.step(x_k, r_k, rho_k, ff_prev, ff_now)
        if ffmpc is not None:
            ffmpc.advance(u_k)

        xs[k] = x_true; us[k] = u_k; uffs[k] = ff_now; dus[k] = du0; epss[k] = diag.eps
        fb_status.append(diag.status.value)
        fb_iters[k] = diag.iterations
        fb_kkt[k] = diag.kkt_residual
        ff_prev = ff_now
        state = plant_step(plant_params, state, rho_k, u_k, dt)

    return SimTrace(t=scenario.t, x=xs, r=np.asarray(targets, dtype=float), u=us, u_ff=uffs,
                    du_fb=dus, rho=scenario.rho.copy(), eps=epss, fb_status=fb_status,
                    fb_iters=fb_iters, fb_kkt=fb_kkt, ff_status=ff_status, ff_iters=ff_iters,
                    ff_kkt=ff_kkt, ff_mode=ff_mode.value, label=scenario.label)


# -- metrics ----------------------------------------------------------------

SIGNALS = ("pim", "egr")


@dataclass
class Metrics:
    mean_abs_error_pim: float
    mean_abs_error_egr: float
    overshoot_pim: float      # percent of target step
    overshoot_egr: float
    settling_time_pim: float  # s, 2 % band
    settling_time_egr: float
    peak_error_pim: float
    peak_error_egr: float
    step_events: int = 0

    def to_dict(self):
        return dict(self.__dict__)


def step_events(r: np.ndarray, threshold_fraction=0.2):
    """Sample indices where a target jumps by at least ``threshold_fraction`` of its span."""
    span = float(np.ptp(r)) if r.size else 0.0
    if span <= 1e-12:
        return []
    d = np.abs(np.diff(r))
    return [int(k) + 1 for k in np.flatnonzero(d >= threshold_fraction * span)]


def step_response(x, r, events, dt, band=0.02):
    """Worst overshoot [% of step] and settling time [s] over the step events."""
    overshoot, settling = 0.0, 0.0
    for n, k0 in enumerate(events):
        k1 = events[n + 1] if n + 1 < len(events) else len(r)
        step = r[k0] - r[k0 - 1]
        target = r[k0:k1]
        dev = (x[k0:k1] - target) * np.sign(step)
        overshoot = max(overshoot, 100.0 * max(0.0, float(dev.max())) / abs(step))
        outside = np.flatnonzero(np.abs(x[k0:k1] - target) > band * abs(step))
        settling = max(settling, 0.0 if outside.size == 0 else (outside[-1] + 1) * dt)
    return overshoot, settling


def compute_metrics(trace: SimTrace) -> Metrics:
    if len(trace) == 0:
        raise DomainError("cannot compute metrics of an empty trace")
    e = trace.error
    dt = float(trace.t[1] - trace.t[0]) if len(trace) > 1 else 0.0
    out = {}
    n_events = 0
    for i, name in enumerate(SIGNALS):
        out[f"mean_abs_error_{name}"] = float(np.mean(np.abs(e[:, i])))
        out[f"peak_error_{name}"] = float(np.max(np.abs(e[:, i])))
        ev = step_events(trace.r[:, i])
        n_events += len(ev)
        out[f"overshoot_{name}"], out[f"settling_time_{name}"] = step_response(
            trace.x[:, i], trace.r[:, i], ev, dt)
    return Metrics(step_events=n_events, **out)


def excursion_above_target(trace: SimTrace, signal="pim", t_from=0.0) -> float:
    """Largest positive deviation ``x - r`` after ``t_from`` (regulation overshoot)."""
    i = SIGNALS.index(signal)
    mask = trace.t >= t_from - 1e-12
    return max(0.0, float(np.max(trace.x[mask, i] - trace.r[mask, i])))
