"""Rate-based (velocity-form) feedback MPC with soft state constraints.

Extended state ``[dx; e; x_prev; u_prev]`` with ``dx = x_k - x_{k-1}`` and
``e = x_k - r_k``. Decision vector ``z = (du_0, ..., du_{N-1}, eps)``; the
slack ``eps`` (one entry per state, shared over the horizon) softens the
state bounds, the input bounds are hard.
"""
from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .lpv import LocalModel, ModelGrid, interpolate_model
from .qp import DenseQp, QpSolution, QpStatus, solve_qp
from .riccati import (PenaltyGrid, TerminalPenalty, fb_terminal_penalty, interpolate_penalty,
                      penalty_grid_for)

NX, NU, NEXT = 2, 2, 8
HESSIAN_REGULARIZATION = 1e-9

DEFAULT_Q_E = ((100.0, 0.0), (0.0, 2500.0))
DEFAULT_R_EXT = ((0.01, 0.0), (0.0, 0.01))


# -- weight scheduling -----------------------------------------------------

def _interval(v):
    if v is None:
        return (-math.inf, math.inf)
    lo, hi = v
    return (-math.inf if lo is None else float(lo), math.inf if hi is None else float(hi))


@dataclass(frozen=True, eq=False)
class Region:
    """Box in (speed, fuel, EGR rate) with lower-inclusive, upper-exclusive bounds."""

    name: str
    Q_e: np.ndarray
    R_ext: np.ndarray
    speed: tuple = (None, None)
    fuel: tuple = (None, None)
    chi: tuple = (None, None)

    def __post_init__(self):
        Q = np.array(self.Q_e, dtype=float)
        R = np.array(self.R_ext, dtype=float)
        if Q.shape != (2, 2) or R.shape != (2, 2):
            raise ConfigurationError("weights must be 2x2", f"regions.{self.name}")
        if not np.allclose(Q, Q.T) or np.linalg.eigvalsh(Q)[0] < -1e-12:
            raise ConfigurationError("Q_e must be symmetric PSD", f"regions.{self.name}.Q_e")
        if not np.allclose(R, R.T) or np.linalg.eigvalsh(R)[0] <= 0:
            raise ConfigurationError("R_ext must be symmetric PD", f"regions.{self.name}.R_ext")
        object.__setattr__(self, "Q_e", Q)
        object.__setattr__(self, "R_ext", R)
        for k in ("speed", "fuel", "chi"):
            object.__setattr__(self, k, _interval(getattr(self, k)))

    @property
    def is_catch_all(self):
        return all(b == (-math.inf, math.inf) for b in (self.speed, self.fuel, self.chi))

    def contains(self, speed, fuel, chi) -> bool:
        return (self.speed[0] <= speed < self.speed[1] and self.fuel[0] <= fuel < self.fuel[1]
                and self.chi[0] <= chi < self.chi[1])

    def to_dict(self):
        enc = lambda b: [None if math.isinf(b[0]) else b[0], None if math.isinf(b[1]) else b[1]]
        return {"name": self.name, "Q_e": self.Q_e.tolist(), "R_ext": self.R_ext.tolist(),
                "speed": enc(self.speed), "fuel": enc(self.fuel), "chi": enc(self.chi)}


class RegionTable:
    """Ordered weight regions; first match wins, the last region catches the rest."""

    LATTICE = (np.linspace(0.0, 3000.0, 22), np.linspace(0.0, 150.0, 22), np.linspace(0.0, 1.0, 22))

    def __init__(self, regions):
        self.regions = list(regions)
        if not self.regions or not self.regions[-1].is_catch_all:
            raise ConfigurationError("last region must be a catch-all (no bounds)", "regions")
        self._verify_disjoint()

    def _verify_disjoint(self):
        # boundaries of every region are added to the lattice so half-open edges get probed
        axes = [set(a.tolist()) for a in self.LATTICE]
        for r in self.regions[:-1]:
            for ax, b in zip(axes, (r.speed, r.fuel, r.chi)):
                ax.update(v for v in b if math.isfinite(v))
        s, f, c = np.meshgrid(*[np.array(sorted(a)) for a in axes], indexing="ij")
        count = np.zeros(s.shape, dtype=int)
        for r in self.regions[:-1]:
            count += ((r.speed[0] <= s) & (s < r.speed[1]) & (r.fuel[0] <= f) & (f < r.fuel[1])
                      & (r.chi[0] <= c) & (c < r.chi[1]))
        if count.max(initial=0) > 1:
            raise ConfigurationError("regions overlap", "regions")

    def select(self, speed, fuel, chi) -> Region:
        for r in self.regions:
            if r.contains(speed, fuel, chi):
                return r
        return self.regions[-1]

    def __len__(self):
        return len(self.regions)

    def to_list(self):
        return [r.to_dict() for r in self.regions]

    @classmethod
    def from_list(cls, items) -> "RegionTable":
        regions = []
        for k, d in enumerate(items):
            try:
                regions.append(Region(name=d.get("name", f"region{k + 1}"), Q_e=d["Q_e"],
                                      R_ext=d["R_ext"], speed=d.get("speed"),
                                      fuel=d.get("fuel"), chi=d.get("chi")))
            except KeyError as exc:
                raise ConfigurationError(f"missing {exc}", f"regions[{k}]") from exc
        return cls(regions)

    @property
    def weight_sets(self):
        """Distinct (Q_e, R_ext) pairs in table order."""
        seen = []
        for r in self.regions:
            if not any(np.array_equal(r.Q_e, q) and np.array_equal(r.R_ext, rr) for q, rr in seen):
                seen.append((r.Q_e, r.R_ext))
        return seen


def default_region_table(Q_e=DEFAULT_Q_E, R_ext=DEFAULT_R_EXT, speed_split=1500.0,
                         fuel_split=55.0, chi_split=0.2) -> RegionTable:
    """Seven regions from low/high splits of speed, fuel and EGR rate.

    All regions carry the same weights unless overridden.
    """
    lo_s, hi_s = (None, speed_split), (speed_split, None)
    lo_f, hi_f = (None, fuel_split), (fuel_split, None)
    lo_c, hi_c = (None, chi_split), (chi_split, None)
    boxes = [
        ("low speed, low fuel, low egr", lo_s, lo_f, lo_c),
        ("low speed, low fuel, high egr", lo_s, lo_f, hi_c),
        ("low speed, high fuel", lo_s, hi_f, (None, None)),
        ("high speed, low fuel, low egr", hi_s, lo_f, lo_c),
        ("high speed, low fuel, high egr", hi_s, lo_f, hi_c),
        ("high speed, high fuel, low egr", hi_s, hi_f, lo_c),
    ]
    regions = [Region(name, Q_e, R_ext, speed=s, fuel=f, chi=c) for name, s, f, c in boxes]
    regions.append(Region("high speed, high fuel, high egr", Q_e, R_ext))
    return RegionTable(regions)


def select_region(table: RegionTable, engine_speed, fuel_rate, chi_egr):
    r = table.select(engine_speed, fuel_rate, chi_egr)
    return r.Q_e, r.R_ext


# -- configuration -----------------------------------------------------------

@dataclass
class FbMpcConfig:
    N: int = 50
    sample_period: float = 0.02
    region_table: RegionTable = field(default_factory=default_region_table)
    mu: float = 1e6
    x_min: tuple = (0.8, 0.0)
    x_max: tuple = (2.6, 0.6)
    u_min: tuple = (0.0, 0.0)
    u_max: tuple = (100.0, 100.0)
    penalty_source: str = "interpolated_grid"
    tighten_constraints: bool = False
    qp_tolerance: float = 1e-8
    qp_max_iterations: int = 500

    def __post_init__(self):
        self.x_min = np.array(self.x_min, dtype=float)
        self.x_max = np.array(self.x_max, dtype=float)
        self.u_min = np.array(self.u_min, dtype=float)
        self.u_max = np.array(self.u_max, dtype=float)
        if int(self.N) != self.N or self.N < 2:
            raise ConfigurationError("horizon must be an integer >= 2", "fb.N")
        self.N = int(self.N)
        if not self.sample_period > 0:
            raise ConfigurationError("must be positive", "fb.sample_period")
        if not self.mu > 0:
            raise ConfigurationError("slack weight must be positive", "fb.mu")
        for lo, hi, name in ((self.x_min, self.x_max, "x"), (self.u_min, self.u_max, "u")):
            if lo.shape != (2,) or hi.shape != (2,) or np.any(lo >= hi):
                raise ConfigurationError("bounds must be 2-vectors with min < max",
                                         f"fb.{name}_min")
        if self.penalty_source not in ("interpolated_grid", "online_dare"):
            raise ConfigurationError(f"unknown penalty source {self.penalty_source!r}",
                                     "fb.penalty_source")

    def to_dict(self):
        return {"N": self.N, "sample_period": self.sample_period,
                "regions": self.region_table.to_list(), "mu": self.mu,
                "x_min": self.x_min.tolist(), "x_max": self.x_max.tolist(),
                "u_min": self.u_min.tolist(), "u_max": self.u_max.tolist(),
                "penalty_source": self.penalty_source,
                "tighten_constraints": self.tighten_constraints,
                "qp_tolerance": self.qp_tolerance, "qp_max_iterations": self.qp_max_iterations}

    @classmethod
    def from_dict(cls, d) -> "FbMpcConfig":
        d = dict(d)
        if "regions" in d:
            d["region_table"] = RegionTable.from_list(d.pop("regions"))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown keys {sorted(unknown)}", "fb")
        return cls(**d)


# -- prediction ----------------------------------------------------------------

@dataclass
class ExtendedState:
    delta_x: np.ndarray
    e: np.ndarray
    x_prev: np.ndarray
    u_prev: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.delta_x, self.e, self.x_prev, self.u_prev])


def init_extended(x_k, x_prev, u_bar_prev, r_k) -> ExtendedState:
    x_k = np.asarray(x_k, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    return ExtendedState(delta_x=x_k - x_prev, e=x_k - np.asarray(r_k, dtype=float),
                         x_prev=x_prev.copy(), u_prev=np.array(u_bar_prev, dtype=float))


def augmented_system(A, B):
    """Dynamics of the extended state under input increments."""
    I = np.eye(2)
    Aext = np.zeros((NEXT, NEXT))
    Aext[0:2, 0:2] = A
    Aext[2:4, 0:2] = A
    Aext[2:4, 2:4] = I
    Aext[4:6, 0:2] = I
    Aext[4:6, 4:6] = I
    Aext[6:8, 6:8] = I
    Bext = np.vstack([B, B, np.zeros((2, 2)), I])
    return Aext, Bext


@lru_cache(maxsize=8)
def _lag_index(N):
    lag = np.arange(N + 1)[:, None] - 1 - np.arange(N)[None, :]
    idx = np.clip(lag, 0, None)
    mask = (lag >= 0)[:, :, None, None]
    return idx, mask


def condense(A, B, N):
    """Free and forced response of ``x+ = A x + B u`` over ``N`` steps.

    Returns read-only ``Phi`` (N+1, n, n) and ``S`` (N+1, n, N*m) with
    ``x_j = Phi[j] x_0 + S[j] @ (u_0, ..., u_{N-1})``. The last few results
    are memoized, so the feedback and feedforward problems at the same
    operating point share one condensation.
    """
    A = np.ascontiguousarray(A, dtype=float)
    B = np.ascontiguousarray(B, dtype=float)
    key = (A.shape, B.shape, A.tobytes(), B.tobytes(), int(N))
    hit = _CONDENSED.get(key)
    if hit is None:
        hit = _condense(A, B, int(N))
        if len(_CONDENSED) >= 4:
            _CONDENSED.pop(next(iter(_CONDENSED)))
        _CONDENSED[key] = hit
    return hit


_CONDENSED = {}


def _condense(A, B, N):
    n, m = B.shape
    Phi = np.empty((N + 1, n, n))
    Phi[0] = np.eye(n)
    for j in range(1, N + 1):
        Phi[j] = A @ Phi[j - 1]
    idx, mask = _lag_index(N)
    S = (Phi[:N] @ B)[idx] * mask
    S = S.transpose(0, 2, 1, 3).reshape(N + 1, n, N * m)
    Phi.setflags(write=False)
    S.setflags(write=False)
    return Phi, S


@dataclass
class FbDecoder:
    """Recovers predicted trajectories from a QP solution vector."""

    N: int
    x0_ext: np.ndarray
    A: np.ndarray
    B: np.ndarray

    def split(self, z):
        z = np.asarray(z)
        return z[:NU * self.N].reshape(self.N, NU), z[NU * self.N:]

    def extended(self, z) -> np.ndarray:
        """Predicted extended states, rows j = 0..N."""
        Phi, S = condense(*augmented_system(self.A, self.B), self.N)
        return Phi @ self.x0_ext + S @ np.asarray(z)[:NU * self.N]

    def decode(self, z):
        """(x_0..x_N, u_0..u_{N-1}, eps)."""
        du, eps = self.split(z)
        X = self.extended(z)
        x = X[:, 0:2] + X[:, 4:6]
        u = X[:self.N, 6:8] + du
        return x, u, eps


def feedforward_shift(A, B, N, delta_ff):
    """``sum_{m<j} A^(j-1-m) B delta_ff`` for j = 0..N (row j)."""
    out = np.zeros((N + 1, 2))
    acc = np.zeros(2)
    Bd = B @ np.asarray(delta_ff, dtype=float)
    for j in range(1, N + 1):
        acc = A @ acc + Bd
        out[j] = acc
    return out


@lru_cache(maxsize=8)
def _constraint_template(N):
    """Model-independent part of the inequality matrix (read-only)."""
    nu = NU * N
    G = np.zeros((4 * NX * N + NX, nu + NX))
    eps_cols = -np.tile(np.eye(NX), (N, 1))
    G[:2 * NX * N, nu:] = np.vstack([eps_cols, eps_cols])
    # u_j = u_prev + du_0 + ... + du_j
    Gu = np.kron(np.tril(np.ones((N, N))), np.eye(NU))
    r0 = 2 * NX * N
    G[r0:r0 + nu, :nu] = Gu
    G[r0 + nu:r0 + 2 * nu, :nu] = -Gu
    G[-NX:, nu:] = -np.eye(NX)
    G.setflags(write=False)
    return G


def build_qp(config: FbMpcConfig, model: LocalModel, penalty: TerminalPenalty,
             ext0: ExtendedState, Q_e=DEFAULT_Q_E, R_ext=DEFAULT_R_EXT, ff_delta=None):
    """Condensed QP of the rate-based problem; returns ``(DenseQp, FbDecoder)``.

    Uses the block structure of the extended model: state increments follow
    ``(A, B)``, while the tracking error and the state both accumulate them.
    """
    N = config.N
    Q_e = np.asarray(Q_e, dtype=float)
    R_ext = np.asarray(R_ext, dtype=float)
    if model.A.shape != (2, 2) or penalty.P_tilde.shape != (4, 4):
        raise ConfigurationError("model/penalty dimension mismatch")
    x0 = ext0.as_vector()
    if x0.shape != (NEXT,):
        raise ConfigurationError(f"extended state must have {NEXT} entries")
    dx0, e0, xp0, up0 = x0[0:2], x0[2:4], x0[4:6], x0[6:8]
    A, B = model.A, model.B
    Phi, S = condense(A, B, N)
    nu = NU * N
    nz = nu + NX

    # e_j and x_j both gain dx_1 + ... + dx_j
    dfree = Phi @ dx0
    acc_free = np.cumsum(dfree, axis=0) - dfree[0]
    acc_S = np.cumsum(S, axis=0)
    e_free = e0 + acc_free
    x_free = xp0 + dx0 + acc_free

    stage = acc_S[:N].reshape(-1, nu)
    Qs = (Q_e @ acc_S[:N]).reshape(-1, nu)
    T_N = np.vstack([S[N], acc_S[N]])
    PT = penalty.P_tilde @ T_N
    c_N = np.concatenate([dfree[N], e_free[N]])

    H = np.zeros((nz, nz))
    Huu = stage.T @ Qs + T_N.T @ PT
    for j in range(N):
        Huu[2 * j:2 * j + 2, 2 * j:2 * j + 2] += R_ext
    H[:nu, :nu] = Huu + Huu.T
    H[nu:, nu:] = 2.0 * config.mu * np.eye(NX)
    H.flat[::nz + 1] += HESSIAN_REGULARIZATION
    f = np.zeros(nz)
    f[:nu] = 2.0 * (Qs.T @ e_free[:N].reshape(-1) + PT.T @ c_N)

    # x_j = dx_j + x_{j-1}, j = 1..N (softened)
    G = _constraint_template(N).copy()
    Gx = acc_S[1:].reshape(NX * N, nu)
    G[:NX * N, :nu] = Gx
    G[NX * N:2 * NX * N, :nu] = -Gx
    cx = x_free[1:].reshape(-1)
    if ff_delta is not None and config.tighten_constraints:
        cx = cx + feedforward_shift(A, B, N, ff_delta)[1:].reshape(-1)
    cu = np.tile(up0, N)
    h = np.concatenate([np.tile(config.x_max, N) - cx, cx - np.tile(config.x_min, N),
                        np.tile(config.u_max, N) - cu, cu - np.tile(config.u_min, N),
                        np.zeros(NX)])
    return DenseQp(H, f, G, h), FbDecoder(N, x0, A, B)


# -- control step -------------------------------------------------------------

@dataclass
class FbDiagnostics:
    status: QpStatus
    kkt_residual: float
    eps: np.ndarray
    iterations: int
    region: str


class FbGrids:
    """Model grid plus terminal-penalty grids, one per distinct weight pair."""

    def __init__(self, model_grid: ModelGrid, config: FbMpcConfig = None):
        self.model_grid = model_grid
        self._penalties = []
        if config is not None and config.penalty_source == "interpolated_grid":
            for Q_e, R_ext in config.region_table.weight_sets:
                self.penalty_grid(Q_e, R_ext)

    def penalty_grid(self, Q_e, R_ext) -> PenaltyGrid:
        for pg in self._penalties:
            if pg.matches(Q_e, R_ext):
                return pg
        pg = penalty_grid_for(self.model_grid, Q_e, R_ext)
        self._penalties.append(pg)
        return pg


def fb_control_step(config: FbMpcConfig, grids: FbGrids, state, r_k, rho_k, ff_delta=None,
                    warm_start=None):
    """One feedback-MPC update.

    ``state`` is ``(x_k, x_{k-1}, u_bar_{k-1})`` where ``u_bar`` already
    contains the feedforward increment. Returns ``(du0, u_k, diagnostics,
    solution)``; ``u_k`` is saturated to the input bounds.
    """
    x_k, x_prev, u_bar_prev = (np.asarray(v, dtype=float) for v in state)
    rho_k = grids.model_grid.clamp(rho_k)
    model = interpolate_model(grids.model_grid, rho_k)
    region = config.region_table.select(rho_k[0], rho_k[1], x_k[1])
    if config.penalty_source == "online_dare":
        penalty = fb_terminal_penalty(model, region.Q_e, region.R_ext)
    else:
        penalty = interpolate_penalty(grids.penalty_grid(region.Q_e, region.R_ext), rho_k)
    ext0 = init_extended(x_k, x_prev, u_bar_prev, r_k)
    qp, decoder = build_qp(config, model, penalty, ext0, region.Q_e, region.R_ext, ff_delta)
    sol = solve_qp(qp, config.qp_tolerance, config.qp_max_iterations, warm_start=warm_start)
    du, eps = decoder.split(sol.z)
    du0 = du[0].copy()
    u_k = np.clip(u_bar_prev + du0, config.u_min, config.u_max)
    diag = FbDiagnostics(sol.status, sol.kkt_residual, eps.copy(), sol.iterations, region.name)
    return du0, u_k, diag, sol


class FbMpcController:
    """Feedback MPC with its one-step memory of the previous state and input."""

    def __init__(self, config: FbMpcConfig, grids: FbGrids):
        self.config = config
        self.grids = grids
        self.x_prev = None
        self.u_prev = None
        self._active = None

    def reset(self, x_prev, u_prev):
        self.x_prev = np.array(x_prev, dtype=float)
        self.u_prev = np.array(u_prev, dtype=float)
        self._active = None

    def step(self, x_k, r_k, rho_k, ff_prev=None, ff_now=None):
        """Compute and remember ``u_k``; the feedforward pair enters through ``u_bar``."""
        if self.x_prev is None:
            raise RuntimeError("controller not initialized; call reset()")
        x_k = np.asarray(x_k, dtype=float)
        delta_ff = None
        u_bar = self.u_prev
        if ff_prev is not None and ff_now is not None:
            delta_ff = np.asarray(ff_now, dtype=float) - np.asarray(ff_prev, dtype=float)
            u_bar = self.u_prev + delta_ff
        du0, u_k, diag, sol = fb_control_step(self.config, self.grids, (x_k, self.x_prev, u_bar),
                                              r_k, rho_k, ff_delta=delta_ff,
                                              warm_start=self._active)
        self._active = sol.active_set
        self.x_prev = x_k.copy()
        self.u_prev = u_k
        return u_k, du0, diag
