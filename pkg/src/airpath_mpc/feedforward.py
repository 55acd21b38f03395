"""Feedforward schemes: steady-state look-up table and model-only MPC.

Both produce an absolute actuator command ``u_ff``; the feedback MPC sees
only its increment through ``u_bar = u_prev + u_ff_now - u_ff_prev``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg as sla

from .errors import ConfigurationError
from .fb_mpc import DEFAULT_Q_E, DEFAULT_R_EXT, condense
from .lpv import LocalModel, ModelGrid, interpolate_model, step_model
from .qp import DenseQp, QpStatus, solve_qp
from .riccati import DARE_TOLERANCE, dare_residual, solve_dare

HESSIAN_REGULARIZATION = 1e-9
NEWTON_STEPS = 3


class FfMode(str, Enum):
    NONE = "none"
    LOOKUP_TABLE = "lookup_table"
    MPC = "mpc"

    @classmethod
    def parse(cls, token: str) -> "FfMode":
        aliases = {"none": cls.NONE, "fb": cls.NONE, "lut": cls.LOOKUP_TABLE,
                   "lookup_table": cls.LOOKUP_TABLE, "mpc": cls.MPC}
        try:
            return aliases[str(token).strip().lower()]
        except KeyError:
            raise ConfigurationError(f"unknown feedforward mode {token!r}", "ff_mode") from None


@dataclass
class FfMpcConfig:
    N: int = 50
    Q_ff: np.ndarray = DEFAULT_Q_E
    R_ff: np.ndarray = DEFAULT_R_EXT
    x_min: tuple = (0.8, 0.0)
    x_max: tuple = (2.6, 0.6)
    u_min: tuple = (0.0, 0.0)
    u_max: tuple = (100.0, 100.0)
    qp_tolerance: float = 1e-8
    qp_max_iterations: int = 500

    def __post_init__(self):
        self.Q_ff = np.array(self.Q_ff, dtype=float)
        self.R_ff = np.array(self.R_ff, dtype=float)
        for name in ("x_min", "x_max", "u_min", "u_max"):
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        if int(self.N) != self.N or self.N < 2:
            raise ConfigurationError("horizon must be an integer >= 2", "ff.N")
        self.N = int(self.N)
        if self.Q_ff.shape != (2, 2) or np.linalg.eigvalsh(0.5 * (self.Q_ff + self.Q_ff.T))[0] < 0:
            raise ConfigurationError("must be a 2x2 PSD matrix", "ff.Q_ff")
        if self.R_ff.shape != (2, 2) or np.linalg.eigvalsh(0.5 * (self.R_ff + self.R_ff.T))[0] <= 0:
            raise ConfigurationError("must be a 2x2 PD matrix", "ff.R_ff")
        if np.any(self.x_min >= self.x_max) or np.any(self.u_min >= self.u_max):
            raise ConfigurationError("bounds must satisfy min < max", "ff")

    def to_dict(self):
        return {"N": self.N, "Q_ff": self.Q_ff.tolist(), "R_ff": self.R_ff.tolist(),
                "x_min": self.x_min.tolist(), "x_max": self.x_max.tolist(),
                "u_min": self.u_min.tolist(), "u_max": self.u_max.tolist(),
                "qp_tolerance": self.qp_tolerance, "qp_max_iterations": self.qp_max_iterations}

    @classmethod
    def from_dict(cls, d) -> "FfMpcConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown keys {sorted(unknown)}", "ff")
        return cls(**d)


@dataclass
class FfOutput:
    u_ff_k: np.ndarray
    u_ff_prev: np.ndarray

    @property
    def delta_ff(self) -> np.ndarray:
        return self.u_ff_k - self.u_ff_prev


def lut_ff(grid: ModelGrid, rho) -> np.ndarray:
    """Steady-state actuator positions interpolated from the grid."""
    w = grid.weights(rho)
    node = w.at_node
    if node is not None:
        return grid.nodes[node[0]][node[1]].u_ss.copy()
    return w.blend(grid.stack("u_ss"))


def compose(u_prev, ff_prev, ff_now) -> np.ndarray:
    """Feedforward-adjusted previous input handed to the feedback MPC."""
    return np.asarray(u_prev, dtype=float) + (np.asarray(ff_now, dtype=float)
                                              - np.asarray(ff_prev, dtype=float))


def predicted_true_state(model: LocalModel, x_pred, delta_ff) -> np.ndarray:
    """Shift the rate-based predictions by the response to a feedforward step.

    ``x_pred[j]`` is ``x_{j|k}`` for j = 0..; the returned row j adds
    ``sum_{m<j} A^(j-1-m) B delta_ff``.
    """
    x_pred = np.asarray(x_pred, dtype=float)
    out = x_pred.copy()
    Bd = model.B @ np.asarray(delta_ff, dtype=float)
    acc = np.zeros(2)
    for j in range(1, len(x_pred)):
        acc = model.A @ acc + Bd
        out[j] += acc
    return out


def dc_input(model: LocalModel, r) -> np.ndarray:
    """Input deviation holding the model at ``r`` (deviation coordinates)."""
    r_dev = np.asarray(r, dtype=float) - model.x_ss
    rhs = (np.eye(2) - model.A) @ r_dev
    if np.linalg.cond(model.B) < 1e10:
        return np.linalg.solve(model.B, rhs)
    return np.linalg.lstsq(model.B, rhs, rcond=None)[0]


@dataclass
class FfPlan:
    """Solution of one feedforward MPC problem."""

    u_ff: np.ndarray
    x_pred: np.ndarray = None     # absolute states x_0..x_N
    u_pred: np.ndarray = None     # absolute inputs u_0..u_{N-1}
    status: QpStatus = QpStatus.OPTIMAL
    kkt_residual: float = 0.0
    iterations: int = 0
    fallback: bool = False
    P: np.ndarray = None
    active_set: list = field(default_factory=list)


@dataclass
class _FfMatrices:
    """Model-dependent parts of the feedforward QP."""

    Phi: np.ndarray
    S: np.ndarray
    WS: np.ndarray
    H: np.ndarray
    G: np.ndarray


def _ff_matrices(config: FfMpcConfig, model: LocalModel, P_ff) -> _FfMatrices:
    N = config.N
    Phi, S = condense(model.A, model.B, N)
    nu = 2 * N
    W = np.empty((N + 1, 2, 2))
    W[:N] = config.Q_ff
    W[N] = P_ff
    WS = (W @ S).reshape(-1, nu)
    H = S.reshape(-1, nu).T @ WS
    H4 = H.reshape(N, 2, N, 2)
    k = np.arange(N)
    H4[k, :, k, :] += config.R_ff
    H = H + H.T
    H.flat[::nu + 1] += HESSIAN_REGULARIZATION
    Gx = S[1:].reshape(-1, nu)
    I = np.eye(nu)
    G = np.vstack([Gx, -Gx, I, -I])
    return _FfMatrices(Phi, S, WS, H, G)


def ff_mpc_plan(config: FfMpcConfig, model: LocalModel, x_hat, r_k, P_ff=None,
                warm_start=None, matrices: _FfMatrices = None) -> FfPlan:
    """Solve the deviation-coordinate tracking problem for a fixed local model.

    Stage cost ``e'Q e + (u~ - u~_t)' R (u~ - u~_t)`` with ``e = x~ - r~`` and
    ``u~_t`` the input deviation that holds the model at ``r``; terminal cost
    ``e_N' P e_N`` with ``P`` the Riccati solution of ``(A, B, Q, R)``. State
    and input bounds are hard.
    """
    N = config.N
    if matrices is None:
        if P_ff is None:
            P_ff = solve_dare(model.A, model.B, config.Q_ff, config.R_ff)
        matrices = _ff_matrices(config, model, P_ff)
    Phi, S = matrices.Phi, matrices.S
    x0 = np.asarray(x_hat, dtype=float) - model.x_ss
    r_dev = np.asarray(r_k, dtype=float) - model.x_ss
    u_t = dc_input(model, r_k)
    free = Phi @ x0
    err0 = free - r_dev
    f = 2.0 * (matrices.WS.T @ err0.reshape(-1) - np.tile(config.R_ff @ u_t, N))
    fx = free[1:].reshape(-1)
    h = np.concatenate([np.tile(config.x_max - model.x_ss, N) - fx,
                        fx - np.tile(config.x_min - model.x_ss, N),
                        np.tile(config.u_max - model.u_ss, N),
                        np.tile(model.u_ss - config.u_min, N)])
    sol = solve_qp(DenseQp(matrices.H, f, matrices.G, h), config.qp_tolerance,
                   config.qp_max_iterations, warm_start=warm_start)
    u_dev = sol.z.reshape(N, 2)
    x_dev = free + S @ sol.z
    return FfPlan(u_ff=model.u_ss + u_dev[0], x_pred=model.x_ss + x_dev,
                  u_pred=model.u_ss + u_dev, status=sol.status,
                  kkt_residual=sol.kkt_residual, iterations=sol.iterations, P=P_ff,
                  active_set=sol.active_set)


def _newton_dare(A, B, Q, R, P, steps=NEWTON_STEPS):
    """Newton (Hewer) steps on the Riccati equation from a nearby solution ``P``.

    Each step solves the closed-loop Lyapunov equation of the gain implied
    by the current iterate. Returns ``None`` unless the result satisfies
    the Riccati equation, in which case the caller should seed elsewhere.
    """
    n = A.shape[0]
    I = np.eye(n * n)
    for _ in range(steps):
        PB = P @ B
        K = np.linalg.solve(R + B.T @ PB, PB.T @ A)
        At = (A - B @ K).T
        kron = (At[:, None, :, None] * At[None, :, None, :]).reshape(n * n, n * n)
        P = np.linalg.solve(I - kron, (Q + K.T @ R @ K).reshape(-1)).reshape(n, n)
        P = 0.5 * (P + P.T)
    if not np.all(np.isfinite(P)) or dare_residual(A, B, Q, R, P) > DARE_TOLERANCE:
        return None
    # the Riccati equation also has non-stabilizing solutions
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if np.max(np.abs(np.linalg.eigvals(A - B @ K))) >= 1.0:
        return None
    return P


def ff_terminal_penalty(config: FfMpcConfig, model: LocalModel, P0=None) -> np.ndarray:
    """Riccati solution for the feedforward problem at one scheduled model.

    A guess from a nearby operating point is refined by Newton steps;
    without one (or if it does not yield a stabilizing gain) the iteration
    is seeded from the Schur-based solver. Either way the returned matrix
    meets the fixed-point residual tolerance.
    """
    A, B, Q, R = model.A, model.B, config.Q_ff, config.R_ff
    if P0 is not None:
        P0 = _newton_dare(A, B, Q, R, np.asarray(P0, dtype=float))
    if P0 is None:
        try:
            P0 = sla.solve_discrete_are(A, B, Q, R)
        except (np.linalg.LinAlgError, ValueError):
            P0 = None
    return solve_dare(A, B, Q, R, P0=P0)


def ff_mpc_step(config: FfMpcConfig, grid: ModelGrid, rho_k, r_k, x_hat, P0=None,
                warm_start=None) -> FfPlan:
    """Feedforward MPC output at ``rho_k``; falls back to the look-up table when infeasible."""
    model = interpolate_model(grid, rho_k)
    P_ff = ff_terminal_penalty(config, model, P0)
    plan = ff_mpc_plan(config, model, x_hat, r_k, P_ff=P_ff, warm_start=warm_start)
    return _with_fallback(plan, grid, rho_k)


def _with_fallback(plan: FfPlan, grid, rho_k) -> FfPlan:
    if plan.status is QpStatus.INFEASIBLE:
        plan.u_ff = lut_ff(grid, rho_k)
        plan.fallback = True
    return plan


class FfMpc:
    """Feedforward MPC closed around its own copy of the prediction model.

    The internal state is propagated with the total applied input and never
    corrected from measurements except through an explicit ``reset``.
    """

    def __init__(self, config: FfMpcConfig, grid: ModelGrid):
        self.config = config
        self.grid = grid
        self.x_hat = None
        self._model = None
        self._rho = None
        self._P = None
        self._matrices = None
        self._active = None
        self.last_plan = None

    def reset(self, x_hat=None, rho=None):
        """Re-synchronize the model state (defaults to the equilibrium at ``rho``)."""
        if x_hat is None:
            x_hat = interpolate_model(self.grid, rho).x_ss
        self.x_hat = np.array(x_hat, dtype=float)
        self._active = None

    def step(self, rho_k, r_k) -> np.ndarray:
        if self.x_hat is None:
            raise RuntimeError("feedforward MPC not initialized; call reset()")
        rho = self.grid.clamp(rho_k)
        if self._rho is None or not np.array_equal(rho, self._rho):
            # the model-only matrices are rebuilt whenever the schedule moves
            self._rho = rho
            self._model = interpolate_model(self.grid, rho)
            self._P = ff_terminal_penalty(self.config, self._model, P0=self._P)
            self._matrices = _ff_matrices(self.config, self._model, self._P)
        plan = ff_mpc_plan(self.config, self._model, self.x_hat, r_k, P_ff=self._P,
                           warm_start=self._active, matrices=self._matrices)
        plan = _with_fallback(plan, self.grid, rho)
        self._active = plan.active_set
        self.last_plan = plan
        return plan.u_ff

    def advance(self, u_applied):
        """Propagate the internal model one sample with the applied input."""
        self.x_hat = step_model(self._model, self._rho, self.x_hat, u_applied, self._rho[1])
