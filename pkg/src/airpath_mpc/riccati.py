"""Discrete algebraic Riccati equation and the feedback-MPC terminal penalty."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ConvergenceError
from .lpv import LocalModel, Mesh, ModelGrid

DARE_TOLERANCE = 1e-10
DARE_MAX_ITERATIONS = 100_000


def dare_residual(A, B, Q, R, P) -> float:
    return float(np.linalg.norm(_riccati_map(A, B, Q, R, P) - P, "fro"))


def _riccati_map(A, B, Q, R, P):
    PA = P @ A
    PB = P @ B
    S = R + B.T @ PB
    nxt = A.T @ PA - (A.T @ PB) @ np.linalg.solve(S, PB.T @ A) + Q
    return 0.5 * (nxt + nxt.T)


def solve_dare(A, B, Q, R, tolerance=DARE_TOLERANCE, max_iterations=DARE_MAX_ITERATIONS,
               P0=None):
    """Stabilizing solution of ``P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q``.

    Fixed-point (value) iteration of the Riccati recursion from ``P0 = Q``.
    Stops once the substitution residual of the current iterate is below
    ``tolerance`` (Frobenius norm). A PSD ``P0`` from a nearby problem may be
    passed to shorten the iteration.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if np.any(np.linalg.eigvalsh(0.5 * (R + R.T)) <= 0):
        raise ValueError("R must be positive definite")
    P = 0.5 * (Q + Q.T) if P0 is None else np.array(P0, dtype=float)
    res = np.inf
    for _ in range(max_iterations + 1):
        nxt = _riccati_map(A, B, Q, R, P)
        res = float(np.linalg.norm(nxt - P, "fro"))
        if res <= tolerance:
            return P
        if not np.isfinite(res):
            break
        P = nxt
    raise ConvergenceError(
        f"Riccati iteration did not converge in {max_iterations} iterations "
        f"(last residual {res:.3e})", residual=res)


def lqr_gain(A, B, R, P) -> np.ndarray:
    """State-feedback gain K with u = -K x for the cost-to-go matrix P."""
    PB = P @ B
    return np.linalg.solve(R + B.T @ PB, PB.T @ A)


def rate_based_pair(model: LocalModel):
    """Dynamics and input matrices of the (state increment, tracking error) pair."""
    A, B = model.A, model.B
    I = np.eye(2)
    Z = np.zeros((2, 2))
    return np.block([[A, Z], [A, I]]), np.vstack([B, B])


@dataclass(frozen=True, eq=False)
class TerminalPenalty:
    P_tilde: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P_tilde, dtype=float)
        if P.shape != (4, 4):
            raise ConfigurationError(f"P_tilde must be 4x4, got {P.shape}")
        P.setflags(write=False)
        object.__setattr__(self, "P_tilde", P)

    @property
    def embedded_P(self) -> np.ndarray:
        P = np.zeros((8, 8))
        P[:4, :4] = self.P_tilde
        return P


def fb_terminal_penalty(model: LocalModel, Q_e, R_ext, **dare_kw) -> TerminalPenalty:
    Q_e = np.asarray(Q_e, dtype=float)
    A4, B4 = rate_based_pair(model)
    Q4 = np.zeros((4, 4))
    Q4[2:, 2:] = Q_e
    return TerminalPenalty(solve_dare(A4, B4, Q4, np.asarray(R_ext, dtype=float), **dare_kw))


def _triu_pack(P):
    return P[np.triu_indices(P.shape[0])].tolist()


def _triu_unpack(v, n=4):
    P = np.zeros((n, n))
    iu = np.triu_indices(n)
    P[iu] = v
    P.T[iu] = v
    return P


class PenaltyGrid(Mesh):
    """Terminal penalties on the model-grid mesh for one weight pair."""

    def __init__(self, speed_breakpoints, fuel_breakpoints, penalties, Q_e, R_ext):
        super().__init__(speed_breakpoints, fuel_breakpoints)
        P = np.array([[np.asarray(p.P_tilde if isinstance(p, TerminalPenalty) else p, dtype=float)
                       for p in row] for row in penalties])
        if P.shape != self.shape + (4, 4):
            raise ConfigurationError(f"penalty table shape {P.shape} does not match mesh {self.shape}")
        # symmetric by construction: keep the upper triangle only
        P = np.array([[_triu_unpack(_triu_pack(p)) for p in row] for row in P])
        P.setflags(write=False)
        self._P = P
        self.Q_e = np.array(Q_e, dtype=float)
        self.R_ext = np.array(R_ext, dtype=float)

    @classmethod
    def compute(cls, grid: ModelGrid, Q_e, R_ext, **dare_kw) -> "PenaltyGrid":
        pens = [[fb_terminal_penalty(m, Q_e, R_ext, **dare_kw) for m in row] for row in grid.nodes]
        return cls(grid.speed, grid.fuel, pens, Q_e, R_ext)

    def node(self, i, j) -> TerminalPenalty:
        return TerminalPenalty(self._P[i, j])

    def matches(self, Q_e, R_ext) -> bool:
        return (np.array_equal(self.Q_e, np.asarray(Q_e, dtype=float))
                and np.array_equal(self.R_ext, np.asarray(R_ext, dtype=float)))

    def to_dict(self) -> dict:
        return {
            "Q_e": self.Q_e.tolist(),
            "R_ext": self.R_ext.tolist(),
            "P_tilde_upper": [_triu_pack(p) for row in self._P for p in row],
        }

    @classmethod
    def from_dict(cls, mesh: Mesh, d: dict) -> "PenaltyGrid":
        n_f = mesh.fuel.size
        flat = [_triu_unpack(v) for v in d["P_tilde_upper"]]
        if len(flat) != mesh.speed.size * n_f:
            raise ConfigurationError("terminal penalty count does not match the mesh",
                                     "terminal_penalties")
        rows = [flat[i * n_f:(i + 1) * n_f] for i in range(mesh.speed.size)]
        return cls(mesh.speed, mesh.fuel, rows, d["Q_e"], d["R_ext"])


def interpolate_penalty(grid: PenaltyGrid, rho) -> TerminalPenalty:
    """Element-wise bilinear interpolation of the stored penalties."""
    w = grid.weights(rho)
    node = w.at_node
    if node is not None:
        return grid.node(*node)
    P = w.blend(grid._P)
    P = 0.5 * (P + P.T)
    evals, evecs = np.linalg.eigh(P)
    if evals[0] < 0:
        P = (evecs * np.maximum(evals, 0.0)) @ evecs.T
        P = 0.5 * (P + P.T)
    return TerminalPenalty(P)


def penalty_grid_for(grid: ModelGrid, Q_e, R_ext) -> PenaltyGrid:
    """Stored penalties from the grid file when the weights match, else computed."""
    for rec in grid.terminal_penalties:
        pg = PenaltyGrid.from_dict(grid, rec)
        if pg.matches(Q_e, R_ext):
            return pg
    return PenaltyGrid.compute(grid, Q_e, R_ext)
