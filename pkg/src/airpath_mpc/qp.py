"""Dense strictly convex QP solver with KKT certification.

Solves ``min 1/2 z'Hz + f'z  s.t.  G z <= h`` with the Goldfarb-Idnani dual
active-set method: start from the unconstrained minimizer and add violated
constraints one at a time, dropping active ones whose multipliers would turn
negative. No feasible starting point is needed, which suits MPC problems
where the previous move is not necessarily admissible.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg as sla

DEFAULT_TOLERANCE = 1e-8
DEFAULT_MAX_ITERATIONS = 500


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True, eq=False)
class DenseQp:
    H: np.ndarray
    f: np.ndarray
    G: np.ndarray = None
    h: np.ndarray = None

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        f = np.asarray(self.f, dtype=float).reshape(-1)
        n = f.size
        if H.shape != (n, n):
            raise ValueError(f"H has shape {H.shape}, expected {(n, n)}")
        if self.G is None:
            G, h = np.zeros((0, n)), np.zeros(0)
        else:
            G = np.asarray(self.G, dtype=float).reshape(-1, n)
            h = np.asarray(self.h, dtype=float).reshape(-1)
        if G.shape[0] != h.size:
            raise ValueError(f"G has {G.shape[0]} rows but h has {h.size} entries")
        if n and np.abs(H - H.T).max() > 1e-12 * max(1.0, np.abs(H).max()):
            raise ValueError("H is not symmetric")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)

    @property
    def n(self):
        return self.f.size

    @property
    def m(self):
        return self.h.size


@dataclass
class QpSolution:
    z: np.ndarray
    lam: np.ndarray
    status: QpStatus
    kkt_residual: float
    iterations: int
    active_set: list = field(default_factory=list)

    @property
    def optimal(self):
        return self.status is QpStatus.OPTIMAL


def kkt_residual(qp: DenseQp, sol) -> float:
    """Largest of the stationarity, primal, dual and complementarity violations."""
    z, lam = sol.z, sol.lam
    stat = qp.H @ z + qp.f + qp.G.T @ lam
    slack = qp.G @ z - qp.h
    parts = [np.max(np.abs(stat), initial=0.0),
             np.max(slack, initial=0.0),
             np.max(-lam, initial=0.0),
             np.max(np.abs(lam * slack), initial=0.0)]
    return float(max(0.0, *parts))


def solve_qp(qp: DenseQp, tolerance=DEFAULT_TOLERANCE, max_iterations=DEFAULT_MAX_ITERATIONS,
             warm_start=None) -> QpSolution:
    """Solve a strictly convex dense QP.

    ``warm_start`` is an optional list of constraint indices expected to be
    active; they are tried first when violated. It only changes the order in
    which constraints enter, never the optimality contract.
    """
    H, f, G, h = qp.H, qp.f, qp.G, qp.h
    n, m = qp.n, qp.m
    try:
        L = sla.cholesky(H, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("H is not positive definite") from exc

    # work in y = L'z: objective 1/2|y|^2 + c'y, constraints V'y <= h with
    # V = L^-1 G'; columns of V are formed only for constraints that enter
    c = sla.solve_triangular(L, f, lower=True, check_finite=False)
    Vcols: dict[int, np.ndarray] = {}

    def vcol(i):
        if i not in Vcols:
            Vcols[i] = sla.solve_triangular(L, G[i], lower=True, check_finite=False)
        return Vcols[i]

    def to_z(y):
        return sla.solve_triangular(L, y, lower=True, trans="T", check_finite=False)

    y = -c
    active: list[int] = []
    lam_a = np.zeros(0)
    # V[:, active] = Q R with Q = Qbuf[:, :k]; Rinv = inverse of R
    Qbuf = np.zeros((n, n))
    Rinv = np.zeros((n, n))
    k = 0
    add_tol = 0.1 * tolerance
    hints = [int(i) for i in (warm_start or []) if 0 <= int(i) < m]
    iterations = 0
    status = None

    while status is None and m:
        viol = G @ to_z(y) - h
        if active:
            viol[active] = -np.inf
        p = next((i for i in hints if viol[i] > add_tol), None)
        if p is None:
            p = int(np.argmax(viol))
            if viol[p] <= add_tol:
                break
        hints = [i for i in hints if i != p]

        v = vcol(p)
        vv = float(v @ v)
        lam_p = 0.0
        while True:
            iterations += 1
            if iterations > max_iterations:
                status = QpStatus.MAX_ITERATIONS
                break
            Q = Qbuf[:, :k]
            qv = v @ Q
            dy = Q @ qv - v
            dy -= Q @ (dy @ Q)    # re-orthogonalize
            dlam = -(Rinv[:k, :k] @ qv)
            slope = float(v @ dy)
            t_full = np.inf if -slope <= 1e-13 * vv else (float(v @ y) - h[p]) / -slope
            drop, t_part = None, np.inf
            if k:
                neg = dlam < 0
                if neg.any():
                    ratios = np.full(k, np.inf)
                    ratios[neg] = lam_a[neg] / -dlam[neg]
                    drop = int(np.argmin(ratios))
                    t_part = float(ratios[drop])
            t = min(t_full, t_part)
            if not np.isfinite(t):
                status = QpStatus.INFEASIBLE
                break
            if np.isfinite(t_full):
                y = y + t * dy
            lam_a = lam_a + t * dlam
            lam_p += t
            if t_full <= t_part:
                # append v to the factorization
                r1 = v @ Q
                q = v - Q @ r1
                r2 = q @ Q
                q -= Q @ r2
                rho = float(np.sqrt(q @ q))
                Qbuf[:, k] = q / rho
                Rinv[:k, k] = -(Rinv[:k, :k] @ (r1 + r2)) / rho
                Rinv[k, :k] = 0.0
                Rinv[k, k] = 1.0 / rho
                k += 1
                active.append(p)
                lam_a = np.append(lam_a, lam_p)
                break
            del active[drop]
            lam_a = np.delete(lam_a, drop)
            k -= 1
            if k:
                Qa, Ra = np.linalg.qr(np.column_stack([vcol(i) for i in active]))
                Qbuf[:, :k] = Qa
                Rinv[:k, :k] = sla.solve_triangular(Ra, np.eye(k), lower=False,
                                                     check_finite=False)

    z = to_z(y)
    lam = np.zeros(m)
    if active:
        lam[active] = np.maximum(lam_a, 0.0)
    sol = QpSolution(z=z, lam=lam, status=status or QpStatus.OPTIMAL, kkt_residual=0.0,
                     iterations=iterations, active_set=list(active))
    sol.kkt_residual = kkt_residual(qp, sol)
    if sol.status is QpStatus.OPTIMAL and active and sol.kkt_residual > 0.01 * tolerance:
        _polish(qp, sol)
        sol.kkt_residual = kkt_residual(qp, sol)
    if sol.status is QpStatus.OPTIMAL and sol.kkt_residual > tolerance:
        sol.status = QpStatus.MAX_ITERATIONS
    return sol


def _polish(qp: DenseQp, sol: QpSolution) -> None:
    """Re-solve the equality-constrained KKT system on the final active set.

    Removes drift accumulated by the incremental steps; kept only if it does
    not make the certificate worse.
    """
    act = sol.active_set
    n, k = qp.n, len(act)
    Ga = qp.G[act]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = qp.H
    K[:n, n:] = Ga.T
    K[n:, :n] = Ga
    rhs = np.concatenate([-qp.f, qp.h[act]])
    try:
        x = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return
    lam = np.zeros(qp.m)
    lam[act] = x[n:]
    if np.any(lam[act] < 0):
        return
    before = kkt_residual(qp, sol)
    cand = QpSolution(z=x[:n], lam=lam, status=sol.status, kkt_residual=0.0,
                      iterations=sol.iterations, active_set=act)
    if kkt_residual(qp, cand) <= before:
        sol.z, sol.lam = cand.z, cand.lam
