"""Independent reference computations used by the test-suite.

Nothing here imports the code paths being checked.
"""
import itertools

import numpy as np


def brute_force_qp(H, f, G, h, tol=1e-9):
    """Strictly convex QP by enumerating every active set.

    Returns (z, lam) of the unique KKT point.
    """
    n, m = H.shape[0], G.shape[0]
    best = None
    for k in range(0, min(n, m) + 1):
        for act in itertools.combinations(range(m), k):
            act = list(act)
            Ga = G[act]
            K = np.block([[H, Ga.T], [Ga, np.zeros((k, k))]])
            rhs = np.concatenate([-f, h[act]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            if np.linalg.cond(K) > 1e12:
                continue
            z, lam_a = sol[:n], sol[n:]
            if np.all(G @ z - h <= tol) and np.all(lam_a >= -tol):
                lam = np.zeros(m)
                lam[act] = lam_a
                if best is None:
                    best = (z, lam)
    return best


def kkt_violation(H, f, G, h, z, lam):
    stat = H @ z + f + G.T @ lam
    slack = G @ z - h
    return max(np.abs(stat).max(initial=0), slack.max(initial=0), (-lam).max(initial=0),
               np.abs(lam * slack).max(initial=0))


def random_qp(rng, n=None, m=None):
    n = n or int(rng.integers(1, 5))
    m = int(rng.integers(0, 7)) if m is None else m
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    f = rng.normal(size=n) * 3
    G = rng.normal(size=(m, n))
    z0 = rng.normal(size=n)
    h = G @ z0 + rng.uniform(0.0, 1.0, size=m)
    return H, f, G, h


def dare_residual(A, B, Q, R, P):
    """Frobenius norm of the Riccati equation residual by direct substitution."""
    S = R + B.T @ P @ B
    rhs = A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A) + Q
    return float(np.linalg.norm(rhs - P, "fro"))


def scalar_dare(a, b, q, r):
    """Positive root of p = a^2 p - a^2 b^2 p^2 / (r + b^2 p) + q."""
    # multiply through by (r + b^2 p): b^2 p^2 + (r - a^2 r - q b^2) p - q r = 0
    A2 = b * b
    B1 = r - a * a * r - q * b * b
    C0 = -q * r
    return (-B1 + np.sqrt(B1 * B1 - 4 * A2 * C0)) / (2 * A2)


def extended_matrices(A, B):
    """Extended-state dynamics written out block by block."""
    I, Z = np.eye(2), np.zeros((2, 2))
    Aext = np.block([[A, Z, Z, Z], [A, I, Z, Z], [I, Z, I, Z], [Z, Z, Z, I]])
    Bext = np.vstack([B, B, Z, I])
    return Aext, Bext


def naive_fb_qp(A, B, P_tilde, x0_ext, Q_e, R_ext, N, mu, x_min, x_max, u_min, u_max,
                reg=1e-9):
    """Dense rate-based QP assembled by explicit loops over the horizon.

    Returns ``H, f, G, h`` for ``z = (du_0..du_{N-1}, eps)`` under the
    ``1/2 z'Hz + f'z`` convention.
    """
    Aext, Bext = extended_matrices(np.asarray(A), np.asarray(B))
    n, nu = 8, 2 * N
    # prediction x_j = Phi_j x0 + Gam_j du
    Phi = [np.eye(n)]
    Gam = [np.zeros((n, nu))]
    for j in range(N):
        Phi.append(Aext @ Phi[-1])
        G = Aext @ Gam[-1]
        G[:, 2 * j:2 * j + 2] += Bext
        Gam.append(G)
    Hu = np.zeros((nu, nu))
    fu = np.zeros(nu)
    Ce = np.zeros((2, n)); Ce[:, 2:4] = np.eye(2)
    for j in range(N):
        Mj = Ce @ Gam[j]
        cj = Ce @ Phi[j] @ x0_ext
        Hu += Mj.T @ Q_e @ Mj
        fu += Mj.T @ Q_e @ cj
    CT = np.zeros((4, n)); CT[:, :4] = np.eye(4)
    MN = CT @ Gam[N]
    cN = CT @ Phi[N] @ x0_ext
    Hu += MN.T @ P_tilde @ MN
    fu += MN.T @ P_tilde @ cN
    for j in range(N):
        Hu[2 * j:2 * j + 2, 2 * j:2 * j + 2] += R_ext
    H = np.zeros((nu + 2, nu + 2))
    H[:nu, :nu] = 2 * Hu
    H[nu:, nu:] = 2 * mu * np.eye(2)
    H += reg * np.eye(nu + 2)
    f = np.concatenate([2 * fu, np.zeros(2)])
    rows, rhs = [], []
    Cx = np.zeros((2, n)); Cx[:, 0:2] = np.eye(2); Cx[:, 4:6] = np.eye(2)
    for j in range(1, N + 1):
        Mj = Cx @ Gam[j]
        cj = Cx @ Phi[j] @ x0_ext
        for i in range(2):
            e = np.zeros(2); e[i] = 1.0
            rows.append(np.concatenate([Mj[i], -e])); rhs.append(x_max[i] - cj[i])
            rows.append(np.concatenate([-Mj[i], -e])); rhs.append(-x_min[i] + cj[i])
    Cu = np.zeros((2, n)); Cu[:, 6:8] = np.eye(2)
    for j in range(N):
        Mj = Cu @ Gam[j]
        Mj[:, 2 * j:2 * j + 2] += np.eye(2)
        cj = Cu @ Phi[j] @ x0_ext
        for i in range(2):
            rows.append(np.concatenate([Mj[i], np.zeros(2)])); rhs.append(u_max[i] - cj[i])
            rows.append(np.concatenate([-Mj[i], np.zeros(2)])); rhs.append(-u_min[i] + cj[i])
    for i in range(2):
        e = np.zeros(nu + 2); e[nu + i] = -1.0
        rows.append(e); rhs.append(0.0)
    return H, f, np.array(rows), np.array(rhs)
