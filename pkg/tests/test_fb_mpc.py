import numpy as np
import pytest

from oracles import extended_matrices, naive_fb_qp
from airpath_mpc.errors import ConfigurationError
from airpath_mpc.fb_mpc import (DEFAULT_Q_E, DEFAULT_R_EXT, FbGrids, FbMpcConfig,
                                FbMpcController, Region, RegionTable, augmented_system,
                                build_qp, default_region_table, fb_control_step, init_extended,
                                select_region)
from airpath_mpc.lpv import LocalModel, interpolate_model
from airpath_mpc.qp import QpStatus, solve_qp
from airpath_mpc.riccati import TerminalPenalty, fb_terminal_penalty, lqr_gain, rate_based_pair

WIDE = dict(x_min=(-1e3, -1e3), x_max=(1e3, 1e3), u_min=(-1e5, -1e5), u_max=(1e5, 1e5))


def _random_model(rng):
    A = rng.normal(size=(2, 2))
    A *= rng.uniform(0.3, 0.9) / np.max(np.abs(np.linalg.eigvals(A)))
    return LocalModel(A=A, B=rng.normal(scale=0.02, size=(2, 2)), Bf=rng.normal(size=(2, 1)),
                      x_ss=[1.4, 0.2], u_ss=[40.0, 50.0], w_inj_ss=30.0)


# -- region table ---------------------------------------------------------------

def test_default_table_has_seven_regions():
    assert len(default_region_table()) == 7


def test_region_interior_and_boundary():
    table = default_region_table()
    assert table.select(1000.0, 30.0, 0.1) is table.regions[0]
    assert table.select(1500.0, 30.0, 0.1) is table.regions[3]
    assert table.select(1499.999, 55.0, 0.5) is table.regions[2]
    Q, R = select_region(table, 1000.0, 30.0, 0.1)
    np.testing.assert_array_equal(Q, np.array(DEFAULT_Q_E))
    np.testing.assert_array_equal(R, np.array(DEFAULT_R_EXT))


def test_region_lattice_unique_match():
    table = default_region_table()
    axes = np.meshgrid(np.linspace(0, 3000, 22), np.linspace(0, 150, 22), np.linspace(0, 1, 22),
                       indexing="ij")
    hits = 0
    for s, f, c in zip(*(a.ravel() for a in axes)):
        n = sum(r.contains(s, f, c) for r in table.regions[:-1])
        assert n <= 1
        hits += 1
    assert hits >= 10_000


def test_overlapping_regions_rejected():
    a = Region("a", np.eye(2), np.eye(2), speed=(0, 1000))
    b = Region("b", np.eye(2), np.eye(2), speed=(500, 2000))
    with pytest.raises(ConfigurationError):
        RegionTable([a, b, Region("rest", np.eye(2), np.eye(2))])
    with pytest.raises(ConfigurationError):
        RegionTable([a])


def test_config_validation():
    with pytest.raises(ConfigurationError):
        FbMpcConfig(N=1)
    with pytest.raises(ConfigurationError):
        FbMpcConfig(mu=0)
    with pytest.raises(ConfigurationError):
        FbMpcConfig(x_min=(3.0, 0.0))
    cfg = FbMpcConfig(N=10)
    assert FbMpcConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


# -- extended state --------------------------------------------------------------

def test_init_extended_examples():
    x = np.array([1.3, 0.2])
    s = init_extended(x, x, [40, 50], x)
    assert not s.delta_x.any() and not s.e.any()
    s = init_extended(x, x, [40, 50], x - [0.1, 0.02])
    np.testing.assert_allclose(s.e, [0.1, 0.02], atol=1e-15)
    u_prev = np.array([40.0, 50.0])
    s = init_extended(x, x, u_prev + [5, -3], x)
    np.testing.assert_array_equal(s.u_prev, [45.0, 47.0])


def test_augmented_system_layout():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    Ae, Be = augmented_system(A, B)
    Ao, Bo = extended_matrices(A, B)
    np.testing.assert_array_equal(Ae, Ao)
    np.testing.assert_array_equal(Be, Bo)


@pytest.mark.parametrize("seed", range(20))
def test_augmented_model_equivalence(seed):
    rng = np.random.default_rng(seed)
    m = _random_model(rng)
    Ae, Be = augmented_system(m.A, m.B)
    x_prev = m.x_ss + rng.normal(scale=0.05, size=2)
    u_prev = m.u_ss + rng.normal(size=2)
    r = m.x_ss + rng.normal(scale=0.05, size=2)
    # the original model needs x_{k-1} to be consistent with u_{k-1}
    x = m.x_ss + m.A @ (x_prev - m.x_ss) + m.B @ (u_prev - m.u_ss)
    ext = init_extended(x, x_prev, u_prev, r).as_vector()
    u = u_prev.copy()
    for _ in range(200):
        du = rng.normal(size=2)
        u = u + du
        x_next = m.x_ss + m.A @ (x - m.x_ss) + m.B @ (u - m.u_ss)
        ext = Ae @ ext + Be @ du
        np.testing.assert_allclose(ext[0:2], x_next - x, atol=1e-12)
        np.testing.assert_allclose(ext[2:4], x_next - r, atol=1e-12)
        np.testing.assert_allclose(ext[4:6], x, atol=1e-12)
        np.testing.assert_allclose(ext[6:8], u, atol=1e-12)
        x = x_next


# -- condensed QP ------------------------------------------------------------------

def _sorted_rows(G, h):
    M = np.column_stack([G, h])
    return M[np.lexsort(M.T[::-1])]


@pytest.mark.parametrize("seed", range(3))
def test_build_qp_matches_expansion_oracle(seed):
    rng = np.random.default_rng(seed)
    m = _random_model(rng)
    M = rng.normal(size=(4, 4))
    pen = TerminalPenalty(M @ M.T)
    Q_e = np.diag(rng.uniform(0.5, 5, 2))
    R_ext = np.diag(rng.uniform(0.1, 1, 2))
    cfg = FbMpcConfig(N=3, mu=100.0, x_min=(0.5, 0.0), x_max=(2.5, 0.5), u_min=(0, 0),
                      u_max=(100, 100))
    ext0 = init_extended(m.x_ss + rng.normal(scale=0.1, size=2), m.x_ss,
                         m.u_ss + rng.normal(size=2), m.x_ss + rng.normal(scale=0.1, size=2))
    qp, _ = build_qp(cfg, m, pen, ext0, Q_e, R_ext)
    H, f, G, h = naive_fb_qp(m.A, m.B, pen.P_tilde, ext0.as_vector(), Q_e, R_ext, 3, 100.0,
                             cfg.x_min, cfg.x_max, cfg.u_min, cfg.u_max)
    np.testing.assert_allclose(qp.H, H, atol=1e-10 * np.abs(H).max())
    np.testing.assert_allclose(qp.f, f, atol=1e-10 * max(1, np.abs(f).max()))
    np.testing.assert_allclose(_sorted_rows(qp.G, qp.h), _sorted_rows(G, h), atol=1e-10)


def test_zero_extended_state_needs_no_move():
    m = LocalModel(A=np.diag([0.7, 0.5]), B=np.eye(2) * 0.01, Bf=np.zeros(2), x_ss=[0, 0],
                   u_ss=[0, 0], w_inj_ss=0.0)
    cfg = FbMpcConfig(N=2, **WIDE)
    pen = fb_terminal_penalty(m, np.eye(2), np.eye(2))
    ext0 = init_extended([0, 0], [0, 0], [0, 0], [0, 0])
    qp, dec = build_qp(cfg, m, pen, ext0, np.eye(2), np.eye(2))
    assert not qp.f.any()
    sol = solve_qp(qp)
    assert sol.status is QpStatus.OPTIMAL
    np.testing.assert_allclose(sol.z, 0, atol=1e-12)


def test_tight_state_bound_is_softened(default_grid):
    m = default_grid.nodes[4][5]
    x = m.x_ss
    cfg = FbMpcConfig(N=10, x_max=(x[0] - 0.05, 0.6))
    pen = fb_terminal_penalty(m, DEFAULT_Q_E, DEFAULT_R_EXT)
    ext0 = init_extended(x, x, m.u_ss, x)
    qp, dec = build_qp(cfg, m, pen, ext0)
    sol = solve_qp(qp)
    assert sol.status is QpStatus.OPTIMAL
    xs, us, eps = dec.decode(sol.z)
    assert eps[0] > 0
    assert np.all(xs[1:] <= cfg.x_max + eps + 1e-9)
    assert np.all(xs[1:] >= cfg.x_min - eps - 1e-9)
    assert np.all(us >= cfg.u_min - 1e-9) and np.all(us <= cfg.u_max + 1e-9)


def test_slack_zero_when_interior(default_grid):
    m = default_grid.nodes[4][5]
    cfg = FbMpcConfig()
    pen = fb_terminal_penalty(m, DEFAULT_Q_E, DEFAULT_R_EXT)
    ext0 = init_extended(m.x_ss, m.x_ss, m.u_ss, m.x_ss + [0.02, 0.01])
    qp, dec = build_qp(cfg, m, pen, ext0)
    sol = solve_qp(qp)
    _, _, eps = dec.decode(sol.z)
    np.testing.assert_allclose(eps, 0, atol=1e-9)


def test_input_bounds_hold_on_large_request(default_grid):
    m = default_grid.nodes[2][3]
    cfg = FbMpcConfig()
    pen = fb_terminal_penalty(m, DEFAULT_Q_E, DEFAULT_R_EXT)
    ext0 = init_extended(m.x_ss, m.x_ss, m.u_ss, m.x_ss + [0.8, 0.3])
    qp, dec = build_qp(cfg, m, pen, ext0)
    sol = solve_qp(qp)
    assert sol.status is QpStatus.OPTIMAL
    _, us, _ = dec.decode(sol.z)
    assert np.all(us >= cfg.u_min - 1e-9) and np.all(us <= cfg.u_max + 1e-9)
    assert np.any(np.isclose(us, cfg.u_min, atol=1e-7) | np.isclose(us, cfg.u_max, atol=1e-7))


def test_dimension_mismatch():
    m = LocalModel(A=np.eye(2) * 0.5, B=np.eye(2), Bf=np.zeros(2), x_ss=[0, 0], u_ss=[0, 0],
                   w_inj_ss=0.0)
    with pytest.raises(ConfigurationError):
        TerminalPenalty(np.eye(8))
    bad = init_extended([0, 0, 0], [0, 0, 0], [0, 0], [0, 0, 0])
    with pytest.raises(ConfigurationError):
        build_qp(FbMpcConfig(N=2), m, TerminalPenalty(np.eye(4)), bad)


# -- control step ------------------------------------------------------------------

def test_equilibrium_is_optimal(default_grid, default_fb_grids):
    rho = (1500.0, 55.0)
    m = interpolate_model(default_grid, rho)
    du, u, diag, _ = fb_control_step(FbMpcConfig(), default_fb_grids, (m.x_ss, m.x_ss, m.u_ss),
                                     m.x_ss, rho)
    np.testing.assert_allclose(du, 0, atol=1e-9)
    np.testing.assert_allclose(u, m.u_ss, atol=1e-9)
    assert diag.status is QpStatus.OPTIMAL


@pytest.mark.parametrize("node", [(1, 2), (4, 5), (7, 9)])
def test_first_move_matches_lqr(default_grid, node):
    i, j = node
    m = default_grid.nodes[i][j]
    rho = (default_grid.speed[i], default_grid.fuel[j])
    cfg = FbMpcConfig(**WIDE)
    grids = FbGrids(default_grid, cfg)
    x_prev = m.x_ss + [0.002, -0.001]
    x = m.x_ss + m.A @ (x_prev - m.x_ss)
    r = m.x_ss + [0.003, 0.002]
    du, _, diag, _ = fb_control_step(cfg, grids, (x, x_prev, m.u_ss), r, rho)
    A4, B4 = rate_based_pair(m)
    P = fb_terminal_penalty(m, DEFAULT_Q_E, DEFAULT_R_EXT).P_tilde
    K = lqr_gain(A4, B4, np.array(DEFAULT_R_EXT), P)
    expected = -K @ np.concatenate([x - x_prev, x - r])
    np.testing.assert_allclose(du, expected, atol=1e-6)


def test_offset_free_with_state_disturbance(default_grid):
    rho = (1500.0, 55.0)
    m = interpolate_model(default_grid, rho)
    cfg = FbMpcConfig(**WIDE)
    ctrl = FbMpcController(cfg, FbGrids(default_grid, cfg))
    ctrl.reset(m.x_ss, m.u_ss)
    d = np.array([0.05, 0.01])
    x, r = m.x_ss.copy(), m.x_ss.copy()
    errs = []
    for _ in range(int(3.0 / cfg.sample_period)):
        u, _, _ = ctrl.step(x, r, rho)
        x = m.x_ss + m.A @ (x - m.x_ss) + m.B @ (u - m.u_ss) + d
        errs.append(np.abs(x - r).max())
    assert max(errs) > 1e-3
    assert errs[-1] < 1e-4


def test_feedforward_enters_through_u_bar(default_grid, default_fb_grids):
    rho = (1500.0, 55.0)
    m = interpolate_model(default_grid, rho)
    ctrl = FbMpcController(FbMpcConfig(), default_fb_grids)
    ctrl.reset(m.x_ss, m.u_ss)
    u, du, _ = ctrl.step(m.x_ss, m.x_ss, rho, ff_prev=[0.0, 0.0], ff_now=[5.0, -3.0])
    np.testing.assert_allclose(u, m.u_ss + [5.0, -3.0] + du, atol=1e-12)


def test_online_dare_matches_grid_at_node(default_grid, default_fb_grids):
    rho = (1500.0, 55.0)
    m = interpolate_model(default_grid, rho)
    state = (m.x_ss + [0.01, 0.0], m.x_ss, m.u_ss)
    a = fb_control_step(FbMpcConfig(), default_fb_grids, state, m.x_ss, rho)[0]
    cfg = FbMpcConfig(penalty_source="online_dare")
    b = fb_control_step(cfg, FbGrids(default_grid, cfg), state, m.x_ss, rho)[0]
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_controller_requires_reset(default_fb_grids):
    with pytest.raises(RuntimeError):
        FbMpcController(FbMpcConfig(), default_fb_grids).step([1, 0.1], [1, 0.1], (1500, 55))
