import numpy as np
import pytest

from airpath_mpc.errors import IdentificationError, StabilityError
from airpath_mpc.identification import (IoRecord, PerturbationSpec, build_grid,
                                        fit_local_model, identify_node, one_step_residuals)
from airpath_mpc.lpv import interpolate_model
from airpath_mpc.plant import PlantParams


def linear_data(A, B, Bf, x_ss, u_ss, w_ss, T=400, seed=0):
    rng = np.random.default_rng(seed)
    u = u_ss + rng.normal(size=(T, 2))
    w = w_ss + rng.normal(size=T)
    x = np.empty((T, 2))
    x[0] = x_ss + rng.normal(scale=0.1, size=2)
    for k in range(T - 1):
        x[k + 1] = x_ss + A @ (x[k] - x_ss) + B @ (u[k] - u_ss) + Bf[:, 0] * (w[k] - w_ss)
    return IoRecord(x, u, w)


def test_noiseless_recovery():
    rng = np.random.default_rng(11)
    for trial in range(5):
        A = rng.uniform(-0.5, 0.5, (2, 2))
        B = rng.normal(scale=0.01, size=(2, 2))
        Bf = rng.normal(scale=0.01, size=(2, 1))
        x_ss, u_ss, w_ss = np.array([1.3, 0.25]), np.array([40.0, 55.0]), 30.0
        m = fit_local_model(linear_data(A, B, Bf, x_ss, u_ss, w_ss, seed=trial),
                            (x_ss, u_ss, w_ss))
        np.testing.assert_allclose(m.A, A, rtol=0, atol=1e-8)
        np.testing.assert_allclose(m.B, B, rtol=0, atol=1e-8)
        np.testing.assert_allclose(m.Bf, Bf, rtol=0, atol=1e-8)


def test_constant_input_is_rank_deficient():
    d = linear_data(np.eye(2) * 0.5, np.eye(2), np.zeros((2, 1)), np.zeros(2),
                    np.zeros(2), 0.0)
    d = IoRecord(d.x, np.full_like(d.u, 3.0), d.w_inj)
    with pytest.raises(IdentificationError, match="u_egr|u_vgt|rank"):
        fit_local_model(d, (np.zeros(2), np.zeros(2), 0.0))


def test_unstable_fit_rejected():
    A = np.array([[1.02, 0.0], [0.0, 0.5]])
    d = linear_data(A, np.eye(2) * 0.01, np.zeros((2, 1)) + 0.01, np.zeros(2), np.zeros(2),
                    0.0, T=60)
    with pytest.raises(StabilityError):
        fit_local_model(d, (np.zeros(2), np.zeros(2), 0.0))


def test_short_record_rejected():
    with pytest.raises(ValueError):
        IoRecord(np.zeros((5, 2)), np.zeros((5, 2)), np.zeros(5))


def test_surrogate_node_5_6():
    plant = PlantParams()
    m, fit = identify_node(plant, (1725.0, 65.0), PerturbationSpec(), seed=7)
    assert m.spectral_radius < 1.0
    assert np.all(fit.relative_residual < 0.01)


def test_zero_amplitude_fails_at_first_node():
    spec = PerturbationSpec(actuator_amplitude=0.0, fuel_amplitude=0.0)
    with pytest.raises(IdentificationError) as info:
        build_grid(PlantParams(), (600.0, 2400.0), (5.0, 105.0), spec)
    assert info.value.node[:2] == (0, 0)


def test_mini_grid_round_trips():
    grid = build_grid(PlantParams(), (800.0, 2000.0), (20.0, 90.0))
    assert grid.shape == (2, 2)
    for (i, j), rho in grid.node_points():
        assert grid.nodes[i][j].is_stable()
        assert interpolate_model(grid, rho).equals(grid.nodes[i][j])


def test_full_grid_properties(default_grid):
    assert default_grid.shape == (9, 11)
    x = default_grid.stack("x_ss")
    assert np.all(x[..., 0] > 0.8) and np.all(x[..., 0] < 2.6)
    assert np.all(x[..., 1] >= 0.0) and np.all(x[..., 1] < 0.6)
    for (i, j), rho in default_grid.node_points():
        m = default_grid.nodes[i][j]
        assert m.spectral_radius < 0.999
        assert m.w_inj_ss == rho.fuel_rate


def test_residuals_zero_on_generator():
    A, B, Bf = np.eye(2) * 0.3, np.eye(2) * 0.01, np.ones((2, 1)) * 0.002
    d = linear_data(A, B, Bf, np.ones(2), np.ones(2) * 50, 10.0)
    m = fit_local_model(d, (np.ones(2), np.ones(2) * 50, 10.0))
    assert np.abs(one_step_residuals(m, d)).max() < 1e-10
