import numpy as np
import pytest
import scipy.linalg
from numpy.testing import assert_allclose

from tdrepdyn import dynamics as dyn
from tdrepdyn.mdp import key_matrix, make_random_mdp, make_symmetric_mdp, make_rng, value_function
from tdrepdyn.metrics import IllConditionedError


# ------------------------------------------------------------------- configs


def test_dynamics_spec_validation():
    with pytest.raises(ValueError):
        dyn.DynamicsSpec("momentum")
    with pytest.raises(ValueError):
        dyn.DynamicsSpec(dyn.END_TO_END, eta_w=-1.0)
    with pytest.raises(ValueError):
        dyn.DynamicsSpec(dyn.LINEAR_TD, eta_w=1.0, eta_phi=0.5)
    assert dyn.linear_td(2.0).eta_phi == 0.0
    assert dyn.two_time_scale(0.5).kind == dyn.TWO_TIME_SCALE


def test_integrator_config_validation():
    with pytest.raises(ValueError):
        dyn.IntegratorConfig(t_end=0.0)
    with pytest.raises(ValueError):
        dyn.IntegratorConfig(rtol=-1e-8)
    with pytest.raises(ValueError):
        dyn.IntegratorConfig(log_points=1)
    with pytest.raises(ValueError):
        dyn.IntegratorConfig(max_step=0.0)


# ------------------------------------------------------------------ algebra


def test_fixed_point_with_identity_features_is_value_function(small_mixed):
    w = dyn.td_fixed_point(small_mixed, np.eye(8))
    assert np.abs(w - value_function(small_mixed)).max() < 1e-10


def test_fixed_point_matches_normal_equations(small_mixed):
    phi = make_rng(0).standard_normal((8, 3))
    w = dyn.td_fixed_point(small_mixed, phi)
    A = key_matrix(small_mixed)
    rhs = phi.T @ np.diag(small_mixed.d) @ small_mixed.R
    assert_allclose(phi.T @ A @ phi @ w, rhs, atol=1e-12)


def test_fixed_point_rejects_ill_conditioned_basis(small_mixed):
    phi = np.ones((8, 2))
    phi[:, 1] += 1e-14
    with pytest.raises(IllConditionedError):
        dyn.td_fixed_point(small_mixed, phi)


def test_semi_gradients_match_hand_formula(small_mixed):
    rng = make_rng(1)
    phi = rng.standard_normal((8, 2))
    w = rng.standard_normal((2, 1))
    resid = small_mixed.R - (np.eye(8) - 0.9 * small_mixed.P) @ phi @ w
    weighted = np.diag(small_mixed.d) @ resid
    grad_w, grad_phi = dyn.expected_semi_gradients(small_mixed, phi, w)
    assert_allclose(grad_w, -phi.T @ weighted, atol=1e-14)
    assert_allclose(grad_phi, -weighted @ w.T, atol=1e-14)


def test_semi_gradients_shape_checks(small_mixed):
    with pytest.raises(ValueError):
        dyn.expected_semi_gradients(small_mixed, np.ones((5, 2)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        dyn.expected_semi_gradients(small_mixed, np.ones((8, 2)), np.ones((3, 1)))


def test_rhs_wrappers_scale_with_rates(small_mixed):
    rng = make_rng(2)
    phi = rng.standard_normal((8, 2))
    w = rng.standard_normal((2, 1))
    grad_w, grad_phi = dyn.expected_semi_gradients(small_mixed, phi, w)
    dw, dphi = dyn.rhs_end_to_end(small_mixed, phi, w, eta_w=3.0, eta_phi=0.5)
    assert_allclose(dw, -3.0 * grad_w)
    assert_allclose(dphi, -0.5 * grad_phi)
    assert_allclose(dyn.rhs_linear_td(small_mixed, phi, w, eta_w=3.0), dw)


# ----------------------------------------------------------------------- init


def test_orthonormal_init_properties():
    phi = dyn.orthonormal_init(20, 5, seed=3)
    assert_allclose(phi.T @ phi, np.eye(5), atol=1e-13)
    assert np.array_equal(phi, dyn.orthonormal_init(20, 5, seed=3))
    assert not np.array_equal(phi, dyn.orthonormal_init(20, 5, seed=4))


def test_orthonormal_init_rejects_bad_k():
    with pytest.raises(ValueError):
        dyn.orthonormal_init(4, 5, seed=0)
    with pytest.raises(ValueError):
        dyn.orthonormal_init(4, 0, seed=0)


# ------------------------------------------------------------------ stepping


def test_discrete_step_is_explicit_euler(small_mixed):
    rng = make_rng(4)
    phi = rng.standard_normal((8, 2))
    w = rng.standard_normal((2, 1))
    spec = dyn.end_to_end(1.5, 0.5)
    dw, dphi = dyn.rhs_end_to_end(small_mixed, phi, w, 1.5, 0.5)
    phi1, w1 = dyn.discrete_step(small_mixed, spec, phi, w, step_size=0.01)
    assert_allclose(phi1, phi + 0.01 * dphi)
    assert_allclose(w1, w + 0.01 * dw)


def test_discrete_step_two_time_scale_pins_weights(small_mixed):
    phi = dyn.orthonormal_init(8, 2, seed=5)
    w_star = dyn.td_fixed_point(small_mixed, phi)
    _, w1 = dyn.discrete_step(small_mixed, dyn.two_time_scale(), phi, np.zeros((2, 1)), 0.01)
    assert_allclose(w1, w_star)


def test_discrete_step_rejects_nonpositive_step(small_mixed):
    with pytest.raises(ValueError):
        dyn.discrete_step(small_mixed, dyn.linear_td(), np.eye(8), np.zeros((8, 1)), 0.0)


def test_small_step_euler_tracks_ode(small_mixed):
    # crude consistency: many Euler steps land near the adaptive solution
    phi0 = dyn.orthonormal_init(8, 2, seed=6)
    spec = dyn.end_to_end(1.0, 1.0)
    phi, w = phi0, np.zeros((2, 1))
    for _ in range(2000):
        phi, w = dyn.discrete_step(small_mixed, spec, phi, w, 0.005)
    log = dyn.integrate(
        small_mixed, spec, phi0,
        config=dyn.IntegratorConfig(t_end=10.0, log_points=2), store_states=True
    )
    phi_ode, w_ode = log.states[-1]
    assert np.abs(phi - phi_ode).max() < 1e-2
    assert np.abs(w - w_ode).max() < 1e-2


# ---------------------------------------------------------------- integration


def test_linear_td_matches_matrix_exponential(small_mixed):
    phi = dyn.orthonormal_init(8, 3, seed=7)
    w0 = make_rng(8).standard_normal((3, 1))
    t_end = 40.0
    log = dyn.integrate(
        small_mixed, dyn.linear_td(), phi, w0=w0,
        config=dyn.IntegratorConfig(t_end=t_end, rtol=1e-11, atol=1e-13, log_points=2),
        store_states=True,
    )
    G = phi.T @ key_matrix(small_mixed) @ phi
    w_star = dyn.td_fixed_point(small_mixed, phi)
    exact = w_star + scipy.linalg.expm(-t_end * G) @ (w0 - w_star)
    assert np.abs(log.states[-1][1] - exact).max() < 1e-9


def test_end_to_end_descends_on_reversible(small_symmetric):
    phi0 = dyn.orthonormal_init(8, 2, seed=9)
    log = dyn.integrate(
        small_symmetric, dyn.end_to_end(), phi0,
        config=dyn.IntegratorConfig(t_end=50.0, rtol=1e-10, atol=1e-12, log_points=101),
    )
    E = log.metrics["E"]
    assert E[-1] < E[0]
    assert (np.diff(E) <= 1e-11).all()


def test_two_time_scale_keeps_covariance(small_mixed):
    phi0 = dyn.orthonormal_init(8, 2, seed=10)
    log = dyn.integrate(
        small_mixed, dyn.two_time_scale(), phi0,
        config=dyn.IntegratorConfig(t_end=100.0, rtol=1e-10, atol=1e-12, log_points=51),
        store_states=True,
    )
    assert log.metrics["cov_drift"].max() < 1e-8
    A = key_matrix(small_mixed)
    V = value_function(small_mixed)
    for phi, w_star in log.states:
        assert np.abs(phi.T @ A @ (phi @ w_star - V)).max() < 1e-10


def test_integrate_validates_inputs(small_mixed):
    phi0 = dyn.orthonormal_init(8, 2, seed=11)
    with pytest.raises(ValueError):
        dyn.integrate(small_mixed, dyn.linear_td(), phi0, w0=np.zeros((3, 1)))
    with pytest.raises(ValueError):
        dyn.integrate(small_mixed, dyn.linear_td(), phi0, w0=np.array([[np.nan], [0.0]]))
    with pytest.raises(ValueError):
        dyn.integrate(small_mixed, dyn.linear_td(), phi0, metric_set=("E", "vibes"))
    with pytest.raises(ValueError):
        dyn.integrate(small_mixed, dyn.linear_td(), np.ones((8, 2)))  # rank 1


def test_integrate_wraps_fixed_point_breakdown(small_mixed):
    u = dyn.orthonormal_init(8, 2, seed=12)
    phi0 = np.column_stack([u[:, 0], u[:, 0] + 1e-7 * u[:, 1]])  # passes rank gate
    with pytest.raises(dyn.IntegrationError):
        dyn.integrate(small_mixed, dyn.two_time_scale(), phi0,
                      config=dyn.IntegratorConfig(t_end=1.0, log_points=2))


# --------------------------------------------------------------------- logs


def test_trajectory_log_csv_canonical_columns(small_mixed):
    phi0 = dyn.orthonormal_init(8, 2, seed=13)
    cfg = dyn.IntegratorConfig(t_end=1.0, log_points=3)
    full = dyn.integrate(small_mixed, dyn.end_to_end(), phi0, config=cfg)
    lines = full.to_csv().splitlines()
    assert lines[0] == "t,E,f,f_norm,cov_drift,grad_norm_w,grad_norm_phi,crit_residual"
    assert len(lines) == 4
    partial = dyn.integrate(
        small_mixed, dyn.end_to_end(), phi0, config=cfg, metric_set=("cov_drift", "E")
    )
    assert partial.to_csv().splitlines()[0] == "t,E,cov_drift"


def test_trajectory_log_roundtrips_floats(tmp_path, small_mixed):
    phi0 = dyn.orthonormal_init(8, 2, seed=14)
    log = dyn.integrate(
        small_mixed, dyn.end_to_end(), phi0,
        config=dyn.IntegratorConfig(t_end=1.0, log_points=5),
    )
    path = tmp_path / "log.csv"
    log.to_csv(path)
    back = np.genfromtxt(path, delimiter=",", names=True)
    assert_allclose(back["E"], log.metrics["E"], rtol=0)  # repr() is lossless


def test_trajectory_log_validation():
    with pytest.raises(ValueError):
        dyn.TrajectoryLog(times=np.array([0.0, 0.0, 1.0]), metrics={})
    with pytest.raises(ValueError):
        dyn.TrajectoryLog(times=np.array([0.0, 1.0]), metrics={"E": np.zeros(3)})


def test_states_json_sidecar(tmp_path, small_mixed):
    phi0 = dyn.orthonormal_init(8, 2, seed=15)
    cfg = dyn.IntegratorConfig(t_end=1.0, log_points=3)
    bare = dyn.integrate(small_mixed, dyn.end_to_end(), phi0, config=cfg)
    with pytest.raises(ValueError):
        bare.states_to_json()
    log = dyn.integrate(small_mixed, dyn.end_to_end(), phi0, config=cfg, store_states=True)
    path = tmp_path / "states.json"
    log.states_to_json(path)
    import json

    doc = json.loads(path.read_text())
    assert len(doc["times"]) == 3
    assert np.asarray(doc["phi"][0]).shape == (8, 2)
    assert_allclose(np.asarray(doc["phi"][0]), phi0, atol=1e-12)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
