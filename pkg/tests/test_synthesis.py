import math

import numpy as np
import pytest
import scipy.linalg

from helpers import double_integrator_model
from qtorhc.errors import SynthesisError
from qtorhc.plants import ControlBounds, cartpole_model, pendulum_model
from qtorhc.synthesis import (CertificationReport, TerminalData, certify_alpha,
                              control_constraint_level, is_hurwitz,
                              max_certified_alpha, sample_shell, solve_care,
                              solve_lyapunov, synthesize_terminal)

PENDULUM_W = np.diag([500.0, 500.0])
PENDULUM_R = np.array([[500.0]])
CARTPOLE_W = np.diag([1132.0, 100.0, 1.0, 1.0])
CARTPOLE_R = np.array([[6.46]])


def pendulum_setup():
    m = pendulum_model()
    A = m.fx(np.zeros(2), np.zeros(1))
    B = m.fu(np.zeros(2), np.zeros(1))
    P, K = solve_care(A, B, PENDULUM_W, PENDULUM_R)
    H = solve_lyapunov(A + B @ K, PENDULUM_W + K.T @ PENDULUM_R @ K)
    return m, A, B, P, K, H


def cartpole_setup():
    m = cartpole_model()
    A = m.fx(np.zeros(4), np.zeros(1))
    B = m.fu(np.zeros(4), np.zeros(1))
    P, K = solve_care(A, B, CARTPOLE_W, CARTPOLE_R)
    H = solve_lyapunov(A + B @ K, CARTPOLE_W + K.T @ CARTPOLE_R @ K)
    return m, A, B, P, K, H


def care_relative_residual(A, B, W, R, P):
    res = A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + W
    return np.linalg.norm(res, "fro") / np.linalg.norm(W, "fro")


def test_scalar_care():
    P, K = solve_care(np.zeros((1, 1)), np.ones((1, 1)), np.ones((1, 1)),
                      np.ones((1, 1)))
    assert abs(P[0, 0] - 1.0) < 1e-12
    assert abs(K[0, 0] + 1.0) < 1e-12


def test_pendulum_gain_matches_published_value():
    m, A, B, P, K, H = pendulum_setup()
    assert np.all(np.abs(K[0] / np.array([-6.81, -6.81]) - 1.0) < 0.02)
    assert is_hurwitz(A + B @ K)
    assert care_relative_residual(A, B, PENDULUM_W, PENDULUM_R, P) <= 1e-8


def test_cartpole_gain_matches_published_value():
    m, A, B, P, K, H = cartpole_setup()
    published = np.array([13.24, -81.74, 43.65, -80.63])
    assert np.all(np.abs(K[0] / published - 1.0) < 0.02)
    assert is_hurwitz(A + B @ K)
    assert care_relative_residual(A, B, CARTPOLE_W, CARTPOLE_R, P) <= 1e-8


@pytest.mark.parametrize("setup", [pendulum_setup, cartpole_setup])
def test_care_against_scipy(setup):
    m, A, B, P, K, H = setup()
    W = PENDULUM_W if m.n == 2 else CARTPOLE_W
    R = PENDULUM_R if m.n == 2 else CARTPOLE_R
    P_ref = scipy.linalg.solve_continuous_are(A, B, W, R)
    assert np.abs(P - P_ref).max() <= 1e-8 * np.abs(P_ref).max()


def test_scalar_lyapunov():
    H = solve_lyapunov(np.array([[-1.0]]), np.array([[2.0]]))
    assert abs(H[0, 0] - 1.0) < 1e-14


def test_diagonal_lyapunov():
    H = solve_lyapunov(-0.5 * np.eye(3), np.eye(3))
    assert np.abs(H - np.eye(3)).max() < 1e-12


def test_random_hurwitz_lyapunov_residual(rng):
    for _ in range(10):
        A = rng.standard_normal((4, 4))
        A -= (np.max(np.real(np.linalg.eigvals(A))) + 1.0) * np.eye(4)
        G = rng.standard_normal((4, 4))
        Q = G @ G.T + 0.1 * np.eye(4)
        H = solve_lyapunov(A, Q)
        assert np.linalg.norm(A.T @ H + H @ A + Q, "fro") <= 1e-10
        H_ref = scipy.linalg.solve_continuous_lyapunov(A.T, -Q)
        assert np.abs(H - H_ref).max() <= 1e-8 * max(1.0, np.abs(H_ref).max())


@pytest.mark.parametrize("setup", [pendulum_setup, cartpole_setup])
def test_lyapunov_matrix_equals_riccati_solution(setup):
    # for LQ weights the Lyapunov certificate coincides with the Riccati matrix
    m, A, B, P, K, H = setup()
    assert np.abs(H - P).max() <= 1e-9 * np.abs(P).max()
    assert np.all(np.linalg.eigvalsh(H) > 0)
    assert np.abs(H - H.T).max() == 0.0


def test_lyapunov_rejects_unstable_matrix():
    with pytest.raises(SynthesisError):
        solve_lyapunov(np.array([[1.0]]), np.array([[1.0]]))


def test_care_rejects_non_stabilizable_pair():
    with pytest.raises(SynthesisError):
        solve_care(np.eye(2), np.zeros((2, 1)), np.eye(2), np.eye(1))


def test_care_rejects_indefinite_R():
    with pytest.raises(SynthesisError):
        solve_care(np.zeros((1, 1)), np.ones((1, 1)), np.ones((1, 1)),
                   -np.ones((1, 1)))


def test_control_constraint_level_unit_case():
    bounds = ControlBounds(np.array([-1.0]), np.array([1.0]))
    K = np.array([[1.0, 0.0]])
    assert abs(control_constraint_level(K, np.eye(2), bounds) - 1.0) < 1e-12
    assert abs(control_constraint_level(2.0 * K, np.eye(2), bounds) - 0.25) < 1e-12


def test_control_constraint_level_uses_tighter_bound_sign():
    bounds = ControlBounds(np.array([-0.5]), np.array([1.0]))
    K = np.array([[1.0, 0.0]])
    assert abs(control_constraint_level(K, np.eye(2), bounds) - 0.25) < 1e-12


@pytest.mark.parametrize("setup", [pendulum_setup, cartpole_setup])
def test_control_constraint_level_dominates_sampling(setup):
    m, A, B, P, K, H = setup()
    alpha_u = control_constraint_level(K, H, m.bounds)
    xs = sample_shell(H, alpha_u, 10_000, np.random.default_rng(7))
    sampled = np.abs(xs @ K[0]).max()
    exact = m.bounds.u_max[0]  # |Kx| at the constraint level meets the bound
    assert sampled <= exact + 1e-9
    if m.n == 2:
        assert exact <= 1.001 * sampled


def test_certify_pendulum_published_level():
    m, A, B, P, K, H = pendulum_setup()
    rep = certify_alpha(m, K, H, PENDULUM_W, PENDULUM_R, 1.1, m.bounds, 0.01,
                        n_samples=1000, delta=0.05, rng=np.random.default_rng(2))
    assert rep.passed and rep.decrease_ok and rep.invariance_ok and rep.control_ok
    assert rep.worst_decrease < 0.0


def test_certify_cartpole_published_level():
    m, A, B, P, K, H = cartpole_setup()
    rep = certify_alpha(m, K, H, CARTPOLE_W, CARTPOLE_R, 1.1, m.bounds, 0.07,
                        n_samples=1000, delta=0.2, rng=np.random.default_rng(2))
    assert rep.passed


def test_certify_fails_on_oversized_level():
    m, A, B, P, K, H = pendulum_setup()
    rep = certify_alpha(m, K, H, PENDULUM_W, PENDULUM_R, 1.1, m.bounds, 1e6,
                        n_samples=50, delta=0.05, rng=np.random.default_rng(2))
    assert not rep.control_ok and not rep.passed


def test_certification_is_monotone_in_alpha():
    m, A, B, P, K, H = pendulum_setup()
    for alpha in (0.01, 0.005):
        rep = certify_alpha(m, K, H, PENDULUM_W, PENDULUM_R, 1.1, m.bounds, alpha,
                            n_samples=400, delta=0.05, rng=np.random.default_rng(3))
        assert rep.passed


@pytest.mark.parametrize("setup,floor,delta", [(pendulum_setup, 0.01, 0.05),
                                               (cartpole_setup, 0.07, 0.2)])
def test_max_certified_alpha_admits_published_levels(setup, floor, delta):
    m, A, B, P, K, H = setup()
    W = PENDULUM_W if m.n == 2 else CARTPOLE_W
    R = PENDULUM_R if m.n == 2 else CARTPOLE_R
    alpha = max_certified_alpha(m, K, H, W, R, 1.1, m.bounds, n_samples=200,
                                delta=delta)
    assert alpha >= floor


def test_linear_plant_limited_by_control_level():
    # for linear dynamics the decrease condition holds at every level, so the
    # certified maximum must sit at the control box limit times the safety factor
    m = double_integrator_model(u_lim=2.0)
    W = np.eye(2)
    R = np.array([[1.0]])
    A = m.fx(np.zeros(2), np.zeros(1))
    B = m.fu(np.zeros(2), np.zeros(1))
    P, K = solve_care(A, B, W, R)
    H = solve_lyapunov(A + B @ K, W + K.T @ R @ K)
    alpha_u = control_constraint_level(K, H, m.bounds)
    alpha = max_certified_alpha(m, K, H, W, R, 1.1, m.bounds, n_samples=100,
                                delta=0.25)
    assert abs(alpha - 0.9 * alpha_u) <= 1e-9 * alpha_u


def test_terminal_data_validation():
    with pytest.raises(ValueError):
        TerminalData(K=np.zeros((1, 2)), H=np.eye(2), alpha=0.01, k=1.0)
    with pytest.raises(ValueError):
        TerminalData(K=np.zeros((1, 2)), H=np.eye(2), alpha=0.0, k=1.1)


def test_synthesize_terminal_pendulum():
    term = synthesize_terminal(pendulum_model(), PENDULUM_W, PENDULUM_R, k=1.1,
                               alpha=0.01)
    assert term.alpha == 0.01
    assert term.contains(np.zeros(2))
    x = np.array([1e-3, 0.0])
    assert abs(term.penalty(x) - 1.1 * term.level(x)) < 1e-15
    assert np.allclose(term.penalty_gradient(x), 2.2 * term.H @ x)
