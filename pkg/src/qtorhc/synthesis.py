"""Terminal controller synthesis: LQ gain, Lyapunov matrix, invariant level.

The terminal set is the sublevel ellipsoid Omega = {x : x'Hx <= alpha} of the
Lyapunov function of the linearized closed loop, and the terminal penalty is
q(x) = k * x'Hx with k > 1.  A level alpha is certified by checking, on
sampled shells, that q decreases faster than the running cost accrues, that
the ellipsoid is invariant under u = Kx, and that the feedback law respects
the control box inside it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SynthesisError
from .plants import ControlBounds, ControlModel, clamp_control

Array = np.ndarray

CARE_RESIDUAL_TOL = 1e-8
LYAPUNOV_RESIDUAL_TOL = 1e-9
DECREASE_MARGIN = 1e-9


@dataclass(frozen=True)
class TerminalData:
    """Terminal gain, Lyapunov matrix and certified level for the ellipsoid set."""

    K: Array
    H: Array
    alpha: float
    k: float
    c: float = 1.0

    def __post_init__(self):
        if self.k <= 1.0:
            raise ValueError("terminal penalty scale k must exceed 1")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")

    def level(self, x: Array) -> float:
        """x'Hx, the ellipsoid coordinate of x."""
        return float(x @ self.H @ x)

    def penalty(self, x: Array) -> float:
        """Terminal penalty q(x) = k * x'Hx."""
        return self.k * self.level(x)

    def penalty_gradient(self, x: Array) -> Array:
        return 2.0 * self.k * (self.H @ x)

    def contains(self, x: Array) -> bool:
        return self.level(x) <= self.alpha


def is_hurwitz(A: Array) -> bool:
    return float(np.max(np.real(np.linalg.eigvals(A)))) < 0.0


def _lyapunov_raw(A: Array, Q: Array) -> Array:
    """Solve A'H + HA = -Q by the dense Kronecker linearization."""
    n = A.shape[0]
    eye = np.eye(n)
    # column-major vec: vec(A'H) = (I (x) A') vec(H), vec(HA) = (A' (x) I) vec(H)
    M = np.kron(eye, A.T) + np.kron(A.T, eye)
    h = np.linalg.solve(M, -Q.ravel(order="F"))
    H = h.reshape((n, n), order="F")
    return 0.5 * (H + H.T)


def solve_lyapunov(A_K: Array, Q: Array) -> Array:
    """Solve A_K'H + H A_K = -Q for symmetric positive-definite H."""
    A_K = np.asarray(A_K, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if A_K.ndim != 2 or A_K.shape[0] != A_K.shape[1]:
        raise ValueError("A_K must be square")
    if Q.shape != A_K.shape:
        raise ValueError("Q must match A_K in shape")
    if not np.allclose(Q, Q.T, atol=1e-12 * max(1.0, float(np.abs(Q).max()))):
        raise ValueError("Q must be symmetric")
    if not is_hurwitz(A_K):
        raise SynthesisError("A_K is not Hurwitz; Lyapunov equation has no PD solution")
    H = _lyapunov_raw(A_K, Q)
    residual = np.linalg.norm(A_K.T @ H + H @ A_K + Q, "fro")
    if residual > LYAPUNOV_RESIDUAL_TOL * max(1.0, np.linalg.norm(Q, "fro")):
        raise SynthesisError(f"Lyapunov residual {residual:.3e} too large")
    if np.linalg.eigvalsh(H)[0] <= 0.0:
        raise SynthesisError("Lyapunov solution is not positive definite")
    return H


def _stabilizing_gain(A: Array, B: Array) -> Array:
    """Initial stabilizing gain via the shifted-Lyapunov construction."""
    beta = np.linalg.norm(A, "fro") + 1.0
    shifted = A + beta * np.eye(A.shape[0])
    # -(A + beta I) is Hurwitz, so Z = int exp(-shifted t) 2BB' exp(-shifted' t) dt
    Z = _lyapunov_raw(-shifted.T, 2.0 * B @ B.T)
    if np.linalg.eigvalsh(0.5 * (Z + Z.T))[0] <= 1e-12 * max(1.0, float(np.abs(Z).max())):
        raise SynthesisError("pair (A, B) appears non-stabilizable")
    K0 = -np.linalg.solve(Z, B).T
    if not is_hurwitz(A + B @ K0):
        raise SynthesisError("failed to construct a stabilizing initial gain")
    return K0


def solve_care(A: Array, B: Array, W: Array, R: Array,
               max_iter: int = 60, tol: float = 1e-13) -> tuple[Array, Array]:
    """Newton iteration for A'P + PA - PBR^{-1}B'P + W = 0; returns (P, K)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n, m = B.shape
    if W.shape != (n, n) or R.shape != (m, m):
        raise ValueError("weight shapes do not match (A, B)")
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise SynthesisError("R must be positive definite") from None
    if np.linalg.eigvalsh(0.5 * (W + W.T))[0] < -1e-10 * max(1.0, float(np.abs(W).max())):
        raise SynthesisError("W must be positive semidefinite")

    K = _stabilizing_gain(A, B) if not is_hurwitz(A) else np.zeros((m, n))
    P_prev = None
    for _ in range(max_iter):
        A_K = A + B @ K
        if not is_hurwitz(A_K):
            raise SynthesisError("Newton iterate lost stability")
        P = _lyapunov_raw(A_K, W + K.T @ R @ K)
        K = -np.linalg.solve(R, B.T @ P)
        if P_prev is not None and np.linalg.norm(P - P_prev, "fro") <= tol * max(
                1.0, np.linalg.norm(P, "fro")):
            break
        P_prev = P
    else:
        raise SynthesisError("Riccati Newton iteration did not converge")

    residual = np.linalg.norm(
        A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + W, "fro")
    if residual > CARE_RESIDUAL_TOL * max(1.0, np.linalg.norm(W, "fro")):
        raise SynthesisError(f"Riccati residual {residual:.3e} too large")
    return P, K


def control_constraint_level(K: Array, H: Array, bounds: ControlBounds) -> float:
    """Largest alpha with Kx inside the control box whenever x'Hx <= alpha."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    H = np.asarray(H, dtype=float)
    try:
        HinvKt = np.linalg.solve(H, K.T)
    except np.linalg.LinAlgError:
        raise SynthesisError("H is singular") from None
    level = math.inf
    for j in range(K.shape[0]):
        gain = float(K[j] @ HinvKt[:, j])  # max of (K_j x)^2 over x'Hx <= 1
        if gain <= 0.0:
            continue
        for bound in (bounds.u_max[j], -bounds.u_min[j]):
            level = min(level, bound * bound / gain)
    return level


def sample_shell(H: Array, level: float, n_samples: int,
                 rng: np.random.Generator) -> Array:
    """States uniformly distributed in direction on {x'Hx = level}."""
    n = H.shape[0]
    chol = np.linalg.cholesky(H)
    z = rng.standard_normal((n_samples, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return math.sqrt(level) * np.linalg.solve(chol.T, z.T).T


def simulate_feedback(model: ControlModel, x0: Array, K: Array, T: float,
                       h: float) -> Array:
    """Closed-loop RK4 under u = clamp(Kx); returns states at the step nodes."""
    lo, hi = model.bounds.u_min, model.bounds.u_max

    def g(x):
        return model.f(x, np.clip(K @ x, lo, hi))

    steps = max(1, math.ceil(T / h))
    dt = T / steps
    out = np.empty((steps + 1, model.n))
    out[0] = x0
    x = x0
    for i in range(steps):
        k1 = g(x)
        k2 = g(x + 0.5 * dt * k1)
        k3 = g(x + 0.5 * dt * k2)
        k4 = g(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[i + 1] = x
    return out


@dataclass(frozen=True)
class CertificationReport:
    alpha: float
    passed: bool
    decrease_ok: bool
    invariance_ok: bool
    control_ok: bool
    worst_decrease: float     # max of dq/dt + L over samples; must stay negative
    worst_level_rise: float   # max increase of x'Hx along simulated boundary orbits
    control_level: float      # alpha admitted by the control box alone
    n_samples: int


def certify_alpha(model: ControlModel, K: Array, H: Array, W: Array, R: Array,
                  k: float, bounds: ControlBounds, alpha_candidate: float,
                  n_samples: int = 1000, delta: float = 0.25,
                  rng: np.random.Generator | None = None) -> CertificationReport:
    """Check the three invariant-set conditions for Omega at alpha_candidate."""
    if alpha_candidate <= 0.0:
        raise ValueError("alpha_candidate must be positive")
    if k <= 1.0:
        raise ValueError("k must exceed 1")
    if rng is None:
        rng = np.random.default_rng(0)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    H = np.asarray(H, dtype=float)
    Q_L = W + K.T @ R @ K

    boundary = sample_shell(H, alpha_candidate, n_samples, rng)
    inner = sample_shell(H, 0.5 * alpha_candidate, n_samples, rng)

    # condition 1: d/dt q + L <= 0 with q = k x'Hx, L evaluated under u = Kx
    worst = -math.inf
    for x in np.vstack([boundary, inner]):
        u = K @ x
        val = 2.0 * k * float(x @ H @ model.f(x, u)) + float(x @ Q_L @ x)
        worst = max(worst, val)
    decrease_ok = worst <= -DECREASE_MARGIN

    # condition 2: level is non-increasing along closed-loop orbits from the boundary
    worst_rise = -math.inf
    h_sim = delta / 10.0
    for x in boundary:
        orbit = simulate_feedback(model, x, K, 2.0 * delta, h_sim)
        levels = np.einsum("ki,ij,kj->k", orbit, H, orbit)
        worst_rise = max(worst_rise, float(np.max(np.diff(levels))))
    invariance_ok = worst_rise <= 1e-9 * alpha_candidate

    # condition 3: the feedback law respects the control box on the whole ellipsoid
    alpha_u = control_constraint_level(K, H, bounds)
    control_ok = alpha_candidate <= alpha_u * (1.0 + 1e-12)

    return CertificationReport(
        alpha=alpha_candidate,
        passed=decrease_ok and invariance_ok and control_ok,
        decrease_ok=decrease_ok,
        invariance_ok=invariance_ok,
        control_ok=control_ok,
        worst_decrease=worst,
        worst_level_rise=worst_rise,
        control_level=alpha_u,
        n_samples=n_samples,
    )


def max_certified_alpha(model: ControlModel, K: Array, H: Array, W: Array,
                        R: Array, k: float, bounds: ControlBounds,
                        n_samples: int = 400, delta: float = 0.25,
                        seed: int = 0) -> float:
    """Bisection for the largest certifiable level, shrunk by a 0.9 safety factor."""
    alpha_u = control_constraint_level(K, H, bounds)
    if not math.isfinite(alpha_u):
        alpha_u = 1e6  # unconstrained feedback: cap the search

    def passes(alpha: float) -> bool:
        rng = np.random.default_rng(seed)
        return certify_alpha(model, K, H, W, R, k, bounds, alpha,
                             n_samples=n_samples, delta=delta, rng=rng).passed

    hi = alpha_u
    if passes(hi):
        return 0.9 * hi
    lo = hi
    while lo > 1e-8:
        lo *= 0.5
        if passes(lo):
            break
    else:
        raise SynthesisError("no level certifies; gain and Lyapunov matrix inconsistent")

    for _ in range(40):
        if hi - lo <= 0.005 * lo:
            break
        mid = 0.5 * (lo + hi)
        if passes(mid):
            lo = mid
        else:
            hi = mid
    return 0.9 * lo


def synthesize_terminal(model: ControlModel, W: Array, R: Array, k: float = 1.1,
                        alpha: float | None = None, n_samples: int = 400,
                        delta: float = 0.25, seed: int = 0) -> TerminalData:
    """Full synthesis from the plant linearization at the origin."""
    x0 = np.zeros(model.n)
    u0 = np.zeros(model.m)
    A = model.fx(x0, u0)
    B = model.fu(x0, u0)
    _, K = solve_care(A, B, W, R)
    H = solve_lyapunov(A + B @ K, W + K.T @ R @ K)
    if alpha is None:
        alpha = max_certified_alpha(model, K, H, W, R, k, model.bounds,
                                    n_samples=n_samples, delta=delta, seed=seed)
    return TerminalData(K=K, H=H, alpha=float(alpha), k=float(k))
