"""Small hand-built models and oracles shared by the test modules."""
import numpy as np

from qtorhc.plants import ControlBounds, ControlModel


def scalar_linear_model(a: float, b: float = 0.0, u_lim: float = 10.0) -> ControlModel:
    """dx/dt = a*x + b*u, one state, one control."""
    return ControlModel(
        name="scalar-linear",
        n=1, m=1,
        f=lambda x, u: np.array([a * x[0] + b * u[0]]),
        fx=lambda x, u: np.array([[a]]),
        fu=lambda x, u: np.array([[b]]),
        bounds=ControlBounds(np.array([-u_lim]), np.array([u_lim])),
        lipschitz_L=abs(a),
    )


def constant_rate_model() -> ControlModel:
    """dx/dt = 1 regardless of input; x(t) = x0 + t exactly."""
    return ControlModel(
        name="constant-rate",
        n=1, m=1,
        f=lambda x, u: np.array([1.0]),
        fx=lambda x, u: np.array([[0.0]]),
        fu=lambda x, u: np.array([[0.0]]),
        bounds=ControlBounds(np.array([-1.0]), np.array([1.0])),
        lipschitz_L=0.0,
    )


def quadratic_blowup_model() -> ControlModel:
    """dx/dt = x^2; finite escape time from positive starts."""
    return ControlModel(
        name="blowup",
        n=1, m=1,
        f=lambda x, u: np.array([x[0] * x[0]]),
        fx=lambda x, u: np.array([[2.0 * x[0]]]),
        fu=lambda x, u: np.array([[0.0]]),
        bounds=ControlBounds(np.array([-1.0]), np.array([1.0])),
        lipschitz_L=1.0,
    )


def double_integrator_model(u_lim: float = 1.0) -> ControlModel:
    """dx1/dt = x2, dx2/dt = u."""
    return ControlModel(
        name="double-integrator",
        n=2, m=1,
        f=lambda x, u: np.array([x[1], u[0]]),
        fx=lambda x, u: np.array([[0.0, 1.0], [0.0, 0.0]]),
        fu=lambda x, u: np.array([[0.0], [1.0]]),
        bounds=ControlBounds(np.array([-u_lim]), np.array([u_lim])),
        lipschitz_L=1.0,
    )


def fd_jacobians(f, x, u, step=1e-6):
    """Central finite-difference Jacobians of f at (x, u)."""
    n, m = x.shape[0], u.shape[0]
    f0 = f(x, u)
    fx = np.empty((f0.shape[0], n))
    fu = np.empty((f0.shape[0], m))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step * max(1.0, abs(x[i]))
        fx[:, i] = (f(x + e, u) - f(x - e, u)) / (2.0 * e[i])
    for j in range(m):
        e = np.zeros(m)
        e[j] = step * max(1.0, abs(u[j]))
        fu[:, j] = (f(x, u + e) - f(x, u - e)) / (2.0 * e[j])
    return fx, fu


def trapezoid_running_cost(W, R, traj, signal, a, b):
    """Trapezoid-rule reference quadrature on the full stored grid."""
    mask = (traj.times >= a - 1e-12) & (traj.times <= b + 1e-12)
    ts = traj.times[mask]
    xs = traj.states[mask]
    gx = np.einsum("ki,ij,kj->k", xs, W, xs)
    mids = 0.5 * (ts[:-1] + ts[1:])
    uu = signal.value_at(mids)
    gu = np.einsum("ki,ij,kj->k", uu, R, uu)
    widths = ts[1:] - ts[:-1]
    g_avg = 0.5 * (gx[:-1] + gx[1:]) + gu
    return float(np.sum(widths * g_avg))
