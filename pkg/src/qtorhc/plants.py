"""Continuous-time control-affine plant models with analytic Jacobians."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Array = np.ndarray

# cart-pole physical constants (normalized units)
CARTPOLE_B2 = 0.4256
CARTPOLE_B3 = 3.1564e-4
CARTPOLE_C4 = 11.2135
CARTPOLE_FORCE_LIMIT = 3.9351

PENDULUM_TORQUE_GAIN = 0.3
PENDULUM_LIPSCHITZ = 1.5

# box used to estimate the cart-pole Lipschitz constant; f does not depend on x1
CARTPOLE_LIPSCHITZ_BOX = ((-np.pi, np.pi), (-4.0, 4.0), (-4.0, 4.0))
LIPSCHITZ_MARGIN = 1.2


@dataclass(frozen=True)
class ControlBounds:
    """Box constraints on the control input, u_min <= u <= u_max componentwise."""

    u_min: Array
    u_max: Array

    def __post_init__(self):
        u_min = np.atleast_1d(np.asarray(self.u_min, dtype=float))
        u_max = np.atleast_1d(np.asarray(self.u_max, dtype=float))
        if u_min.shape != u_max.shape:
            raise ValueError("u_min and u_max must have the same shape")
        if np.any(u_min > u_max):
            raise ValueError("u_min must not exceed u_max")
        object.__setattr__(self, "u_min", u_min)
        object.__setattr__(self, "u_max", u_max)

    @property
    def m(self) -> int:
        return self.u_min.shape[0]


@dataclass(frozen=True)
class ControlModel:
    """Plant dx/dt = f(x, u) with Jacobians fx = df/dx, fu = df/du.

    The callables assume correctly shaped inputs; use eval_dynamics /
    eval_jacobians for the validated entry points.  lipschitz_L bounds
    ||f(x,u) - f(y,u)|| <= L ||x - y|| on the operating region.
    """

    name: str
    n: int
    m: int
    f: Callable[[Array, Array], Array]
    fx: Callable[[Array, Array], Array]
    fu: Callable[[Array, Array], Array]
    bounds: ControlBounds
    lipschitz_L: float


def clamp_control(bounds: ControlBounds, u: Array) -> Array:
    """Project u onto the control box."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != bounds.m:
        raise ValueError(f"control has {u.shape[-1]} components, expected {bounds.m}")
    return np.clip(u, bounds.u_min, bounds.u_max)


def eval_dynamics(model: ControlModel, x: Array, u: Array) -> Array:
    """Validated evaluation of f(x, u)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (model.n,):
        raise ValueError(f"state shape {x.shape} does not match ({model.n},)")
    if u.shape != (model.m,):
        raise ValueError(f"control shape {u.shape} does not match ({model.m},)")
    return model.f(x, u)


def eval_jacobians(model: ControlModel, x: Array, u: Array) -> tuple[Array, Array]:
    """Validated evaluation of (df/dx, df/du)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (model.n,):
        raise ValueError(f"state shape {x.shape} does not match ({model.n},)")
    if u.shape != (model.m,):
        raise ValueError(f"control shape {u.shape} does not match ({model.m},)")
    return model.fx(x, u), model.fu(x, u)


# ----------------------------------------------------------------------------
# pendulum
# ----------------------------------------------------------------------------

def _pendulum_f(x: Array, u: Array) -> Array:
    return np.array([x[1], np.sin(x[0]) + PENDULUM_TORQUE_GAIN * u[0]])


def _pendulum_fx(x: Array, u: Array) -> Array:
    return np.array([[0.0, 1.0], [np.cos(x[0]), 0.0]])


_PENDULUM_FU = np.array([[0.0], [PENDULUM_TORQUE_GAIN]])


def _pendulum_fu(x: Array, u: Array) -> Array:
    return _PENDULUM_FU.copy()


def pendulum_model() -> ControlModel:
    """Damping-free pendulum, angle measured from the upright equilibrium."""
    return ControlModel(
        name="pendulum",
        n=2,
        m=1,
        f=_pendulum_f,
        fx=_pendulum_fx,
        fu=_pendulum_fu,
        bounds=ControlBounds(np.array([-1.0]), np.array([1.0])),
        lipschitz_L=PENDULUM_LIPSCHITZ,
    )


# ----------------------------------------------------------------------------
# double integrator
# ----------------------------------------------------------------------------

_DI_A = np.array([[0.0, 1.0], [0.0, 0.0]])
_DI_B = np.array([[0.0], [1.0]])


def double_integrator_model() -> ControlModel:
    """Unit point mass on a line: position, velocity, bounded acceleration."""
    return ControlModel(
        name="double_integrator",
        n=2,
        m=1,
        f=lambda x, u: np.array([x[1], u[0]]),
        fx=lambda x, u: _DI_A.copy(),
        fu=lambda x, u: _DI_B.copy(),
        bounds=ControlBounds(np.array([-1.0]), np.array([1.0])),
        lipschitz_L=1.0,
    )


# ----------------------------------------------------------------------------
# cart-pole
# ----------------------------------------------------------------------------

def _cartpole_f(x: Array, u: Array) -> Array:
    s, c = np.sin(x[1]), np.cos(x[1])
    d = CARTPOLE_C4 - c * c
    v1 = u[0] - x[3] * x[3] * s - CARTPOLE_B2 * x[2]
    v2 = s - CARTPOLE_B3 * x[3]
    return np.array([x[2], x[3], (v1 + v2 * c) / d, (v1 * c + CARTPOLE_C4 * v2) / d])


def _cartpole_fx(x: Array, u: Array) -> Array:
    s, c = np.sin(x[1]), np.cos(x[1])
    d = CARTPOLE_C4 - c * c
    dd = 2.0 * s * c  # dd/dx2
    v1 = u[0] - x[3] * x[3] * s - CARTPOLE_B2 * x[2]
    v2 = s - CARTPOLE_B3 * x[3]
    dv1_2 = -x[3] * x[3] * c
    dv1_4 = -2.0 * x[3] * s
    n3 = v1 + v2 * c
    n4 = v1 * c + CARTPOLE_C4 * v2
    dn3_2 = dv1_2 + c * c - v2 * s
    dn4_2 = dv1_2 * c - v1 * s + CARTPOLE_C4 * c
    return np.array([
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, (dn3_2 * d - n3 * dd) / (d * d), -CARTPOLE_B2 / d,
         (dv1_4 - CARTPOLE_B3 * c) / d],
        [0.0, (dn4_2 * d - n4 * dd) / (d * d), -CARTPOLE_B2 * c / d,
         (dv1_4 * c - CARTPOLE_C4 * CARTPOLE_B3) / d],
    ])


def _cartpole_fu(x: Array, u: Array) -> Array:
    c = np.cos(x[1])
    d = CARTPOLE_C4 - c * c
    return np.array([[0.0], [0.0], [1.0 / d], [c / d]])


def _sampled_lipschitz(fx: Callable[[Array, Array], Array],
                       box: tuple[tuple[float, float], ...],
                       points_per_axis: int = 9) -> float:
    """Largest spectral norm of fx on a deterministic grid over the box."""
    axes = [np.linspace(lo, hi, points_per_axis) for lo, hi in box]
    u0 = np.zeros(1)
    worst = 0.0
    for x2 in axes[0]:
        for x3 in axes[1]:
            for x4 in axes[2]:
                jac = fx(np.array([0.0, x2, x3, x4]), u0)
                worst = max(worst, np.linalg.norm(jac, 2))
    return worst


def cartpole_model() -> ControlModel:
    """Cart-pole in normalized coordinates (cart position, pole angle, rates)."""
    lip = LIPSCHITZ_MARGIN * _sampled_lipschitz(_cartpole_fx, CARTPOLE_LIPSCHITZ_BOX)
    return ControlModel(
        name="cartpole",
        n=4,
        m=1,
        f=_cartpole_f,
        fx=_cartpole_fx,
        fu=_cartpole_fu,
        bounds=ControlBounds(np.array([-CARTPOLE_FORCE_LIMIT]),
                             np.array([CARTPOLE_FORCE_LIMIT])),
        lipschitz_L=lip,
    )


def make_model(name: str) -> ControlModel:
    """Look up a bundled plant by name."""
    if name == "pendulum":
        return pendulum_model()
    if name == "cartpole":
        return cartpole_model()
    if name == "double_integrator":
        return double_integrator_model()
    raise ValueError(f"unknown plant '{name}'")
