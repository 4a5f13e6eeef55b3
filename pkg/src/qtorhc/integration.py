"""Fixed-step RK4 integration of piecewise-constant-control trajectories.

The integration grid is built per control segment so that segment boundaries
are always grid points (control switches are never straddled).  Each grid
interval of width ~h is advanced as two RK4 half-steps and the midpoint state
is kept, which lets the running-cost quadrature apply the Simpson rule
interval by interval.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import IntegrationDiverged
from .plants import ControlModel

Array = np.ndarray

GRID_ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class ControlSignal:
    """Piecewise-constant control: N equal segments of values on [t0, t0 + T]."""

    t0: float
    T: float
    values: Array  # shape (N, m)

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.T <= 0.0:
            raise ValueError("signal duration T must be positive")
        if values.shape[0] < 1:
            raise ValueError("signal needs at least one segment")
        if not np.all(np.isfinite(values)):
            raise ValueError("signal values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def segment_length(self) -> float:
        return self.T / self.N

    def segment_index(self, s) -> np.ndarray:
        """Segment owning time s; right-continuous, last value held past t0 + T."""
        idx = np.floor((np.asarray(s) - self.t0) / self.segment_length).astype(int)
        return np.clip(idx, 0, self.N - 1)

    def value_at(self, s) -> Array:
        return self.values[self.segment_index(s)]


@dataclass(frozen=True)
class Trajectory:
    """States sampled on the integration grid, midpoints included.

    times[::2] is the coarse grid (spacing ~h, containing every segment
    boundary); odd entries are interval midpoints kept for the quadrature.
    """

    times: Array
    states: Array

    @property
    def coarse_times(self) -> Array:
        return self.times[::2]

    @property
    def coarse_states(self) -> Array:
        return self.states[::2]

    def grid_index(self, t: float) -> int:
        """Index of t in the coarse grid; t must lie on it."""
        coarse = self.coarse_times
        i = int(np.searchsorted(coarse, t))
        for j in (i - 1, i, i + 1):
            if 0 <= j < coarse.shape[0] and abs(coarse[j] - t) <= GRID_ALIGN_TOL * max(
                    1.0, abs(coarse[-1])):
                return j
        raise ValueError(f"t = {t!r} is not on the integration grid")

    def state_at(self, t: float) -> Array:
        """Linear interpolation between grid samples."""
        out = np.empty(self.states.shape[1])
        for k in range(self.states.shape[1]):
            out[k] = np.interp(t, self.times, self.states[:, k])
        return out


def _rk4_step(f, x: Array, u: Array, dt: float) -> Array:
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(model: ControlModel, x0: Array, signal: ControlSignal,
              h: float, breakpoints: tuple[float, ...] = ()) -> Trajectory:
    """Integrate dx/dt = f(x, u(s)) over the signal's span from x0.

    breakpoints lists extra times the coarse grid must contain (on top of the
    segment boundaries, which are always included).
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.n,):
        raise ValueError(f"state shape {x0.shape} does not match ({model.n},)")
    if signal.m != model.m:
        raise ValueError(f"signal has {signal.m} control components, expected {model.m}")
    if h <= 0.0:
        raise ValueError("step h must be positive")

    seg = signal.segment_length
    t_end = signal.t0 + signal.T
    tol = GRID_ALIGN_TOL * max(1.0, abs(t_end))
    extra = sorted(b for b in breakpoints if signal.t0 + tol < b < t_end - tol)

    times_list = [signal.t0]
    states_list = [x0]
    f = model.f
    x = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(signal.N):
            u = signal.values[j]
            s0 = signal.t0 + j * seg
            s1 = signal.t0 + (j + 1) * seg if j + 1 < signal.N else t_end
            cuts = [s0] + [b for b in extra if s0 + tol < b < s1 - tol] + [s1]
            for a, b in zip(cuts[:-1], cuts[1:]):
                span = b - a
                substeps = max(1, math.ceil(span / h - GRID_ALIGN_TOL))
                dt = span / substeps
                for i in range(substeps):
                    xm = _rk4_step(f, x, u, 0.5 * dt)
                    x = _rk4_step(f, xm, u, 0.5 * dt)
                    if not np.all(np.isfinite(x)):
                        raise IntegrationDiverged(a + (i + 1) * dt)
                    t1 = b if i == substeps - 1 else a + (i + 1) * dt
                    times_list.append(a + (i + 0.5) * dt)
                    times_list.append(t1)
                    states_list.append(xm)
                    states_list.append(x)
    return Trajectory(times=np.array(times_list), states=np.array(states_list))


def running_cost(W: Array, R: Array, traj: Trajectory, signal: ControlSignal,
                 a: float, b: float) -> float:
    """Simpson quadrature of x'Wx + u'Ru over [a, b]; a, b must be grid-aligned."""
    W = np.asarray(W, dtype=float)
    R = np.asarray(R, dtype=float)
    if b < a:
        raise ValueError("interval end precedes its start")
    ia = traj.grid_index(a)
    ib = traj.grid_index(b)
    if ib == ia:
        return 0.0

    xs = traj.states[2 * ia: 2 * ib + 1]
    ts = traj.times[2 * ia: 2 * ib + 1]
    gx = np.einsum("ki,ij,kj->k", xs, W, xs)
    u = signal.value_at(ts[1::2])  # midpoint times, strictly inside segments
    gu = np.einsum("ki,ij,kj->k", u, R, u)
    widths = ts[2::2] - ts[:-1:2]
    # u is constant per interval: its term integrates exactly
    terms = (widths / 6.0) * (gx[:-1:2] + 4.0 * gx[1::2] + gx[2::2]) + widths * gu
    return math.fsum(terms.tolist())


# ----------------------------------------------------------------------------
# state growth diagnostic
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class GrowthBoundReport:
    max_norm: float
    bound: float
    violated: bool
    margin: float


def growth_bound_constants(model: ControlModel, H: Array, alpha: float,
                           n_samples: int = 1000,
                           rng: np.random.Generator | None = None
                           ) -> tuple[float, float]:
    """Constants (M1, M2) of the a-priori state bound for admissible controls.

    M1 is the largest norm over the terminal ellipsoid {x'Hx <= alpha}; M2 adds
    the largest dynamics magnitude over ellipsoid boundary samples paired with
    control-box vertices.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    H = np.asarray(H, dtype=float)
    lam_min = np.linalg.eigvalsh(H)[0]
    if lam_min <= 0.0 or alpha <= 0.0:
        raise ValueError("H must be positive definite and alpha positive")
    M1 = math.sqrt(alpha / lam_min)

    chol = np.linalg.cholesky(H)
    z = rng.standard_normal((n_samples, model.n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    xs = math.sqrt(alpha) * np.linalg.solve(chol.T, z.T).T
    u_corners = [model.bounds.u_min, model.bounds.u_max]
    sup_f = 0.0
    for x in xs:
        for u in u_corners:
            sup_f = max(sup_f, float(np.linalg.norm(model.f(x, u))))
    M2 = model.lipschitz_L * M1 + sup_f
    return M1, M2


def growth_bound_check(model: ControlModel, traj: Trajectory, T: float,
                       M1: float, M2: float) -> GrowthBoundReport:
    """Compare the realized max state norm against (M1 + M2*T)*exp(L*T)."""
    max_norm = float(np.linalg.norm(traj.states, axis=1).max())
    bound = (M1 + M2 * T) * math.exp(model.lipschitz_L * T)
    return GrowthBoundReport(max_norm=max_norm, bound=bound,
                             violated=max_norm > bound, margin=bound - max_norm)
