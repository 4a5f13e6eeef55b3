"""Receding-horizon loop: refine the plan, apply its first slice, adapt.

The loop plans on a grid of whole `delta`-long control segments, so the
horizon is always a whole number of sampling periods. Applying the first
segment then equals dropping one row of the plan: the next step's warm
start replays the remainder of the previous plan exactly, which keeps the
per-step value descent intact under discretization. (Resampling a shifted
plan onto a fresh uniform grid instead smears every switching time by up
to a segment, and on a sensitive plant that destroys the planned endpoint
faster than any per-step iteration budget can repair it.) Each step
refines the plan from the measured state at a frozen horizon; the first
step quantizes a free-horizon solve onto the grid.

Two coefficients are adapted along the way: the terminal penalty weight
`rho` doubles until the optimal value certifies that the planned endpoint
lies inside the terminal set, and the running-cost blend `epsilon` grows
from 0 toward 1 once the state enters a target box around the origin,
trading pure speed for quadratic-cost damping. The growth increment is
sized so the optimal value keeps descending by a fixed margin despite the
objective change.

`run_closed_loop` drives the loop in three modes: the full adaptive
controller, a frozen epsilon = 0 variant that only races the horizon down
to its floor, and a plain linear-feedback baseline with no optimization.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

from .errors import EscalationLimitError
from .integration import ControlSignal, integrate
from .ocp import (OcpProblem, OcpSolution, WarmStart, _pg_minimize,
                  _resample_average, eval_cost, solve)
from .synthesis import simulate_feedback

logger = logging.getLogger(__name__)

Array = np.ndarray

ESCALATION_CAP = 50       # penalty doublings per step before giving up
DENOM_FLOOR = 1e-12       # tail integral below this means the plan is cost-free
DESCENT_SLACK_REL = 1e-3  # solver-suboptimality slack, relative to the value


@dataclass(frozen=True)
class RhcConfig:
    """Loop parameters shared by every step of one closed-loop run."""

    delta: float                  # sampling time: how much control is applied per step
    T_min: float                  # horizon floor of the inner problem
    B_box: Array                  # adaptation region: |x_j| <= B_box[j] componentwise
    alpha: float                  # certified terminal level x'Hx <= alpha
    xi: float = 0.1               # descent margin kept in reserve by the epsilon update
    gamma: float = 2.0            # penalty growth factor
    rho0: float = 100.0           # initial terminal penalty weight
    eps_seed: float = 0.01        # blend value planted when the horizon hits its floor
    c: float = 1.0                # lower-bound constant: q(x) >= c * x'Hx
    tol_T: float = 1e-6           # slack for detecting T = T_min
    max_steps: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "B_box", np.asarray(self.B_box, dtype=float))
        msgs = []
        if self.delta <= 0.0:
            msgs.append(f"delta = {self.delta} must be positive")
        if self.T_min < self.delta:
            msgs.append(f"T_min = {self.T_min} below delta = {self.delta}")
        if not 0.0 < self.xi < 1.0:
            msgs.append(f"xi = {self.xi} outside (0, 1)")
        if self.gamma <= 1.0:
            msgs.append(f"gamma = {self.gamma} must exceed 1")
        if self.rho0 < 1.0:
            msgs.append(f"rho0 = {self.rho0} below 1")
        if not 0.0 < self.eps_seed < 1.0:
            msgs.append(f"eps_seed = {self.eps_seed} outside (0, 1)")
        if self.B_box.ndim != 1 or self.B_box.size == 0 or not np.all(self.B_box > 0.0):
            msgs.append("B_box must be a 1-d array of positive bounds")
        if self.alpha <= 0.0:
            msgs.append(f"alpha = {self.alpha} must be positive")
        if self.c <= 0.0:
            msgs.append(f"c = {self.c} must be positive")
        if self.tol_T <= 0.0:
            msgs.append(f"tol_T = {self.tol_T} must be positive")
        if self.max_steps < 1:
            msgs.append("max_steps must be at least 1")
        if msgs:
            raise ValueError("; ".join(msgs))


@dataclass(frozen=True)
class AdaptationState:
    """Blend and penalty coefficients carried between steps; both only grow."""

    epsilon: float
    rho: float
    step_index: int = 0

    def __post_init__(self):
        msgs = []
        if not 0.0 <= self.epsilon <= 1.0:
            msgs.append(f"epsilon = {self.epsilon} outside [0, 1]")
        if self.rho < 1.0:
            msgs.append(f"rho = {self.rho} below 1")
        if self.step_index < 0:
            msgs.append("step_index must be non-negative")
        if msgs:
            raise ValueError("; ".join(msgs))


@dataclass(frozen=True)
class StepRecord:
    """Everything observable about one accepted step."""

    t: float                  # start time of the step
    x: Array                  # measured state the problem was solved from
    V: float                  # optimal value at x
    T_bar: float              # optimized horizon
    epsilon: float            # blend used by the accepted solve
    rho: float                # penalty used by the accepted solve
    in_B: bool                # whether x lies in the adaptation box
    applied: ControlSignal    # the delta-long slice handed to the plant
    integral_L_head: float    # running cost over the applied slice
    integral_L_tail: float    # running cost over the remainder of the plan
    terminal_q: float         # terminal penalty of the plan


class StepOutcome(NamedTuple):
    applied: ControlSignal
    record: StepRecord
    state: AdaptationState
    warm_start: Array   # next step's delta-grid plan, one row per segment
    x_next: Array
    times: Array        # plant nodes over [t, t + delta]
    states: Array
    controls: Array


@dataclass
class RunHistory:
    """One closed-loop run: per-step records plus the dense plant trace."""

    mode: str
    records: list
    times: Array
    states: Array
    controls: Array
    converged: bool
    violations: int         # descent-inequality breaches beyond the slack
    stop_reason: str

    @property
    def final_state(self) -> Array:
        return self.states[-1]


def in_target_box(x: Array, config: RhcConfig) -> bool:
    """True iff |x_j| <= B_box[j] for every component (boundary included)."""
    return bool(np.all(np.abs(np.asarray(x, dtype=float)) <= config.B_box))


def grid_floor_segments(config: RhcConfig) -> int:
    """Fewest whole delta-segments spanning at least T_min."""
    return max(1, int(math.ceil(config.T_min / config.delta - 1e-9)))


def _grid_solution(problem: OcpProblem, values: Array, T: float,
                   iterations: int, converged: bool) -> OcpSolution:
    """Price a delta-grid plan on the fine reporting grid."""
    signal = ControlSignal(0.0, T, values)
    bd = eval_cost(problem, signal)
    return OcpSolution(
        signal=signal, T=T, J=bd.J, x_final=bd.x_final,
        integral_L_total=bd.integral_L_total,
        integral_L_head=bd.integral_L_head,
        integral_L_tail=bd.integral_L_tail,
        terminal_q=bd.terminal_q,
        iterations=iterations, converged=converged)


def _reprice(problem: OcpProblem, sol: OcpSolution) -> OcpSolution:
    """Same plan under a new penalty: reassemble the value, no new rollout."""
    J = (sol.T
         + problem.epsilon * (sol.integral_L_head + sol.integral_L_tail)
         + problem.rho * sol.terminal_q)
    return dataclasses.replace(sol, J=J)


def _quantize_plan(signal: ControlSignal, delta: float, n_min: int,
                   bounds) -> Array:
    """Resample a free-horizon plan onto whole delta-segments.

    The boundary mismatch this introduces can wreck the planned endpoint on
    a sensitive plant; callers must repair the result with a full-budget
    refinement before trusting it.
    """
    n_seg = max(n_min, int(round(signal.T / delta)))
    edges = np.arange(signal.N + 1) * signal.segment_length
    return _resample_average(edges, np.asarray(signal.values, dtype=float),
                             n_seg * delta, n_seg, bounds.u_min, bounds.u_max)


def _extend_at_floor(plan: Array, x_end: Array, terminal, bounds) -> Array:
    """Shift a floor-length plan: drop the applied segment, append feedback.

    The appended segment holds u = K x at the planned endpoint, which keeps
    the extended endpoint inside the invariant terminal set.
    """
    u_ext = np.clip(terminal.K @ np.asarray(x_end, dtype=float),
                    bounds.u_min, bounds.u_max)
    return np.vstack([plan[1:], u_ext[None, :]])


def rho_escalation(x: Array, state: AdaptationState, config: RhcConfig,
                   template: OcpProblem, values: Array, *,
                   max_iter: Optional[int] = None,
                   retry_max_iter: Optional[int] = None) -> tuple:
    """Refine the delta-grid plan, doubling the terminal penalty until the
    value certifies set membership.

    Accepts once V / (rho * c) <= alpha, which forces the planned endpoint
    to satisfy x(T)' H x(T) <= alpha because the value dominates the
    penalty term. Refinement keeps whichever of (incoming, refined) plan
    prices lower on the reporting grid, so a certified incoming plan can
    only improve. Doublings re-price the held plan for free (same rollout,
    new penalty weight) and re-refine only when re-pricing alone can never
    certify: when the blend is positive the objective genuinely changes
    with rho, and when the endpoint penalty exceeds alpha * c the
    certificate's rho -> infinity limit q / c stays out of reach until the
    plan itself moves.
    """
    x = np.asarray(x, dtype=float)
    values = np.asarray(values, dtype=float)
    n_seg = values.shape[0]
    T = n_seg * config.delta
    rho = state.rho
    sol = None
    for doubling in range(ESCALATION_CAP + 1):
        problem = dataclasses.replace(template, x0=x, N=n_seg,
                                      epsilon=state.epsilon, rho=rho,
                                      T_min=config.T_min, delta=config.delta)
        if sol is not None:
            sol = _reprice(problem, sol)
        certified = (sol is not None
                     and sol.J / (rho * config.c) <= config.alpha)
        if sol is None or (not certified
                           and (state.epsilon > 0.0
                                or sol.terminal_q / config.c > config.alpha)):
            budget = max_iter if doubling == 0 else retry_max_iter
            incumbent = values if sol is None else sol.signal.values
            res = _pg_minimize(problem, incumbent, T, freeze_T=True,
                               max_iter=budget)
            refined = _grid_solution(problem, res.values, T,
                                     res.iterations, res.converged)
            if sol is None:
                sol = _grid_solution(problem, incumbent, T, 0, False)
            sol = refined if refined.J <= sol.J else sol
        if sol.J / (rho * config.c) <= config.alpha:
            return sol, rho
        logger.debug("escalation: V=%.4f T=%.3f q=%.3g rho=%.0f "
                     "level=%.3g > alpha=%.3g",
                     sol.J, sol.T, sol.terminal_q, rho,
                     sol.J / (rho * config.c), config.alpha)
        rho *= config.gamma
    raise EscalationLimitError(rho, ESCALATION_CAP)


def epsilon_seed_check(solution: OcpSolution, state: AdaptationState,
                       config: RhcConfig,
                       floor_T: Optional[float] = None) -> tuple:
    """Plant a small positive blend when the horizon has hit its floor.

    floor_T overrides the floor being tested against (the grid floor is
    T_min rounded up to whole segments). Returns the (possibly updated)
    state and a flag telling the caller to re-solve, since a changed
    objective invalidates the current solution.
    """
    floor = config.T_min if floor_T is None else floor_T
    if solution.T - floor <= config.tol_T and state.epsilon == 0.0:
        return dataclasses.replace(state, epsilon=config.eps_seed), True
    return state, False


def epsilon_update(solution: OcpSolution, x_next: Array,
                   state: AdaptationState, config: RhcConfig) -> AdaptationState:
    """Grow the blend once the plant is inside the target box.

    The increment is the largest one that provably keeps the value
    descending by the xi margin: the applied slice has already paid
    delta (or T - T_min near the floor) plus the head running cost, and
    that budget is spread over the remaining tail cost.
    """
    if not in_target_box(x_next, config):
        return state
    eps = state.epsilon
    head = solution.integral_L_head
    if solution.T >= config.T_min + config.delta:
        gain = config.delta + eps * head
        denom = solution.integral_L_tail
    else:
        gain = max(solution.T - config.T_min, 0.0) + eps * head
        denom = solution.integral_L_tail + solution.terminal_q
    if denom <= DENOM_FLOOR:
        # remaining plan is cost-free; nothing left to blend against
        return dataclasses.replace(state, epsilon=1.0)
    eps_new = min(eps + (1.0 - config.xi) * gain / denom, 1.0)
    return dataclasses.replace(state, epsilon=eps_new)


def _head_signal(signal: ControlSignal, delta: float) -> ControlSignal:
    """Shortest prefix of the signal, on whole segments, covering [0, delta]."""
    seg = signal.segment_length
    if delta <= seg * (1.0 + 1e-12):
        return ControlSignal(0.0, delta, np.array(signal.values[:1]))
    j_end = min(int(math.ceil(delta / seg - 1e-12)), signal.N)
    return ControlSignal(0.0, j_end * seg, np.array(signal.values[:j_end]))


def _simulate_applied(model, x: Array, signal: ControlSignal, delta: float,
                      h: float) -> tuple:
    """Run the plant under the first delta of the plan; return its node trace."""
    head = _head_signal(signal, delta)
    if head.T <= delta * (1.0 + 1e-12):
        traj = integrate(model, x, head, h)
        times, states = traj.coarse_times, traj.coarse_states
    else:
        traj = integrate(model, x, head, h, breakpoints=(delta,))
        keep = traj.coarse_times <= delta * (1.0 + 1e-12)
        times, states = traj.coarse_times[keep], traj.coarse_states[keep]
    controls = np.array([signal.value_at(min(t, delta * (1.0 - 1e-12)))
                         for t in times])
    return times, states, controls


def _applied_slice(problem: OcpProblem, signal: ControlSignal,
                   delta: float) -> ControlSignal:
    """The delta-long control slice as its own signal, for the step record."""
    head = _head_signal(signal, delta)
    if head.T <= delta * (1.0 + 1e-12):
        return head
    # the slice boundary cuts a segment; average onto equal pieces
    lo = problem.model.bounds.u_min
    hi = problem.model.bounds.u_max
    edges = np.arange(head.N + 1) * head.segment_length
    values = _resample_average(edges, head.values, delta, head.N, lo, hi)
    return ControlSignal(0.0, delta, values)


def rhc_step(x: Array, state: AdaptationState, config: RhcConfig,
             template: OcpProblem, values: Array, adapt: bool = True, *,
             max_iter: Optional[int] = None,
             retry_max_iter: Optional[int] = None) -> StepOutcome:
    """One full step: certify, refine, apply one segment, adapt the blend.

    values is the incoming delta-grid plan (one row per segment). Order of
    operations: penalty escalation first; then, if the horizon sits on its
    floor with a zero blend, seed the blend and re-run the escalation on
    the changed objective; apply the first segment of the accepted plan to
    the plant; finally grow the blend from the newly measured state. With
    adapt=False the blend is left untouched (the frozen time-only mode).
    max_iter caps the initial refinement, retry_max_iter any re-refinement
    against a changed objective; None means the template's full budget.

    The returned warm_start is the next step's plan: the accepted plan
    minus its applied first row, or, when the horizon is already at the
    grid floor, that shift extended by one feedback segment to keep the
    length (the plant-applied horizon cannot shrink below the floor).
    """
    x = np.asarray(x, dtype=float)
    values = np.asarray(values, dtype=float)
    n_min = grid_floor_segments(config)
    sol, rho = rho_escalation(x, state, config, template, values,
                              max_iter=max_iter, retry_max_iter=retry_max_iter)
    if rho != state.rho:
        state = dataclasses.replace(state, rho=rho)
    if adapt:
        state, resolve = epsilon_seed_check(sol, state, config,
                                            floor_T=n_min * config.delta)
        if resolve:
            sol, rho = rho_escalation(x, state, config, template,
                                      sol.signal.values,
                                      max_iter=retry_max_iter,
                                      retry_max_iter=retry_max_iter)
            if rho != state.rho:
                state = dataclasses.replace(state, rho=rho)

    t = state.step_index * config.delta
    times, states, controls = _simulate_applied(template.model, x, sol.signal,
                                                config.delta, template.h)
    x_next = states[-1]

    record = StepRecord(
        t=t,
        x=x.copy(),
        V=sol.J,
        T_bar=sol.T,
        epsilon=state.epsilon,
        rho=state.rho,
        in_B=in_target_box(x, config),
        applied=_applied_slice(template, sol.signal, config.delta),
        integral_L_head=sol.integral_L_head,
        integral_L_tail=sol.integral_L_tail,
        terminal_q=sol.terminal_q,
    )
    new_state = epsilon_update(sol, x_next, state, config) if adapt else state
    new_state = dataclasses.replace(new_state, step_index=state.step_index + 1)
    plan = sol.signal.values
    if plan.shape[0] > n_min:
        warm_next = np.array(plan[1:])
    else:
        warm_next = _extend_at_floor(plan, sol.x_final, template.terminal,
                                     template.model.bounds)
    return StepOutcome(record.applied, record, new_state, warm_next, x_next,
                       times + t, states, controls)


def _check_descent(prev: StepRecord, cur: StepRecord, config: RhcConfig,
                   mode: str) -> bool:
    """True when the value drop between consecutive steps breaks its bound.

    Comparable only while the penalty is unchanged; an escalation between
    the two solves changes the objective itself. The slack absorbs solver
    suboptimality.
    """
    if prev.rho != cur.rho:
        return False
    slack = DESCENT_SLACK_REL * prev.V
    if mode == "time_optimal":
        drop = min(config.delta, prev.T_bar - config.T_min)
        return cur.V > prev.V - drop + slack
    if prev.epsilon > 0.0:
        bound = -config.xi * prev.epsilon * prev.integral_L_head + slack
        return cur.V - prev.V > bound
    return False


def _run_feedback_loop(x0: Array, template: OcpProblem, config: RhcConfig,
                       convergence_eps: float) -> RunHistory:
    """Baseline: u = clamp(Kx) under the same sampling, no optimization."""
    model = template.model
    K = template.terminal.K
    lo, hi = model.bounds.u_min, model.bounds.u_max
    x = np.asarray(x0, dtype=float)
    times_parts = [np.array([0.0])]
    states_parts = [x[None, :].copy()]
    converged = False
    stop_reason = "step limit reached"
    step_i = 0
    while True:
        if float(np.linalg.norm(x)) <= convergence_eps:
            converged = True
            stop_reason = "converged"
            break
        if step_i >= config.max_steps:
            break
        nodes = simulate_feedback(model, x, K, config.delta, template.h)
        n_seg = nodes.shape[0] - 1
        local = step_i * config.delta + np.arange(1, n_seg + 1) * (config.delta / n_seg)
        times_parts.append(local)
        states_parts.append(nodes[1:])
        x = nodes[-1]
        step_i += 1
    times = np.concatenate(times_parts)
    states = np.concatenate(states_parts, axis=0)
    controls = np.clip(states @ K.T, lo, hi)
    return RunHistory(mode="lq", records=[], times=times, states=states,
                      controls=controls, converged=converged, violations=0,
                      stop_reason=stop_reason)


def run_closed_loop(x0: Array, template: OcpProblem, config: RhcConfig,
                    mode: str = "qto", *, epsilon0: float = 0.0,
                    convergence_eps: float = 1e-3, restarts: int = 0,
                    seed: int = 0, t0_range: Optional[tuple] = None,
                    warm_start: Union[Array, OcpSolution, WarmStart,
                                      None] = None,
                    warm_max_iter: Optional[int] = None) -> RunHistory:
    """Drive the plant until the state norm drops below the threshold.

    Modes: "qto" runs the full adaptive controller; "time_optimal" freezes
    the blend at 0 and stops at the handoff point where adaptation would
    take over (horizon at its floor or state inside the box); "lq" applies
    the linear feedback alone. Non-convergence within max_steps is reported
    in the history, not raised.

    The first step plans from scratch: a free-horizon solve (restarts,
    seed, t0_range feed its candidate screen) quantized onto whole
    segments, then repaired by a full-budget refinement. A warm_start
    skips the cold solve: an array is taken as the delta-grid plan
    itself, a solution or saved plan is quantized first.

    warm_max_iter caps the refinement iterations on warm-started steps.
    The shifted plan already satisfies the per-step descent bound, the
    refinement is monotone, and the incoming plan is kept whenever it
    prices lower, so a tight cap trades optimality for speed without
    giving up descent. The first step and any re-solve against a changed
    objective (penalty doubling, blend seeding) keep the full budget,
    where no certified incumbent exists yet.
    """
    mode = mode.replace("-", "_")
    if mode not in ("qto", "time_optimal", "lq"):
        raise ValueError(f"unknown mode {mode!r}")
    msgs = []
    if abs(template.T_min - config.T_min) > 1e-12:
        msgs.append("template T_min differs from config")
    if abs(template.delta - config.delta) > 1e-12:
        msgs.append("template delta differs from config")
    if config.B_box.shape != (template.model.n,):
        msgs.append("B_box length differs from the state dimension")
    if not 0.0 <= epsilon0 <= 1.0:
        msgs.append(f"epsilon0 = {epsilon0} outside [0, 1]")
    if msgs:
        raise ValueError("; ".join(msgs))
    if mode == "lq":
        return _run_feedback_loop(x0, template, config, convergence_eps)

    state = AdaptationState(epsilon=epsilon0 if mode == "qto" else 0.0,
                            rho=config.rho0, step_index=0)
    x = np.asarray(x0, dtype=float)
    n_min = grid_floor_segments(config)
    bounds = template.model.bounds
    if isinstance(warm_start, np.ndarray):
        values = np.asarray(warm_start, dtype=float)
    elif warm_start is not None:
        values = _quantize_plan(warm_start.signal, config.delta, n_min,
                                bounds)
    else:
        values = None   # cold solve deferred until a step is actually needed
    records = []
    times_parts = [np.array([0.0])]
    states_parts = [x[None, :].copy()]
    controls_parts = []
    last_control = None
    violations = 0
    converged = False
    stop_reason = "step limit reached"
    while True:
        if float(np.linalg.norm(x)) <= convergence_eps:
            converged = True
            stop_reason = "converged"
            break
        if state.step_index >= config.max_steps:
            break
        if values is None:
            cold = solve(dataclasses.replace(template, x0=x,
                                             epsilon=state.epsilon,
                                             rho=state.rho),
                         restarts=restarts, seed=seed, t0_range=t0_range)
            values = _quantize_plan(cold.signal, config.delta, n_min, bounds)
            logger.debug("cold solve: T=%.4f J=%.4f -> %d segments",
                         cold.T, cold.J, values.shape[0])
        outcome = rhc_step(
            x, state, config, template, values, adapt=(mode == "qto"),
            max_iter=None if state.step_index == 0 else warm_max_iter,
            retry_max_iter=None)
        rec = outcome.record
        if records and _check_descent(records[-1], rec, config, mode):
            violations += 1
            logger.warning("descent violation at step %d: V %.6f -> %.6f",
                           state.step_index, records[-1].V, rec.V)
        records.append(rec)
        logger.debug("step %d: t=%.3f V=%.5f T=%.4f eps=%.5f rho=%.0f "
                     "q=%.3g |x|=%.4f", state.step_index, rec.t, rec.V,
                     rec.T_bar, rec.epsilon, rec.rho, rec.terminal_q,
                     float(np.linalg.norm(x)))
        times_parts.append(outcome.times[1:])
        states_parts.append(outcome.states[1:])
        # keep controls right-continuous: a boundary node carries the value
        # applied on the interval that starts there
        controls_parts.append(outcome.controls[:-1])
        last_control = outcome.controls[-1:]
        x = outcome.x_next
        values = outcome.warm_start
        state = outcome.state
        if mode == "time_optimal" and (rec.T_bar < config.T_min + config.delta
                                       or in_target_box(x, config)):
            stop_reason = "handoff point reached"
            break
    times = np.concatenate(times_parts)
    states = np.concatenate(states_parts, axis=0)
    if last_control is None:
        controls = np.zeros((len(times), template.model.m))
    else:
        controls = np.concatenate(controls_parts + [last_control], axis=0)
    return RunHistory(mode=mode, records=records, times=times, states=states,
                      controls=controls, converged=converged,
                      violations=violations, stop_reason=stop_reason)


def settling_time(times: Array, states: Array,
                  threshold: float) -> Optional[float]:
    """First time after which the state norm stays at or below the threshold."""
    norms = np.linalg.norm(np.asarray(states, dtype=float), axis=1)
    if norms[-1] > threshold:
        return None
    above = np.nonzero(norms > threshold)[0]
    if above.size == 0:
        return float(times[0])
    return float(times[above[-1] + 1])
