"""Quasi-time-optimal receding-horizon control.

Variable-horizon trajectory optimization with a certified linear terminal
controller, plus the closed-loop machinery that blends the minimum-time
objective into a quadratic one as the state enters the terminal region.
"""
from .config import (ScenarioConfig, bundled_scenario_names, find_config,
                     load_config, resolve_scenario, save_config)
from .errors import (ConfigError, EscalationLimitError, IntegrationDiverged,
                     SolverError, SynthesisError)
from .integration import ControlSignal, Trajectory, integrate
from .ocp import (OcpProblem, OcpSolution, WarmStart, eval_cost,
                  shift_warm_start, solve)
from .plants import (ControlBounds, ControlModel, cartpole_model,
                     clamp_control, double_integrator_model, make_model,
                     pendulum_model)
from .report import audit_run, compare_runs
from .rhc import (AdaptationState, RhcConfig, RunHistory, StepRecord,
                  in_target_box, rhc_step, run_closed_loop, settling_time)
from .synthesis import TerminalData, simulate_feedback, synthesize_terminal

__version__ = "0.1.0"

__all__ = [
    "AdaptationState", "ConfigError", "ControlBounds", "ControlModel",
    "ControlSignal", "EscalationLimitError", "IntegrationDiverged",
    "OcpProblem", "OcpSolution", "RhcConfig", "RunHistory", "ScenarioConfig",
    "SolverError", "StepRecord", "SynthesisError", "TerminalData",
    "Trajectory", "WarmStart", "audit_run", "bundled_scenario_names",
    "cartpole_model", "clamp_control", "compare_runs",
    "double_integrator_model", "eval_cost", "find_config", "in_target_box",
    "integrate", "load_config", "make_model", "pendulum_model",
    "resolve_scenario", "rhc_step", "run_closed_loop", "save_config",
    "settling_time", "shift_warm_start", "simulate_feedback", "solve",
    "synthesize_terminal", "__version__",
]
