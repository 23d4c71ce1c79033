from gazerace.sim.dynamics import Command, QuadParams, QuadState, SimulationError, clamp_command, step_dynamics
from gazerace.sim.rollout import ControlOutput, RateConfig, RolloutLog, TickContext, run_rollout
from gazerace.sim.track import (
    Gate,
    GateEvent,
    Track,
    check_gate_pass,
    check_termination,
    generate_track,
    load_track,
)

__all__ = [
    "Command",
    "ControlOutput",
    "Gate",
    "GateEvent",
    "QuadParams",
    "QuadState",
    "RateConfig",
    "RolloutLog",
    "SimulationError",
    "TickContext",
    "Track",
    "check_gate_pass",
    "check_termination",
    "clamp_command",
    "generate_track",
    "load_track",
    "run_rollout",
    "step_dynamics",
]
