"""Reference trajectories through the gates and the iLQR tracking expert."""

from gazerace.expert.mpc import MpcConfig, MpcExpert, MpcSolution
from gazerace.expert.reference import (
    ReferenceError,
    ReferenceTrajectory,
    generate_reference,
    jittered_references,
)

__all__ = [
    "MpcConfig",
    "MpcExpert",
    "MpcSolution",
    "ReferenceError",
    "ReferenceTrajectory",
    "generate_reference",
    "jittered_references",
]
