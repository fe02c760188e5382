"""Material Point Method simulation of dynamic effect particles."""
from .particles import (
    CollisionEvent,
    CollisionEvents,
    ConfigError,
    EmittedBatch,
    EmitterSpec,
    KeyframeTrack,
    Material,
    MaterialTable,
    ParticleState,
    SimConfig,
    emit,
    keyframed_position,
    lame_parameters,
)
from .solver import (
    FrameResult,
    MpmState,
    SimulationError,
    Simulator,
    gaussians_to_stationary_particles,
    rotation_from_deformation,
    rotation_matrix_from_deformation,
    step,
    update_active_flags,
)

__all__ = [
    "CollisionEvent",
    "CollisionEvents",
    "ConfigError",
    "EmittedBatch",
    "EmitterSpec",
    "FrameResult",
    "KeyframeTrack",
    "Material",
    "MaterialTable",
    "MpmState",
    "ParticleState",
    "SimConfig",
    "SimulationError",
    "Simulator",
    "emit",
    "gaussians_to_stationary_particles",
    "keyframed_position",
    "lame_parameters",
    "rotation_from_deformation",
    "rotation_matrix_from_deformation",
    "step",
    "update_active_flags",
]
