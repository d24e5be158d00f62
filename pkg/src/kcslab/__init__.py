"""Kinetic Cucker-Smale flocking with strong local alignment and its pressureless Euler limit."""
from .domain import (
    CommKernel,
    FluidState,
    FourierProfile,
    Grid,
    InitialDataSpec,
    ParticleEnsemble,
    build_initial_ensemble,
    kernel_eval,
    kernel_min,
    torus_distance,
)

__version__ = "0.1.0"

__all__ = [
    "CommKernel",
    "FluidState",
    "FourierProfile",
    "Grid",
    "InitialDataSpec",
    "ParticleEnsemble",
    "build_initial_ensemble",
    "kernel_eval",
    "kernel_min",
    "torus_distance",
]
