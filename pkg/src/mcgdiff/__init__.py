"""Diffusion-prior solvers for linear inverse problems with manifold constrained gradients."""
from .operators import ColorCoupling, Dense, InpaintingMask, Radon, WeightSpec
from .schedule import Schedule, make_ve_schedule, make_vp_schedule
from .scores import EmpiricalMixtureScore, GaussianSubspaceScore, MlpScore
from .solvers import SamplerConfig, solve_inverse

__version__ = "0.1.0"

__all__ = [
    "ColorCoupling", "Dense", "EmpiricalMixtureScore", "GaussianSubspaceScore", "InpaintingMask",
    "MlpScore", "Radon", "SamplerConfig", "Schedule", "WeightSpec", "make_ve_schedule",
    "make_vp_schedule", "solve_inverse",
]
