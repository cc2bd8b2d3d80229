"""Monte Carlo statistical solutions of 2D incompressible Navier-Stokes flow.

Velocities live in H(div)-conforming Raviart-Thomas spaces, so every discrete
sample is pointwise divergence free.  Ensembles are post-processed into
means, variances, Cauchy errors, structure functions and Wasserstein
distances.
"""
from .assembly import FormContext, default_penalty
from .config import ConfigError, ExperimentConfig, load_config, parse_config, preset, serialize_config
from .mc import Ensemble, RandomFieldSpec, run_monte_carlo
from .mesh import Mesh2D, Rectangle, generate_uniform_quad_mesh, generate_uniform_tri_mesh
from .solver import SolverConfig, evolve
from .spaces import FieldCoefficients, PressureSpace, VelocitySpace

__version__ = "0.1.0"

__all__ = [
    "FormContext", "default_penalty", "ConfigError", "ExperimentConfig", "load_config", "parse_config",
    "preset", "serialize_config", "Ensemble", "RandomFieldSpec", "run_monte_carlo", "Mesh2D", "Rectangle",
    "generate_uniform_quad_mesh", "generate_uniform_tri_mesh", "SolverConfig", "evolve",
    "FieldCoefficients", "PressureSpace", "VelocitySpace", "__version__",
]
