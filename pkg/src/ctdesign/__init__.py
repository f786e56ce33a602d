"""Adaptive scan-angle selection and reconstruction for sparse-view CT."""

from .design import (
    GreedyAngleDesigner,
    equidistant_design,
    random_design,
    run_design,
)
from .geometry import AngleSubset, ScanGeometry, build_geometry
from .phantoms import PhantomSpec, sample_phantom, simulate_measurements
from .priors import GaussianNoise, IsotropicPrior, Matern12Prior

__version__ = "0.1.0"

__all__ = [
    "AngleSubset",
    "ScanGeometry",
    "build_geometry",
    "PhantomSpec",
    "sample_phantom",
    "simulate_measurements",
    "GaussianNoise",
    "IsotropicPrior",
    "Matern12Prior",
    "GreedyAngleDesigner",
    "run_design",
    "equidistant_design",
    "random_design",
    "__version__",
]
