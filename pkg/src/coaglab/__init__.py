"""coaglab: a desk-scale laboratory for stochastic coagulation.

Exact event-driven simulation of the mean-field binary coagulation chain,
a truncated solver for the limiting coagulation ODE system, and the
linearized (Ornstein-Uhlenbeck) covariance machinery used to verify the
law of large numbers and the central limit theorem for the particle-mass
empirical density.
"""

__version__ = "0.1.0"

from .kernels import KernelSpec, constant_kernel, capped_brownian_kernel, lookup_table_kernel
from .state import (
    MassHistogram,
    DensityVector,
    FluctuationVector,
    histogram_to_density,
    fluctuation_field,
    monodisperse_histogram,
    norm_l1,
    norm_l1_weighted,
    norm_sup,
)

__all__ = [
    "KernelSpec",
    "constant_kernel",
    "capped_brownian_kernel",
    "lookup_table_kernel",
    "MassHistogram",
    "DensityVector",
    "FluctuationVector",
    "histogram_to_density",
    "fluctuation_field",
    "monodisperse_histogram",
    "norm_l1",
    "norm_l1_weighted",
    "norm_sup",
    "__version__",
]
