"""fockbox: periodic spectral simulator and certification toolkit for
mean-field fermion dynamics with exchange, in the random-field formulation."""

__version__ = "0.1.0"

from .lattice import Grid, SpectralField, forward_transform, inverse_transform

__all__ = [
    "__version__",
    "Grid",
    "SpectralField",
    "forward_transform",
    "inverse_transform",
]
