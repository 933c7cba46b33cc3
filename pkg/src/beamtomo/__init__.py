"""beamtomo: Gaussian-beam probing and coefficient recovery for semilinear waves."""

__version__ = "0.1.0"

from . import kernels  # noqa: F401
