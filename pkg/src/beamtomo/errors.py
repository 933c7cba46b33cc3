"""Exception hierarchy shared across the package."""


class BeamtomoError(Exception):
    """Base class for all package errors."""


class ConfigError(BeamtomoError):
    """Invalid configuration or precondition violation."""


class TrappedRayError(BeamtomoError):
    """Geodesic exceeded its length budget without hitting the boundary."""


class ChartDomainError(BeamtomoError):
    """Fermi chart tube touches the time boundary or leaves the domain."""


class ConjugatePointError(BeamtomoError):
    """Chart round trip failed; the exponential map is not injective here."""


class DegenerateRiccatiError(BeamtomoError):
    """det Y dropped below tolerance along the phase ODE."""


class StepSizeError(BeamtomoError):
    """ODE step size too coarse (positivity or branch tracking lost)."""


class ResolutionError(BeamtomoError):
    """Grid too coarse for the requested frequency."""


class BlowupError(BeamtomoError):
    """NaN/Inf detected during time stepping."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"solution blew up at time step {step}")


class ContractionFailureError(BeamtomoError):
    """Picard iteration is not contracting (data too large)."""


class CompatibilityError(BeamtomoError):
    """Boundary data violates the compatibility conditions."""


class OracleError(BeamtomoError):
    """DtN oracle evaluation failed."""


class StencilError(BeamtomoError):
    """A corner evaluation of a linearization stencil failed."""


class CoverageError(BeamtomoError):
    """Ray family does not cover the masked region."""


class InversionError(BeamtomoError):
    """Regularized inversion did not converge."""

    def __init__(self, message, residual_history=None):
        self.residual_history = residual_history or []
        super().__init__(message)


class ProbeQualityError(BeamtomoError):
    """Sigma extrapolation residual above threshold."""


class IdentityViolationError(BeamtomoError):
    """Exponential probe identity produced a non-positive log argument."""


class GeometryError(BeamtomoError):
    """Geometric precondition violated (e.g. geodesics not concurrent)."""
