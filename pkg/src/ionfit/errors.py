"""Exception types shared across the package."""


class IonfitError(Exception):
    """Base class for all package-specific errors."""


class ParameterArityError(IonfitError):
    """Parameter vector length does not match the model's declared count."""


class DegenerateModelError(IonfitError):
    """The rate matrix does not have a unique conserved steady state."""


class NumericalFailureError(IonfitError):
    """A numerical routine produced an invalid result (NaN, negative occupancy...)."""


class ProtocolRangeError(IonfitError):
    """Requested time lies outside the protocol's duration."""


class GridMismatchError(IonfitError):
    """Two traces (or a trace and a protocol) do not share the same time grid."""


class StiffnessError(IonfitError):
    """The integrator failed to meet its tolerances on one protocol segment."""

    def __init__(self, message, segment_index=None):
        super().__init__(message)
        self.segment_index = segment_index


class SamplingFailureError(IonfitError):
    """Rejection sampling of initial guesses exceeded its attempt budget."""


class FitFailureError(IonfitError):
    """Every optimisation start failed; per-start diagnostics attached."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class ConfigError(IonfitError):
    """An experiment or fit configuration file is invalid."""
