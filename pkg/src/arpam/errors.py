"""Exception types shared across the package.

Everything user-facing derives from ArpamError so the CLI can catch one
base class and translate it into an exit code and a readable message.
"""


class ArpamError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ConfigurationError(ArpamError):
    """A config file, parameter combination or geometry request is invalid."""


class UnknownMaterialError(ConfigurationError):
    """A material label is not present in the material table."""


class DomainError(ArpamError):
    """A physical argument is outside the domain where the model is defined
    (e.g. a wavelength outside the exposure-limit formula's validity range)."""


class ShapeError(ArpamError):
    """Array arguments with inconsistent shapes, sampling rates or lengths."""


class OutputLockError(ArpamError):
    """Another process owns the requested output directory."""


class FeatureUnavailableError(ArpamError):
    """A signal feature cannot be computed from the given trace/spectrum
    (e.g. fewer than two qualifying spectral maxima). Recoverable: study
    pipelines record it and continue."""


class SolverInstabilityError(ArpamError):
    """The wave solver detected a blow-up; carries diagnostic context."""

    def __init__(self, message: str, step: int | None = None,
                 time_s: float | None = None, peak: float | None = None):
        super().__init__(message)
        self.step = step
        self.time_s = time_s
        self.peak = peak
