"""Exception taxonomy shared across the library."""


class IsacTrackError(Exception):
    """Base class for all library errors."""


# --- geometry ---------------------------------------------------------------

class DegenerateGeometry(IsacTrackError):
    """User position coincides with an anchor position."""


class AngularSingularity(IsacTrackError):
    """Angle-of-arrival too close to the array axis for a stable Jacobian."""


# --- waveform ---------------------------------------------------------------

class ConfigMismatch(IsacTrackError):
    """Array shapes or element counts disagree with the waveform config."""


class ZeroSignal(IsacTrackError):
    """Noise calibration requested for an all-zero signal tensor."""


# --- beliefs ----------------------------------------------------------------

class AllNonInformative(IsacTrackError):
    """Every belief in a fusion has zero precision."""


class UniformBelief(IsacTrackError):
    """A point estimate was requested from a circular-uniform belief."""


class TooDiffuse(IsacTrackError):
    """Circular belief too spread out for a Gaussian approximation."""


# --- inference --------------------------------------------------------------

class NoInformativeData(IsacTrackError):
    """Residual carries no usable signal for the requested update."""


class NoActiveLinks(IsacTrackError):
    """A per-user message was requested while every link is inactive."""


class NoPeak(IsacTrackError):
    """Spectral search found no peak above the detection ratio."""


class SkippedUpdate(IsacTrackError):
    """Filter update skipped because no measurement was available."""


# --- harness ----------------------------------------------------------------

class ParseError(IsacTrackError):
    """Config file could not be parsed."""


class ValidationError(IsacTrackError):
    """Config contents violate the schema.

    Carries the dotted path of the offending field.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
