"""Exception taxonomy shared across the package.

Every error raised on purpose derives from :class:`TpladError` so callers
can catch the package's failures without swallowing programming mistakes.
"""


class TpladError(Exception):
    """Base class for all errors raised by this package."""


# --- template mining ---------------------------------------------------------

class EmptyLine(TpladError):
    """A log line contained no tokens after whitespace splitting."""


class LengthMismatch(TpladError):
    """Token sequence and template differ in length where equality is required."""


# --- template embedding ------------------------------------------------------

class NoLiterals(TpladError):
    """A template contributed no usable literal words."""


class InsufficientCorpus(TpladError):
    """The training corpus has too few distinct words to fit embeddings."""


class ZeroVector(TpladError):
    """A word vector with zero norm reached a cosine computation."""


class EmptyLibrary(TpladError):
    """A nearest-template query ran against an empty template library."""


# --- parameter encoding ------------------------------------------------------

class UnknownUnit(TpladError):
    """A cyclic time encoding was requested for an unconfigured unit."""


class EmptyUser(TpladError):
    """A user identity encoding was requested for an empty string."""


class NotANumber(TpladError):
    """A numeric encoding was requested for a value that does not parse."""


class UnseenState(TpladError):
    """A state encoding was requested for a value missing from the registry."""


class TooFewSamples(TpladError):
    """Not enough populated parameter positions to run key selection."""


class LayoutMismatch(TpladError):
    """An encoded parameter does not fit its slot in the fixed layout."""


# --- sequence model ----------------------------------------------------------

class ShapeMismatch(TpladError):
    """Model weights and inputs disagree on dimensions."""


class DivergedLoss(TpladError):
    """Training produced a non-finite loss."""


# --- detection ---------------------------------------------------------------

class ModelMissing(TpladError):
    """Detection was requested without a trained sequence model."""


class UnfittedTemplate(TpladError):
    """Parameter checks were requested for a template with no fitted models."""


# --- evaluation --------------------------------------------------------------

class FormatError(TpladError):
    """A dataset file violates its declared labelling format."""


class AlignmentError(TpladError):
    """Reports and ground truth refer to different record sets."""


class ProtocolError(TpladError):
    """A split experiment was configured with an unusable protocol."""


class ManifestError(TpladError):
    """A synthetic corpus manifest is malformed or inconsistent."""


# --- pipeline ----------------------------------------------------------------

class ConfigError(TpladError):
    """A pipeline configuration contains unknown keys or invalid values."""


class VersionError(TpladError):
    """A persisted model was written by an incompatible format version."""
