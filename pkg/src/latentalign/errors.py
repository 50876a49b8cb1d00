"""Exception taxonomy shared across the library.

Every failure mode raised by the numerical routines derives from
:class:`LatentAlignError` so callers (and the CLI) can distinguish library
errors from programming errors.
"""


class LatentAlignError(Exception):
    """Base class for all library errors."""


class InvalidInputError(LatentAlignError):
    """Input violates a precondition (non-finite entries, bad shape)."""


class DegenerateInputError(LatentAlignError):
    """Input is degenerate in a way that makes the result undefined
    (e.g. an all-zero matrix has no leading singular direction)."""


class DegenerateSpectrumError(LatentAlignError):
    """Leading singular values too close for the requested quantity."""


class InvalidMaskError(LatentAlignError):
    """Observation mask is empty or names unknown modality slots."""


class InvalidModalityError(LatentAlignError):
    """Modality identifier not present in the parameter set."""


class InvalidPosteriorError(LatentAlignError):
    """Posterior covariance is not symmetric positive definite."""


class ConditioningError(LatentAlignError):
    """A symmetric positive-definite factorization failed numerically."""

    def __init__(self, message, modality_scales=None):
        super().__init__(message)
        self.modality_scales = dict(modality_scales or {})


class OracleTooLargeError(LatentAlignError):
    """Dense brute-force oracle refused: observed dimension too large."""


class RankDeficiencyError(LatentAlignError):
    """Second-moment sum in a parameter update is numerically singular."""

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class InsufficientCoverageError(LatentAlignError):
    """Some modalities are observed by too few instances to fit."""

    def __init__(self, message, starved=()):
        super().__init__(message)
        self.starved = tuple(starved)


class InvalidImputationError(LatentAlignError):
    """Imputed column set does not match the missing modalities."""


class NoMissingModalityError(LatentAlignError):
    """Operation requires at least one missing modality."""


class InvalidStackError(LatentAlignError):
    """Embedding stack has too few modality slots for the operation."""


class InvalidAnchorError(LatentAlignError):
    """Anchor vector is not unit norm."""


class InsufficientNegativesError(LatentAlignError):
    """Matching term needs at least two instances to build negatives."""


class InvalidWarmupDataError(LatentAlignError):
    """Warm-up requires a fully observed dataset."""


class DegenerateEmbeddingError(LatentAlignError):
    """Encoder produced a zero vector that cannot be normalized."""


class InvalidKError(LatentAlignError):
    """Retrieval cutoff k outside [1, gallery size]."""


class InvalidSpecError(LatentAlignError):
    """Synthetic world specification is inconsistent."""


class ParamsSchemaError(LatentAlignError):
    """Serialized parameter document does not match the schema."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
