"""Exception types raised across the pipeline."""


class FundusError(Exception):
    """Base class for all pipeline errors."""


class ManifestError(FundusError, ValueError):
    pass


class MalformedRow(ManifestError):
    pass


class GradeOutOfRange(ManifestError):
    pass


class DuplicateId(ManifestError):
    pass


class InsufficientStratum(ManifestError):
    def __init__(self, grade: int, have: int, need: int):
        self.grade, self.have, self.need = grade, have, need
        super().__init__(f"grade {grade}: have {have} images, need {need}")


class ChecksumMismatch(ManifestError):
    pass


class AllBelowThreshold(FundusError, ValueError):
    """No pixel exceeds the crop threshold (blank frame)."""


class IntegrityError(FundusError):
    """A weight asset is missing, corrupted or does not match its digest."""


class StaleCache(FundusError):
    """A cached artifact was built from different inputs than requested."""


class FingerprintMismatch(FundusError):
    """A head checkpoint was trained against a different backbone."""


class ParseError(FundusError, ValueError):
    """An artifact file is truncated or malformed."""


class DivergenceError(FundusError, FloatingPointError):
    """Training produced a non-finite loss."""
