"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes, so each family has a fixed meaning:
usage/config problems, data-integrity problems and numerical failures.
"""


class ExfcError(Exception):
    """Base class for all errors raised by the package."""


class DimensionError(ExfcError, ValueError):
    """Vectors or matrices with inconsistent dimensions were combined."""


class EmptyInputError(ExfcError, ValueError):
    """An operation that needs at least one element received none."""


class DegenerateVectorError(ExfcError, ValueError):
    """A zero-norm vector was passed where a direction is required."""


class NotCovarianceError(ExfcError, ValueError):
    """A matrix that cannot be a covariance (negative variance) was passed."""


class SingularMatrixError(ExfcError, ArithmeticError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, message: str, smallest_pivot: float, key=None):
        super().__init__(message)
        self.smallest_pivot = smallest_pivot
        self.key = key


class StaleClassifierError(ExfcError, RuntimeError):
    """A prepared classifier was used after its store changed."""


class UnknownDomainError(ExfcError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown domain"


class MisalignedDomainsError(ExfcError, ValueError):
    """Domains passed to late fusion do not share the same class set."""


class StoreFormatError(ExfcError, ValueError):
    """Base class for failures while decoding a serialized store."""


class StoreVersionError(StoreFormatError):
    pass


class StoreTruncatedError(StoreFormatError):
    pass


class StoreIntegrityError(StoreFormatError):
    pass


class StoreDimensionError(StoreFormatError):
    pass


class ManifestError(ExfcError, ValueError):
    """Base class for dataset manifest validation failures."""


class ManifestMissingFileError(ManifestError, FileNotFoundError):
    pass


class ManifestDimensionError(ManifestError):
    pass


class ManifestClassError(ManifestError):
    pass


class ManifestEmptyError(ManifestError):
    pass


class ProtocolError(ExfcError, ValueError):
    """A semi-supervised split protocol cannot be applied to the data."""


class ScenarioError(ExfcError, RuntimeError):
    """A task failed during a scenario run; wraps the original cause."""

    def __init__(self, message: str, domain_id: int, task_id: int):
        super().__init__(message)
        self.domain_id = domain_id
        self.task_id = task_id
