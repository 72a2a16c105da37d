"""
Organoid Pipeline Errors
Exception hierarchy shared by every pipeline stage, plus the CLI exit-code mapping
"""

from pydantic import BaseModel, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class OrganoidError(Exception):
    """Root of every error raised by the pipeline"""


class OrganoidValidationError(OrganoidError, ValueError):
    """Bad inputs or configuration; the CLI exits with code 1"""


class OrganoidRuntimeError(OrganoidError, RuntimeError):
    """Failure while executing a valid request; the CLI exits with code 2"""


# imaging
class MissingFile(OrganoidValidationError):
    pass


class InconsistentDimensions(OrganoidValidationError):
    pass


class WindowLargerThanImage(OrganoidValidationError):
    pass


class MisalignedMasks(OrganoidValidationError):
    pass


class NonSquareCrop(OrganoidValidationError):
    pass


class CorruptRaster(OrganoidRuntimeError):
    pass


# augment
class FractionOutOfRange(OrganoidValidationError):
    pass


class OddDimensions(OrganoidValidationError):
    pass


class ImageTooSmall(OrganoidValidationError):
    pass


# losses / evaluate
class DimensionMismatch(OrganoidValidationError):
    pass


# model
class InvalidSpec(OrganoidValidationError):
    pass


class ShapeMismatch(OrganoidRuntimeError):
    pass


class MissingTensor(OrganoidRuntimeError):
    pass


class CorruptBundle(OrganoidRuntimeError):
    pass


class VersionMismatch(OrganoidRuntimeError):
    pass


# splits
class EmptyDataset(OrganoidValidationError):
    pass


class BudgetTooLarge(OrganoidValidationError):
    pass


class TooFewItems(OrganoidValidationError):
    pass


# train / scenarios
class ConfigMismatch(OrganoidValidationError):
    pass


class UnknownScenario(OrganoidValidationError):
    pass


class FoldJobFailed(OrganoidRuntimeError):
    pass


# evaluate / report
class IncompleteRuns(OrganoidRuntimeError):
    def __init__(self, missing: list):
        self.missing = list(missing)
        super().__init__(f"{len(self.missing)} run(s) missing: {', '.join(self.missing[:10])}")


# cli / config
class ConfigValidationError(OrganoidValidationError):
    def __init__(self, key: str, reason: str):
        self.key = key
        super().__init__(f"invalid config key '{key}': {reason}")


class UnknownSubcommand(OrganoidValidationError):
    pass


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    if isinstance(error, OrganoidValidationError):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


class ValidatedModel(BaseModel):
    """BaseModel that raises the pipeline error a validator raised instead of pydantic's wrapper"""

    def __init__(self, **data):
        try:
            super().__init__(**data)
        except ValidationError as e:
            raise domain_error(e) from None


def domain_error(error: ValidationError) -> OrganoidError:
    for detail in error.errors():
        cause = detail.get("ctx", {}).get("error")
        if isinstance(cause, OrganoidError):
            return cause
    first = error.errors()[0]
    where = ".".join(str(part) for part in first["loc"]) or error.title
    return OrganoidValidationError(f"{error.title}.{where}: {first['msg']}")
