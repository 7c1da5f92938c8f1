"""Exception hierarchy shared by every module of the package."""


class ChemGnnError(Exception):
    """Base class for all package errors."""

    kind = "error"


class ShapeError(ChemGnnError, ValueError):
    kind = "shape"


class ConfigurationError(ChemGnnError, ValueError):
    kind = "configuration"


class DataError(ChemGnnError, ValueError):
    kind = "data"


class DomainError(ChemGnnError, ValueError):
    kind = "domain"


class ContractError(ChemGnnError, RuntimeError):
    kind = "contract"


class TrainingError(ChemGnnError, RuntimeError):
    kind = "training"


class GenerationError(ChemGnnError, RuntimeError):
    kind = "generation"
