"""Exception hierarchy shared by every fusionlab module."""


class FusionLabError(Exception):
    """Base class for all library errors."""


class ShapeError(FusionLabError, ValueError):
    pass


class ConfigError(FusionLabError, ValueError):
    pass


class FormatError(FusionLabError, ValueError):
    """Malformed corpus CSV or model file."""


class InsufficientDataError(FusionLabError, ValueError):
    pass


class DegenerateDataError(FusionLabError, ValueError):
    pass


class StratificationError(FusionLabError, ValueError):
    pass


class ModalityError(FusionLabError, ValueError):
    """A required modality (usually the image vector) is missing."""


class ContractError(FusionLabError, RuntimeError):
    """A caller broke a documented pre-condition (stale cache, unfitted model, ...)."""


class EvaluationError(FusionLabError, ArithmeticError):
    pass


class LeakageError(FusionLabError, RuntimeError):
    """Validation ids reached a training or pseudo-label source."""
