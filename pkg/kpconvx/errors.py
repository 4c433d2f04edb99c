"""Exception hierarchy shared by every module."""


class KPXError(Exception):
    """Base class for all toolkit errors."""


class ContractError(KPXError, ValueError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""

    def __init__(self, message: str, *shapes: tuple[int, ...]):
        self.shapes = shapes
        if shapes:
            message = f"{message} (shapes: {', '.join(str(tuple(s)) for s in shapes)})"
        super().__init__(message)


class ConfigurationError(KPXError, ValueError):
    """A configuration value is invalid or inconsistent."""


class EmptyBatchError(ContractError):
    """An operation received zero rows where at least one is required."""


class DegenerateInputError(KPXError):
    """A batch element vanished after subsampling at some layer."""

    def __init__(self, layer: int, element: int):
        self.layer = layer
        self.element = element
        super().__init__(f"Batch element {element} has no points left at layer {layer}")


class SchemaError(KPXError):
    """A file does not follow the expected layout."""


class UnsupportedFormatError(KPXError):
    """A file uses a format variant that is not supported."""


class NumericalError(KPXError):
    """A NaN or infinite value was produced where finite values are required."""

    def __init__(self, message: str, name: str | None = None, seed: int | None = None):
        self.name = name
        self.seed = seed
        super().__init__(message)


class ConvergenceWarning(UserWarning):
    """An iterative procedure stopped at its iteration cap."""
