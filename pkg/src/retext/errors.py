"""Exception hierarchy shared across the package."""


class ReTextError(Exception):
    """Base class for all package errors."""


class DimensionError(ReTextError, ValueError):
    pass


class InvalidValueError(ReTextError, ValueError):
    pass


class ContractError(ReTextError, ValueError):
    pass


class ConfigError(ReTextError, ValueError):
    pass


class ParameterError(ReTextError, ValueError):
    pass


class StructuralError(ReTextError, ValueError):
    pass


class BatchError(ReTextError, ValueError):
    pass


class LossError(ReTextError, ValueError):
    pass


class SamplerError(ReTextError, ValueError):
    pass


class CompositionError(ReTextError, ValueError):
    pass


class IngestionError(ReTextError, ValueError):
    pass


class ProtocolError(ReTextError, ValueError):
    pass


class CheckpointError(ReTextError, ValueError):
    pass


class NonFiniteLossError(ReTextError, FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss in component {component!r}: {value}")
        self.component = component
        self.value = value
