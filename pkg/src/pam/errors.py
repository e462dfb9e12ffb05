class PAMError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(PAMError, ValueError):
    """Tensor or layer shapes do not fit together."""


class ConfigurationError(PAMError, ValueError):
    """An option or combination of options is invalid."""


class InputError(PAMError, ValueError):
    """A data argument is empty or malformed."""


class ProtocolError(PAMError, ValueError):
    """The continual-learning protocol was violated (e.g. overlapping classes)."""


class StateError(PAMError, RuntimeError):
    """The session is not in a state that allows the operation."""


class IngestionError(PAMError, OSError):
    """A dataset or checkpoint could not be read."""
