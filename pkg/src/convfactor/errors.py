"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised when an input violates an operation's preconditions."""


class UnsupportedConfiguration(InvalidArgument):
    """Raised for a well-formed request the operation does not support."""


class RejectedDirective(InvalidArgument):
    """A replacement directive that is valid syntax but not allowed here."""


class WeightMismatch(InvalidArgument):
    """A weight tensor is missing or its dims disagree with the architecture."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class LayerError(InvalidArgument):
    """Wraps a per-layer failure with the 1-based layer index attached."""

    def __init__(self, index, cause):
        super().__init__(f"layer {index}: {cause}")
        self.index = index
        self.cause = cause
