"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class LoadError(ValueError):
    """A text file failed to parse. Carries the path and 1-based line number."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class NumericFailure(ArithmeticError):
    """A loss or gradient became non-finite."""

    def __init__(self, message, layer=None, round=None, client=None):
        self.layer = layer
        self.round = round
        self.client = client
        self.base_message = message
        context = []
        if round is not None:
            context.append(f"round={round}")
        if client is not None:
            context.append(f"client={client}")
        if layer is not None:
            context.append(f"layer={layer}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)


class DigestMismatch(ValueError):
    """A checkpoint blob does not match the digest recorded in its metadata."""
