class InputError(ValueError):
    """Raised when caller-supplied data violates an operation's contract."""


class ParseError(InputError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class TrainingError(RuntimeError):
    pass
