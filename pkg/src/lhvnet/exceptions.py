class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/inf shows up during a forward or backward pass.

    ``path`` names the parameter (e.g. ``"copy0/alice/layer2/W"``) whose
    gradient or activation went non-finite.
    """

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{message} [{path}]" if path else message)
        self.path = path
