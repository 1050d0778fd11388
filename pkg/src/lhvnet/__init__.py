"""Triangle-network quantum targets and causally constrained LHV network models."""

from lhvnet.exceptions import ValidationError, NonFiniteError

__version__ = "0.1.0"

__all__ = ["ValidationError", "NonFiniteError", "__version__"]
