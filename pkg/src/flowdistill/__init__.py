"""Few-step distillation of conditional flow-matching models on numpy."""
from .numerics import NonFiniteError

__version__ = "0.1.0"
__all__ = ["NonFiniteError", "__version__"]
