from .gradcheck import GradCheckResult, grad_check
from .tensor import FlopCounter, GradientTape, ShapeError, TapeError, Tensor, as_tensor

__all__ = ["FlopCounter", "GradCheckResult", "GradientTape", "ShapeError", "TapeError", "Tensor", "as_tensor", "grad_check"]
