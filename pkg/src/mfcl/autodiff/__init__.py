from . import functional
from .gradcheck import GradCheckReport, check_entries, grad_check, relative_error, sample_entries
from .tensor import Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "Tensor", "as_tensor", "no_grad", "is_grad_enabled", "functional",
    "GradCheckReport", "grad_check", "check_entries", "relative_error", "sample_entries",
]
