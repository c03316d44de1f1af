from e4srec.autodiff import functional
from e4srec.autodiff.functional import DropoutRNG, forward_primitive
from e4srec.autodiff.optim import AdamState, LRSchedule, adam_step, lr_at
from e4srec.autodiff.tensor import (
    Tensor,
    backward,
    eval_mode,
    is_eval_mode,
    is_grad_enabled,
    no_grad,
    parameters_hash,
)

__all__ = [
    "AdamState", "DropoutRNG", "LRSchedule", "Tensor", "adam_step", "backward",
    "eval_mode", "forward_primitive", "functional", "is_eval_mode",
    "is_grad_enabled", "lr_at", "no_grad", "parameters_hash",
]
