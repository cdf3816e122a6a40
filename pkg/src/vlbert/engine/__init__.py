from . import ops
from .gradcheck import GradCheckReport, grad_check, relative_error
from .optim import (
    Adam,
    OptimizerState,
    SGDMomentum,
    adam_step,
    lr_schedule,
    sgd_momentum_step,
    step_decay_schedule,
)
from .tensor import (
    PRECISIONS,
    Tensor,
    as_tensor,
    default_dtype,
    get_default_dtype,
    parameter,
    set_default_dtype,
)

__all__ = [
    "Adam",
    "GradCheckReport",
    "OptimizerState",
    "PRECISIONS",
    "SGDMomentum",
    "Tensor",
    "adam_step",
    "as_tensor",
    "default_dtype",
    "get_default_dtype",
    "grad_check",
    "lr_schedule",
    "ops",
    "parameter",
    "relative_error",
    "set_default_dtype",
    "sgd_momentum_step",
    "step_decay_schedule",
]
