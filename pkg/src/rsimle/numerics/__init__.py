from .tensor import (
    ContractError,
    DimensionError,
    GradTape,
    NumericError,
    TensorND,
    backward,
    broadcast_to,
    concat,
    grad_enabled,
    no_grad,
    quantile,
    take_along_axis,
    tensor,
)
from .gradcheck import GradCheckReport, ParamCheck, check_gradients

__all__ = [
    "ContractError",
    "DimensionError",
    "GradTape",
    "NumericError",
    "TensorND",
    "backward",
    "broadcast_to",
    "concat",
    "grad_enabled",
    "no_grad",
    "quantile",
    "take_along_axis",
    "tensor",
    "GradCheckReport",
    "ParamCheck",
    "check_gradients",
]
