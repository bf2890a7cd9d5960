from . import tensor as ops
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .gradcheck import check_gradients, relative_error
from .params import (AdamW, EmaState, NonFiniteGradient, ParamStore, adamw_step, ema_update,
                     tau_schedule, truncated_normal)
from .tensor import ShapeError, Tensor, no_grad, stop_gradient

__all__ = [
    "ops", "Tensor", "no_grad", "stop_gradient", "ShapeError",
    "ParamStore", "AdamW", "adamw_step", "EmaState", "ema_update", "tau_schedule",
    "truncated_normal", "NonFiniteGradient", "check_gradients", "relative_error",
    "save_checkpoint", "load_checkpoint",
]
