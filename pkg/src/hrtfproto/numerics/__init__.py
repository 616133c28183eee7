"""Array values with reverse-mode gradients, plus the optimizer and LR schedules.

The tensor engine is deliberately small: it covers exactly the operator set
needed by the coder stacks, the estimators, and the 1D U-Net, and it is
checked op-by-op against central finite differences in the test suite.
"""

from .engine import (
    ContractViolation,
    GradientTape,
    NumericError,
    Tensor,
    add,
    backward_gradients,
    broadcast_to,
    clip,
    concat,
    conv1d,
    cos,
    div,
    dropout,
    exp,
    group_norm,
    hyper_affine,
    layer_norm,
    log,
    matmul,
    mean,
    mish,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    silu,
    sin,
    softmax,
    softplus,
    sqrt,
    stop_gradient,
    sub,
    sum as tsum,
    take,
    tanh,
    tensor,
    transpose,
    upsample_linear_2x,
)
from .optim import (
    AdamW,
    AdamWState,
    LrSchedule,
    adamw_step,
    clip_global_norm,
    lr_schedule_step,
)

__all__ = [
    "AdamW",
    "AdamWState",
    "ContractViolation",
    "GradientTape",
    "LrSchedule",
    "NumericError",
    "Tensor",
    "adamw_step",
    "add",
    "backward_gradients",
    "broadcast_to",
    "clip",
    "clip_global_norm",
    "concat",
    "conv1d",
    "cos",
    "div",
    "dropout",
    "exp",
    "group_norm",
    "hyper_affine",
    "layer_norm",
    "log",
    "lr_schedule_step",
    "matmul",
    "mean",
    "mish",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "sigmoid",
    "silu",
    "sin",
    "softmax",
    "softplus",
    "sqrt",
    "stop_gradient",
    "sub",
    "take",
    "tanh",
    "tensor",
    "transpose",
    "tsum",
    "upsample_linear_2x",
]
