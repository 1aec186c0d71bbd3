from .tensor import (
    ActivationPattern,
    NonFiniteError,
    Parameter,
    Tensor,
    add,
    add_const,
    as_tensor,
    bilinear_resize_diff,
    concat_channels,
    concat_leading,
    frozen_activations,
    conv2d,
    fully_connected,
    global_avg_pool,
    make_node,
    mul,
    relu,
    scale,
    scale_channels,
    scale_spatial,
    sigmoid,
    slice_channels,
    split_channels,
    sub,
    sum_all,
)
from .optim import AdamState, adam_step, step_lr
from .gradcheck import GradcheckReport, NonDeterministicError, gradcheck, rel_error
