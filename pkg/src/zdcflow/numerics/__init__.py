from .nn import attention, conv2d, conv_output_size, conv_transpose2d, group_norm, linear
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .precision import cast_precision, round_f16
from .tensor import (
    FLOAT16,
    FLOAT32,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    div,
    float64_mode,
    no_grad,
    compute_dtype,
    exp,
    getitem,
    leaky_relu,
    log,
    matmul,
    mean,
    mul,
    pad,
    power,
    relu,
    reshape,
    sigmoid,
    silu,
    softmax,
    sqrt,
    square,
    sub,
    sum_,
    tanh,
    transpose,
)
