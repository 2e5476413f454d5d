from .gradcheck import GradCheckEntry, GradCheckReport, finite_diff_check
from .optim import AdamState, adam_step
from .tensor import (
    DTYPE,
    EmptyNeighborhoodError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cross_entropy,
    div,
    elu,
    exp,
    layer_norm,
    leaky_relu,
    log,
    masked_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    sub,
    sum_,
    swapaxes,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
