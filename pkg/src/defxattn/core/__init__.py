"""Tensor core: float64 arrays, a recorded tape, and differentiable primitives."""

from .functional import (
    box_filter3d,
    conv3d,
    gelu,
    grid_sample_trilinear,
    layernorm,
    leaky_relu,
    linear,
    linear_axis,
    matmul,
    softmax,
    upsample2x,
)
from .gradcheck import GradcheckReport, gradcheck
from .tensor import (
    ParameterStore,
    Tape,
    Tensor,
    as_tensor,
    backward,
    concat,
    exp,
    getitem,
    log,
    mean,
    nan_guard,
    nan_guard_enabled,
    no_record,
    pad,
    reshape,
    roll,
    set_nan_guard,
    sqrt,
    stack,
    tensor,
    transpose,
    tsum,
)
