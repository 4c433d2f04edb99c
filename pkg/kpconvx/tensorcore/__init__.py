"""Dense arrays with define-by-run reverse-mode differentiation."""

from kpconvx.tensorcore.ops import (
    BNState,
    add,
    as_tensor,
    batch_norm,
    concat_columns,
    elementwise,
    leaky_relu,
    log_softmax,
    matmul,
    mean_all,
    mul,
    reshape,
    row_gather,
    row_scale,
    scale,
    segment_mean,
    sigmoid,
    softmax,
    sub,
    sum_all,
)
from kpconvx.tensorcore.tensor import (
    ComputeGraph,
    Function,
    Parameter,
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "BNState",
    "ComputeGraph",
    "Function",
    "Parameter",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "batch_norm",
    "concat_columns",
    "default_dtype",
    "elementwise",
    "get_default_dtype",
    "leaky_relu",
    "log_softmax",
    "matmul",
    "mean_all",
    "mul",
    "no_grad",
    "reshape",
    "row_gather",
    "row_scale",
    "scale",
    "segment_mean",
    "set_default_dtype",
    "sigmoid",
    "softmax",
    "sub",
    "sum_all",
]
