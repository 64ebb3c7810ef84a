"""Minimal dense tensors, reverse-mode autodiff and SGD with momentum."""
from .checkpoint import CheckpointError, read_arrays, write_arrays
from .params import (
    ParameterStore,
    conv1d_dilated,
    conv_time_major,
    glorot,
    init_mlp,
    mlp_forward,
    sgd_step,
)
from .tensor import (
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    index,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    segment_sum,
    shift,
    stack,
    take,
    transpose,
    tsum,
)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Scalar ``-log softmax(logits)[target]`` for a single logit vector."""
    if logits.ndim != 1:
        raise ShapeError(f"expected a 1-D logit vector, got shape {logits.shape}")
    return cross_entropy(logits, target)


__all__ = [
    "CheckpointError", "ParameterStore", "ShapeError", "Tensor", "add", "backward", "concat",
    "conv1d_dilated", "conv_time_major", "cross_entropy", "glorot", "index", "init_mlp",
    "matmul", "mean", "mlp_forward", "mul", "neg", "no_grad", "read_arrays", "relu", "reshape", "segment_sum",
    "sgd_step", "shift", "softmax_cross_entropy", "stack", "take", "transpose", "tsum",
    "write_arrays",
]
