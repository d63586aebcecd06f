from .optim import AdamWState, adamw_step
from .rng import SeededStream, derive_seed, seeded_stream
from .tensor import (
    Graph,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    concat,
    current_graph,
    embedding,
    evaluate_with_gradients,
    gelu,
    linear,
    matmul,
    mean_all,
    mse,
    mul,
    numeric_gradient,
    relative_error,
    reshape,
    rms_norm,
    scale,
    silu,
    slice_axis,
    softmax,
    split,
    sub,
    sum_all,
    transpose,
)

__all__ = [
    "AdamWState",
    "Graph",
    "GraphError",
    "NonFiniteError",
    "SeededStream",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "add",
    "concat",
    "current_graph",
    "derive_seed",
    "embedding",
    "evaluate_with_gradients",
    "gelu",
    "linear",
    "matmul",
    "mean_all",
    "mse",
    "mul",
    "numeric_gradient",
    "relative_error",
    "reshape",
    "rms_norm",
    "scale",
    "seeded_stream",
    "silu",
    "slice_axis",
    "softmax",
    "split",
    "sub",
    "sum_all",
    "transpose",
]
