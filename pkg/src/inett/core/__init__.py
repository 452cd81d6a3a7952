from .ops import (
    NO_PAD,
    PadSpec,
    ShapeError,
    abs_power,
    add,
    batch_normalize,
    batchnorm_infer,
    batchnorm_train,
    concat,
    conv2d,
    dense,
    dot,
    maxpool2,
    mul,
    normalize_frozen,
    relu,
    reshape,
    sub,
    total,
    upsample_nn,
    zero_pad,
)
from .tape import GradTape, Var, grad, value_of

__all__ = [
    "GradTape",
    "NO_PAD",
    "PadSpec",
    "ShapeError",
    "Var",
    "abs_power",
    "add",
    "batch_normalize",
    "batchnorm_infer",
    "batchnorm_train",
    "concat",
    "conv2d",
    "dense",
    "dot",
    "grad",
    "maxpool2",
    "mul",
    "normalize_frozen",
    "relu",
    "reshape",
    "sub",
    "total",
    "upsample_nn",
    "value_of",
    "zero_pad",
]
