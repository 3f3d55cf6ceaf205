"""Array arithmetic and reverse-mode AD for the two networks."""

from .optim import Adam
from .params import ParamStore, kaiming_uniform
from .rng import Rng
from .serialize import load_arrays, save_arrays
from .tensor import (
    NonFiniteError,
    RunningStats,
    Tensor,
    add,
    batch_norm2d,
    concat_channels,
    conv2d,
    default_dtype,
    get_default_dtype,
    group_norm,
    leaky_relu,
    linear,
    mean,
    mse,
    mul,
    nearest_upsample2x,
    no_grad,
    record_kinks,
    relu,
    replay_kinks,
    reshape,
    silu,
    sub,
    tensor,
    tsum,
)

__all__ = [
    "Adam",
    "NonFiniteError",
    "ParamStore",
    "Rng",
    "RunningStats",
    "Tensor",
    "add",
    "batch_norm2d",
    "concat_channels",
    "conv2d",
    "default_dtype",
    "get_default_dtype",
    "group_norm",
    "kaiming_uniform",
    "leaky_relu",
    "linear",
    "load_arrays",
    "mean",
    "mse",
    "mul",
    "nearest_upsample2x",
    "no_grad",
    "record_kinks",
    "relu",
    "replay_kinks",
    "reshape",
    "save_arrays",
    "silu",
    "sub",
    "tensor",
    "tsum",
]
