from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .rng import Rng
from .tensor import RunningStats, Tensor, get_default_dtype


class ParamStore:
    """Named weight tensors plus non-trainable buffers (e.g. BN statistics)."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._stats: "OrderedDict[str, RunningStats]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=get_default_dtype()), requires_grad=True)
        self._params[name] = t
        return t

    def add_stats(self, name: str, channels: int) -> RunningStats:
        rs = RunningStats(channels)
        self._stats[name] = rs
        return rs

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def trainable(self) -> "OrderedDict[str, Tensor]":
        return self._params

    def stats(self, name: str) -> RunningStats:
        return self._stats[name]

    def count(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, v.data) for k, v in self._params.items())
        for k, rs in self._stats.items():
            out[f"{k}.running_mean"] = rs.mean
            out[f"{k}.running_var"] = rs.var
        return out

    def load_state_arrays(self, arrays) -> None:
        for k, p in self._params.items():
            if k not in arrays:
                raise KeyError(f"missing parameter {k!r}")
            arr = np.asarray(arrays[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for k, rs in self._stats.items():
            rs.mean[:] = arrays[f"{k}.running_mean"]
            rs.var[:] = arrays[f"{k}.running_var"]


def kaiming_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())
