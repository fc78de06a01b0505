"""Fully connected building blocks shared by paths, connectors and routers."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad

ACTIVATIONS = {"none": None, "relu": ad.relu, "gelu": ad.gelu}


def init_dense(rng, fan_in: int, fan_out: int) -> dict[str, np.ndarray]:
    # He-uniform, matches the relu trunk
    limit = np.sqrt(6.0 / fan_in)
    return {"w": rng.uniform(-limit, limit, (fan_in, fan_out)), "b": np.zeros(fan_out)}


def zero_dense(fan_in: int, fan_out: int) -> dict[str, np.ndarray]:
    return {"w": np.zeros((fan_in, fan_out)), "b": np.zeros(fan_out)}


def dense(x: ad.Tensor, params: dict[str, ad.Tensor], activation: str = "none") -> ad.Tensor:
    y = ad.linear(x, params["w"], params["b"])
    act = ACTIVATIONS[activation]
    return y if act is None else act(y)


def dense_np(x: np.ndarray, params: dict[str, np.ndarray], activation: str = "none") -> np.ndarray:
    """Tape-free forward, used for frozen modules."""
    y = x @ params["w"] + params["b"]
    if activation == "relu":
        return np.maximum(y, 0.0)
    if activation == "gelu":
        return ad.gelu(ad.Tensor(y)).data
    return y
