"""Residual dilated temporal convolutions over edge sequences and per-head aggregation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gnn import EdgeFeatureBlock
from .numerics import ParameterStore, Tensor, conv_time_major, glorot, init_mlp, matmul, mlp_forward, relu

DILATIONS = (1, 2, 3, 4)


@dataclass
class AggregatedGraph:
    kind: str
    head: int
    Q: Tensor           # [..., N_e, D]


def init_tcn(store: ParameterStore, path: str, D: int, rng: np.random.Generator) -> None:
    for layer in range(len(DILATIONS)):
        p = f"{path}.{layer}"
        store.add(f"{p}.conv.weight", glorot(rng, 3 * D, 3 * D, (3, D, D)))
        store.add(f"{p}.conv.bias", np.zeros(D))
        store.add(f"{p}.proj.weight", glorot(rng, D, D, (D, D)))
        store.add(f"{p}.proj.bias", np.zeros(D))


def tcn_layers(store: ParameterStore, path: str, x: Tensor) -> Tensor:
    """Four residual layers on ``[..., T, D]``; the same weights serve every leading row."""
    for layer, d in enumerate(DILATIONS):
        p = f"{path}.{layer}"
        hidden = relu(conv_time_major(x, store[f"{p}.conv.weight"], store[f"{p}.conv.bias"], d))
        x = x + (matmul(hidden, store[f"{p}.proj.weight"]) + store[f"{p}.proj.bias"])
    return x


def tcn_forward(store: ParameterStore, path: str, block: EdgeFeatureBlock) -> EdgeFeatureBlock:
    return EdgeFeatureBlock(block.kind, tcn_layers(store, path, block.values), block.edges)


def init_heads(store: ParameterStore, path: str, heads: int, T: int, D: int, layers: int,
               rng: np.random.Generator) -> None:
    for k in range(heads):
        init_mlp(store, f"{path}.{k}", [T * D] + [D] * layers, rng)


def num_heads(store: ParameterStore, path: str) -> int:
    k = 0
    while f"{path}.{k}.0.weight" in store:
        k += 1
    return k


def temporal_aggregate(store: ParameterStore, path: str, block: EdgeFeatureBlock, head: int) -> AggregatedGraph:
    """Concatenate each edge's T frame vectors and map them to one D vector with head ``head``'s MLP."""
    n = num_heads(store, path)
    if not 0 <= head < n:
        raise IndexError(f"head {head} out of range for {n} configured heads at {path!r}")
    x = block.values
    flat = x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))
    return AggregatedGraph(block.kind, head, mlp_forward(store, f"{path}.{head}", flat))
