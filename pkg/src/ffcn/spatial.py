"""Trainable-adjacency graph convolution, average pooling, and the noun encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ParameterStore, ShapeError, Tensor, glorot, init_mlp, matmul, mlp_forward, mul
from .temporal import AggregatedGraph


@dataclass
class ComponentFeature:
    kind: str
    index: int
    vec: Tensor         # [..., D]


def init_gcn(store: ParameterStore, path: str, num_edges: int, D: int, layers: int,
             rng: np.random.Generator, noise: float = 1e-3) -> None:
    for layer in range(layers):
        adj = np.full((num_edges, num_edges), 1.0 / num_edges) + noise * rng.standard_normal((num_edges, num_edges))
        store.add(f"{path}.{layer}.adj", adj)
        store.add(f"{path}.{layer}.weight", glorot(rng, D, D, (D, D)))


def gcn_layers(store: ParameterStore, path: str) -> int:
    n = 0
    while f"{path}.{n}.adj" in store:
        n += 1
    return n


def gcn_layer(store: ParameterStore, path: str, Q: Tensor, residual: bool = True) -> Tensor:
    """``Z = A Q W (+ Q)`` on ``Q`` of shape ``[..., N_e, D]``."""
    A, W = store[f"{path}.adj"], store[f"{path}.weight"]
    if A.shape != (Q.shape[-2], Q.shape[-2]) or W.shape != (Q.shape[-1], Q.shape[-1]):
        raise ShapeError(f"{path}: adjacency {A.shape} / weight {W.shape} do not fit Q {Q.shape}")
    Z = matmul(matmul(A, Q), W)
    return Z + Q if residual else Z


def spatial_decompose(store: ParameterStore, path: str, g: AggregatedGraph, residual: bool = True) -> ComponentFeature:
    Q = g.Q
    for layer in range(gcn_layers(store, path)):
        Q = gcn_layer(store, f"{path}.{layer}", Q, residual)
    return ComponentFeature(g.kind, g.head, Q.mean(axis=-2))


def init_noun_encoder(store: ParameterStore, path: str, A: int, T: int, D: int, layers: int,
                      rng: np.random.Generator) -> None:
    init_mlp(store, f"{path}.frame", [A] + [D] * layers, rng)
    init_mlp(store, f"{path}.fuse", [T * D] + [D] * layers, rng)


def noun_encode(store: ParameterStore, path: str, appearance: Tensor, frame_present) -> Tensor:
    """Fuse per-frame appearance ``[..., T, A]`` of one object into a ``[..., D]`` noun feature.

    Frames where the object is missing contribute zero vectors to the fusion MLP.
    """
    per_frame = mlp_forward(store, f"{path}.frame", appearance)
    mask = np.asarray(frame_present, dtype=per_frame.dtype)[..., None]
    per_frame = mul(per_frame, mask)
    flat = per_frame.reshape(per_frame.shape[:-2] + (per_frame.shape[-2] * per_frame.shape[-1],))
    return mlp_forward(store, f"{path}.fuse", flat)
