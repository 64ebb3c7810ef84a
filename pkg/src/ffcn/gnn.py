"""Per-frame message passing that refines node and edge features jointly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import EdgeSet, GraphError
from .numerics import ParameterStore, Tensor, concat, init_mlp, mlp_forward, segment_sum, take


@dataclass
class EdgeFeatureBlock:
    kind: str
    values: Tensor      # [..., N_e, T, D]
    edges: EdgeSet


def init_gnn(store: ParameterStore, path: str, D: int, layers: int, rng: np.random.Generator) -> None:
    hidden = [D] * layers
    init_mlp(store, f"{path}.ini", [4] + hidden, rng)
    init_mlp(store, f"{path}.edge", [2 * D] + hidden, rng)
    init_mlp(store, f"{path}.node", [D] + hidden, rng)


def init_embed(store: ParameterStore, path: str, nodes: Tensor) -> Tensor:
    """Shared MLP on every (frame, slot) box: ``[..., T, N, 4] -> [..., T, N, D]``."""
    return mlp_forward(store, f"{path}.ini", nodes)


def message_step(store: ParameterStore, path: str, h: Tensor, edges: EdgeSet,
                 update_nodes: bool = True) -> tuple[Tensor, Tensor | None]:
    """One round of edge then node updates on ``h`` of shape ``[..., T, N, D]``.

    Edge (i, j) gets ``edge_mlp([h_i, h_j])``; node i gets ``node_mlp`` of the
    sum of edge features over the edges leaving i.
    """
    if len(edges) == 0:
        raise GraphError("message passing over an empty edge set")
    hi = take(h, edges.src, axis=-2)
    hj = take(h, edges.dst, axis=-2)
    f = mlp_forward(store, f"{path}.edge", concat([hi, hj], axis=-1))
    if not update_nodes:
        return f, None
    agg = segment_sum(f, edges.src, num_segments=h.shape[-2], axis=-2)
    return f, mlp_forward(store, f"{path}.node", agg)


def refine(store: ParameterStore, path: str, nodes: Tensor, edges: EdgeSet, steps: int) -> EdgeFeatureBlock:
    """``steps`` rounds of message passing; returns the last edge features as ``[..., N_e, T, D]``."""
    if steps < 1:
        raise ValueError(f"need at least one message-passing step, got {steps}")
    h = init_embed(store, path, nodes)
    f = None
    for s in range(steps):
        f, h = message_step(store, path, h, edges, update_nodes=s < steps - 1)
    nd = f.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return EdgeFeatureBlock(edges.kind, f.transpose(axes), edges)
