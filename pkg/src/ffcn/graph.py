"""Per-frame node features and the verb / preposition edge sets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import HAND, OBJECT, VideoSample


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class EdgeSet:
    kind: str                          # "verb", "prep" or "union"
    pairs: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.pairs)

    @property
    def src(self) -> np.ndarray:
        return np.array([i for i, _ in self.pairs], dtype=np.intp)

    @property
    def dst(self) -> np.ndarray:
        return np.array([j for _, j in self.pairs], dtype=np.intp)

    def index(self, pair: tuple[int, int]) -> int:
        return self.pairs.index(tuple(pair))

    def permuted(self, perm: Sequence[int]) -> "EdgeSet":
        """Image of the edge set under the slot relabelling ``i -> perm[i]``."""
        return EdgeSet(self.kind, tuple((int(perm[i]), int(perm[j])) for i, j in self.pairs))


def build_node_features(sample: VideoSample) -> np.ndarray:
    """``[T, N, 4]`` array of (cx, cy, w, h); absent slots are zero rows."""
    feats = np.array(sample.boxes, dtype=np.float64, copy=True)
    feats[~sample.present.astype(bool)] = 0.0
    return feats


def build_edge_sets(roles: Sequence[str]) -> tuple[EdgeSet, EdgeSet]:
    hands = [i for i, r in enumerate(roles) if r == HAND]
    objects = [i for i, r in enumerate(roles) if r == OBJECT]
    if not hands:
        raise GraphError("no hand slot among roles")
    if not objects:
        raise GraphError("no object slot among roles")
    verb = tuple(p for h in hands for o in objects for p in ((h, o), (o, h)))
    prep = tuple((i, j) for i in objects for j in objects if i != j)
    return EdgeSet("verb", verb), EdgeSet("prep", prep)


def union_edges(verb: EdgeSet, prep: EdgeSet) -> EdgeSet:
    return EdgeSet("union", verb.pairs + prep.pairs)


def absent_slots(present: np.ndarray) -> np.ndarray:
    """Slots never present in any frame; ``present`` is ``[..., T, N]``."""
    return ~np.any(present.astype(bool), axis=-2)


def edge_mask(present: np.ndarray, edges: EdgeSet) -> np.ndarray:
    """``[..., N_e]`` mask: 0 for edges touching a never-present slot."""
    gone = absent_slots(present)
    keep = ~(gone[..., edges.src] | gone[..., edges.dst])
    return keep.astype(np.float64)
