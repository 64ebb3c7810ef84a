"""Representation assembly, the feature bank, and composition of tail-class samples."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import KINDS, ActionDescription
from .numerics import (
    ParameterStore, ShapeError, Tensor, concat, cross_entropy, index, init_mlp, mlp_forward, take,
)
from .spatial import ComponentFeature


class CompositionError(ValueError):
    pass


@dataclass
class Components:
    """Per-sample component features: ``verb [B, n_v, D]``, ``prep [B, n_p, D]``, ``noun [B, n_n, D]``."""
    verb: Tensor
    prep: Tensor
    noun: Tensor

    def get(self, kind: str) -> Tensor:
        return getattr(self, kind)

    @property
    def batch(self) -> int:
        return self.verb.shape[0]

    def detached(self) -> dict[str, np.ndarray]:
        return {k: self.get(k).data.copy() for k in KINDS}


def init_composer(store: ParameterStore, D: int, n_max: Mapping[str, int], reducer_layers: int,
                  num_classes: int, rng: np.random.Generator) -> None:
    for kind in KINDS:
        for count in range(1, n_max[kind] + 1):
            if D % count:
                raise ShapeError(f"D={D} is not divisible by {kind} count {count}")
            init_mlp(store, reducer_path(kind, count), [D] * reducer_layers + [D // count], rng)
    store.add("compose.null_prep", np.zeros(D))
    init_mlp(store, "cls", [3 * D, D, num_classes], rng)


def reducer_path(kind: str, count: int) -> str:
    return f"compose.reduce.{kind}.{count}"


def assemble(store: ParameterStore, comps: Components, desc: ActionDescription) -> Tensor:
    """``[B, 3D]`` representation laid out in description order.

    Each component is reduced to ``D / count`` by the reducer for its
    (kind, count); a description without prepositions gets the learned null
    block appended at the end.
    """
    counts = desc.counts
    pieces = []
    for kind, pos in desc.order:
        src = comps.get(kind)
        if pos >= src.shape[1]:
            raise CompositionError(f"description needs {kind} #{pos} but only {src.shape[1]} are available")
        pieces.append(mlp_forward(store, reducer_path(kind, counts[kind]), index(src, (slice(None), pos))))
    if counts["prep"] == 0:
        null = store["compose.null_prep"]
        pieces.append(Tensor(np.zeros((comps.batch, null.shape[0]), dtype=null.dtype)) + null)
    return concat(pieces, axis=-1)


def assemble_representation(store: ParameterStore, components: Sequence[ComponentFeature],
                            desc: ActionDescription) -> Tensor:
    """Single-sample assembly from a flat list of component features."""
    by_kind: dict[str, dict[int, Tensor]] = {k: {} for k in KINDS}
    for c in components:
        by_kind[c.kind][c.index] = c.vec
    stacked = {}
    for kind in KINDS:
        need = desc.counts[kind]
        have = by_kind[kind]
        if sorted(have) != list(range(need)):
            raise CompositionError(f"{kind}: description needs {need} component(s), got indices {sorted(have)}")
        if need:
            stacked[kind] = concat([have[i].reshape(1, 1, -1) for i in range(need)], axis=1)
        else:
            D = store["compose.null_prep"].shape[0]
            stacked[kind] = Tensor(np.zeros((1, 0, D), dtype=store.dtype))
    rep = assemble(store, Components(**stacked), desc)
    return rep.reshape(rep.shape[-1])


def classify(store: ParameterStore, rep: Tensor) -> Tensor:
    """Shared fully connected stack and linear classifier."""
    return mlp_forward(store, "cls", rep)


class FeatureBank:
    """Ring buffers of detached component features keyed by ``(kind, vocab_id)``."""

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ValueError("bank capacity must be positive")
        self.capacity = capacity
        self._buckets: dict[tuple[str, int], deque] = {}

    def add(self, kind: str, vocab_id: int, vec: np.ndarray, source: str) -> None:
        key = (kind, int(vocab_id))
        if key not in self._buckets:
            self._buckets[key] = deque(maxlen=self.capacity)
        self._buckets[key].append((np.array(vec, copy=True), source))

    def bucket(self, kind: str, vocab_id: int) -> list[tuple[np.ndarray, str]]:
        return list(self._buckets.get((kind, int(vocab_id)), ()))

    def size(self, kind: str, vocab_id: int) -> int:
        return len(self._buckets.get((kind, int(vocab_id)), ()))

    def keys(self) -> list[tuple[str, int]]:
        return sorted(self._buckets)

    def stocked(self, desc: ActionDescription) -> bool:
        return all(self.size(k, v) >= 1 for k, _, v in desc.components())

    def __len__(self):
        return sum(len(b) for b in self._buckets.values())

    def to_arrays(self) -> dict[str, np.ndarray]:
        from .numerics.checkpoint import encode_json
        out: dict[str, np.ndarray] = {"bank/capacity": np.array([self.capacity], dtype=np.int64)}
        for (kind, vid), buf in sorted(self._buckets.items()):
            out[f"bank/{kind}/{vid}"] = np.stack([v for v, _ in buf])
            out[f"bank/{kind}/{vid}/sources"] = encode_json([s for _, s in buf])
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "FeatureBank":
        from .numerics.checkpoint import decode_json
        bank = cls(int(arrays["bank/capacity"][0]))
        for name, arr in arrays.items():
            parts = name.split("/")
            if len(parts) == 3 and parts[0] == "bank":
                sources = decode_json(arrays[f"{name}/sources"])
                for vec, src in zip(arr, sources):
                    bank.add(parts[1], int(parts[2]), vec, src)
        return bank


def bank_update(bank: FeatureBank, comps: Mapping[str, np.ndarray],
                descriptions: Sequence[ActionDescription], sample_ids: Sequence[str]) -> int:
    """Insert every produced component under its ground-truth vocabulary id.

    Head k of a kind is filed under the k-th id of that kind in the sample's
    description; heads beyond the description's count are skipped.
    """
    n = 0
    for b, (desc, sid) in enumerate(zip(descriptions, sample_ids)):
        for kind in KINDS:
            for pos, vid in enumerate(desc.ids(kind)):
                bank.add(kind, vid, comps[kind][b, pos], sid)
                n += 1
    return n


@dataclass
class ComposedSample:
    vec: Tensor
    label: int
    provenance: list[tuple[str, int, str]]


@dataclass
class ComposedBatch:
    reps: Tensor | None                 # [m, 3D]
    labels: np.ndarray                  # class indices
    provenance: list[list[tuple[str, int, str]]] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def samples(self) -> list[ComposedSample]:
        return [ComposedSample(index(self.reps, i), int(l), p)
                for i, (l, p) in enumerate(zip(self.labels, self.provenance))]


def _draw(n_available: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if n_available >= count:
        return rng.choice(n_available, size=count, replace=False)
    return rng.integers(0, n_available, size=count)


def _assemble_grouped(store: ParameterStore, comps: Components, descs: Sequence[ActionDescription]) -> Tensor:
    """Assemble rows whose descriptions differ, one pass per distinct layout."""
    groups: dict[tuple, list[int]] = {}
    for i, d in enumerate(descs):
        groups.setdefault(d.order, []).append(i)
    parts, order = [], []
    for rows in groups.values():
        idx = np.asarray(rows)
        sub = Components(*(take(comps.get(k), idx, axis=0) for k in KINDS))
        parts.append(assemble(store, sub, descs[rows[0]]))
        order.extend(rows)
    reps = concat(parts, axis=0) if len(parts) > 1 else parts[0]
    return take(reps, np.argsort(order), axis=0)


def _targets_round_robin(eligible: Sequence[int], m: int, offset: int) -> list[int]:
    return [eligible[(offset + i) % len(eligible)] for i in range(m)]


def compose_batch(store: ParameterStore, bank: FeatureBank, targets: Sequence[int],
                  descriptions: Sequence[ActionDescription], m: int, rng: np.random.Generator,
                  n_max: Mapping[str, int], offset: int = 0) -> ComposedBatch:
    """Compose ``m`` samples for ``targets`` (class indices) from banked features.

    Targets cycle round-robin starting at ``offset``; classes with an empty
    bucket for any component are skipped for this batch.
    """
    if len(targets) == 0:
        raise CompositionError("no target classes to compose for")
    eligible = [t for t in targets if bank.stocked(descriptions[t])]
    if m == 0 or not eligible:
        return ComposedBatch(None, np.zeros(0, dtype=np.intp))
    D = store["compose.null_prep"].shape[0]
    chosen = _targets_round_robin(eligible, m, offset)
    arrays = {k: np.zeros((m, n_max[k], D), dtype=store.dtype) for k in KINDS}
    provenance = []
    for i, t in enumerate(chosen):
        desc = descriptions[t]
        prov = []
        for kind in KINDS:
            ids = desc.ids(kind)
            # positions sharing a vocabulary id draw distinct entries when possible
            for vid in dict.fromkeys(ids):
                positions = [p for p, v in enumerate(ids) if v == vid]
                bucket = bank.bucket(kind, vid)
                for pos, j in zip(positions, _draw(len(bucket), len(positions), rng)):
                    vec, src = bucket[int(j)]
                    arrays[kind][i, pos] = vec
                    prov.append((kind, vid, src))
        provenance.append(prov)
    comps = Components(*(Tensor(arrays[k]) for k in KINDS))
    reps = _assemble_grouped(store, comps, [descriptions[t] for t in chosen])
    return ComposedBatch(reps, np.asarray(chosen, dtype=np.intp), provenance)


def compose_attached(store: ParameterStore, comps: Components, batch_descs: Sequence[ActionDescription],
                     sample_ids: Sequence[str], targets: Sequence[int],
                     descriptions: Sequence[ActionDescription], m: int, rng: np.random.Generator,
                     offset: int = 0) -> ComposedBatch:
    """Like :func:`compose_batch` but draws from the current batch without detaching."""
    if len(targets) == 0:
        raise CompositionError("no target classes to compose for")
    rows: dict[tuple[str, int], list[tuple[int, str]]] = {}
    for b, (desc, sid) in enumerate(zip(batch_descs, sample_ids)):
        for kind in KINDS:
            width = comps.get(kind).shape[1]
            for pos, vid in enumerate(desc.ids(kind)):
                rows.setdefault((kind, vid), []).append((b * width + pos, sid))
    eligible = [t for t in targets if all((k, v) in rows for k, _, v in descriptions[t].components())]
    if m == 0 or not eligible:
        return ComposedBatch(None, np.zeros(0, dtype=np.intp))
    chosen = _targets_round_robin(eligible, m, offset)
    picks = {k: np.zeros((m, comps.get(k).shape[1]), dtype=np.intp) for k in KINDS}
    provenance = []
    for i, t in enumerate(chosen):
        desc = descriptions[t]
        prov = []
        for kind in KINDS:
            ids = desc.ids(kind)
            for vid in dict.fromkeys(ids):
                positions = [p for p, v in enumerate(ids) if v == vid]
                cand = rows[(kind, vid)]
                for pos, j in zip(positions, _draw(len(cand), len(positions), rng)):
                    picks[kind][i, pos] = cand[int(j)][0]
                    prov.append((kind, vid, cand[int(j)][1]))
        provenance.append(prov)
    gathered = []
    for kind in KINDS:
        src = comps.get(kind)
        B, width, D = src.shape
        if width == 0:
            gathered.append(Tensor(np.zeros((m, 0, D), dtype=src.dtype)))
            continue
        flat = src.reshape(B * width, D)
        gathered.append(take(flat, picks[kind].reshape(-1), axis=0).reshape(m, width, D))
    reps = _assemble_grouped(store, Components(*gathered), [descriptions[t] for t in chosen])
    return ComposedBatch(reps, np.asarray(chosen, dtype=np.intp), provenance)


def total_loss(logits_d: Tensor, labels_d, logits_c: Tensor | None, labels_c, lam: float):
    """``L = L_d + lam * L_c``; the composed term is dropped when nothing was composed.

    Returns ``(L, L_d, L_c)`` with ``L_c`` None when omitted.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    l_d = cross_entropy(logits_d, labels_d).mean()
    if logits_c is None or len(np.atleast_1d(labels_c)) == 0:
        return l_d, l_d, None
    l_c = cross_entropy(logits_c, labels_c).mean()
    return l_d + l_c * lam, l_d, l_c
