"""The full decomposition network and class-conditional scoring."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .compose import Components, assemble, classify, init_composer
from .config import RunConfig
from .data import HAND, KINDS, OBJECT, ActionDescription, VideoSample
from .gnn import EdgeFeatureBlock, init_gnn, refine
from .graph import EdgeSet, build_edge_sets, build_node_features, edge_mask, union_edges
from .numerics import ParameterStore, Tensor, concat, glorot, mul, stack, take
from .spatial import init_gcn, init_noun_encoder, noun_encode, spatial_decompose
from .temporal import init_heads, init_tcn, tcn_forward, temporal_aggregate

# fields that fix the parameter layout; everything else only affects training
ARCH_FIELDS = ("precision", "T", "N", "hands", "appearance_dim", "D", "gnn_steps", "gcn_layers",
               "mlp_layers", "reducer_layers", "n_max_verb", "n_max_prep", "n_max_noun",
               "adjacency_noise", "shared_tcn", "separate_gnns", "full_graph_sum", "gcn_residual")


def arch_dict(cfg: RunConfig) -> dict:
    return {k: getattr(cfg, k) for k in ARCH_FIELDS}


def slot_roles(cfg: RunConfig) -> list[str]:
    return [HAND] * cfg.hands + [OBJECT] * (cfg.N - cfg.hands)


@dataclass
class Batch:
    nodes: np.ndarray           # [B, T, N, 4]
    present: np.ndarray         # [B, T, N]
    appearance: np.ndarray      # [B, n_noun, T, A] for the leading object slots
    noun_present: np.ndarray    # [B, n_noun, T]
    labels: np.ndarray          # global class ids
    descriptions: list[ActionDescription]
    ids: list[str]

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.intp)
        return Batch(self.nodes[idx], self.present[idx], self.appearance[idx], self.noun_present[idx],
                     self.labels[idx], [self.descriptions[i] for i in idx], [self.ids[i] for i in idx])

    @classmethod
    def from_samples(cls, samples: Sequence[VideoSample], n_noun: int) -> "Batch":
        if not samples:
            raise ValueError("empty sample list")
        nodes = np.stack([build_node_features(s) for s in samples])
        present = np.stack([s.present.astype(bool) for s in samples])
        app, npres = [], []
        for s in samples:
            slots = s.object_slots()[:n_noun]
            app.append(np.stack([s.appearance[i] for i in slots]))
            npres.append(np.stack([s.present[:, i] for i in slots]))
        return cls(nodes, present, np.stack(app), np.stack(npres).astype(bool),
                   np.array([s.label for s in samples], dtype=np.intp),
                   [s.description for s in samples], [s.id for s in samples])


class FFCN:
    """Parameters plus forward passes; training state lives elsewhere."""

    def __init__(self, cfg: RunConfig, classes: Sequence[ActionDescription],
                 class_ids: Sequence[int] | None = None, seed: int | None = None,
                 store: ParameterStore | None = None):
        self.cfg = cfg
        self.n_max = {"verb": cfg.n_max_verb, "prep": cfg.n_max_prep, "noun": cfg.n_max_noun}
        self.roles = slot_roles(cfg)
        self.verb_edges, self.prep_edges = build_edge_sets(self.roles)
        self.union_edges = union_edges(self.verb_edges, self.prep_edges)
        self.edges = {"verb": self.verb_edges, "prep": self.prep_edges}
        self._set_classes(classes, class_ids)
        if store is None:
            seed = cfg.seed if seed is None else seed
            store = ParameterStore(cfg.precision)
            self._init_params(store, np.random.default_rng(np.random.SeedSequence([seed, 1])))
        self.store = store

    # ----- construction -------------------------------------------------
    def _set_classes(self, classes, class_ids):
        classes = list(classes)
        for c in classes:
            for kind in KINDS:
                if c.counts[kind] > self.n_max[kind]:
                    raise ValueError(f"class {c} has more {kind}s than n_max_{kind}={self.n_max[kind]}")
        self.classes = classes
        self.class_ids = list(range(len(classes))) if class_ids is None else [int(c) for c in class_ids]
        if len(self.class_ids) != len(classes):
            raise ValueError("class_ids and classes differ in length")
        self.index_of = {cid: i for i, cid in enumerate(self.class_ids)}
        groups: dict[tuple, list[int]] = {}
        for i, c in enumerate(classes):
            groups.setdefault(c.order, []).append(i)
        self.layout_groups = [(classes[ix[0]], np.asarray(ix)) for ix in groups.values()]
        self._score_perm = np.argsort(np.concatenate([ix for _, ix in self.layout_groups]))

    def _init_params(self, store: ParameterStore, rng: np.random.Generator):
        cfg, D = self.cfg, self.cfg.D
        for path in self.gnn_paths():
            init_gnn(store, path, D, cfg.mlp_layers, rng)
        for kind in ("verb", "prep"):
            heads = self.n_max[kind]
            if heads == 0:
                continue
            for path in self.tcn_paths(kind):
                init_tcn(store, path, D, rng)
            init_heads(store, f"agg.{kind}", heads, cfg.T, D, cfg.mlp_layers, rng)
            for k in range(heads):
                init_gcn(store, f"gcn.{kind}.{k}", len(self.edges[kind]), D, cfg.gcn_layers, rng,
                         cfg.adjacency_noise)
        init_noun_encoder(store, "noun", cfg.appearance_dim, cfg.T, D, cfg.mlp_layers, rng)
        init_composer(store, D, self.n_max, cfg.reducer_layers, len(self.classes), rng)

    def gnn_paths(self) -> list[str]:
        return ["gnn.verb", "gnn.prep"] if self.cfg.separate_gnns else ["gnn"]

    def tcn_paths(self, kind: str) -> list[str]:
        if self.cfg.shared_tcn:
            return [f"tcn.{kind}"]
        return [f"tcn.{kind}.{k}" for k in range(self.n_max[kind])]

    def replace_classes(self, classes: Sequence[ActionDescription], class_ids: Sequence[int],
                        rng: np.random.Generator) -> None:
        """Swap the final classifier layer for a freshly initialised one over ``classes``."""
        self._set_classes(classes, class_ids)
        last = max(int(p.split(".")[1]) for p in self.store.paths("cls.") if p.endswith(".weight"))
        fan_in = self.store[f"cls.{last}.weight"].shape[0]
        C = len(self.classes)
        self.store.replace(f"cls.{last}.weight", glorot(rng, fan_in, C, (fan_in, C)))
        self.store.replace(f"cls.{last}.bias", np.zeros(C))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    # ----- forward ------------------------------------------------------
    def _tensor(self, arr) -> Tensor:
        return Tensor(np.asarray(arr, dtype=self.store.dtype))

    def refine_blocks(self, nodes: Tensor, present: np.ndarray) -> dict[str, EdgeFeatureBlock]:
        """Refined, masked edge blocks ``[B, N_e, T, D]`` for the verb and prep graphs."""
        cfg, store = self.cfg, self.store
        n_verb = len(self.verb_edges)
        blocks: dict[str, EdgeFeatureBlock] = {}
        if cfg.full_graph_sum:
            if cfg.separate_gnns:
                full = {k: refine(store, f"gnn.{k}", nodes, self.union_edges, cfg.gnn_steps) for k in ("verb", "prep")}
            else:
                shared = refine(store, "gnn", nodes, self.union_edges, cfg.gnn_steps)
                full = {"verb": shared, "prep": shared}
            rows = {"verb": np.arange(n_verb), "prep": np.arange(n_verb, len(self.union_edges))}
            for kind in ("verb", "prep"):
                vals = take(full[kind].values, rows[kind], axis=-3)
                blocks[kind] = EdgeFeatureBlock(kind, vals, self.edges[kind])
        else:
            for kind in ("verb", "prep"):
                path = f"gnn.{kind}" if cfg.separate_gnns else "gnn"
                blocks[kind] = refine(store, path, nodes, self.edges[kind], cfg.gnn_steps)
        for kind, blk in blocks.items():
            mask = edge_mask(present, self.edges[kind]).astype(store.dtype)
            blk.values = mul(blk.values, mask[..., :, None, None])
        return blocks

    def decompose(self, batch: Batch) -> Components:
        cfg, store = self.cfg, self.store
        nodes = self._tensor(batch.nodes)
        blocks = self.refine_blocks(nodes, batch.present)
        B, D = len(batch), cfg.D
        out = {}
        for kind in ("verb", "prep"):
            heads = self.n_max[kind]
            if heads == 0:
                out[kind] = self._tensor(np.zeros((B, 0, D)))
                continue
            feats = []
            shared = tcn_forward(store, f"tcn.{kind}", blocks[kind]) if cfg.shared_tcn else None
            for k in range(heads):
                blk = shared if shared is not None else tcn_forward(store, f"tcn.{kind}.{k}", blocks[kind])
                g = temporal_aggregate(store, f"agg.{kind}", blk, k)
                feats.append(spatial_decompose(store, f"gcn.{kind}.{k}", g, cfg.gcn_residual).vec)
            out[kind] = stack(feats, axis=1)
        nouns = noun_encode(store, "noun", self._tensor(batch.appearance), batch.noun_present)
        out["noun"] = nouns
        return Components(out["verb"], out["prep"], out["noun"])

    def classify(self, rep: Tensor) -> Tensor:
        return classify(self.store, rep)

    def assemble(self, comps: Components, desc: ActionDescription) -> Tensor:
        return assemble(self.store, comps, desc)

    def class_scores(self, comps: Components) -> Tensor:
        """``[B, C]`` scores; class c's score is its logit on the input laid out by c's description."""
        cols = []
        for desc, ix in self.layout_groups:
            logits = self.classify(self.assemble(comps, desc))
            cols.append(take(logits, ix, axis=1))
        scores = concat(cols, axis=1) if len(cols) > 1 else cols[0]
        return take(scores, self._score_perm, axis=1)

    def local_labels(self, labels: Sequence[int]) -> np.ndarray:
        try:
            return np.array([self.index_of[int(l)] for l in labels], dtype=np.intp)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]} is not among the model's classes") from None
