"""Procedural hand-object tracklet videos with a compositional label space.

Slot 0 is the hand. The first object slot holds the manipulated object
(noun 0), the second holds the reference object (noun 1) when the class has
one, and any remaining object slots hold static distractors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import HAND, OBJECT, ActionDescription, VideoSample

VERB_NAMES = ("lift", "drop", "push", "rotate", "shake", "throw")
PREP_NAMES = ("into", "onto", "next-to", "out-of")
NOUN_NAMES = ("cup", "box", "bottle", "phone", "book", "spoon", "ball", "towel")

# (n_verbs, n_preps, n_nouns) -> component order
PATTERNS: tuple[tuple[tuple[int, int, int], tuple[tuple[str, int], ...]], ...] = (
    ((1, 0, 1), (("verb", 0), ("noun", 0))),
    ((1, 1, 2), (("verb", 0), ("noun", 0), ("prep", 0), ("noun", 1))),
    ((2, 0, 1), (("verb", 0), ("verb", 1), ("noun", 0))),
    ((2, 1, 2), (("verb", 0), ("noun", 0), ("verb", 1), ("prep", 0), ("noun", 1))),
    ((2, 2, 2), (("verb", 0), ("noun", 0), ("prep", 0), ("noun", 1), ("verb", 1), ("prep", 1))),
)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class VerbPrimitive:
    name: str
    amplitude: tuple[float, float] = (0.8, 1.2)


@dataclass
class VocabSpec:
    verbs: tuple[VerbPrimitive, ...]
    preps: tuple[str, ...]
    nouns: np.ndarray                     # [num_nouns, A] unit prototypes
    noun_names: tuple[str, ...] = ()

    @property
    def num_raw_templates(self) -> int:
        return len(self.verbs) * len(self.preps) * len(self.nouns)

    def describe(self, desc: ActionDescription) -> str:
        words = []
        for kind, pos in desc.order:
            vid = desc.ids(kind)[pos]
            words.append({"verb": lambda: self.verbs[vid].name, "prep": lambda: self.preps[vid],
                          "noun": lambda: self.noun_names[vid]}[kind]())
        return " ".join(words)


@dataclass(frozen=True)
class ClassTemplate:
    class_id: int
    description: ActionDescription
    segments: tuple[tuple[int, int], ...]
    name: str = ""


def build_vocab(seed: int = 0, num_verbs: int = 6, num_preps: int = 4, num_nouns: int = 8,
                appearance_dim: int = 16) -> VocabSpec:
    if not 1 <= num_verbs <= len(VERB_NAMES):
        raise SynthError(f"num_verbs must lie in [1, {len(VERB_NAMES)}]")
    if not 1 <= num_preps <= len(PREP_NAMES):
        raise SynthError(f"num_preps must lie in [1, {len(PREP_NAMES)}]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    if num_nouns <= appearance_dim:
        q, _ = np.linalg.qr(rng.standard_normal((appearance_dim, appearance_dim)))
        protos = q[:, :num_nouns].T.copy()
    else:
        # rejection sampling keeps every pairwise angle >= 30 degrees
        cos_max = math.cos(math.radians(30))
        protos = []
        while len(protos) < num_nouns:
            v = rng.standard_normal(appearance_dim)
            v /= np.linalg.norm(v)
            if all(abs(v @ p) <= cos_max for p in protos):
                protos.append(v)
        protos = np.array(protos)
    names = tuple(NOUN_NAMES[i] if i < len(NOUN_NAMES) else f"noun{i}" for i in range(num_nouns))
    return VocabSpec(tuple(VerbPrimitive(n) for n in VERB_NAMES[:num_verbs]), PREP_NAMES[:num_preps],
                     protos, names)


def segment_plan(n_verbs: int, T: int) -> tuple[tuple[int, int], ...]:
    bounds = np.linspace(0, T, n_verbs + 1).round().astype(int)
    return tuple((int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]))


def _allowed_patterns(n_max: dict[str, int], n_verbs: int, n_preps: int, n_nouns: int):
    out = []
    for (nv, np_, nn), order in PATTERNS:
        if nv <= min(n_max["verb"], n_verbs) and np_ <= min(n_max["prep"], n_preps) \
                and nn <= min(n_max["noun"], n_nouns):
            out.append(((nv, np_, nn), order))
    return out


def count_expressible(vocab: VocabSpec, n_max: dict[str, int] | None = None) -> int:
    n_max = n_max or {"verb": 2, "prep": 2, "noun": 2}
    V, P, Nn = len(vocab.verbs), len(vocab.preps), len(vocab.nouns)
    total = 0
    for (nv, np_, nn), _ in _allowed_patterns(n_max, V, P, Nn):
        total += math.perm(V, nv) * math.perm(P, np_) * math.perm(Nn, nn)
    return total


class _Cycle:
    """Deterministic shuffled cycle over vocabulary ids, for even coverage."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng, self.buf = n, rng, []

    def take(self, count: int) -> list[int]:
        out: list[int] = []
        while len(out) < count:
            if not self.buf:
                self.buf = list(self.rng.permutation(self.n))
            v = int(self.buf.pop())
            if v not in out:
                out.append(v)
            elif self.n <= len(out):
                raise SynthError("vocabulary too small for the requested pattern")
            else:
                self.buf.insert(0, v)
        return out


def build_classes(vocab: VocabSpec, num_classes: int = 40, seed: int = 0, T: int = 16,
                  n_max: dict[str, int] | None = None, n_head: int | None = None,
                  attempts: int = 50) -> list[ClassTemplate]:
    """Pick ``num_classes`` distinct descriptions.

    The first ``n_head`` classes (default: half) cover every vocabulary id,
    and every id appears in at least two classes overall.
    """
    n_max = n_max or {"verb": 2, "prep": 2, "noun": 2}
    V, P, Nn = len(vocab.verbs), len(vocab.preps), len(vocab.nouns)
    patterns = _allowed_patterns(n_max, V, P, Nn)
    if not patterns:
        raise SynthError("no description pattern fits the configured limits")
    if num_classes > count_expressible(vocab, n_max):
        raise SynthError(f"{num_classes} classes requested but only {count_expressible(vocab, n_max)} are expressible")
    n_head = num_classes // 2 if n_head is None else n_head
    for attempt in range(attempts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 102, attempt]))
        descs: list[ActionDescription] = []
        seen = set()
        for part, size in (("head", n_head), ("tail", num_classes - n_head)):
            cyc = {"verb": _Cycle(V, rng), "prep": _Cycle(P, rng), "noun": _Cycle(Nn, rng)}
            made = 0
            tries = 0
            while made < size and tries < 100 * num_classes:
                tries += 1
                (nv, np_, nn), order = patterns[(len(descs) + tries) % len(patterns)]
                d = ActionDescription(tuple(cyc["verb"].take(nv)), tuple(cyc["prep"].take(np_)),
                                      tuple(cyc["noun"].take(nn)), order)
                if d in seen:
                    continue
                seen.add(d)
                descs.append(d)
                made += 1
        if len(descs) < num_classes:
            continue
        if _coverage_ok(descs, n_head, V, P, Nn, patterns):
            return [ClassTemplate(i, d, segment_plan(len(d.verbs), T), vocab.describe(d))
                    for i, d in enumerate(descs)]
    raise SynthError(f"could not satisfy the component-sharing constraints with {num_classes} classes")


def _coverage_ok(descs, n_head, V, P, Nn, patterns) -> bool:
    uses_preps = any(np_ > 0 for (_, np_, _), _ in patterns)
    for kind, size in (("verb", V), ("prep", P if uses_preps else 0), ("noun", Nn)):
        counts = np.zeros(size, dtype=int)
        head = np.zeros(size, dtype=int)
        for i, d in enumerate(descs):
            for v in set(d.ids(kind)):
                counts[v] += 1
                if i < n_head:
                    head[v] += 1
        if size and (counts.min() < 2 or (n_head and head.min() < 1)):
            return False
    return True


# ----------------------------------------------------------------------------
# rendering

@dataclass
class RenderParams:
    T: int = 16
    N: int = 4
    hands: int = 1
    appearance_dim: int = 16
    noise: float = 4.0
    p_miss: float = 0.05
    box_sigma: float = 0.01
    size_sigma: float = 0.003
    appearance_sigma: float = 0.25

    @classmethod
    def from_config(cls, cfg: RunConfig, **over) -> "RenderParams":
        kw = dict(T=cfg.T, N=cfg.N, hands=cfg.hands, appearance_dim=cfg.appearance_dim,
                  noise=cfg.noise, p_miss=cfg.p_miss)
        kw.update(over)
        return cls(**kw)


def _verb_track(name: str, start: np.ndarray, size: np.ndarray, L: int, amp: float) -> np.ndarray:
    """Hand boxes ``[L, 4]`` for one segment, continuing from centre ``start``."""
    u = np.arange(1, L + 1) / L
    cx = np.full(L, start[0])
    cy = np.full(L, start[1])
    w = np.full(L, size[0])
    h = np.full(L, size[1])
    if name == "lift":
        cy = start[1] - 0.2 * amp * u
    elif name == "drop":
        cy = start[1] + 0.2 * amp * u
    elif name == "push":
        cx = start[0] + 0.2 * amp * u
    elif name == "rotate":
        w = size[0] * (1 + 0.4 * amp * np.sin(2 * np.pi * u))
        h = size[1] * (1 - 0.4 * amp * np.sin(2 * np.pi * u))
    elif name == "shake":
        cx = start[0] + 0.03 * amp * (-1.0) ** np.arange(L)
    elif name == "throw":
        cx = start[0] + 0.25 * amp * u
        cy = start[1] - 0.6 * amp * u * (1 - u)
    else:
        raise SynthError(f"unknown verb primitive {name!r}")
    return np.stack([cx, cy, w, h], axis=1)


def render_sample(template: ClassTemplate, vocab: VocabSpec, params: RenderParams, seed: int,
                  sample_id: str | None = None) -> VideoSample:
    rng = np.random.default_rng(seed)
    T, N, A = params.T, params.N, params.appearance_dim
    desc = template.description
    hands = params.hands
    if N - hands < len(desc.nouns):
        raise SynthError("not enough object slots for the description's nouns")
    boxes = np.zeros((T, N, 4))
    appearance = np.zeros((N, T, A))

    hand_size = rng.uniform(0.08, 0.12, size=2)
    pos = np.array([rng.uniform(0.35, 0.55), rng.uniform(0.4, 0.6)])
    hand = np.zeros((T, 4))
    for (a, b), vid in zip(template.segments, desc.verbs):
        amp = rng.uniform(*vocab.verbs[vid].amplitude)
        hand[a:b] = _verb_track(vocab.verbs[vid].name, pos, hand_size, b - a, amp)
        pos = hand[b - 1, :2].copy()
    boxes[:, 0] = hand
    for extra in range(1, hands):
        # additional hands idle near the bottom edge
        boxes[:, extra] = [rng.uniform(0.2, 0.8), 0.9, *hand_size]

    o0, o1 = hands, hands + 1
    held_size = rng.uniform(0.05, 0.08, size=2)
    boxes[:, o0, 0] = hand[:, 0]
    boxes[:, o0, 1] = hand[:, 1] + 0.04
    boxes[:, o0, 2:] = held_size
    noun_of_slot = {o0: desc.nouns[0]}

    first_distractor = o0 + 1
    if len(desc.nouns) > 1:
        noun_of_slot[o1] = desc.nouns[1]
        first_distractor = o1 + 1
        ref_size = rng.uniform(0.14, 0.2, size=2)
        boxes[:, o1, 2:] = ref_size
        prep_segments = template.segments[len(desc.verbs) - len(desc.preps):]
        with_prep = dict(zip(prep_segments, desc.preps))
        for seg in template.segments:
            a, b = seg
            start, end = boxes[a, o0, :2], boxes[b - 1, o0, :2]
            if seg in with_prep:
                name = vocab.preps[with_prep[seg]]
                if name == "into":
                    centre = end
                elif name == "onto":
                    centre = end + [0.0, (held_size[1] + ref_size[1]) / 2]
                elif name == "next-to":
                    centre = end + [(held_size[0] + ref_size[0]) / 2 + 0.01, 0.0]
                elif name == "out-of":
                    centre = start
                else:
                    raise SynthError(f"unknown preposition {name!r}")
            else:
                centre = rng.uniform(0.15, 0.85, size=2)
            boxes[a:b, o1, :2] = centre

    for slot in range(first_distractor, N):
        boxes[:, slot, :2] = rng.uniform(0.1, 0.9, size=2)
        boxes[:, slot, 2:] = rng.uniform(0.05, 0.15, size=2)
        noun_of_slot[slot] = int(rng.integers(len(vocab.nouns)))

    s = params.noise
    boxes[:, :, :2] += rng.normal(0, params.box_sigma * s, size=(T, N, 2))
    boxes[:, :, 2:] += rng.normal(0, params.size_sigma * s, size=(T, N, 2))
    boxes[:, :, :2] = np.clip(boxes[:, :, :2], -0.5, 1.5)
    boxes[:, :, 2:] = np.clip(boxes[:, :, 2:], 0.005, 1.5)
    for slot, noun in noun_of_slot.items():
        appearance[slot] = vocab.nouns[noun] + rng.normal(0, params.appearance_sigma * s, size=(T, A))

    present = rng.random((T, N)) >= params.p_miss
    boxes[~present] = 0.0
    appearance[~present.T] = 0.0
    roles = [HAND] * hands + [OBJECT] * (N - hands)
    sid = sample_id if sample_id is not None else f"c{template.class_id:03d}-s{seed}"
    return VideoSample(sid, roles, np.round(boxes, 6) + 0.0, present, np.round(appearance, 6) + 0.0,
                       template.class_id, desc, meta={"seed": int(seed)})


# ----------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class SampleRef:
    id: str
    class_id: int
    seed: int


@dataclass
class Splits:
    mode: str
    manifests: dict[str, list[SampleRef]]
    tail: list[int] = field(default_factory=list)
    base: list[int] = field(default_factory=list)
    novel: list[int] = field(default_factory=list)
    k: int | None = None

    def counts(self, name: str, num_classes: int) -> np.ndarray:
        return np.bincount([r.class_id for r in self.manifests[name]], minlength=num_classes)


def _refs(class_id: int, n: int, split: str, seed: int, offset: int = 0) -> list[SampleRef]:
    code = sum(ord(c) * 31 ** i for i, c in enumerate(split)) % (2 ** 31)
    out = []
    for i in range(offset, offset + n):
        s = int(np.random.SeedSequence([seed, class_id, code, i]).generate_state(1)[0])
        out.append(SampleRef(f"c{class_id:03d}-{split}-{i:04d}", class_id, s))
    return out


def longtail_counts(num_classes: int, head: int, tail: int) -> np.ndarray:
    if num_classes == 1:
        return np.array([head])
    ratio = tail / head
    return np.array([int(round(head * ratio ** (c / (num_classes - 1)))) for c in range(num_classes)])


def _components(desc: ActionDescription) -> set[tuple[str, int]]:
    return {(k, v) for k, _, v in desc.components()}


def check_composable(classes: Sequence[ClassTemplate], targets: Sequence[int], sources: Sequence[int]) -> None:
    have = set().union(*(_components(classes[c].description) for c in sources)) if sources else set()
    for t in targets:
        missing = _components(classes[t].description) - have
        if missing:
            raise SynthError(f"class {t} needs components {sorted(missing)} absent from the source classes")


def make_splits(classes: Sequence[ClassTemplate], mode: str, seed: int = 0, k: int | None = None,
                cfg: RunConfig | None = None) -> Splits:
    cfg = cfg or RunConfig()
    C = len(classes)
    val_n = cfg.val_per_class
    if mode == "longtail":
        counts = longtail_counts(C, cfg.head_count, cfg.tail_count)
        train = [r for c in range(C) for r in _refs(c, int(counts[c]), "train", seed)]
        val = [r for c in range(C) for r in _refs(c, val_n, "val", seed)]
        order = sorted(range(C), key=lambda c: (counts[c], c))
        tail = sorted(order[:min(cfg.tail_classes, C)])
        head = [c for c in range(C) if c not in tail]
        check_composable(classes, tail, head)
        return Splits(mode, {"train": train, "val": val}, tail=tail)
    if mode == "compositional":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 103]))
        groups: dict[tuple, list[int]] = {}
        for c in classes:
            d = c.description
            groups.setdefault((frozenset(d.verbs), frozenset(d.nouns)), []).append(c.class_id)
        keys = list(groups)
        rng.shuffle(keys)
        target = int(round(cfg.compositional_val_fraction * C))
        val_classes: list[int] = []
        train_classes = set(range(C))
        for key in keys:
            if len(val_classes) >= target:
                break
            cand = groups[key]
            remaining = train_classes - set(cand)
            try:
                check_composable(classes, val_classes + cand, sorted(remaining))
            except SynthError:
                continue
            val_classes += cand
            train_classes = remaining
        if not val_classes:
            raise SynthError("could not hold out any verb-noun combination")
        train = [r for c in sorted(train_classes) for r in _refs(c, cfg.compositional_train_count, "train", seed)]
        val = [r for c in sorted(val_classes) for r in _refs(c, val_n, "val", seed)]
        return Splits(mode, {"train": train, "val": val}, tail=sorted(val_classes))
    if mode == "fewshot":
        k = 5 if k is None else k
        if k < 1 or k > cfg.fewshot_pool:
            raise SynthError(f"k={k} exceeds the renderable pool of {cfg.fewshot_pool} per novel class")
        n_base = cfg.fewshot_base_classes
        if not 0 < n_base < C:
            raise SynthError("need at least one base and one novel class")
        base, novel = list(range(n_base)), list(range(n_base, C))
        check_composable(classes, novel, base)
        manifests = {
            "base_train": [r for c in base for r in _refs(c, cfg.fewshot_base_count, "train", seed)],
            "base_val": [r for c in base for r in _refs(c, val_n, "val", seed)],
            "novel_train": [r for c in novel for r in _refs(c, cfg.fewshot_pool, "shot", seed)[:k]],
            "novel_val": [r for c in novel for r in _refs(c, val_n, "val", seed)],
        }
        return Splits(mode, manifests, base=base, novel=novel, k=k)
    raise SynthError(f"unknown split mode {mode!r}")


def render_refs(refs: Sequence[SampleRef], classes: Sequence[ClassTemplate], vocab: VocabSpec,
                params: RenderParams) -> list[VideoSample]:
    return [render_sample(classes[r.class_id], vocab, params, r.seed, r.id) for r in refs]


@dataclass
class SynthDataset:
    """Everything derived from one (config, seed): vocabulary, classes, rendering settings."""
    cfg: RunConfig
    vocab: VocabSpec
    classes: list[ClassTemplate]
    params: RenderParams

    @classmethod
    def build(cls, cfg: RunConfig, seed: int | None = None) -> "SynthDataset":
        seed = cfg.seed if seed is None else seed
        vocab = build_vocab(seed, cfg.num_verbs, cfg.num_preps, cfg.num_nouns, cfg.appearance_dim)
        n_max = {"verb": cfg.n_max_verb, "prep": cfg.n_max_prep, "noun": cfg.n_max_noun}
        n_head = cfg.fewshot_base_classes if cfg.num_classes > cfg.fewshot_base_classes else None
        classes = build_classes(vocab, cfg.num_classes, seed, cfg.T, n_max,
                                n_head=min(n_head or cfg.num_classes // 2, cfg.num_classes - cfg.tail_classes)
                                if cfg.num_classes > 1 else None)
        return cls(cfg, vocab, classes, RenderParams.from_config(cfg))

    @property
    def descriptions(self) -> list[ActionDescription]:
        return [c.description for c in self.classes]

    def render(self, refs: Sequence[SampleRef]) -> list[VideoSample]:
        return render_refs(refs, self.classes, self.vocab, self.params)


# ----------------------------------------------------------------------------
# separability oracle

def oracle_features(sample: VideoSample) -> tuple[np.ndarray, np.ndarray]:
    """Hand trajectory, reference-minus-held offsets and per-slot mean appearance, with a validity mask."""
    hand_slot = sample.hand_slots()[0]
    objs = sample.object_slots()
    pres = sample.present.astype(bool)
    boxes = sample.boxes
    hp = pres[:, hand_slot]
    hand = boxes[:, hand_slot].copy()
    if hp.any():
        hand -= hand[hp].mean(axis=0)
    hand_mask = np.repeat(hp[:, None], 4, axis=1)
    o0, o1 = objs[0], objs[1]
    both = pres[:, o0] & pres[:, o1]
    rel = boxes[:, o1, :2] - boxes[:, o0, :2]
    rel_mask = np.repeat(both[:, None], 2, axis=1)
    apps, app_masks = [], []
    for slot in (o0, o1):
        p = pres[:, slot]
        A = sample.appearance.shape[-1]
        apps.append(sample.appearance[slot][p].mean(axis=0) if p.any() else np.zeros(A))
        app_masks.append(np.full(A, p.any()))
    x = np.concatenate([hand.ravel(), rel.ravel(), *apps])
    m = np.concatenate([hand_mask.ravel(), rel_mask.ravel(), *app_masks])
    return x, m.astype(bool)


class PrototypeOracle:
    """Nearest class prototype under a per-feature variance-scaled distance."""

    def fit(self, samples: Sequence[VideoSample]) -> "PrototypeOracle":
        feats = [oracle_features(s) for s in samples]
        labels = np.array([s.label for s in samples])
        X = np.stack([f for f, _ in feats])
        M = np.stack([m for _, m in feats])
        self.classes_ = np.unique(labels)
        self.mean_ = np.zeros((len(self.classes_), X.shape[1]))
        self.var_ = np.ones_like(self.mean_)
        for i, c in enumerate(self.classes_):
            xs, ms = X[labels == c], M[labels == c]
            n = np.maximum(ms.sum(axis=0), 1)
            mu = (xs * ms).sum(axis=0) / n
            var = (((xs - mu) ** 2) * ms).sum(axis=0) / n
            self.mean_[i], self.var_[i] = mu, np.maximum(var, 1e-4)
        return self

    def predict(self, samples: Sequence[VideoSample]) -> np.ndarray:
        out = []
        for s in samples:
            x, m = oracle_features(s)
            d = (((x - self.mean_) ** 2) / self.var_ + np.log(self.var_)) * m
            out.append(self.classes_[int(np.argmin(d.sum(axis=1)))])
        return np.array(out)


def oracle_accuracy(ds: SynthDataset, n_ref: int = 30, n_test: int = 20, seed: int = 0) -> float:
    ref = [r for c in range(len(ds.classes)) for r in _refs(c, n_ref, "oracle-ref", seed)]
    test = [r for c in range(len(ds.classes)) for r in _refs(c, n_test, "oracle-test", seed)]
    oracle = PrototypeOracle().fit(ds.render(ref))
    test_samples = ds.render(test)
    pred = oracle.predict(test_samples)
    return float(np.mean(pred == np.array([s.label for s in test_samples])))
