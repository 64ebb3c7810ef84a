"""Sample and description types plus the line-oriented dataset record format."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

HAND, OBJECT = "hand", "object"
KINDS = ("verb", "prep", "noun")
BOX_LOW, BOX_HIGH = -0.5, 1.5


class ValidationError(ValueError):
    pass


class BBoxFeature(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


@dataclass(frozen=True)
class ActionDescription:
    """Ordered verb/preposition/noun template of a class.

    ``order`` lists ``(kind, position)`` pairs, e.g. ``(("verb", 0), ("noun", 0))``.
    """
    verbs: tuple[int, ...]
    preps: tuple[int, ...]
    nouns: tuple[int, ...]
    order: tuple[tuple[str, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "verbs", tuple(int(v) for v in self.verbs))
        object.__setattr__(self, "preps", tuple(int(p) for p in self.preps))
        object.__setattr__(self, "nouns", tuple(int(n) for n in self.nouns))
        object.__setattr__(self, "order", tuple((str(k), int(i)) for k, i in self.order))
        if not self.verbs:
            raise ValidationError("a description needs at least one verb")
        if not self.nouns:
            raise ValidationError("a description needs at least one noun")
        expected = sorted([("verb", i) for i in range(len(self.verbs))]
                          + [("prep", i) for i in range(len(self.preps))]
                          + [("noun", i) for i in range(len(self.nouns))])
        if sorted(self.order) != expected:
            raise ValidationError(f"order {self.order} is not a permutation of the components")

    @property
    def counts(self) -> dict[str, int]:
        return {"verb": len(self.verbs), "prep": len(self.preps), "noun": len(self.nouns)}

    def ids(self, kind: str) -> tuple[int, ...]:
        return {"verb": self.verbs, "prep": self.preps, "noun": self.nouns}[kind]

    def components(self) -> list[tuple[str, int, int]]:
        """``(kind, position, vocab_id)`` in description order."""
        return [(k, i, self.ids(k)[i]) for k, i in self.order]

    def to_dict(self) -> dict:
        return {"verbs": list(self.verbs), "preps": list(self.preps), "nouns": list(self.nouns),
                "order": [[k, i] for k, i in self.order]}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionDescription":
        return cls(tuple(d["verbs"]), tuple(d["preps"]), tuple(d["nouns"]),
                   tuple((k, i) for k, i in d["order"]))


def layout_of(desc: ActionDescription) -> tuple[tuple[str, int], ...]:
    """Assembly layout: the order plus the per-kind counts it implies."""
    return desc.order


@dataclass
class VideoSample:
    id: str
    roles: list[str]
    boxes: np.ndarray        # [T, N, 4]
    present: np.ndarray      # [T, N] bool
    appearance: np.ndarray   # [N, T, A]; hand slots are zero
    label: int
    description: ActionDescription
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.boxes.shape[0]

    @property
    def N(self) -> int:
        return self.boxes.shape[1]

    def object_slots(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == OBJECT]

    def hand_slots(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == HAND]

    def box(self, t: int, slot: int) -> BBoxFeature:
        return BBoxFeature(*map(float, self.boxes[t, slot]))

    def validate(self, T: int | None = None, hands: int | None = 1) -> "VideoSample":
        boxes, present = self.boxes, self.present
        if boxes.ndim != 3 or boxes.shape[-1] != 4:
            raise ValidationError(f"{self.id}: boxes must be [T, N, 4], got {boxes.shape}")
        if present.shape != boxes.shape[:2]:
            raise ValidationError(f"{self.id}: present mask {present.shape} vs boxes {boxes.shape}")
        if len(self.roles) != self.N or any(r not in (HAND, OBJECT) for r in self.roles):
            raise ValidationError(f"{self.id}: roles {self.roles} do not describe {self.N} slots")
        if T is not None and self.T != T:
            raise ValidationError(f"{self.id}: clip length {self.T} != configured {T}")
        if hands is not None and len(self.hand_slots()) != hands:
            raise ValidationError(f"{self.id}: expected {hands} hand slot(s)")
        if not np.all(np.isfinite(boxes)):
            raise ValidationError(f"{self.id}: non-finite box values")
        if boxes.min() < BOX_LOW or boxes.max() > BOX_HIGH:
            raise ValidationError(f"{self.id}: box values outside [{BOX_LOW}, {BOX_HIGH}]")
        if np.any(boxes[~present.astype(bool)] != 0):
            raise ValidationError(f"{self.id}: absent slots must carry zero boxes")
        if self.appearance.ndim != 3 or self.appearance.shape[:2] != (self.N, self.T):
            raise ValidationError(f"{self.id}: appearance must be [N, T, A], got {self.appearance.shape}")
        return self

    def to_record(self) -> dict:
        return {
            "id": self.id, "T": self.T, "N": self.N, "roles": list(self.roles),
            "boxes": self.boxes.tolist(),
            "present": self.present.astype(bool).tolist(),
            "appearance": self.appearance.tolist(),
            "label": int(self.label),
            "description": self.description.to_dict(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "VideoSample":
        boxes = np.asarray(rec["boxes"], dtype=np.float64).reshape(rec["T"], rec["N"], 4)
        present = np.asarray(rec["present"], dtype=bool).reshape(rec["T"], rec["N"])
        app = np.asarray(rec["appearance"], dtype=np.float64)
        return cls(id=str(rec["id"]), roles=list(rec["roles"]), boxes=boxes, present=present,
                   appearance=app, label=int(rec["label"]),
                   description=ActionDescription.from_dict(rec["description"]))


def write_records(path: str | os.PathLike, samples: Iterable[VideoSample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def read_records(path: str | os.PathLike) -> Iterator[VideoSample]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield VideoSample.from_record(json.loads(line))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad record ({exc})") from exc


def write_manifest(path: str | os.PathLike, ids: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def read_manifest(path: str | os.PathLike) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
