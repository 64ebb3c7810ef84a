"""Training loop, evaluation, few-shot finetuning and checkpoint persistence."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .compose import FeatureBank, bank_update, compose_attached, compose_batch, total_loss
from .config import RunConfig
from .data import ActionDescription, VideoSample
from .model import FFCN, Batch, arch_dict
from .numerics import CheckpointError, ParameterStore, backward, no_grad, read_arrays, sgd_step, write_arrays
from .numerics.checkpoint import decode_json, encode_json, store_from_arrays, store_to_arrays

log = logging.getLogger(__name__)

CKPT_NAME = "model.ckpt"


@dataclass
class MetricsRecord:
    epoch: int
    L_d: float | None = None
    L_c: float | None = None
    top1: float = 0.0
    per_class: list[float | None] = field(default_factory=list)
    tail_mean: float | None = None
    novel_mean: float | None = None
    lr: float | None = None

    def __post_init__(self):
        for name in ("top1", "tail_mean", "novel_mean"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        def f(v):
            return "-" if v is None else f"{v:.4f}"
        return (f"epoch={self.epoch} lr={f(self.lr)} L_d={f(self.L_d)} L_c={f(self.L_c)} "
                f"top1={f(self.top1)} tail={f(self.tail_mean)} novel={f(self.novel_mean)}")


def tail_targets(counts: Sequence[int], cfg: RunConfig) -> list[int]:
    """Class indices to compose for: below ``tail_threshold`` if set, else the lowest-count classes."""
    counts = np.asarray(counts)
    if cfg.tail_threshold > 0:
        return [int(c) for c in np.flatnonzero(counts < cfg.tail_threshold)]
    order = sorted(range(len(counts)), key=lambda c: (counts[c], c))
    return sorted(order[:min(cfg.tail_classes, len(counts))])


def _rng(seed: int, stream: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, epoch]))


# ----------------------------------------------------------------------------
# evaluation

def predict_scores(model: FFCN, batch: Batch, chunk: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(batch), chunk):
            sub = batch.subset(np.arange(start, min(start + chunk, len(batch))))
            out.append(model.class_scores(model.decompose(sub)).data)
    return np.concatenate(out, axis=0)


def evaluate_batch(model: FFCN, batch: Batch, tail: Sequence[int] = (), novel: Sequence[int] = (),
                   epoch: int = -1) -> MetricsRecord:
    """Top-1 and per-class accuracy; ``tail``/``novel`` are global class ids. Ties go to the lowest index."""
    labels = model.local_labels(batch.labels)
    pred = np.argmax(predict_scores(model, batch), axis=1)
    correct = pred == labels
    per_class: list[float | None] = []
    for c in range(model.num_classes):
        sel = labels == c
        per_class.append(float(correct[sel].mean()) if sel.any() else None)

    def group_mean(ids):
        vals = [per_class[model.index_of[c]] for c in ids if c in model.index_of]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None
    return MetricsRecord(epoch, top1=float(correct.mean()), per_class=per_class,
                         tail_mean=group_mean(tail), novel_mean=group_mean(novel))


# ----------------------------------------------------------------------------
# checkpoints

def checkpoint_arrays(model: FFCN, epoch: int) -> dict[str, np.ndarray]:
    arrays = store_to_arrays(model.store)
    arrays["meta/model"] = encode_json(arch_dict(model.cfg))
    arrays["meta/classes"] = encode_json({"ids": model.class_ids, "descriptions": [c.to_dict() for c in model.classes]})
    arrays["meta/epoch"] = np.array([epoch], dtype=np.int64)
    return arrays


def save_checkpoint(path: str | os.PathLike, model: FFCN, epoch: int, bank: FeatureBank | None = None,
                    run_info: dict | None = None) -> None:
    """Write the checkpoint plus optional sidecars ``<path>.bank`` and ``run.json`` next to it."""
    write_arrays(path, checkpoint_arrays(model, epoch))
    if bank is not None:
        write_arrays(f"{path}.bank", bank.to_arrays())
    if run_info is not None:
        tmp = Path(path).with_name("run.json.tmp")
        tmp.write_text(json.dumps(run_info, indent=1, sort_keys=True))
        os.replace(tmp, Path(path).with_name("run.json"))


@dataclass
class LoadedCheckpoint:
    model: FFCN
    epoch: int
    bank: FeatureBank | None
    run_info: dict | None


def load_checkpoint(path: str | os.PathLike, cfg: RunConfig | None = None) -> LoadedCheckpoint:
    arrays = read_arrays(path)
    for key in ("meta/model", "meta/classes", "meta/epoch"):
        if key not in arrays:
            raise CheckpointError(f"{path}: missing {key}")
    arch = decode_json(arrays["meta/model"])
    run_file = Path(path).with_name("run.json")
    run_info = json.loads(run_file.read_text()) if run_file.exists() else None
    if cfg is None:
        base = RunConfig.from_dict(run_info["config"]) if run_info and "config" in run_info else RunConfig()
        cfg = base.replace(**arch)
    elif arch_dict(cfg) != arch:
        diff = sorted(k for k in arch if arch[k] != getattr(cfg, k, None))
        raise CheckpointError(f"checkpoint architecture differs from the config in {diff}")
    meta = decode_json(arrays["meta/classes"])
    classes = [ActionDescription.from_dict(d) for d in meta["descriptions"]]
    store = store_from_arrays({k: v for k, v in arrays.items() if not k.startswith("meta/")}, cfg.precision)
    reference = FFCN(cfg, classes, meta["ids"], seed=0)
    _check_layout(reference.store, store, path)
    model = FFCN(cfg, classes, meta["ids"], store=store)
    bank_file = Path(f"{path}.bank")
    bank = FeatureBank.from_arrays(read_arrays(bank_file)) if bank_file.exists() else None
    return LoadedCheckpoint(model, int(arrays["meta/epoch"][0]), bank, run_info)


def _check_layout(expected: ParameterStore, got: ParameterStore, path) -> None:
    if set(expected.entries) != set(got.entries):
        extra = sorted(set(got.entries) ^ set(expected.entries))
        raise CheckpointError(f"{path}: parameter paths differ from the configured model, e.g. {extra[:3]}")
    for p, t in expected.entries.items():
        if got[p].shape != t.shape:
            raise CheckpointError(f"{path}: {p} has shape {got[p].shape}, model expects {t.shape}")


# ----------------------------------------------------------------------------
# training

class Trainer:
    """Owns the model, the feature bank and the seeded per-epoch streams of one run.

    Shuffling draws from stream 2 and composition from stream 3 of the run
    seed, each re-derived per epoch, so the two never share random state and
    resuming at any epoch boundary reproduces an uninterrupted run.
    """

    def __init__(self, cfg: RunConfig, train: Sequence[VideoSample], val: Sequence[VideoSample] = (),
                 classes: Sequence[ActionDescription] | None = None, targets: Sequence[int] | None = None,
                 model: FFCN | None = None, class_ids: Sequence[int] | None = None, out_dir: str | os.PathLike | None = None,
                 callback: Callable[[MetricsRecord], None] | None = None):
        cfg.validate()
        self.cfg = cfg
        if model is None:
            if classes is None:
                raise ValueError("either a model or the class descriptions are required")
            model = FFCN(cfg, classes, class_ids)
        self.model = model
        self.train_batch = Batch.from_samples(train, cfg.n_max_noun)
        self.val_batch = Batch.from_samples(val, cfg.n_max_noun) if len(val) else None
        counts = np.bincount(model.local_labels(self.train_batch.labels), minlength=model.num_classes)
        if targets is None:
            targets = [model.class_ids[i] for i in tail_targets(counts, cfg)]
        self.targets = [int(t) for t in targets]
        self.target_idx = [int(i) for i in model.local_labels(self.targets)] if self.targets else []
        self.bank = FeatureBank(cfg.bank_capacity)
        self.epoch = 0
        self.history: list[MetricsRecord] = []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.callback = callback
        self.composed_total = 0

    @property
    def composing(self) -> bool:
        return self.cfg.composition and bool(self.target_idx)

    def step(self, batch: Batch, comp_rng: np.random.Generator, lr: float, m: int | None = None):
        cfg, model = self.cfg, self.model
        store = model.store
        comps = model.decompose(batch)
        scores = model.class_scores(comps)
        labels = model.local_labels(batch.labels)
        logits_c, labels_c = None, np.zeros(0, dtype=np.intp)
        m = cfg.composed_per_batch if m is None else m
        if self.composing:
            if cfg.attached_composition:
                cb = compose_attached(store, comps, batch.descriptions, batch.ids, self.target_idx,
                                      model.classes, m, comp_rng, offset=self.composed_total)
            else:
                bank_update(self.bank, comps.detached(), batch.descriptions, batch.ids)
                cb = compose_batch(store, self.bank, self.target_idx, model.classes, m, comp_rng,
                                   model.n_max, offset=self.composed_total)
            self.composed_total += len(cb)
            if len(cb):
                logits_c, labels_c = model.classify(cb.reps), cb.labels
        loss, l_d, l_c = total_loss(scores, labels, logits_c, labels_c, cfg.lam)
        backward(loss, store.tensors())
        sgd_step(store, lr, cfg.momentum, cfg.weight_decay)
        return float(l_d.data), (None if l_c is None else float(l_c.data))

    def run_epoch(self, batch_size: int | None = None, lr: float | None = None,
                  composed_per_epoch: int | None = None) -> MetricsRecord:
        cfg, e = self.cfg, self.epoch
        bs = batch_size or cfg.batch_size
        lr = cfg.lr_at(e) if lr is None else lr
        order = _rng(cfg.seed, 2, e).permutation(len(self.train_batch))
        comp_rng = _rng(cfg.seed, 3, e)
        n_batches = math.ceil(len(order) / bs)
        if composed_per_epoch is not None:
            # spread an exact per-epoch total over the batches
            per = np.diff(np.linspace(0, composed_per_epoch, n_batches + 1).round().astype(int))
        else:
            per = [None] * n_batches
        ld, lc = [], []
        for b in range(n_batches):
            batch = self.train_batch.subset(order[b * bs:(b + 1) * bs])
            d, c = self.step(batch, comp_rng, lr, None if per[b] is None else int(per[b]))
            ld.append(d)
            if c is not None:
                lc.append(c)
        self.epoch += 1
        rec = self.evaluate(self.epoch)
        rec.L_d = float(np.mean(ld))
        rec.L_c = float(np.mean(lc)) if lc else None
        rec.lr = float(lr)
        self.history.append(rec)
        log.info(rec.format())
        if self.out_dir is not None:
            self.save()
        if self.callback is not None:
            self.callback(rec)
        return rec

    def evaluate(self, epoch: int) -> MetricsRecord:
        if self.val_batch is None:
            return MetricsRecord(epoch)
        return evaluate_batch(self.model, self.val_batch, tail=self.targets, epoch=epoch)

    def fit(self, epochs: int | None = None) -> list[MetricsRecord]:
        epochs = self.cfg.epochs if epochs is None else epochs
        if self.out_dir is not None and self.epoch == 0:
            self.save()
        while self.epoch < epochs:
            self.run_epoch()
        return self.history

    # ----- persistence --------------------------------------------------
    def run_info(self) -> dict:
        return {"config": self.cfg.to_dict(), "targets": self.targets,
                "history": [r.to_dict() for r in self.history], "composed_total": self.composed_total}

    def save(self, path: str | os.PathLike | None = None) -> Path:
        if path is None:
            if self.out_dir is None:
                raise ValueError("no output directory configured")
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / CKPT_NAME
        bank = self.bank if self.composing and not self.cfg.attached_composition else None
        save_checkpoint(path, self.model, self.epoch, bank, self.run_info())
        return Path(path)

    def resume(self, path: str | os.PathLike) -> None:
        ck = load_checkpoint(path, self.cfg)
        if ck.model.class_ids != self.model.class_ids:
            raise CheckpointError("checkpoint classes differ from the training classes")
        self.model = ck.model
        self.epoch = ck.epoch
        if ck.bank is not None:
            self.bank = ck.bank
        if ck.run_info:
            self.history = [MetricsRecord(**r) for r in ck.run_info.get("history", [])][:self.epoch]
            self.composed_total = int(ck.run_info.get("composed_total", 0))


def train(cfg: RunConfig, train_samples: Sequence[VideoSample], val_samples: Sequence[VideoSample],
          classes: Sequence[ActionDescription], out_dir: str | os.PathLike | None = None,
          resume: str | os.PathLike | None = None, targets: Sequence[int] | None = None) -> Trainer:
    trainer = Trainer(cfg, train_samples, val_samples, classes, targets=targets, out_dir=out_dir)
    if resume is not None:
        trainer.resume(resume)
    trainer.fit()
    return trainer


# ----------------------------------------------------------------------------
# few-shot

def fewshot_finetune(model: FFCN, cfg: RunConfig, base_samples: Sequence[VideoSample],
                     novel_train: Sequence[VideoSample], novel_val: Sequence[VideoSample],
                     novel_classes: Sequence[ActionDescription], novel_ids: Sequence[int], k: int,
                     composition: bool = True, seed: int | None = None) -> list[MetricsRecord]:
    """Swap the classifier head to the novel classes and finetune on ``k`` shots each.

    With composition on, every epoch refreshes the bank from a seeded subset
    of base samples and composes exactly ``k`` samples per novel class.
    """
    seed = cfg.seed if seed is None else seed
    counts = np.bincount([s.label for s in novel_train], minlength=max(novel_ids) + 1)
    bad = [c for c in novel_ids if counts[c] != k]
    if bad:
        raise ValueError(f"k={k} but novel classes {bad[:5]} have {[int(counts[c]) for c in bad[:5]]} samples")
    ft_cfg = cfg.replace(seed=seed, composition=composition, attached_composition=False, epochs=cfg.fewshot_epochs,
                         batch_size=cfg.fewshot_batch_size, lr=cfg.fewshot_lr, lr_decay_epochs=[])
    model.replace_classes(novel_classes, novel_ids, np.random.default_rng(np.random.SeedSequence([seed, 4])))
    for p in model.store.velocity:
        model.store.velocity[p][...] = 0
    trainer = Trainer(ft_cfg, novel_train, novel_val, model=model, targets=list(novel_ids))
    base_by_class: dict[int, list[VideoSample]] = {}
    for s in base_samples:
        base_by_class.setdefault(s.label, []).append(s)
    history = []
    for e in range(ft_cfg.epochs):
        if composition:
            rng = _rng(seed, 5, e)
            picks = []
            for c in sorted(base_by_class):
                pool = base_by_class[c]
                n = min(cfg.fewshot_bank_per_class, len(pool))
                picks += [pool[i] for i in sorted(rng.choice(len(pool), n, replace=False))]
            if picks:
                _refresh_bank(model, trainer.bank, Batch.from_samples(picks, cfg.n_max_noun))
        rec = trainer.run_epoch(composed_per_epoch=k * len(novel_ids) if composition else None)
        rec.novel_mean = rec.tail_mean
        history.append(rec)
    return history


def _refresh_bank(model: FFCN, bank: FeatureBank, batch: Batch, chunk: int = 256) -> None:
    with no_grad():
        for start in range(0, len(batch), chunk):
            sub = batch.subset(np.arange(start, min(start + chunk, len(batch))))
            bank_update(bank, model.decompose(sub).detached(), sub.descriptions, sub.ids)
