"""Ablation and few-shot protocols shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import RunConfig
from .model import FFCN
from .synth import Splits, SynthDataset, make_splits
from .training import MetricsRecord, Trainer, fewshot_finetune

log = logging.getLogger(__name__)

ARMS = {
    "no-comp": dict(composition=False),
    "comp": dict(composition=True),
    "attached": dict(composition=True, attached_composition=True),
    "per-head-tcn": dict(composition=True, shared_tcn=False),
}


def arm_config(cfg: RunConfig, arm: str) -> RunConfig:
    try:
        return cfg.replace(**ARMS[arm])
    except KeyError:
        raise ValueError(f"unknown arm {arm!r}; choose from {sorted(ARMS)}") from None


@dataclass
class ArmResult:
    arm: str
    seed: int
    final: MetricsRecord
    tail: list[int]
    history: list[MetricsRecord] = field(default_factory=list)


def longtail_run(cfg: RunConfig, arm: str, seed: int, ds: SynthDataset | None = None,
                 splits: Splits | None = None) -> ArmResult:
    """Train one arm on the longtail split of the dataset built from ``seed``."""
    run_cfg = arm_config(cfg, arm).replace(seed=seed)
    ds = ds or SynthDataset.build(run_cfg)
    splits = splits or make_splits(ds.classes, "longtail", seed, cfg=run_cfg)
    trainer = Trainer(run_cfg, ds.render(splits.manifests["train"]), ds.render(splits.manifests["val"]),
                      ds.descriptions, targets=splits.tail)
    trainer.fit()
    log.info("arm=%s seed=%d %s", arm, seed, trainer.history[-1].format())
    return ArmResult(arm, seed, trainer.history[-1], splits.tail, trainer.history)


def ablation(cfg: RunConfig, arms: Sequence[str], seeds: Sequence[int]) -> dict[str, list[ArmResult]]:
    out: dict[str, list[ArmResult]] = {a: [] for a in arms}
    for seed in seeds:
        ds = SynthDataset.build(cfg.replace(seed=seed))
        splits = make_splits(ds.classes, "longtail", seed, cfg=cfg)
        for arm in arms:
            out[arm].append(longtail_run(cfg, arm, seed, ds, splits))
    return out


def summarize(results: dict[str, list[ArmResult]]) -> dict[str, dict[str, float]]:
    return {arm: {"top1": float(np.mean([r.final.top1 for r in rs])),
                  "tail": float(np.mean([r.final.tail_mean for r in rs]))} for arm, rs in results.items()}


def tail_breadth(base: ArmResult, treated: ArmResult) -> float:
    """Fraction of tail classes whose accuracy under ``treated`` is at least that under ``base``."""
    b, t = base.final.per_class, treated.final.per_class
    return float(np.mean([t[c] >= b[c] for c in base.tail]))


# ----------------------------------------------------------------------------
# few-shot

@dataclass
class FewshotResult:
    seed: int
    k: int
    composition: bool
    novel_mean: float
    history: list[MetricsRecord]


def fewshot_base(cfg: RunConfig, seed: int, ds: SynthDataset | None = None,
                 splits: Splits | None = None) -> tuple[Trainer, SynthDataset, Splits]:
    """Train the decomposition-only model on the base classes of the fewshot split."""
    run_cfg = cfg.replace(seed=seed, composition=False)
    ds = ds or SynthDataset.build(run_cfg)
    splits = splits or make_splits(ds.classes, "fewshot", seed, k=cfg.fewshot_pool, cfg=run_cfg)
    base_ids = splits.base
    trainer = Trainer(run_cfg, ds.render(splits.manifests["base_train"]), ds.render(splits.manifests["base_val"]),
                      [ds.classes[c].description for c in base_ids], class_ids=base_ids, targets=[])
    trainer.fit()
    log.info("fewshot base seed=%d %s", seed, trainer.history[-1].format())
    return trainer, ds, splits


def fewshot_run(cfg: RunConfig, base_model: FFCN, ds: SynthDataset, splits: Splits, k: int,
                composition: bool, seed: int) -> FewshotResult:
    """Finetune a copy of ``base_model`` on ``k`` shots per novel class."""
    model = clone_model(base_model)
    kspl = make_splits(ds.classes, "fewshot", seed, k=k, cfg=cfg.replace(seed=seed))
    base_samples = ds.render(splits.manifests["base_train"])
    novel_train = ds.render(kspl.manifests["novel_train"])
    novel_val = ds.render(kspl.manifests["novel_val"])
    novel = kspl.novel
    hist = fewshot_finetune(model, cfg.replace(seed=seed), base_samples, novel_train, novel_val,
                            [ds.classes[c].description for c in novel], novel, k, composition, seed)
    log.info("fewshot seed=%d k=%d comp=%s %s", seed, k, composition, hist[-1].format())
    return FewshotResult(seed, k, composition, hist[-1].novel_mean, hist)


def clone_model(model: FFCN) -> FFCN:
    from .numerics import ParameterStore
    store = ParameterStore(model.store.precision)
    for p, t in model.store.entries.items():
        store.add(p, t.data.copy())
        store.velocity[p] = model.store.velocity[p].copy()
    store.step_count = model.store.step_count
    return FFCN(model.cfg, model.classes, model.class_ids, store=store)
