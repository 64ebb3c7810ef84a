"""Command-line entry point: ``ffcn <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, format_config, load_config
from .data import ActionDescription, ValidationError, read_manifest, read_records, write_manifest, write_records
from .numerics import CheckpointError

log = logging.getLogger("ffcn")

SAMPLES = "samples.jsonl"
CLASSES = "classes.json"


def _config(path: str | None) -> RunConfig:
    return load_config(path, os.environ)


# ----------------------------------------------------------------------------
# dataset directories

def cmd_gen_data(args) -> int:
    from .synth import SynthDataset, make_splits
    cfg = _config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = SynthDataset.build(cfg)
    if args.mode == "fewshot":
        splits = make_splits(ds.classes, "fewshot", cfg.seed, k=cfg.fewshot_pool, cfg=cfg)
        manifests = dict(splits.manifests)
        for k in sorted({5, 10, cfg.fewshot_pool}):
            if k <= cfg.fewshot_pool:
                manifests[f"novel_train_{k}"] = make_splits(ds.classes, "fewshot", cfg.seed, k=k, cfg=cfg).manifests["novel_train"]
        del manifests["novel_train"]
    else:
        splits = make_splits(ds.classes, args.mode, cfg.seed, cfg=cfg)
        manifests = splits.manifests
    refs = {r.id: r for refs in manifests.values() for r in refs}
    n = write_records(out / SAMPLES, ds.render(sorted(refs.values(), key=lambda r: r.id)))
    for name, rs in manifests.items():
        write_manifest(out / f"{name}.manifest", [r.id for r in rs])
    meta = {"mode": args.mode, "seed": cfg.seed, "tail": splits.tail, "base": splits.base, "novel": splits.novel,
            "classes": [{"id": c.class_id, "name": c.name, "description": c.description.to_dict()}
                        for c in ds.classes]}
    (out / CLASSES).write_text(json.dumps(meta, indent=1))
    (out / "config.txt").write_text(format_config(cfg))
    print(f"wrote {n} samples, {len(manifests)} manifests to {out}")
    return 0


class DataDir:
    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        if not (self.path / CLASSES).exists():
            raise FileNotFoundError(f"{self.path} is not a dataset directory (no {CLASSES})")
        self.meta = json.loads((self.path / CLASSES).read_text())
        self.descriptions = {c["id"]: ActionDescription.from_dict(c["description"]) for c in self.meta["classes"]}
        self._samples = None

    @property
    def samples(self):
        if self._samples is None:
            self._samples = {s.id: s for s in read_records(self.path / SAMPLES)}
        return self._samples

    def split(self, name: str):
        return self.load_manifest(self.path / f"{name}.manifest")

    def load_manifest(self, path):
        ids = read_manifest(path)
        missing = [i for i in ids if i not in self.samples]
        if missing:
            raise ValidationError(f"{path}: {len(missing)} ids not in {SAMPLES}, e.g. {missing[0]!r}")
        return [self.samples[i] for i in ids]


def _train_val_names(data: DataDir) -> tuple[str, str]:
    return ("base_train", "base_val") if data.meta["mode"] == "fewshot" else ("train", "val")


# ----------------------------------------------------------------------------
# training and evaluation

def cmd_train(args) -> int:
    from .training import Trainer
    cfg = _config(args.config)
    data = DataDir(args.data)
    tr_name, va_name = _train_val_names(data)
    train, val = data.split(tr_name), data.split(va_name)
    ids = sorted({s.label for s in train})
    targets = [c for c in data.meta["tail"] if c in ids] if data.meta["mode"] == "longtail" else None
    trainer = Trainer(cfg, train, val, [data.descriptions[c] for c in ids], class_ids=ids, targets=targets,
                      out_dir=args.out, callback=lambda r: print(r.format(), flush=True))
    if args.resume:
        trainer.resume(args.resume)
    trainer.fit()
    info = trainer.run_info()
    info["data"] = str(Path(args.data).resolve())
    (Path(args.out) / "run.json").write_text(json.dumps(info, indent=1, sort_keys=True))
    print(f"checkpoint: {Path(args.out) / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    from .model import Batch
    from .training import evaluate_batch, load_checkpoint
    ck = load_checkpoint(args.ckpt)
    manifest = Path(args.manifest)
    data = DataDir(args.data or manifest.parent)
    samples = data.load_manifest(manifest)
    labels = {s.label for s in samples}
    unknown = sorted(labels - set(ck.model.class_ids))
    if unknown:
        print(f"error: manifest classes {unknown[:5]} are not among the checkpoint's "
              f"{ck.model.num_classes} classes", file=sys.stderr)
        return 2
    tail = (ck.run_info or {}).get("targets") or []
    rec = evaluate_batch(ck.model, Batch.from_samples(samples, ck.model.cfg.n_max_noun), tail=tail, epoch=ck.epoch)
    print(rec.format())
    if args.json:
        print(json.dumps(rec.to_dict()))
    return 0


def cmd_fewshot(args) -> int:
    from .training import fewshot_finetune, load_checkpoint
    ck = load_checkpoint(args.base_ckpt)
    data_path = args.data or (ck.run_info or {}).get("data")
    if not data_path:
        print("error: --data is required when the checkpoint does not record its dataset", file=sys.stderr)
        return 2
    data = DataDir(data_path)
    if data.meta["mode"] != "fewshot":
        print(f"error: {data_path} holds a {data.meta['mode']} split, not a fewshot one", file=sys.stderr)
        return 2
    manifest = data.path / f"novel_train_{args.k}.manifest"
    if not manifest.exists():
        print(f"error: no {args.k}-shot manifest in {data_path}", file=sys.stderr)
        return 2
    cfg = ck.model.cfg if args.config is None else _config(args.config)
    novel = data.meta["novel"]
    hist = fewshot_finetune(ck.model, cfg, data.split("base_train"), data.load_manifest(manifest),
                            data.split("novel_val"), [data.descriptions[c] for c in novel], novel, args.k,
                            composition=not args.no_composition, seed=cfg.seed)
    for rec in hist:
        print(rec.format())
    if args.out:
        from .training import save_checkpoint
        Path(args.out).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(args.out) / "model.ckpt", ck.model, len(hist),
                        run_info={"config": cfg.to_dict(), "targets": novel,
                                  "history": [r.to_dict() for r in hist], "data": str(data.path.resolve())})
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck
    report = gradcheck(_config(args.config))
    print(report.format())
    if not report.passed:
        for p in report.failing():
            print(f"FAIL {p} rel_err={report.per_path[p]:.3e}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    from .experiments import ARMS, ablation, summarize
    cfg = _config(args.config)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    bad = [a for a in arms if a not in ARMS]
    if bad:
        print(f"error: unknown arms {bad}; choose from {sorted(ARMS)}", file=sys.stderr)
        return 2
    seeds = [int(s) for s in args.seeds.split(",")]
    results = ablation(cfg, arms, seeds)
    for arm, stats in summarize(results).items():
        print(f"{arm:14s} top1={stats['top1']:.4f} tail={stats['tail']:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps({a: [{"seed": r.seed, **r.final.to_dict()} for r in rs]
                                              for a, rs in results.items()}, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ffcn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset split")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--mode", choices=["longtail", "compositional", "fewshot"], default="longtail")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--data", help="dataset directory (default: the manifest's directory)")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fewshot", help="finetune a base checkpoint on novel classes")
    f.add_argument("--base-ckpt", required=True)
    f.add_argument("--k", type=int, choices=[5, 10], required=True)
    f.add_argument("--data")
    f.add_argument("--config")
    f.add_argument("--out")
    f.add_argument("--no-composition", action="store_true")
    f.set_defaults(func=cmd_fewshot)

    c = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    c.add_argument("--config")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train ablation arms on the longtail split")
    a.add_argument("--config")
    a.add_argument("--arms", default="no-comp,comp")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
