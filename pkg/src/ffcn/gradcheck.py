"""Finite-difference audit of every parameter gradient on a tiny float64 model."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .compose import FeatureBank, bank_update, compose_batch, total_loss
from .config import RunConfig
from .model import FFCN, Batch
from .numerics import Tensor, backward, no_grad
from .synth import SynthDataset, make_splits

TOLERANCE = 1e-4
EPS = 1e-5


@dataclass
class GradcheckReport:
    per_path: dict[str, float]
    seconds: float
    tolerance: float = TOLERANCE
    loss: float = 0.0
    checked: int = 0
    per_module: dict[str, float] = field(init=False)

    def __post_init__(self):
        self.per_module = {}
        for path, err in self.per_path.items():
            mod = path.split(".")[0]
            self.per_module[mod] = max(self.per_module.get(mod, 0.0), err)

    @property
    def max_error(self) -> float:
        return max(self.per_path.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tolerance for e in self.per_path.values())

    def failing(self) -> list[str]:
        return [p for p, e in self.per_path.items() if not (np.isfinite(e) and e < self.tolerance)]

    def format(self) -> str:
        lines = [f"{mod:10s} max_rel_err={err:.3e}" for mod, err in sorted(self.per_module.items())]
        lines.append(f"paths={len(self.per_path)} entries={self.checked} max={self.max_error:.3e} "
                     f"time={self.seconds:.1f}s {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def tiny_config(cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    return cfg.replace(precision="float64", T=4, N=3, hands=1, D=8, appearance_dim=4, num_verbs=3,
                       num_preps=2, num_nouns=3, num_classes=8, tail_classes=3, fewshot_base_classes=4,
                       head_count=6, tail_count=2, val_per_class=1, bank_capacity=4)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic))


class _Problem:
    """A fixed batch, fixed composed inputs and a scalar loss as a function of the parameters."""

    def __init__(self, cfg: RunConfig, batch_size: int = 4, composed: int = 3, lam: float = 0.5):
        ds = SynthDataset.build(cfg)
        splits = make_splits(ds.classes, "longtail", cfg.seed, cfg=cfg)
        samples = ds.render(splits.manifests["train"])
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
        tail = set(splits.tail)
        # include tail-class samples so their components are banked
        pick = [i for i, s in enumerate(samples) if s.label in tail][:batch_size // 2]
        rest = [i for i in rng.permutation(len(samples)) if i not in pick]
        pick += rest[:batch_size - len(pick)]
        self.model = FFCN(cfg, ds.descriptions, seed=cfg.seed)
        # zero biases put missing-slot rows exactly on the ReLU kink; nudge them off it
        for path, t in self.model.store.entries.items():
            if path.endswith("bias") or path == "compose.null_prep":
                t.data += 0.1 * rng.standard_normal(t.shape)
        self.batch = Batch.from_samples([samples[i] for i in pick], cfg.n_max_noun)
        self.labels = self.model.local_labels(self.batch.labels)
        self.lam = lam
        bank = FeatureBank(cfg.bank_capacity)
        with no_grad():
            bank_update(bank, self.model.decompose(self.batch).detached(), self.batch.descriptions, self.batch.ids)
        self.bank, self.composed, self.targets = bank, composed, sorted(tail)
        self.comp_seed = cfg.seed

    def loss(self) -> Tensor:
        comps = self.model.decompose(self.batch)
        scores = self.model.class_scores(comps)
        cb = compose_batch(self.model.store, self.bank, self.targets, self.model.classes, self.composed,
                           np.random.default_rng(self.comp_seed), self.model.n_max)
        logits_c = self.model.classify(cb.reps) if len(cb) else None
        return total_loss(scores, self.labels, logits_c, cb.labels, self.lam)[0]


def gradcheck(cfg: RunConfig | None = None, max_entries: int = 6, eps: float = EPS, seed: int = 0,
              problem: _Problem | None = None) -> GradcheckReport:
    """Compare backprop against central differences for every parameter path.

    Each path is probed along one random unit direction covering all of its
    entries plus up to ``max_entries`` individual coordinates.
    """
    start = time.perf_counter()
    cfg = tiny_config(cfg)
    prob = problem or _Problem(cfg)
    store = prob.model.store
    if store.dtype != np.float64:
        raise ValueError("gradcheck needs a float64 model")
    loss = prob.loss()
    backward(loss, store.tensors())
    grads = {p: t.grad.copy() for p, t in store.entries.items()}
    store.zero_grad()

    def f() -> float:
        with no_grad():
            return float(prob.loss().data)

    rng = np.random.default_rng(seed)
    per_path: dict[str, float] = {}
    checked = 0
    for path, t in store.entries.items():
        w = t.data
        g = grads[path]
        worst = 0.0
        direction = rng.standard_normal(w.shape)
        direction /= np.linalg.norm(direction) or 1.0
        probes = [("dir", direction)]
        flat = rng.choice(w.size, size=min(max_entries, w.size), replace=False)
        probes += [("idx", int(i)) for i in flat]
        for kind, probe in probes:
            saved = w.copy()
            if kind == "dir":
                w += eps * probe
                up = f()
                w[...] = saved - eps * probe
                down = f()
                analytic = float(np.sum(g * probe))
            else:
                w.flat[probe] += eps
                up = f()
                w.flat[probe] = saved.flat[probe] - eps
                down = f()
                analytic = float(g.flat[probe])
            w[...] = saved
            worst = max(worst, relative_error(analytic, (up - down) / (2 * eps)))
            checked += 1
        per_path[path] = worst
    return GradcheckReport(per_path, time.perf_counter() - start, loss=float(loss.data), checked=checked)
