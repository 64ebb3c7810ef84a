import numpy as np
import pytest

from ffcn.config import RunConfig
from ffcn.model import FFCN, Batch
from ffcn.numerics import CheckpointError, read_arrays
from ffcn.synth import SynthDataset, make_splits
from ffcn.training import (
    MetricsRecord, Trainer, evaluate_batch, fewshot_finetune, load_checkpoint, save_checkpoint, tail_targets,
)


@pytest.fixture(scope="module")
def small():
    cfg = RunConfig(precision="float64", T=8, N=3, D=16, appearance_dim=8, num_verbs=4, num_preps=2,
                    num_nouns=4, num_classes=8, tail_classes=3, fewshot_base_classes=4, head_count=24,
                    tail_count=4, val_per_class=4, batch_size=16, epochs=3, composed_per_batch=4, lr=0.02)
    ds = SynthDataset.build(cfg)
    sp = make_splits(ds.classes, "longtail", cfg.seed, cfg=cfg)
    return cfg, ds, sp, ds.render(sp.manifests["train"]), ds.render(sp.manifests["val"])


def trainer(small, out_dir=None, **over):
    cfg, ds, sp, tr, va = small
    return Trainer(cfg.replace(**over), tr, va, ds.descriptions, targets=sp.tail, out_dir=out_dir)


def stores_equal(a, b):
    assert set(a.entries) == set(b.entries)
    for p in a.entries:
        np.testing.assert_array_equal(a[p].data, b[p].data, err_msg=p)


def test_lr_schedule():
    cfg = RunConfig(lr=0.05, lr_decay_epochs=[15, 20])
    assert [cfg.lr_at(e) for e in (0, 14, 15, 19, 20)] == [0.05, 0.05, 0.05 / 10, 0.05 / 10, 0.05 / 100]


def test_metrics_record_validation():
    assert "top1=0.5000" in MetricsRecord(1, top1=0.5).format()
    with pytest.raises(ValueError):
        MetricsRecord(1, top1=1.5)


def test_tail_targets_policies():
    counts = [50, 40, 3, 30, 2]
    assert tail_targets(counts, RunConfig(tail_classes=2)) == [2, 4]
    assert tail_targets(counts, RunConfig(tail_threshold=35)) == [2, 3, 4]


def test_zero_epochs_checkpoint_is_initialisation(small, tmp_path):
    t = trainer(small, tmp_path, epochs=0)
    t.fit()
    ck = load_checkpoint(tmp_path / "model.ckpt")
    assert ck.epoch == 0
    stores_equal(ck.model.store, FFCN(small[0], small[1].descriptions).store)


def test_lambda_zero_matches_composition_off(small, tmp_path):
    a = trainer(small, tmp_path / "a", lam=0.0)
    b = trainer(small, tmp_path / "b", composition=False)
    a.fit()
    b.fit()
    assert a.composed_total > 0 and b.composed_total == 0
    ra, rb = read_arrays(tmp_path / "a" / "model.ckpt"), read_arrays(tmp_path / "b" / "model.ckpt")
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    assert set(ra) == set(rb)


def test_loss_decreases(small):
    t = trainer(small, epochs=5)
    hist = t.fit()
    assert all(h.L_d < hist[0].L_d for h in hist[1:])
    assert hist[-1].L_d < 0.8 * hist[0].L_d
    assert all(h.L_c is not None for h in hist)


def test_overfit_tiny_subset(small):
    cfg, ds, sp, tr, _ = small
    sub = [s for s in tr if s.label in (0, 1, 2)][:24]
    t = Trainer(cfg.replace(epochs=60, lr=0.02, batch_size=8, composition=False), sub, sub,
                [ds.classes[c].description for c in (0, 1, 2)], class_ids=[0, 1, 2], targets=[])
    assert t.fit()[-1].top1 >= 0.99


def test_random_init_chance_level(default_ds):
    cfg = default_ds.cfg.replace(D=32)
    sp = make_splits(default_ds.classes, "longtail", 0, cfg=cfg)
    val = Batch.from_samples(default_ds.render(sp.manifests["val"]), cfg.n_max_noun)
    rec = evaluate_batch(FFCN(cfg, default_ds.descriptions), val)
    assert abs(rec.top1 - 1 / 40) <= 0.015
    again = evaluate_batch(FFCN(cfg, default_ds.descriptions), val)
    assert again == rec


def test_checkpoint_roundtrip_evaluation(small, tmp_path):
    t = trainer(small, epochs=2)
    t.fit()
    before = t.evaluate(2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, t.model, 2, t.bank, t.run_info())
    ck = load_checkpoint(path)
    after = evaluate_batch(ck.model, t.val_batch, tail=t.targets, epoch=2)
    assert after == before
    assert ck.bank is not None and len(ck.bank) == len(t.bank)
    assert ck.run_info["composed_total"] == t.composed_total


def test_checkpoint_architecture_mismatch(small, tmp_path):
    t = trainer(small)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, t.model, 0)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, small[0].replace(D=24))


def test_resume_reproduces_uninterrupted_run(small, tmp_path):
    full = trainer(small, tmp_path / "full", epochs=3)
    full.fit()
    part = trainer(small, tmp_path / "part", epochs=1)
    part.fit()
    resumed = trainer(small, tmp_path / "resumed", epochs=3)
    resumed.resume(tmp_path / "part" / "model.ckpt")
    assert resumed.epoch == 1
    resumed.fit()
    stores_equal(full.model.store, resumed.model.store)
    assert [h.to_dict() for h in full.history] == [h.to_dict() for h in resumed.history]


def test_runs_reproducible(small):
    a, b = trainer(small, epochs=2), trainer(small, epochs=2)
    a.fit()
    b.fit()
    stores_equal(a.model.store, b.model.store)
    assert [h.to_dict() for h in a.history] == [h.to_dict() for h in b.history]


def test_exact_composed_count_per_epoch(small):
    t = trainer(small)
    t.run_epoch(composed_per_epoch=7)
    assert t.composed_total == 7


def test_attached_composition_trains(small):
    t = trainer(small, attached_composition=True, epochs=1)
    rec = t.fit()[-1]
    assert rec.L_c is not None and t.composed_total > 0 and len(t.bank) == 0


@pytest.fixture(scope="module")
def fewshot_setup(small):
    cfg = small[0].replace(fewshot_base_count=12, fewshot_pool=6, fewshot_epochs=2, fewshot_batch_size=8,
                           fewshot_bank_per_class=3, fewshot_lr=0.02)
    ds = SynthDataset.build(cfg)
    sp = make_splits(ds.classes, "fewshot", 0, k=3, cfg=cfg)
    base = [ds.classes[c].description for c in sp.base]
    t = Trainer(cfg.replace(composition=False, epochs=1), ds.render(sp.manifests["base_train"]), [],
                base, class_ids=sp.base, targets=[])
    t.fit()
    return cfg, ds, sp, t.model


def test_fewshot_finetune(fewshot_setup):
    cfg, ds, sp, model = fewshot_setup
    from ffcn.experiments import clone_model
    novel = [ds.classes[c].description for c in sp.novel]
    args = (cfg, ds.render(sp.manifests["base_train"]), ds.render(sp.manifests["novel_train"]),
            ds.render(sp.manifests["novel_val"]), novel, sp.novel)
    hist = fewshot_finetune(clone_model(model), *args, 3, composition=True)
    assert len(hist) == 2 and all(h.novel_mean is not None and h.L_c is not None for h in hist)
    off = fewshot_finetune(clone_model(model), *args, 3, composition=False)
    assert all(h.L_c is None for h in off)
    with pytest.raises(ValueError):
        fewshot_finetune(clone_model(model), *args, 5)
