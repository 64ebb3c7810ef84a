import numpy as np
import pytest

from ffcn.compose import (
    Components, CompositionError, FeatureBank, assemble, assemble_representation, bank_update, classify,
    compose_attached, compose_batch, init_composer, reducer_path, total_loss,
)
from ffcn.config import ConfigError, RunConfig
from ffcn.data import ActionDescription
from ffcn.numerics import ParameterStore, ShapeError, Tensor, backward, cross_entropy, mlp_forward
from ffcn.spatial import ComponentFeature

N_MAX = {"verb": 2, "prep": 2, "noun": 2}
SIMPLE = ActionDescription((0,), (1,), (2,), (("verb", 0), ("prep", 0), ("noun", 0)))
RICH = ActionDescription((0, 1), (0, 1), (3,),
                         (("verb", 0), ("noun", 0), ("prep", 0), ("verb", 1), ("prep", 1)))
NO_PREP = ActionDescription((2,), (), (1, 4), (("verb", 0), ("noun", 0), ("noun", 1)))


def composer(D=4, classes=3, seed=0):
    store = ParameterStore("float64")
    init_composer(store, D, N_MAX, 1, classes, np.random.default_rng(seed))
    store["compose.null_prep"].data[...] = np.arange(1.0, D + 1)
    return store


def comps(rng, B=2, D=4):
    return Components(*(Tensor(rng.standard_normal((B, 2, D))) for _ in range(3)))


def reduce(store, kind, count, x):
    return mlp_forward(store, reducer_path(kind, count), Tensor(x)).data


def test_single_count_layout(rng):
    store = composer()
    c = comps(rng)
    rep = assemble(store, c, SIMPLE).data
    assert rep.shape == (2, 12)
    ref = np.concatenate([reduce(store, "verb", 1, c.verb.data[:, 0]), reduce(store, "prep", 1, c.prep.data[:, 0]),
                          reduce(store, "noun", 1, c.noun.data[:, 0])], axis=1)
    np.testing.assert_allclose(rep, ref, rtol=1e-12)


def test_block_sizes_follow_counts(rng):
    store = ParameterStore("float64")
    init_composer(store, 128, N_MAX, 1, 2, rng)
    c = Components(*(Tensor(rng.standard_normal((1, 2, 128))) for _ in range(3)))
    rep = assemble(store, c, RICH).data[0]
    assert rep.shape == (384,)
    v0, n0, p0 = reduce(store, "verb", 2, c.verb.data[:, 0]), reduce(store, "noun", 1, c.noun.data[:, 0]), \
        reduce(store, "prep", 2, c.prep.data[:, 0])
    assert v0.shape == (1, 64) and n0.shape == (1, 128)
    np.testing.assert_allclose(rep[:64], v0[0], rtol=1e-12)
    np.testing.assert_allclose(rep[64:192], n0[0], rtol=1e-12)
    np.testing.assert_allclose(rep[192:256], p0[0], rtol=1e-12)


def test_zero_reducers_leave_null_block(rng):
    store = composer()
    for p in store.paths("compose.reduce"):
        store[p].data[...] = 0
    rep = assemble(store, comps(rng), NO_PREP).data
    np.testing.assert_array_equal(rep[:, :8], 0)
    np.testing.assert_array_equal(rep[:, 8:], np.tile(np.arange(1.0, 5), (2, 1)))


def test_dimension_law_all_layouts(rng):
    store = composer(D=6)
    c = comps(rng, 3, 6)
    for desc in (SIMPLE, RICH, NO_PREP):
        assert assemble(store, c, desc).shape == (3, 18)


def test_indivisible_width_rejected(rng):
    with pytest.raises(ShapeError):
        init_composer(ParameterStore("float64"), 5, N_MAX, 1, 2, rng)
    with pytest.raises(ConfigError):
        RunConfig(D=5)


def test_assemble_representation_matches_batched(rng):
    store = composer()
    c = comps(rng, 1)
    parts = [ComponentFeature(k, i, Tensor(c.get(k).data[0, i])) for k, i in RICH.order]
    single = assemble_representation(store, parts, RICH).data
    np.testing.assert_allclose(single, assemble(store, c, RICH).data[0], rtol=1e-14)
    with pytest.raises(CompositionError):
        assemble_representation(store, parts[:-1], RICH)


def test_classify_shared_and_oracle(rng):
    store = composer()
    rep = Tensor(rng.standard_normal((2, 12)))
    a, b = classify(store, rep).data, classify(store, rep).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, mlp_forward(store, "cls", rep).data, rtol=1e-14)
    for p in store.paths("cls"):
        if p.endswith("bias"):
            store[p].data[...] = 0
    z = classify(store, Tensor(np.zeros((1, 12)))).data
    np.testing.assert_array_equal(z, 0)


def test_bank_update_counts_and_ring():
    bank = FeatureBank(capacity=1)
    arrays = {k: np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3) + i for i, k in enumerate(("verb", "prep", "noun"))}
    n = bank_update(bank, arrays, [RICH, SIMPLE], ["a", "b"])
    assert n == 5 + 3
    assert bank.size("verb", 0) == 1
    vec, src = bank.bucket("verb", 0)[0]
    assert src == "b"
    np.testing.assert_array_equal(vec, arrays["verb"][1, 0])
    arrays["verb"][1, 0] = -1
    assert bank.bucket("verb", 0)[0][0][0] != -1


def test_bank_head_order_follows_description():
    bank = FeatureBank()
    heads = np.array([[[1.0] * 3, [2.0] * 3]])
    arrays = {k: heads for k in ("verb", "prep", "noun")}
    bank_update(bank, arrays, [RICH], ["x"])
    assert bank.bucket("verb", 0)[0][0][0] == 1 and bank.bucket("verb", 1)[0][0][0] == 2


def test_bank_array_roundtrip(rng):
    bank = FeatureBank(3)
    for i in range(5):
        bank.add("noun", 2, rng.standard_normal(4), f"s{i}")
    back = FeatureBank.from_arrays(bank.to_arrays())
    assert back.capacity == 3 and back.keys() == bank.keys()
    for (v, s), (w, t) in zip(bank.bucket("noun", 2), back.bucket("noun", 2)):
        np.testing.assert_array_equal(v, w)
        assert s == t


def stocked_bank(rng, D=4, descs=(SIMPLE, RICH, NO_PREP)):
    bank = FeatureBank()
    for i in range(4):
        arrays = {k: rng.standard_normal((len(descs), 2, D)) for k in ("verb", "prep", "noun")}
        bank_update(bank, arrays, list(descs), [f"s{i}-{j}" for j in range(len(descs))])
    return bank


def test_compose_empty_and_errors(rng):
    store = composer()
    bank = stocked_bank(rng)
    out = compose_batch(store, bank, [0], [SIMPLE], 0, rng, N_MAX)
    assert len(out) == 0 and out.reps is None
    with pytest.raises(CompositionError):
        compose_batch(store, bank, [], [SIMPLE], 3, rng, N_MAX)


def test_compose_single_target(rng):
    store = composer()
    out = compose_batch(store, stocked_bank(rng), [1], [SIMPLE, RICH], 10, rng, N_MAX)
    assert len(out) == 10 and out.reps.shape == (10, 12)
    assert set(out.labels.tolist()) == {1}
    assert all(s.vec.shape == (12,) for s in out.samples())


def test_compose_round_robin_and_skip(rng):
    store = composer()
    unseen = ActionDescription((5,), (), (6,), (("verb", 0), ("noun", 0)))
    out = compose_batch(store, stocked_bank(rng), [0, 2, 3], [SIMPLE, RICH, NO_PREP, unseen], 5, rng, N_MAX, offset=1)
    assert out.labels.tolist() == [2, 0, 2, 0, 2]


def test_compose_provenance_audit(rng):
    store = composer()
    bank = stocked_bank(rng)
    descs = [SIMPLE, RICH, NO_PREP]
    out = compose_batch(store, bank, [0, 1, 2], descs, 9, rng, N_MAX)
    for label, prov, rep in zip(out.labels, out.provenance, out.reps.data):
        desc = descs[label]
        assert sorted((k, v) for k, v, _ in prov) == sorted((k, v) for k, _, v in desc.components())
        sources = {(k, v): {s for _, s in bank.bucket(k, v)} for k, _, v in desc.components()}
        assert all(src in sources[(k, v)] for k, v, src in prov)
        assert rep.shape == (12,)


def test_compose_reps_match_assembly_of_drawn_features(rng):
    store = composer()
    bank = FeatureBank()
    bank.add("verb", 0, np.full(4, 1.0), "a")
    bank.add("prep", 1, np.full(4, 2.0), "a")
    bank.add("noun", 2, np.full(4, 3.0), "a")
    out = compose_batch(store, bank, [0], [SIMPLE], 2, rng, N_MAX)
    c = Components(*(Tensor(np.full((1, 2, 4), v)) for v in (1.0, 2.0, 3.0)))
    np.testing.assert_allclose(out.reps.data[1], assemble(store, c, SIMPLE).data[0], rtol=1e-14)


def test_composed_loss_does_not_reach_bank_sources(rng):
    store = composer()
    src = Tensor(rng.standard_normal((1, 2, 4)), requires_grad=True)
    bank = FeatureBank()
    bank_update(bank, {"verb": src.data, "prep": src.data, "noun": src.data}, [SIMPLE], ["a"])
    out = compose_batch(store, bank, [0], [SIMPLE], 1, rng, N_MAX)
    loss = cross_entropy(classify(store, out.reps), out.labels).mean()
    backward(loss, store.tensors())
    assert src.grad is None or not np.any(src.grad)
    assert np.any(store[f"{reducer_path('verb', 1)}.0.weight"].grad)


def test_compose_attached_flows_gradient(rng):
    store = composer()
    x = Tensor(rng.standard_normal((2, 2, 4)), requires_grad=True)
    c = Components(x, x * 2.0, x * 3.0)
    out = compose_attached(store, c, [SIMPLE, RICH], ["a", "b"], [0], [SIMPLE], 3, rng)
    assert out.reps.shape == (3, 12)
    backward(cross_entropy(classify(store, out.reps), out.labels).mean(), store.tensors() + [x])
    assert np.any(x.grad)


def test_total_loss_cases(rng):
    logits = Tensor(rng.standard_normal((4, 3)))
    labels = np.array([0, 1, 2, 0])
    l, l_d, l_c = total_loss(logits, labels, None, [], 0.1)
    assert l is l_d and l_c is None
    l, l_d, l_c = total_loss(logits, labels, logits, labels, 1.0)
    assert l.data == 2 * l_d.data
    l, l_d, _ = total_loss(logits, labels, logits, labels, 0.0)
    assert l.data == l_d.data
    losses = [total_loss(logits, labels, Tensor(logits.data * 3), labels, lam)[0].data for lam in (0, 0.1, 0.5, 2)]
    assert all(a <= b for a, b in zip(losses, losses[1:]))
    with pytest.raises(ValueError):
        total_loss(logits, labels, None, [], -0.1)
