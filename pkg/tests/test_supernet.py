import math

import numpy as np
import pytest

from autornn.activations import ActivationKind as A, apply
from autornn.genotype import (MacroConfig, NodeSemantics, chain_genotype, io_param_count, leaf_set,
                              param_count, random_genotype)
from autornn.numkernel import Adam, Rng, Tape
from autornn.supernet import (Batch, BankRegistry, ChildModel, child_extract, extracted_size,
                              init_bank, w_key)

from conftest import grad_rel_err

V, F = 7, 5


def _macro(**kw):
    base = dict(n_blocks=6, embed_size=4, hidden_size=3, unrestricted_dims=True)
    base.update(kw)
    return MacroConfig(**base)


def _batch(rng, rows=3, length=5):
    ids = rng.integers(0, V, size=(rows, length))
    mask = np.ones((rows, length))
    mask[0, 3:] = 0  # one shorter row
    ids[0, 3:] = 0
    return Batch(ids, mask, rng.normal(size=(rows, F)), list(range(rows)))


def _np_cell(g, p, x, h, sem="plain"):
    """Independent numpy evaluation of one cell step."""
    def gate(z_h, z_c, src):
        return z_h if sem == "plain" else (1 / (1 + np.exp(-z_c))) * z_h + (1 - 1 / (1 + np.exp(-z_c))) * src
    s = {}
    z = x @ p["cell.w_x"] + h @ p["cell.w_h.1.0"]
    zc = (x @ p["cell.w_x.gate"] + h @ p["cell.w_h.1.0.gate"]) if sem == "gated" else None
    s[1] = gate(apply(g.act(1), z), zc, h)
    for i in range(2, g.n_blocks + 1):
        j = g.prev(i)
        zc = s[j] @ p[f"cell.w_h.{i}.{j}.gate"] if sem == "gated" else None
        s[i] = gate(apply(g.act(i), s[j] @ p[f"cell.w_h.{i}.{j}"]), zc, s[j])
    return np.mean([s[i] for i in sorted(leaf_set(g))], axis=0)


def test_bank_layout_plain_and_gated():
    bank = init_bank(6, _macro(), Rng(0), V, F)
    assert len(bank.connection_keys()) == 2 + 15
    assert {"embed", "proj", "feat_proj"} <= set(bank.params)
    assert bank.params["feat_proj"].shape == (F, 4)
    assert all(np.abs(v).max() <= 0.04 for v in bank.params.values())
    m = MacroConfig(embed_size=512, hidden_size=512)
    gated = init_bank(6, m.replace(embed_size=2, hidden_size=2, unrestricted_dims=True), Rng(0), 3, 2,
                      NodeSemantics.GATED)
    assert len(gated.connection_keys()) == 2 * 17
    # full-size cell accounting from the layout, without allocating it
    from autornn.supernet import SharedParamBank
    shapes = SharedParamBank(6, m, 3, 2, NodeSemantics.GATED).shapes()
    assert sum(r * c for k, (r, c) in shapes.items() if k.startswith("cell.")) == 8_912_896


def test_bank_errors_and_determinism():
    with pytest.raises(ValueError):
        init_bank(6, _macro(hidden_size=0), Rng(0), V, F)
    with pytest.raises(ValueError):
        init_bank(0, _macro(), Rng(0), V, F)
    a, b = init_bank(6, _macro(), Rng(4), V, F), init_bank(6, _macro(), Rng(4), V, F)
    assert a.checksum() == b.checksum()


def test_zero_bank_tanh_gives_zero():
    bank = init_bank(4, _macro(), Rng(0), V, F)
    for v in bank.params.values():
        v[...] = 0
    child = ChildModel.from_bank(chain_genotype([A.TANH] * 4), bank)
    t = Tape()
    h = child.cell_step(t, t.const(np.ones((2, 4))), t.const(np.ones((2, 3))))
    np.testing.assert_array_equal(h.value, 0.0)


def test_zero_bank_sigmoid_leaf_contributes_half():
    bank = init_bank(4, _macro(), Rng(0), V, F)
    for v in bank.params.values():
        v[...] = 0
    # star: leaves 2 (sigmoid), 3 (tanh), 4 (sigmoid)
    from autornn.genotype import CellGenotype
    g = CellGenotype.from_lists([A.RELU, A.SIGMOID, A.TANH, A.SIGMOID], [1, 1, 1])
    t = Tape()
    h = ChildModel.from_bank(g, bank).cell_step(t, t.const(np.ones((1, 4))), t.const(np.zeros((1, 3))))
    np.testing.assert_allclose(h.value, (0.5 + 0.0 + 0.5) / 3)


@pytest.mark.parametrize("kind", list(A))
def test_single_node_matches_oracle(kind):
    bank = init_bank(1, _macro(n_blocks=1), Rng(int(kind)), V, F)
    rng = np.random.default_rng(int(kind))
    x, h = rng.normal(size=(2, 4)), rng.normal(size=(2, 3))
    t = Tape()
    g = chain_genotype([kind])
    got = ChildModel.from_bank(g, bank).cell_step(t, t.const(x), t.const(h)).value
    want = apply(kind, x @ bank.params["cell.w_x"] + h @ bank.params[w_key(1, 0)])
    np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("sem", ["plain", "gated"])
def test_random_cells_match_numpy_oracle(sem):
    rng = Rng(7)
    bank = init_bank(6, _macro(), Rng(1), V, F, sem)
    for v in bank.params.values():
        v *= 20  # leave the near-linear regime
    data = np.random.default_rng(0)
    for _ in range(20):
        g = random_genotype(rng, int(rng.integers(1, 7)))
        x, h = data.normal(size=(2, 4)), data.normal(size=(2, 3))
        t = Tape()
        got = ChildModel.from_bank(g, bank).cell_step(t, t.const(x), t.const(h)).value
        np.testing.assert_allclose(got, _np_cell(g, bank.params, x, h, sem), rtol=1e-12, atol=1e-14)


def test_cell_step_dimension_mismatch():
    bank = init_bank(2, _macro(), Rng(0), V, F)
    child = ChildModel.from_bank(chain_genotype([A.TANH] * 2), bank)
    t = Tape()
    with pytest.raises(ValueError):
        child.cell_step(t, t.const(np.ones((1, 3))), t.const(np.ones((1, 3))))


def test_uniform_logits_loss_is_log_v():
    for eps in (0.0, 0.1):
        bank = init_bank(3, _macro(label_smoothing=eps), Rng(0), V, F)
        bank.params["proj"][...] = 0
        child = ChildModel.from_bank(random_genotype(Rng(2), 3), bank)
        loss, _, _ = child.sequence_forward(Tape(), _batch(np.random.default_rng(0)))
        assert loss.value[0, 0] == pytest.approx(math.log(V), rel=1e-12)


def test_sequence_forward_errors():
    bank = init_bank(3, _macro(), Rng(0), V, F)
    child = ChildModel.from_bank(random_genotype(Rng(2), 3), bank)
    b = _batch(np.random.default_rng(0))
    with pytest.raises(ValueError):
        child.sequence_forward(Tape(), Batch(b.ids[:0], b.mask[:0], b.features[:0], []))
    b.ids[1, 2] = V
    with pytest.raises(IndexError):
        child.sequence_forward(Tape(), b)


@pytest.mark.parametrize("variant", [
    dict(), dict(semantics="gated"), dict(tie_embeddings=True), dict(tie_embeddings=True, embed_size=3),
    dict(use_bias=True), dict(label_smoothing=0.1)])
def test_sequence_loss_finite_differences(variant):
    variant = dict(variant)
    sem = variant.pop("semantics", "plain")
    bank = init_bank(4, _macro(n_blocks=4, **variant), Rng(3), V, F, sem)
    for v in bank.params.values():
        v += np.random.default_rng(v.size).normal(scale=0.5, size=v.shape)
    g = random_genotype(Rng(5), 4)
    batch = _batch(np.random.default_rng(1))
    child = ChildModel.from_bank(g, bank)
    params = {k: bank.params[k] for k in child.touched_keys()}

    def build(t, p):
        return ChildModel(g, p, bank.macro, sem, V).sequence_forward(t, batch)[0]

    assert grad_rel_err(build, params) < 1e-4


@pytest.mark.parametrize("sem", ["plain", "gated"])
def test_gradient_sparsity(sem):
    bank = init_bank(6, _macro(), Rng(0), V, F, sem)
    rng = Rng(9)
    for _ in range(10):
        g = random_genotype(rng, 6)
        child = ChildModel.from_bank(g, bank)
        t = Tape()
        loss, _, _ = child.sequence_forward(t, _batch(np.random.default_rng(2)))
        full = bank.full_grads(t.backward(loss))
        touched = set(child.touched_keys())
        for k, gr in full.items():
            if k not in touched:
                assert not np.any(gr), k
        assert set(t.params) == touched


def test_extract_equivalence_on_random_genotypes():
    rng = Rng(12)
    data = np.random.default_rng(3)
    for sem in ("plain", "gated"):
        bank = init_bank(6, _macro(), Rng(2), V, F, sem)
        for _ in range(25):
            g = random_genotype(rng, int(rng.integers(1, 7)))
            child = ChildModel.from_bank(g, bank)
            solo = child_extract(child)
            batch = _batch(data)
            t1, t2 = Tape(), Tape()
            l1, s1, _ = child.sequence_forward(t1, batch)
            l2, s2, _ = solo.sequence_forward(t2, batch)
            assert l1.value[0, 0] == l2.value[0, 0]
            for a, b in zip(s1, s2):
                np.testing.assert_array_equal(a.value, b.value)
            g1, g2 = t1.backward(l1), t2.backward(l2)
            for k in g2:
                np.testing.assert_array_equal(g1[k], g2[k])
            expected = param_count(g, bank.macro, sem).cell + io_param_count(bank.macro, V, F)
            assert extracted_size(solo.params) == expected == solo.param_count()


def test_extract_is_a_copy():
    bank = init_bank(3, _macro(), Rng(0), V, F)
    before = bank.checksum()
    solo = child_extract(ChildModel.from_bank(random_genotype(Rng(1), 3), bank))
    for v in solo.params.values():
        v += 1.0
    assert bank.checksum() == before


def test_snapshot_is_read_only():
    snap = init_bank(3, _macro(), Rng(0), V, F).snapshot()
    with pytest.raises(ValueError):
        snap.params["embed"][0, 0] = 1.0


def _train(seed):
    bank = init_bank(6, _macro(), Rng(seed), V, F)
    opt = Adam(lr=1e-2, clip_norm=5.0)
    rng = Rng(seed + 1)
    data = np.random.default_rng(seed)
    for _ in range(5):
        child = ChildModel.from_bank(random_genotype(rng, 6), bank)
        t = Tape()
        loss, _, _ = child.sequence_forward(t, _batch(data))
        opt.step(bank.params, bank.full_grads(t.backward(loss)))
    return bank.checksum()


def test_training_is_deterministic():
    assert _train(0) == _train(0) != _train(1)


def test_registry_lazy_per_signature():
    reg = BankRegistry(3, V, F, "plain", Rng(0), _macro())
    a = reg.get(_macro())
    assert reg.get(_macro(label_smoothing=0.1)) is a
    b = reg.get(_macro(hidden_size=5))
    assert b is not a and b.macro.hidden_size == 5 and len(reg.banks) == 2


def test_bank_checkpoint_round_trip(tmp_path):
    from autornn.supernet import SharedParamBank
    bank = init_bank(3, _macro(), Rng(0), V, F, "gated")
    bank.save(tmp_path / "bank")
    again = SharedParamBank.load(tmp_path / "bank")
    assert again.checksum() == bank.checksum() and again.semantics is NodeSemantics.GATED
