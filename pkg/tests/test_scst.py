import numpy as np
import pytest

from autornn.datapipe import BOS, EOS, EvalItem
from autornn.evalgen.metrics import CiderScorer, MetricError
from autornn.evalgen.scst import cider_reward, frame, scst_finetune, scst_step
from autornn.genotype import MacroConfig, random_genotype
from autornn.numkernel import Adam, Rng
from autornn.supernet import ChildModel, init_bank

V, F = 6, 4


def _model(seed=0, bias=False):
    macro = MacroConfig(n_blocks=2, embed_size=5, hidden_size=5, unrestricted_dims=True, use_bias=bias)
    bank = init_bank(2, macro, Rng(seed), V, F)
    return ChildModel.from_bank(random_genotype(Rng(seed), 2), bank)


def test_frame_layout():
    ids, mask = frame([[4, 5], []], np.array([True, False]))
    assert ids.tolist() == [[BOS, 4, 5, EOS], [BOS, 0, 0, 0]]
    assert mask.tolist() == [[1, 1, 1, 1], [1, 0, 0, 0]]


def test_zero_advantage_no_update():
    model = _model(bias=True)
    model.params["proj.b"][0, EOS] = 100.0  # sampling and greedy both stop at once
    before = {k: v.copy() for k, v in model.params.items()}
    info = scst_step(model, np.ones((3, F)), [0, 1, 2], lambda toks, idx: np.ones(len(toks)),
                     Adam(lr=1e-2), Rng(0))
    assert not info["updated"]
    for k in before:
        np.testing.assert_array_equal(before[k], model.params[k])


def test_rigged_reward_raises_token_probability():
    model = _model(1)
    favored = 4
    feats = np.random.default_rng(0).normal(size=(8, F))

    def reward(toks, idx):
        return np.array([float(favored in t) for t in toks])

    def p_first():
        logp, _ = model.step(model.initial_state(feats), np.full(8, BOS))
        return float(np.exp(logp[:, favored]).mean())

    before = p_first()
    opt = Adam(lr=1e-2)
    rng = Rng(5)
    for _ in range(200):
        scst_step(model, feats, list(range(8)), reward, opt, rng)
    assert p_first() > before


def test_degenerate_reward_rejected():
    with pytest.warns(RuntimeWarning):
        scorer = CiderScorer([[["a", "b"]]])
    with pytest.raises(MetricError, match="corpus"):
        cider_reward(scorer, ["x"] * V)
    item = EvalItem("0", np.ones(F), [["a"]])
    with pytest.raises(MetricError):
        scst_finetune(_model(), [item], itos=["x"] * V)


def test_finetune_deterministic():
    items = [EvalItem(str(k), np.random.default_rng(k).normal(size=F), [[f"w{k % 3}", "x"]])
             for k in range(6)]
    itos = ["<pad>", "<bos>", "<eos>", "<unk>", "w0", "x"]
    a, b = _model(2), _model(2)
    ha = scst_finetune(a, items, lr=1e-3, epochs=2, batch_size=3, itos=itos, seed=4)
    hb = scst_finetune(b, items, lr=1e-3, epochs=2, batch_size=3, itos=itos, seed=4)
    assert ha == hb
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
