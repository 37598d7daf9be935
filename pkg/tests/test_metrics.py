import itertools
import json
import math

import numpy as np
import pytest

from autornn.evalgen.metrics import (CiderScorer, MetricError, MetricReport, bleu, cider, evaluate,
                                     lcs_length, rouge_l)

S = str.split


def test_bleu_perfect_match():
    assert bleu([S("a red ball on a box")], [[S("a red ball on a box")]]) == [1.0] * 4


def test_bleu_brevity_fixture():
    b1 = bleu([S("the cat")], [[S("the cat is on the mat")]])[0]
    assert b1 == pytest.approx(math.exp(1 - 6 / 2), rel=1e-12)
    assert round(b1, 4) == 0.1353


def test_bleu_zero_overlap():
    assert bleu([S("x y z")], [[S("a b c")]]) == [0.0] * 4


def test_bleu_half_prefix_penalized():
    ref = S("one two three four five six")
    b = bleu([ref[:3]], [[ref]])
    assert all(0 < v < 1 for v in b[:3])


def test_bleu_clipping_and_closest_length():
    # "the the the" clips to the two "the"s of the reference
    assert bleu([S("the the the")], [[S("the cat the")]])[0] == pytest.approx(2 / 3)
    # closest reference length (3 vs 7) selects 3: no brevity penalty
    assert bleu([S("a b c")], [[S("a b c"), S("a b c d e f g")]])[0] == 1.0


def test_bleu_errors():
    with pytest.raises(MetricError):
        bleu([], [])
    with pytest.raises(MetricError):
        bleu([S("a")], [[]])


def _lcs_brute(a, b):
    for k in range(min(len(a), len(b)), 0, -1):
        subs = set(itertools.combinations(a, k))
        if any(s in subs for s in itertools.combinations(b, k)):
            return k
    return 0


def test_lcs_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = list(rng.integers(0, 4, size=rng.integers(0, 7)))
        b = list(rng.integers(0, 4, size=rng.integers(0, 7)))
        assert lcs_length(a, b) == _lcs_brute(a, b)


def test_rouge_fixtures():
    assert rouge_l([S("a b c d")], [[S("a c d e")]]) == pytest.approx(0.75, rel=1e-12)
    assert rouge_l([S("a b")], [[S("a b")]]) == 1.0
    assert rouge_l([S("a b")], [[S("c d")]]) == 0.0


def test_cider_single_image_degenerate():
    with pytest.warns(RuntimeWarning):
        assert cider([S("a b")], [[S("a b")]]) == 0.0
    with pytest.raises(MetricError):
        CiderScorer([[S("a b")]], strict=True)


@pytest.mark.parametrize("variant", ["cider", "cider_d"])
def test_cider_two_image_fixture(variant):
    # four tokens each so every n-gram order is populated
    cands = [S("a red ball here"), S("the blue box there")]
    refs = [[S("a red ball here")], [S("the blue box there")]]
    assert cider(cands, refs, variant) == pytest.approx(10.0, rel=1e-12)


def _cider_oracle(cands, refs, n=4):
    """Plain CIDEr from dense numpy tf-idf vectors."""
    grams = sorted({tuple(s[i:i + k]) for group in refs + [[c] for c in cands] for s in group
                    for k in range(1, n + 1) for i in range(len(s) - k + 1)})
    index = {g: i for i, g in enumerate(grams)}
    df = np.zeros(len(grams))
    for group in refs:
        present = {tuple(s[i:i + k]) for s in group for k in range(1, n + 1) for i in range(len(s) - k + 1)}
        for g in present:
            df[index[g]] += 1
    idf = np.log(len(refs)) - np.log(np.maximum(df, 1.0))

    def vec(s, k):
        v = np.zeros(len(grams))
        for i in range(len(s) - k + 1):
            v[index[tuple(s[i:i + k])]] += 1
        return v * idf

    def cos(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))

    scores = []
    for c, group in zip(cands, refs):
        per_n = [np.mean([cos(vec(c, k), vec(r, k)) for r in group]) for k in range(1, n + 1)]
        scores.append(10 * np.mean(per_n))
    return float(np.mean(scores))


def test_cider_matches_dense_oracle():
    rng = np.random.default_rng(1)
    words = S("a b c d e f")
    for _ in range(30):
        m = int(rng.integers(2, 6))
        refs = [[list(rng.choice(words, size=rng.integers(1, 6))) for _ in range(rng.integers(1, 4))]
                for _ in range(m)]
        cands = [list(rng.choice(words, size=rng.integers(1, 6))) for _ in range(m)]
        assert cider(cands, refs, "cider") == pytest.approx(_cider_oracle(cands, refs), rel=1e-10, abs=1e-12)


def test_cider_d_length_penalty_and_clipping():
    refs = [[S("a red ball here")], [S("the blue box there")]]
    cands = [S("a red ball here here"), S("the blue box there")]
    plain = cider(cands, refs, "cider")
    d = cider(cands, refs, "cider_d")
    assert d < plain


def test_metrics_permutation_invariant():
    rng = np.random.default_rng(2)
    words = S("a b c d e")
    refs = [[list(rng.choice(words, size=4)) for _ in range(2)] for _ in range(6)]
    cands = [list(rng.choice(words, size=4)) for _ in range(6)]
    perm = rng.permutation(6)
    r1 = evaluate(cands, refs)
    r2 = evaluate([cands[i] for i in perm], [refs[i] for i in perm])
    for k, v in r1.as_dict().items():
        assert r2.as_dict()[k] == pytest.approx(v, rel=1e-12)


def test_identical_ceilings():
    refs = [[S("one red ball on a box")], [S("the cat near a dog")], [S("two green cups stand")]]
    rep = evaluate([r[0] for r in refs], refs)
    assert rep.bleu1 == rep.bleu4 == rep.rouge_l == 1.0
    assert rep.cider == pytest.approx(10.0, rel=1e-12)


def test_scorer_indices_match_subset_scoring():
    refs = [[S("a red ball")], [S("the blue box")], [S("a cat")]]
    scorer = CiderScorer(refs)
    mean, per = scorer.score([S("a red box")], [0])
    assert per[0] == scorer.score_one(0, S("a red box"))


def test_report_percent_json_csv():
    rep = MetricReport(0.5, 0.25, 0.125, 0.0625, 0.33333, 1.0334)
    assert json.loads(rep.to_json()) == {"bleu1": 50.0, "bleu2": 25.0, "bleu3": 12.5, "bleu4": 6.2,
                                         "rouge_l": 33.3, "cider": 103.3}
    assert rep.to_csv().splitlines()[1] == "50.0,25.0,12.5,6.2,33.3,103.3"
