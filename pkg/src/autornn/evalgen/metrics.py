"""Corpus caption metrics: BLEU@1-4, ROUGE-L and CIDEr / CIDEr-D.

Candidates are token lists; references are, per candidate, a list of token
lists. Scores are raw (BLEU/ROUGE in [0, 1], CIDEr x10); percentages are
only produced by :class:`MetricReport` emission helpers.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass


class MetricError(ValueError):
    pass


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_corpus(candidates, references):
    if len(candidates) == 0:
        raise MetricError("empty candidate set")
    if len(candidates) != len(references):
        raise MetricError(f"{len(candidates)} candidates but {len(references)} reference groups")
    for k, refs in enumerate(references):
        if not refs:
            raise MetricError(f"candidate {k} has no references")


def bleu(candidates, references, max_n: int = 4) -> list[float]:
    """Corpus BLEU@1..max_n with clipped counts and closest-length brevity penalty."""
    _check_corpus(candidates, references)
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        c = len(cand)
        cand_len += c
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - c), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            cn = ngrams(cand, n)
            if not cn:
                continue
            best = Counter()
            for r in refs:
                best |= ngrams(r, n)
            matched[n - 1] += sum(min(cnt, best[g]) for g, cnt in cn.items())
            total[n - 1] += sum(cn.values())
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if matched[n] == 0 or total[n] == 0:
            # once an order has no matches every higher BLEU is zero too
            scores += [0.0] * (max_n - n)
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_single(cand, refs, beta: float = 1.2) -> float:
    best = 0.0
    for r in refs:
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        p = lcs / len(cand)
        rec = lcs / len(r)
        f = (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)
        best = max(best, f)
    return best


def rouge_l(candidates, references, beta: float = 1.2) -> float:
    _check_corpus(candidates, references)
    return sum(rouge_l_single(c, r, beta) for c, r in zip(candidates, references)) / len(candidates)


class CiderScorer:
    """TF-IDF n-gram consensus against a fixed reference corpus.

    Document frequencies come from the reference groups only and are frozen
    at construction, so one scorer can rank many candidate sets.
    """

    def __init__(self, references, n: int = 4, sigma: float = 6.0, variant: str = "cider_d",
                 strict: bool = False):
        if variant not in ("cider_d", "cider"):
            raise ValueError(f"unknown CIDEr variant {variant!r}")
        self.n = n
        self.sigma = sigma
        self.variant = variant
        self.references = [list(map(list, refs)) for refs in references]
        if len(self.references) < 2:
            msg = "CIDEr needs at least two reference groups; every idf is zero for one group"
            if strict:
                raise MetricError(msg + " (use a larger reference corpus)")
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        df = Counter()
        for refs in self.references:
            seen = set()
            for r in refs:
                for k in range(1, n + 1):
                    seen.update(ngrams(r, k))
            df.update(seen)
        self.df = df
        self.log_n = math.log(max(1, len(self.references)))
        self._ref_vecs = [[self._vec(r) for r in refs] for refs in self.references]

    @property
    def degenerate(self) -> bool:
        return len(self.references) < 2

    def _vec(self, tokens):
        vec = [dict() for _ in range(self.n)]
        norm = [0.0] * self.n
        for k in range(1, self.n + 1):
            for g, tf in ngrams(tokens, k).items():
                w = tf * (self.log_n - math.log(max(1.0, self.df.get(g, 0.0))))
                vec[k - 1][g] = w
                norm[k - 1] += w * w
        return vec, [math.sqrt(x) for x in norm], len(tokens)

    def _sim(self, hyp, ref):
        vh, nh, lh = hyp
        vr, nr, lr = ref
        out = [0.0] * self.n
        penalty = math.exp(-((lh - lr) ** 2) / (2 * self.sigma ** 2)) if self.variant == "cider_d" else 1.0
        for k in range(self.n):
            if nh[k] == 0 or nr[k] == 0:
                continue
            acc = 0.0
            ref_k = vr[k]
            for g, w in vh[k].items():
                if g in ref_k:
                    wr = ref_k[g]
                    acc += (min(w, wr) if self.variant == "cider_d" else w) * wr
            out[k] = acc / (nh[k] * nr[k]) * penalty
        return out

    def score_one(self, index: int, candidate) -> float:
        hyp = self._vec(list(candidate))
        refs = self._ref_vecs[index]
        acc = [0.0] * self.n
        for ref in refs:
            for k, v in enumerate(self._sim(hyp, ref)):
                acc[k] += v
        return 10.0 * sum(acc) / self.n / len(refs)

    def score(self, candidates, indices=None):
        """``(corpus mean, per-candidate scores)``; ``indices`` maps candidates to groups."""
        if indices is None:
            indices = range(len(candidates))
            if len(candidates) != len(self.references):
                raise MetricError("candidate count does not match reference groups")
        scores = [self.score_one(i, c) for i, c in zip(indices, candidates)]
        if not scores:
            raise MetricError("empty candidate set")
        return sum(scores) / len(scores), scores


def cider(candidates, references, variant: str = "cider_d", sigma: float = 6.0) -> float:
    _check_corpus(candidates, references)
    return CiderScorer(references, sigma=sigma, variant=variant).score(candidates)[0]


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float

    def as_dict(self):
        return asdict(self)

    def percent(self) -> dict[str, float]:
        return {k: round(100.0 * v, 1) for k, v in self.as_dict().items()}

    def to_json(self) -> str:
        return json.dumps(self.percent(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        p = self.percent()
        w.writerow(list(p))
        w.writerow([f"{v:.1f}" for v in p.values()])
        return buf.getvalue()


def evaluate(candidates, references, cider_scorer: CiderScorer | None = None,
             variant: str = "cider_d", indices=None) -> MetricReport:
    """All metrics; ``indices`` locates each candidate in a shared scorer's corpus."""
    _check_corpus(candidates, references)
    b = bleu(candidates, references, 4)
    r = rouge_l(candidates, references)
    scorer = cider_scorer or CiderScorer(references, variant=variant)
    c = scorer.score(candidates, indices)[0]
    return MetricReport(*b, r, c)
