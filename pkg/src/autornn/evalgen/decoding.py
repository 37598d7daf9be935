"""Greedy, sampled and beam decoding.

A decodable model exposes ``initial_state(features) -> state`` and
``step(state, tokens) -> (log_probs, state)``, where ``state`` is an array
whose leading axis indexes rows (so beams can be reordered by fancy
indexing) and ``log_probs`` is ``(rows, vocab)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..datapipe import BOS, EOS, MAX_CAPTION_TOKENS
from ..numkernel import Rng

DEFAULT_MAX_LEN = MAX_CAPTION_TOKENS + 2


def _as_rows(features):
    f = np.asarray(features, dtype=np.float64)
    return f.reshape(1, -1) if f.ndim == 1 else f


def greedy_decode(model, features, max_len: int = DEFAULT_MAX_LEN, bos: int = BOS, eos: int = EOS):
    """Argmax decoding for each feature row.

    At most ``max_len - 1`` tokens are generated (``max_len`` counts the
    BOS/EOS framing). Returns ``(token lists without EOS, summed log-probs)``.
    """
    feats = _as_rows(features)
    n = feats.shape[0]
    state = model.initial_state(feats)
    tokens = np.full(n, bos, dtype=np.int64)
    out = [[] for _ in range(n)]
    scores = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    for _ in range(max_len - 1):
        logp, state = model.step(state, tokens)
        tokens = logp.argmax(axis=1)
        for r in np.flatnonzero(alive):
            scores[r] += logp[r, tokens[r]]
            if tokens[r] == eos:
                alive[r] = False
            else:
                out[r].append(int(tokens[r]))
        if not alive.any():
            break
    return out, scores


def sample_decode(model, features, rng: Rng, max_len: int = DEFAULT_MAX_LEN,
                  bos: int = BOS, eos: int = EOS):
    """Multinomial sampling per step; returns token lists without EOS and whether EOS was emitted."""
    feats = _as_rows(features)
    n = feats.shape[0]
    state = model.initial_state(feats)
    tokens = np.full(n, bos, dtype=np.int64)
    out = [[] for _ in range(n)]
    ended = np.zeros(n, dtype=bool)
    for _ in range(max_len - 1):
        logp, state = model.step(state, tokens)
        p = np.exp(logp)
        cdf = np.cumsum(p, axis=1)
        u = rng.uniform(size=n) * cdf[:, -1]
        draws = np.minimum((cdf < u[:, None]).sum(axis=1), p.shape[1] - 1)
        tokens = draws.astype(np.int64)
        for r in np.flatnonzero(~ended):
            if tokens[r] == eos:
                ended[r] = True
            else:
                out[r].append(int(tokens[r]))
        if ended.all():
            break
    return out, ended


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple
    logprob: float
    finished: bool = False

    @property
    def length(self) -> int:
        return len(self.tokens)

    def score(self, length_norm: bool = True) -> float:
        return self.logprob / max(1, self.length) if length_norm else self.logprob


def beam_search(model, feature, beam: int = 3, max_len: int = DEFAULT_MAX_LEN,
                length_norm: bool = True, bos: int = BOS, eos: int = EOS) -> list[BeamHypothesis]:
    """All retired hypotheses for one feature vector.

    Expansions are ranked by accumulated log-prob (ties: lexicographic
    token ids). A hypothesis ending in EOS retires into the pool and the
    beam shrinks by one; survivors at the length limit retire as well.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    state = model.initial_state(_as_rows(feature))
    live = [BeamHypothesis((), 0.0)]
    last = np.array([bos], dtype=np.int64)
    pool: list[BeamHypothesis] = []
    width = beam
    steps = max_len - 1
    for step in range(steps):
        logp, new_state = model.step(state, last)
        cands = []
        for r, hyp in enumerate(live):
            for tok in range(logp.shape[1]):
                cands.append((-(hyp.logprob + logp[r, tok]), hyp.tokens + (tok,), r))
        cands.sort(key=lambda c: (c[0], c[1]))
        chosen = cands[:width]
        next_live, rows, toks = [], [], []
        for neg, tokens, r in chosen:
            h = BeamHypothesis(tokens, -neg, tokens[-1] == eos)
            if h.finished or step == steps - 1:
                pool.append(BeamHypothesis(tokens, -neg, True))
                width -= 1
            else:
                next_live.append(h)
                rows.append(r)
                toks.append(tokens[-1])
        if not next_live or width <= 0:
            break
        live = next_live
        state = new_state[np.array(rows)]
        last = np.array(toks, dtype=np.int64)
    return pool


def best_hypothesis(pool, length_norm: bool = True) -> BeamHypothesis:
    return min(pool, key=lambda h: (-h.score(length_norm), h.length, h.tokens))


def beam_decode(model, feature, beam: int = 3, max_len: int = DEFAULT_MAX_LEN,
                length_norm: bool = True, bos: int = BOS, eos: int = EOS):
    """Best hypothesis as ``(token ids without EOS, normalized score)``."""
    best = best_hypothesis(beam_search(model, feature, beam, max_len, length_norm, bos, eos),
                           length_norm)
    toks = list(best.tokens)
    if toks and toks[-1] == eos:
        toks = toks[:-1]
    return toks, best.score(length_norm)


def decode_all(model, features, beam: int = 1, max_len: int = DEFAULT_MAX_LEN,
               length_norm: bool = True):
    """Token lists for every feature row; greedy when ``beam == 1``."""
    if beam == 1:
        return greedy_decode(model, features, max_len)[0]
    return [beam_decode(model, f, beam, max_len, length_norm)[0] for f in _as_rows(features)]
