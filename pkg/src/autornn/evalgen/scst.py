"""Self-critical sequence training: REINFORCE with the greedy decode as baseline."""
from __future__ import annotations

import numpy as np

from ..datapipe import BOS, EOS, PAD
from ..numkernel import Adam, Rng, Tape
from .decoding import DEFAULT_MAX_LEN, greedy_decode, sample_decode
from .metrics import CiderScorer, MetricError


def frame(token_lists, ended=None, eos: int = EOS):
    """Pack decodes into BOS ... [EOS] id rows with a token mask."""
    n = len(token_lists)
    ended = np.ones(n, dtype=bool) if ended is None else ended
    width = 1 + max(len(t) + int(e) for t, e in zip(token_lists, ended))
    ids = np.full((n, width), PAD, dtype=np.int64)
    mask = np.zeros((n, width))
    for r, (toks, e) in enumerate(zip(token_lists, ended)):
        row = [BOS] + list(toks) + ([eos] if e else [])
        ids[r, :len(row)] = row
        mask[r, :len(row)] = 1.0
    return ids, mask


def cider_reward(scorer: CiderScorer, itos):
    """Reward callable scoring id sequences with CIDEr against the scorer's references."""
    if scorer.degenerate:
        raise MetricError("CIDEr reward is degenerate: the reference corpus has fewer than two "
                          "images, so every idf is zero; use a larger corpus")

    def reward(token_lists, indices):
        words = [[itos[t] for t in toks] for toks in token_lists]
        return np.array([scorer.score_one(i, w) for i, w in zip(indices, words)])

    return reward


def scst_step(model, features, indices, reward_fn, optimizer: Adam, rng: Rng,
              max_len: int = DEFAULT_MAX_LEN, lr=None) -> dict:
    """One self-critical update on a batch; skipped when every advantage is zero."""
    sampled, ended = sample_decode(model, features, rng, max_len)
    greedy, _ = greedy_decode(model, features, max_len)
    r_s = np.asarray(reward_fn(sampled, indices), dtype=np.float64)
    r_g = np.asarray(reward_fn(greedy, indices), dtype=np.float64)
    adv = r_s - r_g
    info = {"reward_sample": float(r_s.mean()), "reward_greedy": float(r_g.mean()),
            "updated": False}
    if not np.any(adv):
        return info
    ids, mask = frame(sampled, ended)
    tape = Tape()
    logp = model.sequence_logprob(tape, features, ids, mask)
    loss = tape.sum(tape.mul(logp, tape.const(-adv.reshape(-1, 1) / len(adv))))
    grads = tape.backward(loss)
    optimizer.step(model.params, grads, lr)
    info["updated"] = True
    info["loss"] = float(loss.value[0, 0])
    return info


def scst_finetune(model, items, reward_fn=None, lr: float = 1e-5, epochs: int = 1,
                  batch_size: int = 16, seed: int = 0, max_len: int = DEFAULT_MAX_LEN,
                  itos=None, clip_norm: float = 5.0, optimizer: Adam | None = None):
    """Fine-tune ``model.params`` in place on ``items`` (features + refs).

    The default reward is CIDEr-D with document frequencies from the refs of
    ``items``. Returns per-batch diagnostics.
    """
    if reward_fn is None:
        if itos is None:
            raise ValueError("itos is required for the default CIDEr reward")
        reward_fn = cider_reward(CiderScorer([it.refs for it in items], strict=True), itos)
    opt = optimizer or Adam(lr=lr, clip_norm=clip_norm)
    root = Rng(seed)
    history = []
    for epoch in range(epochs):
        order = root.child(epoch, 0).permutation(len(items))
        srng = root.child(epoch, 1)
        for start in range(0, len(items), batch_size):
            idx = order[start:start + batch_size]
            feats = np.stack([items[i].feature for i in idx])
            info = scst_step(model, feats, list(idx), reward_fn, opt, srng, max_len, lr)
            info["epoch"] = epoch
            history.append(info)
    return history
