"""LSTM policy that samples cell genotypes decision by decision."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .activations import ActivationKind
from .genotype import (EMBED_OPTIONS, HIDDEN_OPTIONS, LABEL_SMOOTHING_OPTIONS, N_BLOCKS_OPTIONS,
                       CellGenotype, LSTMCell, MacroConfig, NodeDecision)
from .numkernel import (Adam, Rng, Tape, init_uniform, load_checkpoint, params_checksum,
                        save_checkpoint)

N_ACTIVATIONS = len(ActivationKind)

DEFAULT_MACRO_SPACE = {
    "n_blocks": N_BLOCKS_OPTIONS,
    "embed_size": EMBED_OPTIONS,
    "hidden_size": HIDDEN_OPTIONS,
    "label_smoothing": LABEL_SMOOTHING_OPTIONS,
    "init_hidden_each_epoch": (True, False),
    "tie_embeddings": (True, False),
}


@dataclass(frozen=True)
class SampleTrace:
    genotype: CellGenotype
    kinds: tuple
    choices: tuple
    log_prob_sum: float
    entropy_sum: float
    macro_choices: dict | None = None
    step_probs: tuple = field(default=(), compare=False, repr=False)

    def macro(self, base: MacroConfig) -> MacroConfig:
        return base.replace(**self.macro_choices) if self.macro_choices else base


class Controller:
    """Policy parameters, per-decision heads, and sampling settings.

    Logits are divided by ``temperature`` and, when ``tanh_constant`` is
    set, squashed to ``tanh_constant * tanh(.)``. Both :meth:`sample` and
    :meth:`log_prob` use the same transform, so recorded and recomputed
    log-probabilities agree.
    """

    def __init__(self, n_blocks: int, hidden: int = 100, temperature: float = 5.0,
                 tanh_constant: float | None = 2.5, macro_space: dict | None = None,
                 rng: Rng | None = None, init_scale: float = 0.04):
        if n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.n_blocks = n_blocks
        self.hidden = hidden
        self.temperature = temperature
        self.tanh_constant = tanh_constant
        self.macro_space = {k: tuple(v) for k, v in macro_space.items()} if macro_space else None
        if self.macro_space and "n_blocks" in self.macro_space:
            self.n_max = max(self.macro_space["n_blocks"])
        else:
            self.n_max = n_blocks
        self.lstm = LSTMCell(hidden, hidden, prefix="ctrl.lstm", bias=True)
        self.params: dict[str, np.ndarray] = {}
        rng = rng or Rng(0)
        self.params.update(self.lstm.init_params(rng, init_scale))
        self.params["ctrl.start"] = init_uniform(rng, 1, hidden, init_scale)
        self._add_head("act", N_ACTIVATIONS, rng, init_scale)
        self.params["ctrl.emb.conn"] = init_uniform(rng, max(1, self.n_max - 1), hidden, init_scale)
        for i in range(2, self.n_max + 1):
            self.params[f"ctrl.head.conn.{i}.w"] = init_uniform(rng, hidden, i - 1, init_scale)
            self.params[f"ctrl.head.conn.{i}.b"] = np.zeros((1, i - 1))
        for name, options in (self.macro_space or {}).items():
            self._add_head(f"macro.{name}", len(options), rng, init_scale)
        self.optimizer: Adam | None = None

    def _add_head(self, name, arity, rng, scale):
        self.params[f"ctrl.emb.{name}"] = init_uniform(rng, arity, self.hidden, scale)
        self.params[f"ctrl.head.{name}.w"] = init_uniform(rng, self.hidden, arity, scale)
        self.params[f"ctrl.head.{name}.b"] = np.zeros((1, arity))

    def zero_(self) -> "Controller":
        for v in self.params.values():
            v[...] = 0.0
        return self

    # -- decision layout --------------------------------------------------
    def node_kinds(self, n_blocks: int) -> list[tuple]:
        kinds = [("act", 1)]
        for i in range(2, n_blocks + 1):
            kinds += [("conn", i), ("act", i)]
        return kinds

    def macro_kinds(self) -> list[tuple]:
        return [("macro", name) for name in (self.macro_space or {})]

    def arity(self, kind) -> int:
        k, arg = kind
        if k == "act":
            return N_ACTIVATIONS
        if k == "conn":
            return arg - 1
        return len(self.macro_space[arg])

    def _head(self, kind):
        k, arg = kind
        if k == "act":
            return "ctrl.head.act", "ctrl.emb.act"
        if k == "conn":
            return f"ctrl.head.conn.{arg}", "ctrl.emb.conn"
        return f"ctrl.head.macro.{arg}", f"ctrl.emb.macro.{arg}"

    # -- rollout ----------------------------------------------------------
    def _decide(self, tape, h, kind, idx_fn):
        head, emb = self._head(kind)
        p = self.params
        logits = h @ tape.param(f"{head}.w", p[f"{head}.w"]) + tape.param(f"{head}.b", p[f"{head}.b"])
        z = logits * (1.0 / self.temperature)
        if self.tanh_constant:
            z = tape.activation(ActivationKind.TANH, z) * self.tanh_constant
        lp = tape.log_softmax(z)
        probs = np.exp(lp.value)
        idx = np.asarray(idx_fn(probs), dtype=np.int64)
        rows = lp.shape[0]
        arity = lp.shape[1]
        pick = np.zeros((rows, arity))
        pick[np.arange(rows), idx] = 1.0
        ones = tape.const(np.ones((arity, 1)))
        chosen = tape.mul(lp, tape.const(pick)) @ ones
        ent = -(tape.mul(tape.exp(lp), lp) @ ones)
        # connection choice j feeds back the embedding of node j
        x = tape.take_rows(tape.param(emb, p[emb]), idx)
        return idx, chosen, ent, x, probs

    def _rollout(self, tape: Tape, kinds, forced=None, rng: Rng | None = None,
                 greedy: bool = False, rows: int = 1, dynamic=None):
        p = self.params
        hs = self.hidden
        x = tape.take_rows(tape.param("ctrl.start", p["ctrl.start"]), np.zeros(rows, dtype=np.int64))
        h = tape.const(np.zeros((rows, hs)))
        c = tape.const(np.zeros((rows, hs)))
        logp = ent = None
        choices, step_probs, used = [], [], []
        queue = list(kinds)
        d = 0
        while queue:
            kind = queue.pop(0)
            h, c = self.lstm.step(tape, p, x, h, c)
            if forced is not None:
                idx_fn = lambda probs, d=d: forced[:, d]
            elif greedy:
                idx_fn = lambda probs: probs.argmax(axis=1)
            else:
                idx_fn = lambda probs: [rng.categorical(row) for row in probs]
            idx, chosen, e, x, probs = self._decide(tape, h, kind, idx_fn)
            logp = chosen if logp is None else logp + chosen
            ent = e if ent is None else ent + e
            choices.append(idx)
            step_probs.append(probs)
            used.append(kind)
            if dynamic is not None:
                queue += dynamic(kind, idx)
            d += 1
        return used, np.stack(choices, axis=1), logp, ent, step_probs

    def _expand_macro(self, kind, idx):
        # once n_blocks is known, append the node decisions for that many nodes
        if kind == ("macro", "n_blocks"):
            n = self.macro_space["n_blocks"][int(idx[0])]
            return self.node_kinds(n)
        return []

    def _plan(self, n_blocks=None):
        n = n_blocks or self.n_blocks
        if self.macro_space and "n_blocks" in self.macro_space:
            return self.macro_kinds(), self._expand_macro
        return self.macro_kinds() + self.node_kinds(n), None

    def _decode_choices(self, kinds, choices):
        nodes = []
        macro = {}
        pending_prev = None
        for kind, idx in zip(kinds, choices):
            k, arg = kind
            idx = int(idx)
            if k == "macro":
                macro[arg] = self.macro_space[arg][idx]
            elif k == "conn":
                pending_prev = idx + 1
            else:
                nodes.append(NodeDecision(pending_prev, ActivationKind(idx)))
                pending_prev = None
        return CellGenotype(tuple(nodes)), (macro or None)

    # -- public API -------------------------------------------------------
    def sample(self, rng: Rng, n_blocks: int | None = None, greedy: bool = False) -> SampleTrace:
        """Draw one genotype (argmax decisions when ``greedy``)."""
        kinds, dynamic = self._plan(n_blocks)
        tape = Tape(record=False)
        used, choices, logp, ent, probs = self._rollout(tape, kinds, rng=rng, greedy=greedy,
                                                        dynamic=dynamic)
        g, macro = self._decode_choices(used, choices[0])
        return SampleTrace(g, tuple(used), tuple(int(c) for c in choices[0]),
                           float(logp.value[0, 0]), float(ent.value[0, 0]), macro,
                           tuple(pr[0] for pr in probs))

    def encode(self, g: CellGenotype, macro_choices: dict | None = None):
        """Decision kinds and indices that would produce ``g``."""
        kinds, choices = [], []
        if self.macro_space:
            if not macro_choices or set(macro_choices) != set(self.macro_space):
                raise ValueError("macro choices must cover every searched macro field")
            if macro_choices.get("n_blocks", g.n_blocks) != g.n_blocks:
                raise ValueError("macro n_blocks disagrees with the genotype")
            for name, options in self.macro_space.items():
                kinds.append(("macro", name))
                choices.append(options.index(macro_choices[name]))
        elif g.n_blocks != self.n_blocks:
            raise ValueError(f"genotype has {g.n_blocks} nodes, controller samples {self.n_blocks}")
        if g.n_blocks > self.n_max:
            raise ValueError(f"genotype has {g.n_blocks} nodes, controller covers {self.n_max}")
        for kind in self.node_kinds(g.n_blocks):
            k, i = kind
            kinds.append(kind)
            choices.append(int(g.act(i)) if k == "act" else g.prev(i) - 1)
        return tuple(kinds), tuple(choices)

    def log_prob(self, g: CellGenotype, macro_choices: dict | None = None) -> float:
        kinds, choices = self.encode(g, macro_choices)
        tape = Tape(record=False)
        forced = np.array([choices], dtype=np.int64)
        _, _, logp, _, _ = self._rollout(tape, list(kinds), forced=forced)
        return float(logp.value[0, 0])

    def reinforce_update(self, traces, rewards, baseline: float, entropy_weight: float = 1e-4,
                         lr: float | None = None, clip_norm: float = 0.25) -> dict:
        """Ascend sum((r - b) * log p + w * entropy) with Adam; no-op on a zero gradient."""
        rewards = np.asarray(rewards, dtype=np.float64)
        if len(traces) != len(rewards):
            raise ValueError("traces and rewards differ in length")
        if not np.all(np.isfinite(rewards)) or not math.isfinite(baseline):
            raise ValueError("rewards and baseline must be finite")
        if self.optimizer is None:
            self.optimizer = Adam(lr=lr or 3.5e-4, clip_norm=clip_norm)
        adv = rewards - baseline
        tape = Tape()
        groups: dict[tuple, list[int]] = {}
        for k, tr in enumerate(traces):
            groups.setdefault(tr.kinds, []).append(k)
        objective = None
        for kinds, members in groups.items():
            forced = np.array([traces[m].choices for m in members], dtype=np.int64)
            _, _, logp, ent, _ = self._rollout(tape, list(kinds), forced=forced, rows=len(members))
            w = tape.const(adv[members].reshape(-1, 1))
            term = tape.sum(tape.mul(logp, w)) + tape.sum(ent) * entropy_weight
            objective = term if objective is None else objective + term
        loss = -objective
        grads = tape.backward(loss)
        norm = 0.0
        stepped = any(np.any(g) for g in grads.values())
        if stepped:
            norm = self.optimizer.step(self.params, grads, lr)
        return {"loss": float(loss.value[0, 0]), "grad_norm": norm, "stepped": stepped,
                "mean_advantage": float(adv.mean())}

    # -- persistence ------------------------------------------------------
    def checksum(self) -> str:
        return params_checksum(self.params)

    def config(self) -> dict:
        return {"n_blocks": self.n_blocks, "hidden": self.hidden, "temperature": self.temperature,
                "tanh_constant": self.tanh_constant,
                "macro_space": {k: list(v) for k, v in self.macro_space.items()} if self.macro_space else None}

    def save(self, path, meta=None):
        arrays = dict(self.params)
        m = {"controller": self.config()}
        if self.optimizer is not None:
            arrays.update(self.optimizer.state_arrays("ctrl.opt"))
            m["optimizer"] = self.optimizer.state_meta()
            m["optimizer"].update(lr=self.optimizer.lr, clip_norm=self.optimizer.clip_norm)
        m.update(meta or {})
        save_checkpoint(path, arrays, m)

    @classmethod
    def load(cls, path) -> "Controller":
        arrays, meta = load_checkpoint(path)
        cfg = meta["controller"]
        ctrl = cls(cfg["n_blocks"], cfg["hidden"], cfg["temperature"], cfg["tanh_constant"],
                   cfg["macro_space"])
        for k in ctrl.params:
            ctrl.params[k] = arrays[k]
        if "optimizer" in meta:
            om = meta["optimizer"]
            ctrl.optimizer = Adam(lr=om["lr"], clip_norm=om["clip_norm"])
            ctrl.optimizer.load_state(arrays, om, "ctrl.opt")
        return ctrl


def uniform_log_prob(n_blocks: int) -> float:
    """Closed form for a controller whose every head is uniform."""
    return -(n_blocks * math.log(N_ACTIVATIONS) + sum(math.log(i - 1) for i in range(2, n_blocks + 1)))
