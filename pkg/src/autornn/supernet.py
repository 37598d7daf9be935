"""Shared parameter bank over every candidate connection, and child execution.

A child model is a genotype plus a mapping of named matrices. The mapping is
either the shared bank itself (supernet path) or a copy holding only the
touched entries (standalone path); both run the same forward code.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .activations import ActivationKind
from .genotype import (CellGenotype, MacroConfig, NodeSemantics, check, io_param_count,
                       leaf_set, param_count)
from .numkernel import (Rng, Tape, Var, init_uniform, load_checkpoint, params_checksum,
                        save_checkpoint)

INIT_SCALE = 0.04


def w_key(i: int, j: int, gate: bool = False) -> str:
    """Connection matrix for node ``i`` reading node ``j`` (``j == 0`` is h_{t-1})."""
    return f"cell.w_h.{i}.{j}" + (".gate" if gate else "")


def b_key(i: int, j: int, gate: bool = False) -> str:
    return f"cell.b.{i}.{j}" + (".gate" if gate else "")


def wx_key(gate: bool = False) -> str:
    return "cell.w_x" + (".gate" if gate else "")


class SharedParamBank:
    """Every candidate weight for cells with up to ``n_max`` nodes."""

    def __init__(self, n_max: int, macro: MacroConfig, vocab_size: int, feature_dim: int,
                 semantics=NodeSemantics.PLAIN, params: dict[str, np.ndarray] | None = None):
        if n_max < 1:
            raise ValueError("n_max must be >= 1")
        for name, v in (("embed_size", macro.embed_size), ("hidden_size", macro.hidden_size),
                        ("vocab_size", vocab_size), ("feature_dim", feature_dim)):
            if v <= 0:
                raise ValueError(f"{name} must be positive, got {v}")
        self.n_max = n_max
        self.macro = macro
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.semantics = NodeSemantics(semantics)
        self.params: dict[str, np.ndarray] = params if params is not None else {}

    @property
    def gated(self) -> bool:
        return self.semantics is NodeSemantics.GATED

    @property
    def signature(self):
        return (self.macro.embed_size, self.macro.hidden_size, self.macro.tie_embeddings)

    def shapes(self) -> dict[str, tuple[int, int]]:
        e, h = self.macro.embed_size, self.macro.hidden_size
        v, f = self.vocab_size, self.feature_dim
        twins = (False, True) if self.gated else (False,)
        out = {}
        for gate in twins:
            out[wx_key(gate)] = (e, h)
            out[w_key(1, 0, gate)] = (h, h)
        for i in range(2, self.n_max + 1):
            for j in range(1, i):
                for gate in twins:
                    out[w_key(i, j, gate)] = (h, h)
        if self.macro.use_bias:
            for gate in twins:
                out[b_key(1, 0, gate)] = (1, h)
                for i in range(2, self.n_max + 1):
                    for j in range(1, i):
                        out[b_key(i, j, gate)] = (1, h)
        out["embed"] = (v, e)
        if self.macro.tie_embeddings:
            if h != e:
                out["adapter"] = (h, e)
        else:
            out["proj"] = (h, v)
        if self.macro.use_bias:
            out["proj.b"] = (1, v)
        out["feat_proj"] = (f, e)
        return out

    def connection_keys(self) -> list[str]:
        return [k for k in self.params if k.startswith("cell.w")]

    def checksum(self) -> str:
        return params_checksum(self.params)

    def snapshot(self) -> "SharedParamBank":
        """Read-only copy for concurrent evaluation."""
        frozen = {}
        for k, v in self.params.items():
            c = v.copy()
            c.setflags(write=False)
            frozen[k] = c
        return SharedParamBank(self.n_max, self.macro, self.vocab_size, self.feature_dim,
                               self.semantics, frozen)

    def full_grads(self, grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Expand a child's sparse gradients to every bank entry (zeros elsewhere)."""
        return {k: (grads[k] if k in grads else np.zeros_like(v)) for k, v in self.params.items()}

    def save(self, path, meta=None):
        m = {"n_max": self.n_max, "macro": self.macro.to_dict(), "vocab_size": self.vocab_size,
             "feature_dim": self.feature_dim, "semantics": self.semantics.value}
        m.update(meta or {})
        save_checkpoint(path, self.params, m)

    @classmethod
    def load(cls, path) -> "SharedParamBank":
        params, meta = load_checkpoint(path)
        return cls(meta["n_max"], MacroConfig.from_dict(meta["macro"]), meta["vocab_size"],
                   meta["feature_dim"], meta["semantics"], params)


def init_bank(n_max: int, macro: MacroConfig, rng: Rng, vocab_size: int, feature_dim: int,
              semantics=NodeSemantics.PLAIN) -> SharedParamBank:
    bank = SharedParamBank(n_max, macro, vocab_size, feature_dim, semantics)
    for name, (r, c) in bank.shapes().items():
        if ".b." in name or name == "proj.b":
            bank.params[name] = np.zeros((r, c))
        else:
            bank.params[name] = init_uniform(rng, r, c, INIT_SCALE)
    return bank


class BankRegistry:
    """One bank per (embed, hidden, tied) signature, created on first use."""

    def __init__(self, n_max, vocab_size, feature_dim, semantics, rng: Rng, base_macro: MacroConfig):
        self.n_max = n_max
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.semantics = semantics
        self.rng = rng
        self.base_macro = base_macro
        self.banks: dict[tuple, SharedParamBank] = {}

    def get(self, macro: MacroConfig) -> SharedParamBank:
        sig = (macro.embed_size, macro.hidden_size, macro.tie_embeddings)
        if sig not in self.banks:
            key = int.from_bytes(hashlib.sha256(repr(sig).encode()).digest()[:4], "little")
            m = self.base_macro.replace(embed_size=sig[0], hidden_size=sig[1], tie_embeddings=sig[2])
            self.banks[sig] = init_bank(self.n_max, m, self.rng.child(key), self.vocab_size,
                                        self.feature_dim, self.semantics)
        return self.banks[sig]


@dataclass
class Batch:
    """Padded id matrix (BOS ... EOS PAD*), token mask and feature rows."""

    ids: np.ndarray
    mask: np.ndarray
    features: np.ndarray
    image_ids: list

    def __len__(self):
        return self.ids.shape[0]


def touched_keys(g: CellGenotype, macro: MacroConfig, semantics) -> list[str]:
    gated = NodeSemantics(semantics) is NodeSemantics.GATED
    twins = (False, True) if gated else (False,)
    keys = []
    for gate in twins:
        keys += [wx_key(gate), w_key(1, 0, gate)]
        if macro.use_bias:
            keys.append(b_key(1, 0, gate))
    for i, j in g.edges():
        for gate in twins:
            keys.append(w_key(i, j, gate))
            if macro.use_bias:
                keys.append(b_key(i, j, gate))
    keys.append("embed")
    if macro.tie_embeddings:
        if macro.hidden_size != macro.embed_size:
            keys.append("adapter")
    else:
        keys.append("proj")
    if macro.use_bias:
        keys.append("proj.b")
    keys.append("feat_proj")
    return keys


class ChildModel:
    """A genotype executed against a mapping of named matrices."""

    def __init__(self, genotype: CellGenotype, params: Mapping[str, np.ndarray], macro: MacroConfig,
                 semantics=NodeSemantics.PLAIN, vocab_size: int | None = None):
        self.genotype = check(genotype)
        self.params = params
        self.macro = macro
        self.semantics = NodeSemantics(semantics)
        self.vocab_size = vocab_size if vocab_size is not None else params["embed"].shape[0]
        self.leaves = sorted(leaf_set(genotype))

    @classmethod
    def from_bank(cls, genotype: CellGenotype, bank: SharedParamBank) -> "ChildModel":
        if genotype.n_blocks > bank.n_max:
            raise ValueError(f"genotype has {genotype.n_blocks} nodes, bank covers {bank.n_max}")
        return cls(genotype, bank.params, bank.macro, bank.semantics, bank.vocab_size)

    @property
    def gated(self) -> bool:
        return self.semantics is NodeSemantics.GATED

    @property
    def hidden_size(self) -> int:
        return self.macro.hidden_size

    def touched_keys(self) -> list[str]:
        return touched_keys(self.genotype, self.macro, self.semantics)

    def _p(self, tape: Tape, name: str) -> Var:
        return tape.param(name, self.params[name])

    # -- cell -------------------------------------------------------------
    def cell_step(self, tape: Tape, x: Var, h_prev: Var) -> Var:
        g = self.genotype
        e, hs = self.macro.embed_size, self.macro.hidden_size
        if x.shape[1] != e or h_prev.shape[1] != hs or x.shape[0] != h_prev.shape[0]:
            raise ValueError(f"cell_step dims: x {x.shape}, h {h_prev.shape}, expected (*,{e}), (*,{hs})")
        alpha = self.macro.celu_alpha
        bias = self.macro.use_bias

        z = x @ self._p(tape, wx_key()) + h_prev @ self._p(tape, w_key(1, 0))
        if bias:
            z = z + self._p(tape, b_key(1, 0))
        h1 = tape.activation(g.act(1), z, alpha)
        if self.gated:
            zc = x @ self._p(tape, wx_key(True)) + h_prev @ self._p(tape, w_key(1, 0, True))
            if bias:
                zc = zc + self._p(tape, b_key(1, 0, True))
            c = tape.activation(ActivationKind.SIGMOID, zc)
            h1 = c * h1 + (1.0 - c) * h_prev
        states = {1: h1}
        for i in range(2, g.n_blocks + 1):
            j = g.prev(i)
            src = states[j]
            z = src @ self._p(tape, w_key(i, j))
            if bias:
                z = z + self._p(tape, b_key(i, j))
            hi = tape.activation(g.act(i), z, alpha)
            if self.gated:
                zc = src @ self._p(tape, w_key(i, j, True))
                if bias:
                    zc = zc + self._p(tape, b_key(i, j, True))
                c = tape.activation(ActivationKind.SIGMOID, zc)
                hi = c * hi + (1.0 - c) * src
            states[i] = hi
        return tape.mean_of([states[i] for i in self.leaves])

    # -- io ---------------------------------------------------------------
    def embed(self, tape: Tape, ids) -> Var:
        return tape.take_rows(self._p(tape, "embed"), ids)

    def feature_input(self, tape: Tape, features) -> Var:
        return tape.const(features) @ self._p(tape, "feat_proj")

    def logits(self, tape: Tape, h: Var) -> Var:
        if self.macro.tie_embeddings:
            if self.macro.hidden_size != self.macro.embed_size:
                h = h @ self._p(tape, "adapter")
            out = h @ self._p(tape, "embed").T
        else:
            out = h @ self._p(tape, "proj")
        if self.macro.use_bias:
            out = out + self._p(tape, "proj.b")
        return out

    def start(self, tape: Tape, features, h0=None) -> Var:
        """Consume the projected feature as the step-0 input."""
        n = np.asarray(features).shape[0]
        h = tape.const(np.zeros((n, self.hidden_size)) if h0 is None else h0)
        return self.cell_step(tape, self.feature_input(tape, features), h)

    # -- sequences --------------------------------------------------------
    def sequence_forward(self, tape: Tape, batch: Batch, smoothing: float | None = None, h0=None):
        """Teacher-forced masked cross-entropy.

        Returns ``(loss, per-step logits, final hidden Var)``.
        """
        if len(batch) == 0:
            raise ValueError("empty batch")
        ids = np.asarray(batch.ids)
        if ids.max() >= self.vocab_size or ids.min() < 0:
            raise IndexError("token id out of range for vocabulary")
        smoothing = self.macro.label_smoothing if smoothing is None else smoothing
        h = self.start(tape, batch.features, h0)
        steps = []
        for t in range(ids.shape[1] - 1):
            if not batch.mask[:, t + 1].any():
                break
            h = self.cell_step(tape, self.embed(tape, ids[:, t]), h)
            steps.append(self.logits(tape, h))
        n = len(steps)
        targets = ids[:, 1:n + 1].T.reshape(-1)
        mask = np.asarray(batch.mask)[:, 1:n + 1].T.reshape(-1)
        loss = tape.softmax_xent(tape.concat(steps, axis=0), targets, mask, smoothing)
        return loss, steps, h

    def sequence_logprob(self, tape: Tape, features, ids, mask) -> Var:
        """Per-row summed log-probability of ``ids[:, 1:]`` (column vector)."""
        ids = np.asarray(ids)
        mask = np.asarray(mask, dtype=np.float64)
        h = self.start(tape, features)
        total = None
        ones = tape.const(np.ones((self.vocab_size, 1)))
        for t in range(ids.shape[1] - 1):
            if not mask[:, t + 1].any():
                break
            h = self.cell_step(tape, self.embed(tape, ids[:, t]), h)
            logp = tape.log_softmax(self.logits(tape, h))
            pick = np.zeros(logp.shape)
            pick[np.arange(ids.shape[0]), ids[:, t + 1]] = mask[:, t + 1]
            term = tape.mul(logp, tape.const(pick)) @ ones
            total = term if total is None else total + term
        if total is None:
            total = tape.const(np.zeros((ids.shape[0], 1)))
        return total

    # -- incremental decoding (no gradients) ------------------------------
    def initial_state(self, features) -> np.ndarray:
        tape = Tape(record=False)
        return self.start(tape, np.asarray(features, dtype=np.float64)).value

    def step(self, state: np.ndarray, tokens) -> tuple[np.ndarray, np.ndarray]:
        """Log-probabilities of the next token for each row, and the new state."""
        tape = Tape(record=False)
        h = self.cell_step(tape, self.embed(tape, tokens), tape.const(state))
        logits = self.logits(tape, h).value
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return logp, h.value

    def param_count(self) -> int:
        return param_count(self.genotype, self.macro, self.semantics).cell + io_param_count(
            self.macro, self.vocab_size, self.params["feat_proj"].shape[0])


def child_extract(child: ChildModel) -> ChildModel:
    """Copy exactly the touched matrices into a standalone model."""
    params = {k: np.array(child.params[k], dtype=np.float64, copy=True) for k in child.touched_keys()}
    return ChildModel(child.genotype, params, child.macro, child.semantics, child.vocab_size)


def extracted_size(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))
