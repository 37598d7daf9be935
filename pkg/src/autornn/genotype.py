"""Recurrent-cell search space: genotypes, macro options, parameter accounting."""
from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass

import numpy as np

from .activations import ACTIVATION_NAMES, ActivationKind
from .numkernel import Rng, Tape, Var, init_uniform

N_BLOCKS_OPTIONS = (6, 8, 10, 12)
EMBED_OPTIONS = (200, 512, 1000, 2048)
HIDDEN_OPTIONS = (200, 512, 1000, 2048)
LABEL_SMOOTHING_OPTIONS = (0.0, 0.1)
CONTROLLER_HIDDEN_OPTIONS = (100, 200, 512, 1024)
BYTES_PER_PARAM = 4  # sizes are reported as float32


class GenotypeError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class NodeSemantics(str, enum.Enum):
    PLAIN = "plain"
    GATED = "gated"


@dataclass(frozen=True)
class NodeDecision:
    prev: int | None
    act: ActivationKind


@dataclass(frozen=True)
class CellGenotype:
    """Per-node decisions, 1-based. Node 1 has no ``prev``; it reads x_t and h_{t-1}."""

    nodes: tuple[NodeDecision, ...]

    @property
    def n_blocks(self) -> int:
        return len(self.nodes)

    def prev(self, i: int) -> int | None:
        return self.nodes[i - 1].prev

    def act(self, i: int) -> ActivationKind:
        return self.nodes[i - 1].act

    @classmethod
    def from_lists(cls, acts, prevs) -> "CellGenotype":
        """``acts`` has N entries; ``prevs`` has N-1 entries for nodes 2..N."""
        if len(prevs) != len(acts) - 1:
            raise ValueError("need one prev per node after the first")
        nodes = [NodeDecision(None, _coerce_act(acts[0]))]
        nodes += [NodeDecision(int(p), _coerce_act(a)) for p, a in zip(prevs, acts[1:])]
        return cls(tuple(nodes))

    def edges(self):
        """(node, prev) pairs for nodes 2..N."""
        return [(i, self.prev(i)) for i in range(2, self.n_blocks + 1)]

    def __str__(self):
        parts = [f"1:{self.act(1).label}"]
        parts += [f"{i}<{self.prev(i)}:{self.act(i).label}" for i in range(2, self.n_blocks + 1)]
        return " ".join(parts)


def _coerce_act(a) -> ActivationKind:
    if isinstance(a, str):
        return ActivationKind.from_name(a)
    return ActivationKind(int(a))


@dataclass(frozen=True)
class MacroConfig:
    n_blocks: int = 6
    embed_size: int = 512
    hidden_size: int = 512
    label_smoothing: float = 0.0
    init_hidden_each_epoch: bool = True
    tie_embeddings: bool = False
    controller_hidden: int = 100
    unrestricted_dims: bool = False
    use_bias: bool = False
    celu_alpha: float = 1.0

    def replace(self, **kw) -> "MacroConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d) -> "MacroConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown macro fields: {sorted(extra)}")
        return cls(**d)


def validate_macro(m: MacroConfig) -> list[str]:
    out = []
    checks = [
        ("n_blocks", m.n_blocks, N_BLOCKS_OPTIONS),
        ("embed_size", m.embed_size, EMBED_OPTIONS),
        ("hidden_size", m.hidden_size, HIDDEN_OPTIONS),
        ("controller_hidden", m.controller_hidden, CONTROLLER_HIDDEN_OPTIONS),
    ]
    for name, value, options in checks:
        if not isinstance(value, (int, np.integer)) or value <= 0:
            out.append(f"{name} must be a positive integer, got {value!r}")
        elif not m.unrestricted_dims and value not in options:
            out.append(f"{name}={value} not in {options} (set unrestricted_dims to allow)")
    if m.label_smoothing not in LABEL_SMOOTHING_OPTIONS and not (
            m.unrestricted_dims and 0.0 <= m.label_smoothing < 1.0):
        out.append(f"label_smoothing={m.label_smoothing} not in {LABEL_SMOOTHING_OPTIONS}")
    if m.celu_alpha <= 0:
        out.append("celu_alpha must be positive")
    return out


def validate(g: CellGenotype) -> list[str]:
    """Every violated invariant; an empty list means the genotype is well formed."""
    out = []
    n = len(g.nodes)
    if n < 1:
        return ["genotype has no nodes"]
    for i, node in enumerate(g.nodes, start=1):
        if not isinstance(node.act, ActivationKind):
            out.append(f"node {i}: activation {node.act!r} not in search space")
        if i == 1:
            if node.prev is not None:
                out.append("node 1: prev must be empty (node 1 reads x_t and h_{t-1})")
            continue
        if node.prev is None:
            out.append(f"node {i}: missing prev")
        elif not 1 <= node.prev <= n:
            out.append(f"node {i}: prev={node.prev} out of range 1..{n}")
        elif node.prev >= i:
            out.append(f"node {i}: prev must be < node index (got {node.prev})")
    return out


def check(g: CellGenotype) -> CellGenotype:
    v = validate(g)
    if v:
        raise GenotypeError(v)
    return g


def leaf_set(g: CellGenotype) -> set[int]:
    """Nodes never used as another node's prev."""
    referenced = {p for p in (nd.prev for nd in g.nodes) if p is not None}
    return {i for i in range(1, g.n_blocks + 1) if i not in referenced}


def topological_order(g: CellGenotype) -> list[int]:
    """Kahn's algorithm over the prev edges; raises on a cycle."""
    n = g.n_blocks
    children = {i: [] for i in range(1, n + 1)}
    indeg = {i: 0 for i in range(1, n + 1)}
    for i, p in g.edges():
        if p in children:
            children[p].append(i)
            indeg[i] += 1
    ready = sorted(i for i in indeg if indeg[i] == 0)
    order = []
    while ready:
        i = ready.pop(0)
        order.append(i)
        for c in children[i]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if len(order) != n:
        raise GenotypeError(["cycle in node dependencies"])
    return order


def random_genotype(rng: Rng, n_blocks: int) -> CellGenotype:
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    nodes = [NodeDecision(None, ActivationKind(int(rng.integers(0, 8))))]
    for i in range(2, n_blocks + 1):
        prev = int(rng.integers(1, i))
        nodes.append(NodeDecision(prev, ActivationKind(int(rng.integers(0, 8)))))
    return CellGenotype(tuple(nodes))


def chain_genotype(acts) -> CellGenotype:
    """Node i reads node i-1."""
    return CellGenotype.from_lists(acts, list(range(1, len(acts))))


# -- parameter accounting --------------------------------------------------

@dataclass(frozen=True)
class ParamCount:
    cell: int
    io: int = 0

    @property
    def cell_bytes(self) -> int:
        return self.cell * BYTES_PER_PARAM

    @property
    def total(self) -> int:
        return self.cell + self.io


def io_param_count(macro: MacroConfig, vocab_size: int, feature_dim: int) -> int:
    """Embedding, output projection (or tied adapter) and feature projection; no biases."""
    e, h = macro.embed_size, macro.hidden_size
    n = vocab_size * e + feature_dim * e
    if macro.tie_embeddings:
        if h != e:
            n += h * e
    else:
        n += h * vocab_size
    return n


def cell_param_count(n_blocks: int, macro: MacroConfig, sem=NodeSemantics.PLAIN) -> int:
    e, h = macro.embed_size, macro.hidden_size
    mult = 2 if NodeSemantics(sem) is NodeSemantics.GATED else 1
    return mult * (e * h + h * h) + mult * (n_blocks - 1) * h * h


def param_count(g: CellGenotype, macro: MacroConfig, sem=NodeSemantics.PLAIN,
                vocab_size: int = 0, feature_dim: int = 0) -> ParamCount:
    """Bias-free cell weights; embeddings/projections reported separately in ``io``."""
    check(g)
    io = io_param_count(macro, vocab_size, feature_dim) if vocab_size else 0
    return ParamCount(cell_param_count(g.n_blocks, macro, sem), io)


def lstm_param_count(macro: MacroConfig) -> int:
    e, h = macro.embed_size, macro.hidden_size
    return 4 * (e * h + h * h)


class LSTMCell:
    """Four-gate LSTM without peepholes. Gate column order: i, f, g, o.

    Parameters live in a plain dict under ``<prefix>.w_x``, ``<prefix>.w_h``
    (and ``<prefix>.b`` when biased); the step runs on a :class:`Tape`.
    """

    def __init__(self, input_size: int, hidden_size: int, prefix: str = "lstm", bias: bool = False):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.prefix = prefix
        self.bias = bias

    def init_params(self, rng: Rng, scale: float = 0.04) -> dict[str, np.ndarray]:
        h = self.hidden_size
        p = {f"{self.prefix}.w_x": init_uniform(rng, self.input_size, 4 * h, scale),
             f"{self.prefix}.w_h": init_uniform(rng, h, 4 * h, scale)}
        if self.bias:
            p[f"{self.prefix}.b"] = np.zeros((1, 4 * h))
        return p

    def param_count(self) -> int:
        return 4 * (self.input_size * self.hidden_size + self.hidden_size ** 2)

    def step(self, tape: Tape, params, x: Var, h: Var, c: Var):
        hs = self.hidden_size
        z = x @ tape.param(f"{self.prefix}.w_x", params[f"{self.prefix}.w_x"]) \
            + h @ tape.param(f"{self.prefix}.w_h", params[f"{self.prefix}.w_h"])
        if self.bias:
            z = z + tape.param(f"{self.prefix}.b", params[f"{self.prefix}.b"])
        zi, zf, zg, zo = (tape.cols(z, k * hs, (k + 1) * hs) for k in range(4))
        i = tape.activation(ActivationKind.SIGMOID, zi)
        f = tape.activation(ActivationKind.SIGMOID, zf)
        g = tape.activation(ActivationKind.TANH, zg)
        o = tape.activation(ActivationKind.SIGMOID, zo)
        c_new = f * c + i * g
        h_new = o * tape.activation(ActivationKind.TANH, c_new)
        return h_new, c_new


def lstm_reference_cell(macro: MacroConfig, bias: bool = False) -> LSTMCell:
    return LSTMCell(macro.embed_size, macro.hidden_size, prefix="lstm", bias=bias)


# -- JSON ------------------------------------------------------------------

def to_json_obj(g: CellGenotype, macro: MacroConfig | None = None,
                semantics=NodeSemantics.PLAIN) -> dict:
    check(g)
    return {
        "n_blocks": g.n_blocks,
        "nodes": [{"prev": nd.prev, "act": nd.act.label} for nd in g.nodes],
        "macro": (macro or MacroConfig(n_blocks=g.n_blocks)).to_dict(),
        "semantics": NodeSemantics(semantics).value,
    }


def serialize(g: CellGenotype, macro: MacroConfig | None = None,
              semantics=NodeSemantics.PLAIN) -> str:
    return json.dumps(to_json_obj(g, macro, semantics), sort_keys=True)


def from_json_obj(obj: dict):
    errors = []
    for key in ("n_blocks", "nodes", "macro", "semantics"):
        if key not in obj:
            errors.append(f"missing field {key!r}")
    if errors:
        raise GenotypeError(errors)
    nodes = []
    for i, nd in enumerate(obj["nodes"], start=1):
        if not isinstance(nd, dict):
            errors.append(f"node {i}: expected an object")
            continue
        if "act" not in nd:
            errors.append(f"node {i}: missing act")
            continue
        if nd["act"] not in ACTIVATION_NAMES:
            errors.append(f"node {i}: unknown activation {nd['act']!r}")
            continue
        if i > 1 and ("prev" not in nd or nd["prev"] is None):
            errors.append(f"node {i}: missing prev")
            continue
        prev = nd.get("prev")
        if prev is not None and (isinstance(prev, bool) or not isinstance(prev, int)):
            errors.append(f"node {i}: prev must be an integer")
            continue
        nodes.append(NodeDecision(prev, ActivationKind.from_name(nd["act"])))
    if errors:
        raise GenotypeError(errors)
    g = CellGenotype(tuple(nodes))
    if obj["n_blocks"] != g.n_blocks:
        errors.append(f"n_blocks={obj['n_blocks']} but {g.n_blocks} nodes given")
    errors += validate(g)
    try:
        sem = NodeSemantics(obj["semantics"])
    except ValueError:
        errors.append(f"unknown semantics {obj['semantics']!r}")
        sem = None
    try:
        macro = MacroConfig.from_dict(obj["macro"])
        errors += validate_macro(macro)
    except (TypeError, ValueError) as exc:
        errors.append(f"macro: {exc}")
        macro = None
    if errors:
        raise GenotypeError(errors)
    return g, macro, sem


def parse(text: str):
    """Inverse of :func:`serialize`; returns ``(genotype, macro, semantics)``."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeError([f"malformed JSON: {exc}"]) from None
    return from_json_obj(obj)
