"""Dense rank-2 reverse-mode autodiff, optimizers, LR schedule, RNG and checkpoints.

Everything is float64. A :class:`Tape` records primitive ops as they run;
``Tape.backward`` walks the record in reverse and returns gradients keyed by
parameter name.
"""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from . import activations as act


class TapeError(RuntimeError):
    pass


class Var:
    """Handle to a value slot on a tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self):
        return self.value.shape

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __add__(self, other):
        if isinstance(other, Var):
            return self.tape.add(self, other)
        return self.tape.affine(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            return self.tape.sub(self, other)
        return self.tape.affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return self.tape.affine(self, -1.0, float(other))

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape.mul(self, other)
        return self.tape.affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.affine(self, -1.0, 0.0)

    @property
    def T(self):
        return self.tape.transpose(self)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.shape})"


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ValueError(f"expected rank <= 2, got shape {a.shape}")
    return a


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    # only (1, n) row vectors broadcast against (m, n)
    if shape[0] == 1 and g.shape[1] == shape[1]:
        return g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[0] == shape[0]:
        return g.sum(axis=1, keepdims=True)
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    raise TapeError(f"cannot reduce gradient {g.shape} to {shape}")


class Tape:
    """Records primitive ops in execution order.

    With ``record=False`` the tape only evaluates values; backward is then
    unavailable. Used for decoding and evaluation.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.values: list[np.ndarray] = []
        self.nodes: list[tuple] = []  # (out, inputs, vjp, opname)
        self.params: dict[str, int] = {}
        self._adjoints: list | None = None

    def __len__(self):
        return len(self.nodes)

    # -- leaves -----------------------------------------------------------
    def _slot(self, value: np.ndarray) -> Var:
        self.values.append(value)
        return Var(self, len(self.values) - 1)

    def const(self, value) -> Var:
        return self._slot(_as_matrix(value))

    def param(self, name: str, value: np.ndarray) -> Var:
        """Register a named parameter leaf; repeated names share one slot."""
        idx = self.params.get(name)
        if idx is not None:
            return Var(self, idx)
        v = self._slot(_as_matrix(value))
        self.params[name] = v.idx
        return v

    def _op(self, opname, value, inputs, vjp) -> Var:
        out = self._slot(value)
        if self.record:
            self.nodes.append((out.idx, tuple(i.idx for i in inputs), vjp, opname))
        return out

    def _check(self, *vs):
        for v in vs:
            if not isinstance(v, Var) or v.tape is not self:
                raise TapeError("operand does not belong to this tape")

    # -- primitives -------------------------------------------------------
    def matmul(self, a: Var, b: Var) -> Var:
        self._check(a, b)
        av, bv = a.value, b.value
        if av.shape[1] != bv.shape[0]:
            raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
        return self._op("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def add(self, a: Var, b: Var) -> Var:
        self._check(a, b)
        sa, sb = a.shape, b.shape
        return self._op("add", a.value + b.value, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a: Var, b: Var) -> Var:
        self._check(a, b)
        sa, sb = a.shape, b.shape
        return self._op("sub", a.value - b.value, (a, b),
                        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def mul(self, a: Var, b: Var) -> Var:
        self._check(a, b)
        av, bv = a.value, b.value
        return self._op("mul", av * bv, (a, b),
                        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def affine(self, a: Var, scale: float, shift: float = 0.0) -> Var:
        """``scale * a + shift`` with scalar constants."""
        self._check(a)
        return self._op("scale", a.value * scale + shift, (a,), lambda g: (g * scale,))

    def transpose(self, a: Var) -> Var:
        self._check(a)
        return self._op("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))

    def activation(self, kind, a: Var, alpha: float = 1.0) -> Var:
        self._check(a)
        x = a.value
        return self._op("activation", act.apply(kind, x, alpha), (a,),
                        lambda g: (g * act.derivative(kind, x, alpha),))

    def exp(self, a: Var) -> Var:
        self._check(a)
        y = np.exp(a.value)
        return self._op("exp", y, (a,), lambda g: (g * y,))

    def log_softmax(self, a: Var) -> Var:
        self._check(a)
        x = a.value
        z = x - x.max(axis=1, keepdims=True)
        y = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        p = np.exp(y)
        return self._op("log_softmax", y, (a,),
                        lambda g: (g - p * g.sum(axis=1, keepdims=True),))

    def concat(self, vs, axis: int = 1) -> Var:
        self._check(*vs)
        sizes = [v.shape[axis] for v in vs]
        cuts = np.cumsum(sizes)[:-1]
        return self._op("concat", np.concatenate([v.value for v in vs], axis=axis), vs,
                        lambda g: tuple(np.split(g, cuts, axis=axis)))

    def cols(self, a: Var, start: int, stop: int) -> Var:
        self._check(a)
        shape = a.shape

        def vjp(g):
            out = np.zeros(shape)
            out[:, start:stop] = g
            return (out,)

        return self._op("cols", a.value[:, start:stop].copy(), (a,), vjp)

    def sum(self, a: Var) -> Var:
        self._check(a)
        shape = a.shape
        return self._op("sum", a.value.sum().reshape(1, 1), (a,),
                        lambda g: (np.full(shape, g[0, 0]),))

    def mean(self, a: Var) -> Var:
        self._check(a)
        shape = a.shape
        n = a.value.size
        return self._op("mean", a.value.mean().reshape(1, 1), (a,),
                        lambda g: (np.full(shape, g[0, 0] / n),))

    def mean_of(self, vs) -> Var:
        """Elementwise mean of same-shaped values."""
        if len(vs) == 1:
            return vs[0]
        self._check(*vs)
        k = len(vs)
        total = vs[0].value.copy()
        for v in vs[1:]:
            total = total + v.value
        return self._op("mean_of", total / k, vs, lambda g: tuple(g / k for _ in range(k)))

    def take_rows(self, table: Var, ids) -> Var:
        """Gather rows ``table[ids]`` (embedding lookup)."""
        self._check(table)
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        tv = table.value
        if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
            raise IndexError(f"row id out of range for table with {tv.shape[0]} rows")

        def vjp(g):
            out = np.zeros_like(tv)
            np.add.at(out, ids, g)
            return (out,)

        return self._op("take_rows", tv[ids], (table,), vjp)

    def softmax_xent(self, logits: Var, targets, mask=None, smoothing: float = 0.0) -> Var:
        """Masked mean label-smoothed cross-entropy over rows of ``logits``.

        The smoothed target puts ``1 - smoothing`` on the true id and
        ``smoothing / (V - 1)`` on every other id.
        """
        self._check(logits)
        x = logits.value
        n, vocab = x.shape
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        if targets.shape[0] != n:
            raise ValueError("targets length does not match logits rows")
        if targets.size and (targets.min() < 0 or targets.max() >= vocab):
            raise IndexError("target id out of range")
        m = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
        denom = m.sum()
        if denom <= 0:
            raise ValueError("mask selects no rows")
        z = x - x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - lse
        q = np.full_like(x, smoothing / (vocab - 1) if vocab > 1 else 0.0)
        q[np.arange(n), targets] = 1.0 - smoothing
        row_loss = -(q * logp).sum(axis=1)
        loss = float((row_loss * m).sum() / denom)
        p = np.exp(logp)
        w = (m / denom)[:, None]
        return self._op("softmax_xent", np.array([[loss]]), (logits,),
                        lambda g: (g[0, 0] * w * (p - q),))

    # -- reverse pass -----------------------------------------------------
    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every registered parameter.

        Parameters the loss does not depend on get zero arrays.
        """
        if not self.record:
            raise TapeError("tape was created with record=False")
        self._check(loss)
        if loss.value.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        adj: list = [None] * len(self.values)
        adj[loss.idx] = np.ones_like(loss.value)
        for out, inputs, vjp, opname in reversed(self.nodes):
            if out > loss.idx:
                continue
            g = adj[out]
            if g is None:
                continue
            for i, gi in zip(inputs, vjp(g)):
                if i >= out:
                    raise TapeError(f"cycle detected at op {opname!r} (slot {out})")
                if gi is None:
                    continue
                adj[i] = gi if adj[i] is None else adj[i] + gi
        self._adjoints = adj
        return {name: (adj[i] if adj[i] is not None else np.zeros_like(self.values[i]))
                for name, i in self.params.items()}

    def grad(self, v: Var) -> np.ndarray:
        """Adjoint of any slot from the most recent backward pass."""
        if self._adjoints is None:
            raise TapeError("backward has not been run")
        g = self._adjoints[v.idx]
        return np.zeros_like(v.value) if g is None else g


# -- optimizers ------------------------------------------------------------

def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None):
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")


class Adam:
    """Adam with bias correction and optional global-norm clipping.

    Moment buffers and step counts are kept per parameter name so that
    parameters touched only by some steps (shared-bank children) get the
    usual sparse-update semantics: untouched parameters are left alone.
    """

    kind = "adam"

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.clip_norm = clip_norm
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}
        self.steps = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr=None) -> float:
        """Update ``params`` in place from ``grads``; returns the pre-clip norm."""
        _check_finite(grads)
        lr = self.lr if lr is None else lr
        if lr <= 0:
            raise ValueError("lr must be positive")
        grads, norm = clip_by_global_norm(grads, self.clip_norm)
        b1, b2 = self.betas
        for name, g in grads.items():
            p = params[name]
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            v = self.v[name]
            t = self.t[name] = self.t[name] + 1
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)
        self.steps += 1
        return norm

    def state_arrays(self, prefix="opt"):
        out = {}
        for name in self.m:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def state_meta(self):
        return {"kind": self.kind, "steps": self.steps, "t": dict(self.t)}

    def load_state(self, arrays, meta, prefix="opt"):
        self.steps = meta["steps"]
        self.t = {k: int(v) for k, v in meta["t"].items()}
        self.m = {n: arrays[f"{prefix}.m.{n}"].copy() for n in self.t}
        self.v = {n: arrays[f"{prefix}.v.{n}"].copy() for n in self.t}


class SGD:
    kind = "sgd"

    def __init__(self, lr=0.1, clip_norm=None):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.clip_norm = clip_norm
        self.steps = 0

    def step(self, params, grads, lr=None) -> float:
        _check_finite(grads)
        lr = self.lr if lr is None else lr
        grads, norm = clip_by_global_norm(grads, self.clip_norm)
        for name, g in grads.items():
            params[name] -= lr * g
        self.steps += 1
        return norm


def noam_lr(step: int, model_dim: int, warmup: int, factor: float = 1.0) -> float:
    """Inverse-square-root schedule with linear warmup."""
    if step < 1:
        raise ValueError("step must be >= 1")
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    return factor * model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


# -- randomness ------------------------------------------------------------

class Rng:
    """Seeded PCG64 stream with the draws the toolkit needs.

    ``child(*keys)`` derives an independent stream from the root seed and a
    key path, so components can be reseeded without sharing state.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys])
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def categorical(self, probs) -> int:
        """One draw from a discrete distribution by inverse CDF."""
        p = np.asarray(probs, dtype=np.float64).reshape(-1)
        cdf = np.cumsum(p)
        u = self.gen.random() * cdf[-1]
        idx = int(np.searchsorted(cdf, u, side="right"))
        idx = min(idx, len(p) - 1)
        # never land on a zero-probability tail entry
        while p[idx] <= 0 and idx > 0:
            idx -= 1
        return idx

    def get_state(self):
        return self.gen.bit_generator.state

    def set_state(self, state):
        self.gen.bit_generator.state = state


def seeded_rng(seed: int) -> Rng:
    return Rng(seed)


def init_uniform(rng: Rng, rows: int, cols: int, scale: float = 0.04) -> np.ndarray:
    if rows <= 0 or cols <= 0:
        raise ValueError(f"matrix dims must be positive, got {rows}x{cols}")
    return rng.uniform(-scale, scale, size=(rows, cols))


# -- checkpoints -----------------------------------------------------------

def params_checksum(params: dict[str, np.ndarray]) -> str:
    """sha256 over sorted names and raw float bytes."""
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def checkpoint_paths(path) -> tuple[Path, Path]:
    """``(<stem>.bin, <stem>.json)``; a trailing .bin/.json on ``path`` is dropped."""
    path = Path(path)
    if path.suffix in (".bin", ".json"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".bin"), path.with_name(path.name + ".json")


def checkpoint_exists(path) -> bool:
    return all(p.exists() for p in checkpoint_paths(path))


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json`` manifest."""
    bin_path, json_path = checkpoint_paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in params.items():
        a = _as_matrix(arr)
        entries.append({"name": name, "rows": a.shape[0], "cols": a.shape[1], "offset": offset})
        raw = a.astype("<f8").tobytes(order="C")
        chunks.append(raw)
        offset += len(raw)
    bin_path.write_bytes(b"".join(chunks))
    manifest = {"dtype": "<f8", "tensors": entries}
    if meta is not None:
        manifest["meta"] = meta
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    bin_path, json_path = checkpoint_paths(path)
    if not json_path.exists() or not bin_path.exists():
        raise FileNotFoundError(f"checkpoint {bin_path} / {json_path} not found")
    manifest = json.loads(json_path.read_text())
    blob = bin_path.read_bytes()
    out = {}
    for e in manifest["tensors"]:
        n = e["rows"] * e["cols"]
        a = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"])
        out[e["name"]] = a.reshape(e["rows"], e["cols"]).astype(np.float64)
    return out, manifest.get("meta", {})
