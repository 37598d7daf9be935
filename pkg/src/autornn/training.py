"""Cross-entropy training and evaluation of a single child model."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datapipe import CaptionDataset, EvalItem, batch_iter, ids_to_tokens, make_batch
from .evalgen.decoding import DEFAULT_MAX_LEN, decode_all
from .evalgen.metrics import CiderScorer, evaluate
from .genotype import CellGenotype, MacroConfig, NodeSemantics, from_json_obj, to_json_obj
from .numkernel import Adam, Rng, Tape, load_checkpoint, noam_lr, save_checkpoint
from .supernet import ChildModel, init_bank


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    steps: int | None = 200  # None: run ``epochs`` full passes
    epochs: int | None = None
    batch_size: int = 16
    warmup: int = 200
    lr_factor: float = 1.0
    model_dim: int | None = None
    clip_norm: float = 5.0
    seed: int = 0
    label_smoothing: float | None = None


def fresh_model(genotype: CellGenotype, macro: MacroConfig, vocab_size: int, feature_dim: int,
                semantics=NodeSemantics.PLAIN, seed: int = 0) -> ChildModel:
    """Standalone model with freshly initialized touched weights only."""
    bank = init_bank(genotype.n_blocks, macro, Rng(seed), vocab_size, feature_dim, semantics)
    child = ChildModel.from_bank(genotype, bank)
    params = {k: bank.params[k] for k in child.touched_keys()}
    return ChildModel(genotype, params, macro, semantics, vocab_size)


def carry_state(h: np.ndarray | None, rows: int, hidden: int) -> np.ndarray:
    """Previous batch's final state resized to ``rows`` (zero-padded)."""
    out = np.zeros((rows, hidden))
    if h is not None:
        k = min(rows, h.shape[0])
        out[:k] = h[:k]
    return out


def train_model(model: ChildModel, examples, cfg: TrainConfig, on_step=None,
                on_epoch_end=None) -> list[dict]:
    """Adam with the warmup/inverse-sqrt schedule.

    Stops after ``cfg.steps`` steps or ``cfg.epochs`` passes, whichever is
    set and comes first.

    When the macro says not to re-initialize the hidden state, the final
    state of each batch seeds the next one and is only zeroed at epoch
    boundaries.
    """
    if cfg.steps is None and cfg.epochs is None:
        raise ValueError("set steps or epochs")
    max_steps = cfg.steps if cfg.steps is not None else math.inf
    max_epochs = cfg.epochs if cfg.epochs is not None else math.inf
    opt = Adam(lr=1.0, clip_norm=cfg.clip_norm)
    dim = cfg.model_dim or model.hidden_size
    carry = not model.macro.init_hidden_each_epoch
    curves = []
    step = 0
    epoch = 0
    while step < max_steps and epoch < max_epochs:
        h_last = None
        for batch in batch_iter(examples, cfg.batch_size, cfg.seed, epoch):
            step += 1
            lr = noam_lr(step, dim, cfg.warmup, cfg.lr_factor)
            h0 = carry_state(h_last, len(batch), model.hidden_size) if carry else None
            tape = Tape()
            loss, _, h = model.sequence_forward(tape, batch, cfg.label_smoothing, h0)
            value = float(loss.value[0, 0])
            if not math.isfinite(value):
                raise DivergenceError(f"loss is {value} at step {step}")
            grads = tape.backward(loss)
            try:
                norm = opt.step(model.params, grads, lr)
            except FloatingPointError as exc:
                raise DivergenceError(f"step {step}: {exc}") from None
            h_last = h.value if carry else None
            rec = {"step": step, "epoch": epoch, "lr": lr, "loss": value, "grad_norm": norm}
            curves.append(rec)
            if on_step is not None:
                on_step(rec)
            if step >= max_steps:
                break
        if on_epoch_end is not None:
            on_epoch_end(epoch, step)
        epoch += 1
    return curves


def token_accuracy(model: ChildModel, examples, batch_size: int = 256) -> float:
    """Teacher-forced argmax accuracy over real target tokens."""
    hit = total = 0.0
    examples = list(examples)
    for start in range(0, len(examples), batch_size):
        batch = make_batch(examples[start:start + batch_size])
        tape = Tape(record=False)
        _, steps, _ = model.sequence_forward(tape, batch, 0.0)
        for t, logits in enumerate(steps):
            pred = logits.value.argmax(axis=1)
            m = batch.mask[:, t + 1]
            hit += float(((pred == batch.ids[:, t + 1]) * m).sum())
            total += float(m.sum())
    return hit / total if total else 0.0


def validation_loss(model: ChildModel, examples, batch_size: int = 256) -> float:
    """Token-weighted unsmoothed cross-entropy."""
    examples = list(examples)
    acc = n = 0.0
    for start in range(0, len(examples), batch_size):
        batch = make_batch(examples[start:start + batch_size])
        tape = Tape(record=False)
        loss, steps, _ = model.sequence_forward(tape, batch, 0.0)
        k = float(batch.mask[:, 1:len(steps) + 1].sum())
        acc += float(loss.value[0, 0]) * k
        n += k
    return acc / n


def decode_items(model: ChildModel, items: list[EvalItem], itos, beam: int = 1,
                 max_len: int = DEFAULT_MAX_LEN, length_norm: bool = True) -> list[list[str]]:
    feats = np.stack([it.feature for it in items])
    ids = decode_all(model, feats, beam, max_len, length_norm)
    return [ids_to_tokens(row, itos) for row in ids]


def evaluate_model(model: ChildModel, items: list[EvalItem], itos, beam: int = 1,
                   scorer: CiderScorer | None = None, max_len: int = DEFAULT_MAX_LEN,
                   length_norm: bool = True):
    """``(MetricReport, decoded token lists)`` over ``items``."""
    cands = decode_items(model, items, itos, beam, max_len, length_norm)
    refs = [it.refs for it in items]
    return evaluate(cands, refs, scorer), cands


def save_model(path, model: ChildModel, meta: dict | None = None) -> None:
    m = {"genotype": to_json_obj(model.genotype, model.macro, model.semantics),
         "vocab_size": model.vocab_size}
    m.update(meta or {})
    save_checkpoint(path, dict(model.params), m)


def load_model(path) -> ChildModel:
    params, meta = load_checkpoint(path)
    g, macro, sem = from_json_obj(meta["genotype"])
    return ChildModel(g, params, macro, sem, meta["vocab_size"])


def train_and_evaluate(genotype, macro, dataset: CaptionDataset, cfg: TrainConfig,
                       semantics=NodeSemantics.PLAIN, split: str = "val", beam: int = 1,
                       scorer: CiderScorer | None = None):
    model = fresh_model(genotype, macro, len(dataset.vocab), dataset.feature_dim, semantics, cfg.seed)
    curves = train_model(model, dataset.examples["train"], cfg)
    report, cands = evaluate_model(model, dataset.items[split], dataset.vocab.itos, beam, scorer)
    return model, report, curves
