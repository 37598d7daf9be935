"""Two-phase interleaved architecture search and the derive step."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .controller import DEFAULT_MACRO_SPACE, Controller, SampleTrace
from .datapipe import CaptionDataset, EvalItem, EncodedExample, batch_iter, ids_to_tokens
from .evalgen.decoding import DEFAULT_MAX_LEN, greedy_decode
from .evalgen.metrics import CiderScorer, MetricReport, evaluate
from .genotype import CellGenotype, MacroConfig, NodeSemantics, to_json_obj
from .numkernel import Adam, Rng, Tape, checkpoint_exists, load_checkpoint, save_checkpoint
from .supernet import BankRegistry, ChildModel, SharedParamBank, child_extract
from .training import DivergenceError, carry_state, validation_loss

REWARD_MODES = ("metric_cider", "metric_bleu4", "neg_loss")


@dataclass
class SearchConfig:
    n_blocks: int = 6
    epochs: int = 3
    steps_per_omega_phase: int | None = None  # None: one pass over the training split
    traces_per_theta_phase: int = 200
    controller_batch: int = 10
    reward_mode: str = "metric_cider"
    reward_subsample: int = 64
    baseline_decay: float = 0.95
    derive_samples: int = 16
    seed: int = 0
    batch_size: int = 16
    omega_lr: float = 5e-3
    omega_clip: float = 5.0
    controller_lr: float = 3.5e-4
    controller_clip: float = 0.25
    entropy_weight: float = 1e-4
    temperature: float = 5.0
    tanh_constant: float | None = 2.5
    child_eval_steps: int = 0
    cider_variant: str = "cider_d"
    semantics: str = "plain"
    search_macro: bool = False
    macro_space: dict | None = None
    max_len: int = DEFAULT_MAX_LEN

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("n_blocks", "epochs", "controller_batch", "reward_subsample", "derive_samples",
                     "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.traces_per_theta_phase < 0 or self.child_eval_steps < 0:
            raise ValueError("trace and child-step counts must be >= 0")
        if self.steps_per_omega_phase is not None and self.steps_per_omega_phase < 0:
            raise ValueError("steps_per_omega_phase must be >= 0")
        if not 0.0 < self.baseline_decay < 1.0:
            raise ValueError("baseline_decay must lie in (0, 1)")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}")
        NodeSemantics(self.semantics)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown search config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CandidateReport:
    genotype: CellGenotype
    reward: float
    metrics: MetricReport
    loss: float
    params: int
    wall_time: float = 0.0
    index: int = 0
    macro_choices: dict | None = None
    decodes: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {"index": self.index, "reward": self.reward, "cider": self.metrics.cider,
                "bleu4": self.metrics.bleu4, "loss": self.loss, "params": self.params,
                "genotype": str(self.genotype)}


class EvalSet:
    """Validation items with a frozen CIDEr scorer and per-image loss examples."""

    def __init__(self, items: list[EvalItem], examples: list[EncodedExample], itos,
                 cider_variant: str = "cider_d"):
        if not items:
            raise ValueError("empty evaluation set")
        self.items = list(items)
        self.itos = itos
        self.scorer = CiderScorer([it.refs for it in self.items], variant=cider_variant)
        by_id: dict[str, list[EncodedExample]] = {}
        for ex in examples:
            by_id.setdefault(ex.image_id, []).append(ex)
        self.examples_by_id = by_id

    @classmethod
    def from_dataset(cls, ds: CaptionDataset, split: str = "val", cider_variant: str = "cider_d"):
        return cls(ds.items[split], ds.examples[split], ds.vocab.itos, cider_variant)

    def __len__(self):
        return len(self.items)

    def loss_examples(self, indices) -> list[EncodedExample]:
        return [ex for i in indices for ex in self.examples_by_id.get(self.items[i].image_id, [])]


def reward_from(mode: str, metrics: MetricReport, loss: float) -> float:
    if mode == "metric_cider":
        return metrics.cider
    if mode == "metric_bleu4":
        return metrics.bleu4
    if mode == "neg_loss":
        return math.exp(-loss)
    raise ValueError(f"unknown reward mode {mode!r}")


def _quick_train(child: ChildModel, examples, steps: int, lr: float, clip: float, seed: int):
    opt = Adam(lr=lr, clip_norm=clip)
    done = 0
    epoch = 0
    while done < steps:
        for batch in batch_iter(examples, 16, seed, epoch):
            tape = Tape()
            loss, _, _ = child.sequence_forward(tape, batch)
            opt.step(child.params, tape.backward(loss))
            done += 1
            if done >= steps:
                break
        epoch += 1


def evaluate_child(genotype: CellGenotype, params, evalset: EvalSet, reward_mode: str,
                   macro: MacroConfig, semantics=NodeSemantics.PLAIN, indices=None,
                   vocab_size: int | None = None, child_eval_steps: int = 0,
                   train_examples=None, lr: float = 5e-3, seed: int = 0,
                   max_len: int = DEFAULT_MAX_LEN) -> CandidateReport:
    """Greedy-decode a child against ``evalset`` (optionally a subset) and score it.

    ``params`` is a bank mapping that is only read. With ``child_eval_steps``
    the touched weights are copied and briefly trained on ``train_examples``
    first, leaving the bank untouched.
    """
    t0 = time.perf_counter()
    indices = list(range(len(evalset))) if indices is None else list(indices)
    if not indices:
        raise ValueError("empty validation subsample")
    child = ChildModel(genotype, params, macro, semantics, vocab_size)
    if child_eval_steps > 0:
        if not train_examples:
            raise ValueError("child_eval_steps needs training examples")
        child = child_extract(child)
        _quick_train(child, train_examples, child_eval_steps, lr, 5.0, seed)
    feats = np.stack([evalset.items[i].feature for i in indices])
    ids, _ = greedy_decode(child, feats, max_len)
    cands = [ids_to_tokens(row, evalset.itos) for row in ids]
    refs = [evalset.items[i].refs for i in indices]
    metrics = evaluate(cands, refs, evalset.scorer, indices=indices)
    loss_ex = evalset.loss_examples(indices)
    loss = validation_loss(child, loss_ex) if loss_ex else float("nan")
    reward = reward_from(reward_mode, metrics, loss)
    return CandidateReport(genotype, reward, metrics, loss, child.param_count(),
                           time.perf_counter() - t0, decodes=cands)


def select_best(reports: list[CandidateReport]) -> CandidateReport:
    """Highest reward; ties go to fewer parameters, then the earlier sample."""
    if not reports:
        raise ValueError("no candidates")
    return min(reports, key=lambda r: (-r.reward, r.params, r.index))


# -- the search loop ----------------------------------------------------------

def _sig_name(sig) -> str:
    e, h, tied = sig
    return f"bank_e{e}_h{h}_{'tied' if tied else 'untied'}"


class Searcher:
    """Owns the controller, the bank registry, optimizers, baseline and log.

    Each epoch draws from RNG streams keyed by (epoch, phase), so a run
    resumed from an epoch checkpoint replays exactly.
    """

    def __init__(self, cfg: SearchConfig, dataset: CaptionDataset, macro: MacroConfig,
                 log_path=None, ckpt_dir=None, controller: Controller | None = None):
        self.cfg = cfg
        self.data = dataset
        self.macro = macro
        self.semantics = NodeSemantics(cfg.semantics)
        self.root = Rng(cfg.seed)
        space = None
        if cfg.search_macro:
            space = cfg.macro_space or DEFAULT_MACRO_SPACE
        self.controller = controller or Controller(
            cfg.n_blocks, macro.controller_hidden, cfg.temperature, cfg.tanh_constant, space,
            rng=self.root.child(100))
        if self.controller.optimizer is None:
            self.controller.optimizer = Adam(lr=cfg.controller_lr, clip_norm=cfg.controller_clip)
        self.registry = BankRegistry(self.controller.n_max, len(dataset.vocab), dataset.feature_dim,
                                     self.semantics, self.root.child(101), macro)
        self.omega_opts: dict[tuple, Adam] = {}
        self.evalset = EvalSet.from_dataset(dataset, "val", cfg.cider_variant)
        self.baseline = 0.0
        self.epoch = 0
        self.omega_steps = 0
        self.theta_steps = 0
        self.records: list[dict] = []
        self.log_path = Path(log_path) if log_path else None
        self.ckpt_dir = Path(ckpt_dir) if ckpt_dir else None
        self.last_good: Path | None = None

    # -- logging ----------------------------------------------------------
    def _log(self, rec: dict):
        self.records.append(rec)
        if self.log_path is not None:
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def _trace_fields(self, tr: SampleTrace) -> dict:
        out = {"genotype": to_json_obj(tr.genotype)["nodes"]}
        if tr.macro_choices:
            out["macro"] = tr.macro_choices
        return out

    def bank_for(self, macro: MacroConfig) -> SharedParamBank:
        bank = self.registry.get(macro)
        sig = (macro.embed_size, macro.hidden_size, macro.tie_embeddings)
        if sig not in self.omega_opts:
            self.omega_opts[sig] = Adam(lr=self.cfg.omega_lr, clip_norm=self.cfg.omega_clip)
        return bank

    def bank_checksums(self) -> dict:
        return {_sig_name(s): b.checksum() for s, b in sorted(self.registry.banks.items())}

    # -- phases -----------------------------------------------------------
    def phase_omega(self, epoch: int):
        cfg = self.cfg
        rng = self.root.child(epoch, 1)
        train = self.data.examples["train"]
        budget = cfg.steps_per_omega_phase
        step = 0
        h_last = None
        sweep = 0
        while True:
            for batch in batch_iter(train, cfg.batch_size, cfg.seed, epoch * 10_000 + sweep):
                if budget is not None and step >= budget:
                    return
                tr = self.controller.sample(rng)
                macro = tr.macro(self.macro)
                bank = self.bank_for(macro)
                child = ChildModel(tr.genotype, bank.params, macro, self.semantics, bank.vocab_size)
                carry = not macro.init_hidden_each_epoch
                if h_last is not None and h_last.shape[1] != macro.hidden_size:
                    h_last = None
                h0 = carry_state(h_last, len(batch), macro.hidden_size) if carry else None
                tape = Tape()
                loss, _, h = child.sequence_forward(tape, batch, None, h0)
                value = float(loss.value[0, 0])
                grads = tape.backward(loss) if math.isfinite(value) else None
                try:
                    if grads is None:
                        raise FloatingPointError(f"loss is {value}")
                    self.omega_opts[(macro.embed_size, macro.hidden_size, macro.tie_embeddings)].step(
                        bank.params, grads)
                except FloatingPointError as exc:
                    raise DivergenceError(
                        f"shared weights diverged at epoch {epoch}, step {step}: {exc}; "
                        f"last good checkpoint: {self.last_good}") from None
                h_last = h.value if carry else None
                step += 1
                self.omega_steps += 1
                self._log({"epoch": epoch, "phase": 1, "step": step, **self._trace_fields(tr),
                           "loss": value, "baseline": self.baseline})
            sweep += 1
            if budget is None:
                return

    def phase_theta(self, epoch: int):
        cfg = self.cfg
        total = cfg.traces_per_theta_phase
        if total == 0:
            return
        rng = self.root.child(epoch, 2)
        n_val = len(self.evalset)
        sub = self.root.child(epoch, 3).permutation(n_val)[:min(cfg.reward_subsample, n_val)]
        sub = sorted(int(i) for i in sub)
        done = 0
        while done < total:
            k = min(cfg.controller_batch, total - done)
            traces = [self.controller.sample(rng) for _ in range(k)]
            reports = []
            for tr in traces:
                macro = tr.macro(self.macro)
                bank = self.bank_for(macro)
                reports.append(evaluate_child(
                    tr.genotype, bank.params, self.evalset, cfg.reward_mode, macro, self.semantics,
                    sub, bank.vocab_size, cfg.child_eval_steps, self.data.examples["train"],
                    cfg.omega_lr, cfg.seed, cfg.max_len))
            rewards = np.array([r.reward for r in reports])
            if not np.all(np.isfinite(rewards)):
                raise DivergenceError(f"non-finite reward at epoch {epoch}; "
                                      f"last good checkpoint: {self.last_good}")
            self.baseline = cfg.baseline_decay * self.baseline + (1 - cfg.baseline_decay) * float(rewards.mean())
            info = self.controller.reinforce_update(traces, rewards, self.baseline,
                                                    cfg.entropy_weight, cfg.controller_lr,
                                                    cfg.controller_clip)
            self.theta_steps += 1
            for j, (tr, rep) in enumerate(zip(traces, reports)):
                self._log({"epoch": epoch, "phase": 2, "step": done + j + 1, **self._trace_fields(tr),
                           "reward": rep.reward, "loss": rep.loss, "baseline": self.baseline,
                           "update": self.theta_steps, "controller_loss": info["loss"]})
            done += k

    def run_epoch(self):
        e = self.epoch
        ctrl_before = self.controller.checksum()
        self.phase_omega(e)
        if self.controller.checksum() != ctrl_before:
            raise RuntimeError("controller changed during the shared-weight phase")
        banks_before = self.bank_checksums()
        self.phase_theta(e)
        if self.bank_checksums() != banks_before:
            raise RuntimeError("shared weights changed during the controller phase")
        self._log({"epoch": e, "phase": "end", "baseline": self.baseline,
                   "controller_checksum": self.controller.checksum(),
                   "bank_checksums": self.bank_checksums()})
        self.epoch += 1
        if self.ckpt_dir is not None:
            self.save(self.ckpt_dir / f"epoch_{e:03d}")

    def run(self, epochs: int | None = None):
        target = self.cfg.epochs if epochs is None else epochs
        if self.ckpt_dir is not None and self.last_good is None:
            self.save(self.ckpt_dir / "init")
        while self.epoch < target:
            self.run_epoch()
        return self

    # -- persistence ------------------------------------------------------
    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        self.controller.save(path / "controller")
        banks = []
        for sig, bank in sorted(self.registry.banks.items()):
            name = _sig_name(sig)
            bank.save(path / name)
            opt = self.omega_opts.get(sig)
            if opt is not None:
                save_checkpoint(path / f"{name}_opt", opt.state_arrays("opt"), opt.state_meta())
            banks.append({"name": name, "signature": list(sig)})
        state = {"epoch": self.epoch, "baseline": self.baseline, "omega_steps": self.omega_steps,
                 "theta_steps": self.theta_steps, "log_records": len(self.records),
                 "banks": banks, "search": self.cfg.to_dict(), "macro": self.macro.to_dict()}
        (path / "state.json").write_text(json.dumps(state, indent=1, sort_keys=True))
        if self.ckpt_dir is not None:
            (self.ckpt_dir / "latest").write_text(path.name)
        self.last_good = path

    @classmethod
    def load(cls, path, dataset: CaptionDataset, ckpt_dir=None) -> "Searcher":
        """Rebuild a searcher from one saved checkpoint directory."""
        path = Path(path)
        if not (path / "state.json").exists():
            raise FileNotFoundError(f"no search checkpoint at {path}")
        state = json.loads((path / "state.json").read_text())
        cfg = SearchConfig.from_dict(state["search"])
        macro = MacroConfig.from_dict(state["macro"])
        s = cls(cfg, dataset, macro, None, ckpt_dir, Controller.load(path / "controller"))
        for entry in state["banks"]:
            sig = tuple(entry["signature"])
            s.registry.banks[sig] = SharedParamBank.load(path / entry["name"])
            opt = Adam(lr=cfg.omega_lr, clip_norm=cfg.omega_clip)
            opt_path = path / f"{entry['name']}_opt"
            if checkpoint_exists(opt_path):
                arrays, meta = load_checkpoint(opt_path)
                opt.load_state(arrays, meta, "opt")
            s.omega_opts[sig] = opt
        s.epoch = state["epoch"]
        s.baseline = state["baseline"]
        s.omega_steps = state["omega_steps"]
        s.theta_steps = state["theta_steps"]
        s._resume_records = state["log_records"]
        s.last_good = path
        return s

    @classmethod
    def resume(cls, ckpt_dir, dataset: CaptionDataset, log_path=None) -> "Searcher":
        """Continue from the latest epoch checkpoint, cutting the log back to match it."""
        ckpt_dir = Path(ckpt_dir)
        s = cls.load(ckpt_dir / (ckpt_dir / "latest").read_text().strip(), dataset, ckpt_dir)
        if log_path is not None:
            log_path = Path(log_path)
            lines = log_path.read_text().splitlines(keepends=True) if log_path.exists() else []
            keep = lines[:s._resume_records]
            log_path.write_text("".join(keep))
            s.records = [json.loads(x) for x in keep]
            s.log_path = log_path
        return s


def run_search(cfg: SearchConfig, dataset: CaptionDataset, macro: MacroConfig, log_path=None,
               ckpt_dir=None, controller: Controller | None = None) -> Searcher:
    """Run ``cfg.epochs`` epochs of interleaved shared-weight / controller training."""
    if not dataset.examples["train"] or not dataset.items["val"]:
        raise ValueError("search needs non-empty train and val splits")
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(log_path).write_text("")
    return Searcher(cfg, dataset, macro, log_path, ckpt_dir, controller).run()


def derive(controller: Controller, registry: BankRegistry, k: int, evalset: EvalSet,
           reward_mode: str, macro: MacroConfig, semantics=NodeSemantics.PLAIN, seed: int = 0,
           max_len: int = DEFAULT_MAX_LEN, traces: list[SampleTrace] | None = None):
    """Sample ``k`` genotypes and score each on the whole of ``evalset``.

    Returns ``(best report, all reports in sample order)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if traces is None:
        rng = Rng(seed).child(7)
        traces = [controller.sample(rng) for _ in range(k)]
    reports = []
    for idx, tr in enumerate(traces):
        m = tr.macro(macro)
        bank = registry.get(m).snapshot()
        rep = evaluate_child(tr.genotype, bank.params, evalset, reward_mode, m, semantics,
                             None, bank.vocab_size, max_len=max_len)
        rep.index = idx
        rep.macro_choices = tr.macro_choices
        reports.append(rep)
    return select_best(reports), reports


def rescore(reports: list[CandidateReport], reward_mode: str) -> list[CandidateReport]:
    """Same candidates under another reward mode (metrics and loss are already stored)."""
    out = []
    for r in reports:
        out.append(CandidateReport(r.genotype, reward_from(reward_mode, r.metrics, r.loss), r.metrics,
                                   r.loss, r.params, r.wall_time, r.index, r.macro_choices, r.decodes))
    return out
