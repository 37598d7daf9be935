"""Command-line pipeline: preprocess, search, derive, train, evaluate, count-params, report."""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .datapipe import (DataError, SyntheticSceneSpec, Vocabulary, export_karpathy_json,
                       ingest_karpathy_json, prepare_dataset, synth_generate)
from .evalgen.metrics import evaluate
from .evalgen.scst import scst_finetune
from .genotype import (BYTES_PER_PARAM, GenotypeError, MacroConfig, NodeSemantics, cell_param_count,
                       lstm_param_count, parse, serialize)
from .numkernel import checkpoint_exists
from .search import EvalSet, SearchConfig, Searcher, derive, run_search
from .supernet import ChildModel, child_extract
from .training import (DivergenceError, TrainConfig, evaluate_model, fresh_model, load_model,
                       save_model, token_accuracy, train_model, validation_loss)

DATA_ROOT_ENV = "AUTORNN_DATA_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

# (model, hidden) -> (params in M, model size in M) as printed in the size table
REFERENCE_SIZES = {
    ("LSTM", 512): (2.0, 8.0), ("AutoRNN-6", 512): (3.5, 14.0), ("AutoRNN-8", 512): (4.5, 18.0),
    ("AutoRNN-10", 512): (5.5, 22.0), ("LSTM", 1024): (8.0, 32.0), ("AutoRNN-6", 1024): (14.0, 56.0),
    ("AutoRNN-8", 1024): (18.0, 72.0), ("AutoRNN-10", 1024): (22.0, 88.0),
}

TOY_PROFILE = {
    "task": "synthetic",
    "seed": 0,
    "work_dir": "runs/toy",
    "data": {"n_records": 2000, "min_count": 5, "max_tokens": 16, "karpathy_json": None,
             "features": None, "synthetic": SyntheticSceneSpec().to_dict()},
    "macro": MacroConfig(n_blocks=6, embed_size=32, hidden_size=32, unrestricted_dims=True).to_dict(),
    "search": SearchConfig(epochs=3).to_dict(),
    "derive": {"k": 16, "metric": "metric_cider"},
    "train": {"steps": None, "epochs": 20, "batch_size": 16, "warmup": 200, "lr_factor": 1.0,
              "clip_norm": 5.0, "from_bank": False,
              "scst": {"enabled": False, "lr": 1e-5, "epochs": 1, "batch_size": 16}},
    "evaluate": {"split": "test", "beam": 3, "length_norm": True},
}

PAPER_PROFILE = copy.deepcopy(TOY_PROFILE)
PAPER_PROFILE.update({"task": "karpathy_json", "work_dir": "runs/paper"})
PAPER_PROFILE["data"].update({"karpathy_json": "dataset_coco.json", "features": "features"})
PAPER_PROFILE["macro"] = MacroConfig(n_blocks=6, embed_size=512, hidden_size=512).to_dict()
PAPER_PROFILE["search"]["epochs"] = 100
PAPER_PROFILE["search"]["batch_size"] = 50
PAPER_PROFILE["train"].update({"epochs": 100, "batch_size": 50, "warmup": 10_000})
PAPER_PROFILE["train"]["scst"]["enabled"] = True

PROFILES = {"toy": TOY_PROFILE, "paper": PAPER_PROFILE}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration -------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise UsageError(f"override {assignment!r} is not of the form key=value")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = path.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise UsageError(f"unknown config section {path!r}")
        node = node[k]
    if keys[-1] not in node:
        raise UsageError(f"unknown config key {path!r}")
    node[keys[-1]] = value


def load_config(path=None, profile: str = "toy", overrides=()) -> dict:
    if profile not in PROFILES:
        raise UsageError(f"unknown profile {profile!r}")
    cfg = copy.deepcopy(PROFILES[profile])
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: {exc}") from None
        unknown = set(user) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = _merge(cfg, user)
    for a in overrides:
        apply_override(cfg, a)
    if cfg.get("seed") is None:
        raise UsageError("seed is mandatory")
    if cfg["train"]["batch_size"] < 1 or cfg["search"]["batch_size"] < 1:
        raise UsageError("batch sizes must be >= 1")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def data_path(p) -> Path:
    """Relative data inputs resolve against the data-root environment variable."""
    p = Path(p)
    root = os.environ.get(DATA_ROOT_ENV)
    return p if p.is_absolute() or root is None else Path(root) / p


class Run:
    """Paths and manifest bookkeeping for one work directory."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.root = Path(cfg["work_dir"])
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def macro(self) -> MacroConfig:
        return MacroConfig.from_dict(self.cfg["macro"])

    def search_config(self) -> SearchConfig:
        d = dict(self.cfg["search"])
        d["seed"] = self.cfg["seed"]
        return SearchConfig.from_dict(d)

    def record(self, stage: str, outputs: list[Path], inputs: list[Path], seconds: float):
        mpath = self.root / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
        manifest["config_hash"] = config_hash(self.cfg)
        stages = manifest.setdefault("stages", {})
        stages[stage] = {
            "inputs": {str(p): file_hash(p) for p in inputs if p.is_file()},
            "outputs": {str(p): file_hash(p) for p in outputs if p.is_file()},
        }
        manifest.setdefault("timings", {})[stage] = round(seconds, 3)
        mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True))

    # -- prepared data --------------------------------------------------------
    def corpus_paths(self):
        return self.root / "data" / "corpus.json", self.root / "data" / "features"

    def load_dataset(self):
        corpus, feats = self.corpus_paths()
        vocab_path = self.root / "data" / "vocab.json"
        if not corpus.exists() or not vocab_path.exists():
            raise DataError(f"no preprocessed data under {self.root / 'data'}; run preprocess first")
        d = self.cfg["data"]
        vocab = Vocabulary.from_json(vocab_path.read_text(), d["min_count"])
        records = ingest_karpathy_json(corpus, feats)
        return prepare_dataset(records, d["min_count"], d["max_tokens"], vocab=vocab)


# -- plots and tables ----------------------------------------------------------

def svg_plot(series: dict, title: str, xlabel: str, ylabel: str, width: int = 640,
             height: int = 360) -> str:
    """Polyline chart of ``{name: (xs, ys)}``; plain text so it diffs cleanly."""
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if math.isfinite(y)]
    if not pts:
        pts = [(0.0, 0.0), (1.0, 1.0)]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    ml, mr, mt, mb = 60, 20, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
           f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>',
           f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{ylabel}</text>']
    for k in range(5):
        yv = y0 + (y1 - y0) * k / 4
        xv = x0 + (x1 - x0) * k / 4
        out.append(f'<text x="{ml - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
        out.append(f'<text x="{sx(xv):.1f}" y="{mt + ph + 14}" text-anchor="middle">{xv:.3g}</text>')
    for n, (name, (xs, ys)) in enumerate(series.items()):
        c = colors[n % len(colors)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys) if math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{coords}"/>')
        out.append(f'<text x="{ml + 8}" y="{mt + 14 + 13 * n}" fill="{c}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_csv(path: Path, rows: list[dict], columns=None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def fmt_m(x: float) -> str:
    return f"{x / 1e6:.1f}M"


def count_table(n_blocks: int, hidden: int, embed: int, semantics) -> list[dict]:
    """Cell parameter count and float32 size for AutoRNN-N and the LSTM at the same dims."""
    macro = MacroConfig(n_blocks=n_blocks, embed_size=embed, hidden_size=hidden, unrestricted_dims=True)
    sem = NodeSemantics(semantics)
    rows = []
    for model, count in ((f"AutoRNN-{n_blocks}", cell_param_count(n_blocks, macro, sem)),
                         ("LSTM", lstm_param_count(macro))):
        target = REFERENCE_SIZES.get((model, hidden)) if (sem is NodeSemantics.GATED or model == "LSTM") else None
        rows.append({"model": model, "hidden": hidden, "semantics": sem.value if model != "LSTM" else "-",
                     "params": count, "size_bytes": count * BYTES_PER_PARAM,
                     "params_M": fmt_m(count), "size_M": fmt_m(count * BYTES_PER_PARAM),
                     "table_params": f"{target[0]:.1f}M" if target else "",
                     "table_size": f"{target[1]:.1f}M" if target else ""})
    return rows


# -- subcommands ----------------------------------------------------------------

def cmd_preprocess(cfg: dict) -> int:
    run = Run(cfg)
    t0 = time.perf_counter()
    d = cfg["data"]
    inputs = []
    if cfg["task"] == "synthetic":
        spec = SyntheticSceneSpec.from_dict(d["synthetic"])
        records = synth_generate(spec, d["n_records"], cfg["seed"])
    elif cfg["task"] == "karpathy_json":
        if not d.get("karpathy_json"):
            raise UsageError("data.karpathy_json is required for the karpathy_json task")
        src = data_path(d["karpathy_json"])
        if not src.exists():
            raise DataError(f"{src} does not exist")
        feats = data_path(d["features"]) if d.get("features") else None
        records = ingest_karpathy_json(src, feats)
        inputs.append(src)
    else:
        raise UsageError(f"unknown task {cfg['task']!r}")
    ds = prepare_dataset(records, d["min_count"], d["max_tokens"])
    corpus, feats_out = run.corpus_paths()
    corpus.parent.mkdir(parents=True, exist_ok=True)
    export_karpathy_json(records, corpus, feats_out)
    vocab_path = run.path("data", "vocab.json")
    vocab_path.write_text(ds.vocab.to_json())
    enc_path = run.path("data", "encoded.jsonl")
    with open(enc_path, "w") as fh:
        for split, exs in ds.examples.items():
            for ex in exs:
                fh.write(json.dumps({"image_id": ex.image_id, "split": split,
                                     "ids": [int(i) for i in ex.ids], "truncated": ex.truncated}) + "\n")
    splits_path = run.path("data", "splits.json")
    splits_path.write_text(json.dumps({s: [it.image_id for it in items] for s, items in ds.items.items()},
                                      indent=1))
    stats_path = run.path("data", "stats.json")
    stats_path.write_text(json.dumps(ds.stats, indent=1, sort_keys=True))
    print(f"vocab size {ds.stats['vocab_size']}, truncated captions {ds.stats['truncated']}, "
          f"examples train/val/test {ds.stats['train_examples']}/{ds.stats['val_examples']}/"
          f"{ds.stats['test_examples']}")
    run.record("preprocess", [corpus, vocab_path, enc_path, splits_path, stats_path], inputs,
               time.perf_counter() - t0)
    return EXIT_OK


def cmd_search(cfg: dict, resume: bool = False) -> int:
    run = Run(cfg)
    t0 = time.perf_counter()
    ds = run.load_dataset()
    log_path = run.path("search", "log.jsonl")
    ckpt = run.root / "search" / "ckpt"
    if resume and (ckpt / "latest").exists():
        searcher = Searcher.resume(ckpt, ds, log_path).run()
    else:
        searcher = run_search(run.search_config(), ds, run.macro(), log_path, ckpt)
    final = run.root / "search" / "final"
    searcher.save(final)
    end = [r for r in searcher.records if r["phase"] == "end"]
    if end:
        print(f"search done: {searcher.epoch} epochs, baseline {end[-1]['baseline']:.4f}")
    run.record("search", [log_path, final / "state.json"], [], time.perf_counter() - t0)
    return EXIT_OK


def _genotype_arg(path) -> tuple:
    p = Path(path)
    if not p.exists():
        raise DataError(f"genotype file {p} not found")
    return parse(p.read_text())


def cmd_derive(cfg: dict, k: int | None = None) -> int:
    run = Run(cfg)
    t0 = time.perf_counter()
    ds = run.load_dataset()
    final = run.root / "search" / "final"
    try:
        searcher = Searcher.load(final, ds)
    except FileNotFoundError as exc:
        raise DataError(f"{exc}; run search first") from None
    k = k or cfg["derive"]["k"]
    metric = cfg["derive"]["metric"]
    scfg = searcher.cfg
    evalset = EvalSet.from_dataset(ds, "val", scfg.cider_variant)
    best, reports = derive(searcher.controller, searcher.registry, k, evalset, metric, searcher.macro,
                           searcher.semantics, cfg["seed"], scfg.max_len)
    macro = searcher.macro.replace(**best.macro_choices) if best.macro_choices else searcher.macro
    geno_path = run.path("derive", "genotype.json")
    geno_path.write_text(serialize(best.genotype, macro, searcher.semantics) + "\n")
    ranked = sorted(reports, key=lambda r: (-r.reward, r.params, r.index))
    cand_path = run.path("derive", "candidates.csv")
    write_csv(cand_path, [r.row() for r in ranked])
    dec_path = run.path("derive", "decodes.jsonl")
    with open(dec_path, "w") as fh:
        for r in reports:
            for item, toks in zip(evalset.items, r.decodes):
                fh.write(json.dumps({"index": r.index, "image_id": item.image_id, "tokens": toks}) + "\n")
    print(f"derived {best.genotype} (sample {best.index}, {metric} {best.reward:.4f})")
    run.record("derive", [geno_path, cand_path, dec_path], [final / "state.json"],
               time.perf_counter() - t0)
    return EXIT_OK


def _train_config(cfg: dict, label_smoothing) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(steps=t["steps"], epochs=t["epochs"], batch_size=t["batch_size"],
                       warmup=t["warmup"], lr_factor=t["lr_factor"], clip_norm=t["clip_norm"],
                       seed=cfg["seed"], label_smoothing=label_smoothing)


def cmd_train(cfg: dict, genotype_path=None) -> int:
    run = Run(cfg)
    t0 = time.perf_counter()
    ds = run.load_dataset()
    genotype_path = Path(genotype_path) if genotype_path else run.root / "derive" / "genotype.json"
    g, macro, sem = _genotype_arg(genotype_path)
    if cfg["train"]["from_bank"]:
        searcher = Searcher.load(run.root / "search" / "final", ds)
        bank = searcher.registry.get(macro)
        model = child_extract(ChildModel(g, bank.params, macro, sem, bank.vocab_size))
    else:
        model = fresh_model(g, macro, len(ds.vocab), ds.feature_dim, sem, cfg["seed"])
    tcfg = _train_config(cfg, None)
    val = ds.examples["val"]
    evalset = EvalSet.from_dataset(ds, "val", cfg["search"]["cider_variant"])
    epoch_rows = []

    def on_epoch_end(epoch, step):
        report, _ = evaluate_model(model, evalset.items, ds.vocab.itos, 1, evalset.scorer)
        epoch_rows.append({"epoch": epoch, "step": step, "val_loss": validation_loss(model, val),
                           "val_token_acc": token_accuracy(model, val), "val_cider": report.cider,
                           "val_bleu4": report.bleu4})

    try:
        curves = train_model(model, ds.examples["train"], tcfg, on_epoch_end=on_epoch_end)
    except DivergenceError as exc:
        save_model(run.path("train", "diverged"), model)
        raise DivergenceError(f"{exc} (state saved to {run.root / 'train' / 'diverged'})") from None
    outputs = []
    curves_path = run.path("train", "curves.csv")
    write_csv(curves_path, curves, ["step", "epoch", "lr", "loss", "grad_norm"])
    metrics_path = run.path("train", "epoch_metrics.csv")
    write_csv(metrics_path, epoch_rows, ["epoch", "step", "val_loss", "val_token_acc", "val_cider",
                                         "val_bleu4"])
    svg_path = run.path("train", "curves.svg")
    svg_path.write_text(svg_plot({"train loss": ([c["step"] for c in curves], [c["loss"] for c in curves]),
                                  "val loss": ([r["step"] for r in epoch_rows],
                                               [r["val_loss"] for r in epoch_rows])},
                                 "Cross-entropy training", "step", "loss"))
    outputs += [curves_path, metrics_path, svg_path]
    sc = cfg["train"]["scst"]
    if sc["enabled"]:
        hist = scst_finetune(model, ds.items["train"], lr=sc["lr"], epochs=sc["epochs"],
                             batch_size=sc["batch_size"], seed=cfg["seed"], itos=ds.vocab.itos)
        scst_path = run.path("train", "scst.csv")
        write_csv(scst_path, hist, ["epoch", "reward_sample", "reward_greedy", "updated", "loss"])
        outputs.append(scst_path)
    model_path = run.path("train", "model")
    save_model(model_path, model)
    last = epoch_rows[-1] if epoch_rows else {}
    print(f"trained {g} for {len(curves)} steps; val token accuracy "
          f"{last.get('val_token_acc', float('nan')):.3f}")
    outputs += [Path(str(model_path) + ".bin")]
    run.record("train", outputs, [genotype_path], time.perf_counter() - t0)
    return EXIT_OK


def cmd_evaluate(cfg: dict, model_path=None, split: str | None = None, beam: int | None = None) -> int:
    run = Run(cfg)
    t0 = time.perf_counter()
    ds = run.load_dataset()
    split = split or cfg["evaluate"]["split"]
    beam = beam or cfg["evaluate"]["beam"]
    model_path = Path(model_path) if model_path else run.root / "train" / "model"
    if not checkpoint_exists(model_path):
        raise DataError(f"model checkpoint {model_path} not found")
    if split not in ds.items or not ds.items[split]:
        raise DataError(f"split {split!r} is missing or empty")
    model = load_model(model_path)
    evalset = EvalSet.from_dataset(ds, split, cfg["search"]["cider_variant"])
    report, cands = evaluate_model(model, evalset.items, ds.vocab.itos, beam, evalset.scorer,
                                   length_norm=cfg["evaluate"]["length_norm"])
    out = run.root / "eval" / split
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    with open(out / "decodes.jsonl", "w") as fh:
        for item, toks in zip(evalset.items, cands):
            fh.write(json.dumps({"image_id": item.image_id, "tokens": toks, "refs": item.refs}) + "\n")
    print(json.dumps({"split": split, "beam": beam, **report.percent()}))
    run.record(f"evaluate.{split}", [out / "report.json", out / "report.csv", out / "decodes.jsonl"],
               [Path(str(model_path) + ".bin")], time.perf_counter() - t0)
    return EXIT_OK


def cmd_count_params(genotype_path=None, n_blocks=6, hidden=512, embed=None, semantics="gated") -> int:
    if genotype_path:
        g, macro, sem = _genotype_arg(genotype_path)
        n_blocks, hidden, embed, semantics = g.n_blocks, macro.hidden_size, macro.embed_size, sem.value
    rows = count_table(n_blocks, hidden, embed or hidden, semantics)
    print(f"{'model':<12} {'hidden':>6} {'semantics':>9} {'params':>8} {'size':>8} {'table':>13}")
    for r in rows:
        table = f"{r['table_params']}/{r['table_size']}" if r["table_params"] else "-"
        print(f"{r['model']:<12} {r['hidden']:>6} {r['semantics']:>9} {r['params_M']:>8} "
              f"{r['size_M']:>8} {table:>13}")
    return EXIT_OK


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(x) for x in path.read_text().splitlines() if x.strip()]


def cmd_report(cfg: dict) -> int:
    """Tables and figures rebuilt from the logged raw data of earlier stages."""
    run = Run(cfg)
    t0 = time.perf_counter()
    out = run.root / "report"
    out.mkdir(parents=True, exist_ok=True)
    # the work dir is left out so reruns elsewhere give identical bytes
    cfg_id = config_hash({k: v for k, v in cfg.items() if k != "work_dir"})[:12]
    lines = [f"# Run report (config {cfg_id})", ""]
    outputs = []
    log_path = run.root / "search" / "log.jsonl"
    if log_path.exists():
        recs = _read_jsonl(log_path)
        rows = []
        for e in sorted({r["epoch"] for r in recs}):
            p1 = [r["loss"] for r in recs if r["epoch"] == e and r["phase"] == 1]
            p2 = [r["reward"] for r in recs if r["epoch"] == e and r["phase"] == 2]
            end = [r for r in recs if r["epoch"] == e and r["phase"] == "end"]
            rows.append({"epoch": e, "omega_loss": float(np.mean(p1)) if p1 else float("nan"),
                         "mean_reward": float(np.mean(p2)) if p2 else float("nan"),
                         "baseline": end[-1]["baseline"] if end else float("nan")})
        write_csv(out / "search_curve.csv", rows)
        xs = [r["epoch"] for r in rows]
        (out / "search_curve.svg").write_text(svg_plot(
            {"mean reward": (xs, [r["mean_reward"] for r in rows]),
             "baseline": (xs, [r["baseline"] for r in rows])}, "Controller reward", "epoch", "reward"))
        outputs += [out / "search_curve.csv", out / "search_curve.svg"]
        lines += ["## Search", "", "| epoch | shared-weight loss | mean reward | baseline |",
                  "|---|---|---|---|"]
        lines += [f"| {r['epoch']} | {r['omega_loss']:.4f} | {r['mean_reward']:.4f} | {r['baseline']:.4f} |"
                  for r in rows]
        lines.append("")
    cand_path = run.root / "derive" / "candidates.csv"
    if cand_path.exists():
        with open(cand_path) as fh:
            cands = list(csv.DictReader(fh))
        lines += ["## Derived candidates", "", "| rank | sample | reward | CIDEr | params | genotype |",
                  "|---|---|---|---|---|---|"]
        lines += [f"| {k + 1} | {c['index']} | {float(c['reward']):.4f} | {float(c['cider']):.4f} | "
                  f"{c['params']} | `{c['genotype']}` |" for k, c in enumerate(cands)]
        lines.append("")
    geno_path = run.root / "derive" / "genotype.json"
    if geno_path.exists():
        g, macro, sem = parse(geno_path.read_text())
        rows = count_table(g.n_blocks, macro.hidden_size, macro.embed_size, sem)
        lines += ["## Parameter count", "", "| model | params | size |", "|---|---|---|"]
        lines += [f"| {r['model']} | {r['params_M']} | {r['size_M']} |" for r in rows]
        lines.append("")
    eval_root = run.root / "eval"
    if eval_root.exists():
        lines += ["## Evaluation (percent)", "", "| split | B@1 | B@2 | B@3 | B@4 | R | C |",
                  "|---|---|---|---|---|---|---|"]
        for split_dir in sorted(p for p in eval_root.iterdir() if p.is_dir()):
            dec = split_dir / "decodes.jsonl"
            if not dec.exists():
                continue
            items = _read_jsonl(dec)
            # recomputed from the decode dump rather than copied from report.json
            rep = evaluate([d["tokens"] for d in items], [d["refs"] for d in items],
                           variant=cfg["search"]["cider_variant"])
            p = rep.percent()
            lines.append(f"| {split_dir.name} | {p['bleu1']} | {p['bleu2']} | {p['bleu3']} | "
                         f"{p['bleu4']} | {p['rouge_l']} | {p['cider']} |")
        lines.append("")
    train_csv = run.root / "train" / "curves.csv"
    if train_csv.exists():
        with open(train_csv) as fh:
            rows = list(csv.DictReader(fh))
        (out / "train_curve.svg").write_text(svg_plot(
            {"train loss": ([int(r["step"]) for r in rows], [float(r["loss"]) for r in rows])},
            "Cross-entropy training", "step", "loss"))
        outputs.append(out / "train_curve.svg")
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    outputs.append(out / "summary.md")
    print(f"report written to {out / 'summary.md'}")
    run.record("report", outputs, [], time.perf_counter() - t0)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="autornn", description="Desk-scale recurrent-cell architecture search.")
    p.add_argument("--config", help="JSON config file (merged over the profile)")
    p.add_argument("--profile", default="toy", choices=sorted(PROFILES))
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key by dot path, e.g. search.epochs=5")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("preprocess", help="build vocabulary and encoded dataset")
    s = sub.add_parser("search", help="run the two-phase search")
    s.add_argument("--resume", action="store_true", help="continue from the latest epoch checkpoint")
    s = sub.add_parser("derive", help="sample K genotypes and keep the best")
    s.add_argument("-k", type=int, default=None)
    s = sub.add_parser("train", help="retrain a genotype from scratch")
    s.add_argument("--genotype", default=None)
    s = sub.add_parser("evaluate", help="beam-search decoding and metrics")
    s.add_argument("--model", default=None)
    s.add_argument("--split", default=None, choices=("train", "val", "test"))
    s.add_argument("--beam", type=int, default=None)
    s = sub.add_parser("count-params", help="parameter counts next to the LSTM reference")
    s.add_argument("--genotype", default=None)
    s.add_argument("--n-blocks", type=int, default=6)
    s.add_argument("--hidden", type=int, default=512)
    s.add_argument("--embed", type=int, default=None)
    s.add_argument("--semantics", default="gated", choices=("plain", "gated"))
    sub.add_parser("report", help="summary tables and plots from logged data")
    p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "count-params":
            return cmd_count_params(args.genotype, args.n_blocks, args.hidden, args.embed, args.semantics)
        cfg = load_config(args.config, args.profile, args.overrides)
        if args.dump_config:
            print(json.dumps(cfg, indent=1, sort_keys=True))
            return EXIT_OK
        if args.command == "preprocess":
            return cmd_preprocess(cfg)
        if args.command == "search":
            return cmd_search(cfg, args.resume)
        if args.command == "derive":
            return cmd_derive(cfg, args.k)
        if args.command == "train":
            return cmd_train(cfg, args.genotype)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.model, args.split, args.beam)
        if args.command == "report":
            return cmd_report(cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, GenotypeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
