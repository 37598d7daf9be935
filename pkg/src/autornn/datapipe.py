"""Caption preprocessing, vocabulary, synthetic scenes, Karpathy JSON, batching."""
from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkernel import Rng, checkpoint_exists, load_checkpoint, save_checkpoint
from .supernet import Batch

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
MAX_CAPTION_TOKENS = 16
SPLITS = ("train", "val", "test")

_WS = re.compile(r"\s+")
_NON_ALPHA = re.compile(r"[^a-z ]")


class DataError(ValueError):
    pass


@dataclass
class RawCaptionRecord:
    image_id: str
    split: str
    captions: list[str]
    feature: np.ndarray | None = None

    @property
    def has_feature(self) -> bool:
        return self.feature is not None


@dataclass
class EncodedExample:
    image_id: str
    ids: np.ndarray
    feature: np.ndarray | None
    truncated: bool = False

    @property
    def length(self) -> int:
        return len(self.ids)


def preprocess_caption(raw: str) -> list[str]:
    """Lowercase, delete everything outside a-z and space, split on spaces.

    Whitespace runs count as a space; other non-letters are deleted in
    place, so "A-B" becomes "ab".
    """
    text = _WS.sub(" ", raw.lower())
    return _NON_ALPHA.sub("", text).split()


class Vocabulary:
    def __init__(self, itos: list[str], min_count: int, counts: dict[str, int] | None = None):
        if tuple(itos[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.itos = list(itos)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.min_count = min_count
        self.counts = counts or {}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def to_json(self) -> str:
        return json.dumps(self.stoi, indent=1)

    @classmethod
    def from_json(cls, text: str, min_count: int = 5) -> "Vocabulary":
        stoi = json.loads(text)
        itos = [None] * len(stoi)
        for t, i in stoi.items():
            itos[i] = t
        return cls(itos, min_count)


def build_vocab(corpus, min_count: int = 5) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times.

    Ids after the specials follow (count desc, token asc), so the result
    does not depend on corpus order.
    """
    counts = Counter()
    n = 0
    for tokens in corpus:
        counts.update(tokens)
        n += 1
    if n == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept, min_count, dict(counts))


def encode(tokens, vocab: Vocabulary, max_tokens: int = MAX_CAPTION_TOKENS):
    """Ids framed as BOS ... EOS with the interior truncated to ``max_tokens``.

    Returns ``(ids, truncated)``.
    """
    truncated = len(tokens) > max_tokens
    body = [vocab.id(t) for t in tokens[:max_tokens]]
    return np.array([BOS] + body + [EOS], dtype=np.int64), truncated


def ids_to_tokens(ids, itos) -> list[str]:
    """Tokens up to the first EOS, skipping PAD/BOS."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        out.append(itos[i])
    return out


def decode(ids, vocab: Vocabulary) -> list[str]:
    return ids_to_tokens(ids, vocab.itos)


def split_of(image_id: str) -> str:
    """Stable 80/10/10 split from a hash of the id."""
    bucket = int.from_bytes(hashlib.sha256(image_id.encode()).digest()[:8], "little") % 100
    if bucket < 80:
        return "train"
    return "val" if bucket < 90 else "test"


# -- synthetic scenes ------------------------------------------------------

@dataclass
class SyntheticSceneSpec:
    """Scene grammar for the synthetic captioning task.

    ``sizes`` is optional; when non-empty the templates must use ``{s1}``
    (and ``{s2}``) and the feature gains a size one-hot per slot.
    """
    objects: tuple = ("ball", "box", "cat", "dog", "cup", "chair")
    attributes: tuple = ("red", "blue", "green", "white", "black")
    sizes: tuple = ()
    relations: tuple = ("on", "under", "near", "behind")
    min_objects: int = 1
    max_objects: int = 2
    noise: float = 0.0
    single_template: str = "a {a1} {o1}"
    pair_template: str = "a {a1} {o1} {r} a {a2} {o2}"

    def __post_init__(self):
        words = list(self.objects) + list(self.attributes) + list(self.sizes) + list(self.relations)
        if len(set(words)) != len(words):
            raise ValueError("scene symbols must be distinct words")
        if not 1 <= self.min_objects <= self.max_objects <= 2:
            raise ValueError("scenes hold one or two objects")
        if not self.objects or not self.attributes or not self.relations:
            raise ValueError("objects, attributes and relations must be non-empty")
        if self.sizes and "{s1}" not in self.single_template:
            raise ValueError("templates must place {s1} when sizes are given")

    @property
    def slot_dim(self) -> int:
        return len(self.sizes) + len(self.attributes) + len(self.objects)

    @property
    def feature_dim(self) -> int:
        return 2 * self.slot_dim + len(self.relations)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**d)


def _scene_feature(spec: SyntheticSceneSpec, scene) -> np.ndarray:
    ns, na = len(spec.sizes), len(spec.attributes)
    f = np.zeros(spec.feature_dim)
    for k, (s, a, o) in enumerate(scene["objects"]):
        base = k * spec.slot_dim
        if ns:
            f[base + s] = 1.0
        f[base + ns + a] = 1.0
        f[base + ns + na + o] = 1.0
    if scene["relation"] is not None:
        f[2 * spec.slot_dim + scene["relation"]] = 1.0
    return f


def render_scene(spec: SyntheticSceneSpec, scene) -> str:
    fields = {}
    for k, (s, a, o) in enumerate(scene["objects"], start=1):
        fields[f"a{k}"] = spec.attributes[a]
        fields[f"o{k}"] = spec.objects[o]
        if spec.sizes:
            fields[f"s{k}"] = spec.sizes[s]
    if len(scene["objects"]) == 1:
        return spec.single_template.format(**fields)
    return spec.pair_template.format(r=spec.relations[scene["relation"]], **fields)


def synth_generate(spec: SyntheticSceneSpec, n: int, seed: int) -> list[RawCaptionRecord]:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = Rng(seed)
    out = []
    for k in range(n):
        n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        objs = [(int(rng.integers(0, len(spec.sizes))) if spec.sizes else 0,
                 int(rng.integers(0, len(spec.attributes))),
                 int(rng.integers(0, len(spec.objects)))) for _ in range(n_obj)]
        rel = int(rng.integers(0, len(spec.relations))) if n_obj == 2 else None
        scene = {"objects": objs, "relation": rel}
        feat = _scene_feature(spec, scene)
        if spec.noise > 0:
            feat = feat + rng.normal(0.0, spec.noise, size=feat.shape)
        image_id = f"synth{seed}-{k:06d}"
        out.append(RawCaptionRecord(image_id, split_of(image_id), [render_scene(spec, scene)], feat))
    return out


# -- Karpathy-style JSON ---------------------------------------------------

def _load_json(path: Path):
    raw = path.read_bytes()
    text = raw.decode("utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise DataError(f"{path}: malformed JSON at byte offset {offset}: {exc.msg}") from None


def ingest_karpathy_json(path, features_path=None) -> list[RawCaptionRecord]:
    """Records from ``images[].sentences[].raw`` / ``images[].split``.

    ``restval`` is folded into train. Features come from an optional
    blob+manifest sidecar keyed by image id; records without one keep
    ``feature=None``.
    """
    path = Path(path)
    data = _load_json(path)
    if not isinstance(data, dict) or not isinstance(data.get("images"), list):
        raise DataError(f"{path}: expected an object with an 'images' list")
    feats = {}
    if features_path is not None and checkpoint_exists(features_path):
        feats, _ = load_checkpoint(features_path)
    out = []
    for k, img in enumerate(data["images"]):
        if "split" not in img:
            raise DataError(f"{path}: image #{k} has no split field")
        split = "train" if img["split"] == "restval" else img["split"]
        if split not in SPLITS:
            raise DataError(f"{path}: image #{k} has unknown split {img['split']!r}")
        for key in ("cocoid", "imgid", "filename"):
            if key in img:
                image_id = str(img[key])
                break
        else:
            image_id = str(k)
        sents = img.get("sentences") or []
        caps = [s["raw"] for s in sents if "raw" in s]
        if not caps:
            raise DataError(f"{path}: image {image_id} has no captions")
        f = feats.get(image_id)
        out.append(RawCaptionRecord(image_id, split, caps, None if f is None else f.reshape(-1)))
    return out


def export_karpathy_json(records, path, features_path=None) -> None:
    images = [{"cocoid": r.image_id, "split": r.split,
               "sentences": [{"raw": c} for c in r.captions]} for r in records]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({"images": images}, indent=1))
    if features_path is not None:
        save_checkpoint(features_path, {r.image_id: r.feature for r in records if r.has_feature})


# -- dataset assembly ------------------------------------------------------

@dataclass
class EvalItem:
    image_id: str
    feature: np.ndarray
    refs: list[list[str]]


@dataclass
class CaptionDataset:
    vocab: Vocabulary
    examples: dict[str, list[EncodedExample]]
    items: dict[str, list[EvalItem]]
    stats: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        for split in SPLITS:
            if self.items.get(split):
                return self.items[split][0].feature.shape[0]
        raise DataError("dataset holds no items")

    def examples_for(self, split: str, image_ids) -> list[EncodedExample]:
        wanted = set(image_ids)
        return [ex for ex in self.examples[split] if ex.image_id in wanted]


def prepare_dataset(records, min_count: int = 5, max_tokens: int = MAX_CAPTION_TOKENS,
                    require_features: bool = True, vocab: Vocabulary | None = None) -> CaptionDataset:
    """Vocabulary from training captions (unless given); one example per caption."""
    records = list(records)
    if not records:
        raise DataError("empty corpus")
    if require_features:
        missing = [r.image_id for r in records if not r.has_feature]
        if missing:
            raise DataError(f"{len(missing)} records have no feature (first: {missing[0]})")
    tokenized = {r.image_id: [preprocess_caption(c) for c in r.captions] for r in records}
    if vocab is None:
        vocab = build_vocab((t for r in records if r.split == "train" for t in tokenized[r.image_id]),
                            min_count)
    examples = {s: [] for s in SPLITS}
    items = {s: [] for s in SPLITS}
    n_trunc = 0
    n_empty = 0
    for r in records:
        for toks in tokenized[r.image_id]:
            if not toks:
                n_empty += 1
                continue
            ids, truncated = encode(toks, vocab, max_tokens)
            n_trunc += truncated
            examples[r.split].append(EncodedExample(r.image_id, ids, r.feature, truncated))
        refs = [t for t in tokenized[r.image_id] if t]
        if refs:
            items[r.split].append(EvalItem(r.image_id, r.feature, refs))
    stats = {"vocab_size": len(vocab), "truncated": n_trunc, "empty_captions": n_empty,
             **{f"{s}_examples": len(examples[s]) for s in SPLITS},
             **{f"{s}_images": len(items[s]) for s in SPLITS}}
    return CaptionDataset(vocab, examples, items, stats)


def make_batch(examples) -> Batch:
    if any(ex.feature is None for ex in examples):
        raise DataError("batch contains an example without a feature vector")
    width = max(len(ex.ids) for ex in examples)
    ids = np.full((len(examples), width), PAD, dtype=np.int64)
    mask = np.zeros((len(examples), width))
    for r, ex in enumerate(examples):
        ids[r, :len(ex.ids)] = ex.ids
        mask[r, :len(ex.ids)] = 1.0
    feats = np.stack([ex.feature for ex in examples])
    return Batch(ids, mask, feats, [ex.image_id for ex in examples])


def batch_iter(examples, batch_size: int, seed: int, epoch: int):
    """Epoch-seeded shuffle; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    examples = list(examples)
    order = Rng(seed).child(epoch).permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        yield make_batch([examples[i] for i in order[start:start + batch_size]])
