"""Review corpora, vocabulary, word vectors and the planted-concept generator.

Corpus files are JSON lines, one review per line::

    {"schema": 1, "text": "...", "label": 1, "rating": 4.0, "split": "train",
     "aspects": {"aroma": 1}, "annotations": {"aroma": [[3, 7]]}}

Only ``text`` and ``label`` are required. Annotation spans are token
indices, 1-based and inclusive on both ends, counted after tokenization
(whitespace split, lowercased).
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from conrat.errors import ConfigError, FormatError, ParameterError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PAD, UNK = "<pad>", "<unk>"
_TOKEN_RE = re.compile(r"\S+")

Span = Tuple[int, int]


def tokenize(text: str) -> List[str]:
    return [m.group().lower() for m in _TOKEN_RE.finditer(text)]


def tokenize_with_offsets(text: str) -> List[Tuple[str, int, int]]:
    """Tokens with their ``[start, end)`` character offsets in ``text``."""
    return [(m.group().lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


@dataclass
class Review:
    text: str
    tokens: List[str]
    label: int
    rating: Optional[float] = None
    aspects: Dict[str, int] = field(default_factory=dict)
    annotations: Dict[str, List[Span]] = field(default_factory=dict)
    split: str = "train"
    ids: List[int] = field(default_factory=list)

    def gold_tokens(self, aspect: str) -> set:
        """0-based token indices covered by the gold spans of ``aspect``."""
        out = set()
        for start, end in self.annotations.get(aspect, []):
            out.update(range(start - 1, min(end, len(self.tokens))))
        return out

    def to_record(self) -> dict:
        rec = {"schema": SCHEMA_VERSION, "text": self.text, "label": self.label, "split": self.split}
        if self.rating is not None:
            rec["rating"] = self.rating
        if self.aspects:
            rec["aspects"] = dict(self.aspects)
        if self.annotations:
            rec["annotations"] = {a: [list(s) for s in spans] for a, spans in self.annotations.items()}
        return rec


class Vocabulary:
    """Token to index map with ``<pad>`` at 0 and ``<unk>`` at 1."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: 0, UNK: 1}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def build(cls, documents: Iterable[Sequence[str]], min_count: int = 1):
        """Order is by descending frequency, then alphabetical, so it is stable."""
        counts = Counter(tok for doc in documents for tok in doc)
        ranked = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
        return cls(ranked)

    def add(self, token):
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @property
    def pad_index(self):
        return 0

    @property
    def unk_index(self):
        return 1

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.stoi.get(t, 1) for t in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.itos[i] for i in ids]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path):
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        vocab = cls()
        for tok in Path(path).read_text(encoding="utf-8").splitlines()[2:]:
            vocab.add(tok)
        return vocab


def _parse_record(rec, lineno, truncation):
    if not isinstance(rec, dict):
        raise FormatError("record is not a JSON object", lineno)
    if "text" not in rec or not isinstance(rec["text"], str):
        raise FormatError("missing or non-string 'text'", lineno)
    if "label" not in rec or rec["label"] is None:
        raise FormatError("missing label", lineno)
    label = rec["label"]
    if label not in (0, 1) or isinstance(label, bool):
        raise FormatError(f"label must be 0 or 1, got {label!r}", lineno)
    tokens = tokenize(rec["text"])
    if truncation is not None:
        tokens = tokens[:truncation]
    if not tokens:
        raise FormatError("empty text after tokenization", lineno)
    annotations = {}
    for aspect, spans in (rec.get("annotations") or {}).items():
        kept = []
        for span in spans:
            start, end = int(span[0]), int(span[1])
            if start < 1 or end < start:
                raise FormatError(f"bad span {span} for aspect {aspect!r}", lineno)
            if start <= len(tokens):
                kept.append((start, min(end, len(tokens))))
        annotations[aspect] = kept
    return Review(
        text=rec["text"],
        tokens=tokens,
        label=int(label),
        rating=rec.get("rating"),
        aspects=dict(rec.get("aspects") or {}),
        annotations=annotations,
        split=rec.get("split", "train"),
    )


def read_jsonl(path) -> List[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON: {exc.msg}", lineno) from None
    return records


def write_jsonl(path, records: Iterable[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_corpus(path, truncation: Optional[int] = 320, vocab: Optional[Vocabulary] = None):
    """Read a JSONL corpus, returning ``(reviews, vocab)``.

    Without a ``vocab`` one is built from the ``train`` split only. Tokens
    outside the vocabulary map to ``<unk>``.
    """
    reviews = [_parse_record(rec, lineno, truncation) for lineno, rec in read_jsonl(path)]
    if vocab is None:
        vocab = Vocabulary.build(r.tokens for r in reviews if r.split == "train")
    for r in reviews:
        r.ids = vocab.encode(r.tokens)
    return reviews, vocab


def split_reviews(reviews: Sequence[Review]) -> Dict[str, List[Review]]:
    out = {"train": [], "val": [], "test": []}
    for r in reviews:
        out.setdefault(r.split, []).append(r)
    return out


def binarize_rating(rating: float, rule: str = "beer") -> Optional[int]:
    """Map a star rating to 0/1, or ``None`` when the review is excluded.

    ``beer``: <= 2 negative, >= 3 positive, scale [0.5, 5].
    ``amazon``: <= 2 negative, >= 4 positive, scale [1, 5].
    """
    if rule == "beer":
        lo, hi, pos = 0.5, 5.0, 3.0
    elif rule == "amazon":
        lo, hi, pos = 1.0, 5.0, 4.0
    else:
        raise ParameterError(f"unknown binarization rule {rule!r}")
    if not lo <= rating <= hi:
        raise ParameterError(f"rating {rating} outside the {rule} scale [{lo}, {hi}]")
    if rating <= 2.0:
        return 0
    if rating >= pos:
        return 1
    return None


def pros_cons_annotations(tokens: Sequence[str], span_length: int = 50) -> Dict[str, List[Span]]:
    """Pseudo-rationales: the tokens following ``pros:`` and ``cons:``.

    Each span holds at most ``span_length`` tokens and stops early at the
    other marker. Spans are 1-based inclusive.
    """
    markers = {"pros:": "pros", "cons:": "cons"}
    out: Dict[str, List[Span]] = {"pros": [], "cons": []}
    for i, tok in enumerate(tokens):
        if tok not in markers:
            continue
        end = i
        while end + 1 < len(tokens) and end - i < span_length and tokens[end + 1] not in markers:
            end += 1
        if end > i:
            out[markers[tok]].append((i + 2, end + 1))
    return out


def balanced_sample(reviews: Sequence[Review], n: int, seed: int = 0) -> List[Review]:
    """``n`` reviews with labels balanced to within one document."""
    rng = np.random.default_rng(seed)
    by_label = {0: [], 1: []}
    for r in reviews:
        by_label[r.label].append(r)
    half = n // 2
    counts = {0: half, 1: n - half}
    if len(by_label[1]) < counts[1] or len(by_label[0]) < counts[0]:
        counts = {0: n - half, 1: half}
    if any(len(by_label[k]) < counts[k] for k in (0, 1)):
        raise ConfigError(f"not enough reviews for a balanced sample of {n}")
    picked = []
    for label in (0, 1):
        idx = rng.permutation(len(by_label[label]))[: counts[label]]
        picked.extend(by_label[label][i] for i in sorted(idx))
    order = rng.permutation(len(picked))
    return [picked[i] for i in order]


def assign_splits(reviews: List[Review], sizes: Tuple[int, int, int], seed: int = 0) -> List[Review]:
    """Balanced sample of ``sum(sizes)`` reviews tagged train/val/test.

    Labels are interleaved before slicing, so every split is balanced to
    within one document.
    """
    sample = balanced_sample(reviews, sum(sizes), seed)
    neg = [r for r in sample if r.label == 0]
    pos = [r for r in sample if r.label == 1]
    first, second = (pos, neg) if len(pos) > len(neg) else (neg, pos)
    interleaved = [r for pair in zip(first, second) for r in pair] + first[len(second):]
    i = 0
    for name, size in zip(("train", "val", "test"), sizes):
        for r in interleaved[i : i + size]:
            r.split = name
        i += size
    return interleaved


def prepare_reviews(records: Iterable[dict], rule: str, truncation: Optional[int] = None, pros_cons: bool = False):
    """Binarize raw rated records (``text`` + ``rating``) into labeled reviews."""
    out = []
    for rec in records:
        label = binarize_rating(float(rec["rating"]), rule)
        if label is None:
            continue
        tokens = tokenize(rec["text"])
        if truncation is not None:
            tokens = tokens[:truncation]
        if not tokens:
            continue
        annotations = dict(rec.get("annotations") or {})
        if pros_cons:
            annotations.update(pros_cons_annotations(tokens))
        aspects = {}
        for name, value in (rec.get("aspect_ratings") or {}).items():
            aspect_label = binarize_rating(float(value), rule)
            if aspect_label is not None:
                aspects[name] = aspect_label
        out.append(Review(rec["text"], tokens, label, float(rec["rating"]), aspects, annotations))
    return out


def load_embeddings(path, vocab: Vocabulary, seed: int = 0, dim: Optional[int] = None) -> np.ndarray:
    """``V x D`` matrix from a plain-text word-vector file.

    Rows of words missing from the file are drawn from N(0, 0.1^2) with
    ``seed``; the pad row is zero.
    """
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2 or not parts[0]:
                continue
            try:
                values = [float(x) for x in parts[1:]]
            except ValueError:
                raise FormatError("non-numeric vector component", lineno) from None
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise FormatError(f"expected {dim} components, found {len(values)}", lineno)
            if parts[0] in vocab and parts[0] not in vectors:
                vectors[parts[0]] = values
    if dim is None:
        raise FormatError("no vectors found in embedding file")
    return random_embeddings(vocab, dim, seed, known=vectors)


def random_embeddings(vocab: Vocabulary, dim: int, seed: int = 0, known: Optional[dict] = None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    table = rng.normal(0.0, 0.1, size=(len(vocab), dim)).astype(np.float32)
    for tok, values in (known or {}).items():
        table[vocab.stoi[tok]] = values
    table[vocab.pad_index] = 0.0
    return table


@dataclass
class Batch:
    tokens: torch.Tensor  # (B, T) long, padded with 0
    lengths: torch.Tensor  # (B,)
    labels: torch.Tensor  # (B,)


def collate(reviews: Sequence[Review]) -> Batch:
    """Pad a list of encoded reviews to the longest one in the batch."""
    lengths = torch.tensor([len(r.ids) for r in reviews], dtype=torch.long)
    tokens = torch.zeros(len(reviews), int(lengths.max()), dtype=torch.long)
    for i, r in enumerate(reviews):
        tokens[i, : len(r.ids)] = torch.tensor(r.ids, dtype=torch.long)
    labels = torch.tensor([r.label for r in reviews], dtype=torch.long)
    return Batch(tokens, lengths, labels)


def batches(reviews: Sequence[Review], batch_size: int, shuffle: bool = False, seed: Optional[int] = None):
    order = np.arange(len(reviews))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(reviews))
    for i in range(0, len(order), batch_size):
        yield collate([reviews[j] for j in order[i : i + batch_size]])


# -- planted-concept corpus --------------------------------------------------


@dataclass
class SyntheticConfig:
    vocab_size: int = 100
    num_aspects: int = 3
    chunk_length: int = 5
    num_docs: int = 2000
    noise: float = 0.0
    seed: int = 0
    doc_length: int = 20
    words_per_polarity: int = 3
    label_rule: str = "majority"
    aspect_presence: float = 1.0
    splits: Tuple[float, float, float] = (0.8, 0.1, 0.1)


def synthetic_lexicon(cfg: SyntheticConfig):
    """Return ``(filler, lexicon)``; ``lexicon[a][p]`` lists aspect ``a`` words of polarity ``p``."""
    n_polar = cfg.num_aspects * 2 * cfg.words_per_polarity
    n_filler = cfg.vocab_size - n_polar
    if n_filler < 1:
        raise ConfigError(f"vocab_size {cfg.vocab_size} too small for {cfg.num_aspects} aspects")
    lexicon = [
        [[f"a{a}{'neg' if p == 0 else 'pos'}{i}" for i in range(cfg.words_per_polarity)] for p in (0, 1)]
        for a in range(cfg.num_aspects)
    ]
    filler = [f"w{i}" for i in range(n_filler)]
    return filler, lexicon


def aspect_name(a: int) -> str:
    return f"aspect{a + 1}"


def generate_synthetic(cfg: SyntheticConfig) -> List[dict]:
    """Planted-concept corpus as JSONL-ready records.

    Each document is filler words with one chunk of ``chunk_length`` words
    per aspect, placed at random disjoint positions in random order. Every
    word of a chunk comes from that aspect's lexicon of the chunk's
    polarity. With ``label_rule="shared"`` every chunk carries the document
    label's polarity; with ``"majority"`` chunk polarities are independent
    and the label is their majority, ties going to the first aspect.
    Each aspect is mentioned with probability ``aspect_presence`` (at least
    one always is); an unmentioned aspect has no chunk, no annotation and no
    vote. ``noise`` is the probability of flipping the label afterwards.
    """
    if min(cfg.vocab_size, cfg.num_aspects, cfg.chunk_length, cfg.num_docs, cfg.doc_length) < 1:
        raise ConfigError("synthetic parameters must be positive")
    if not 0.0 <= cfg.noise <= 1.0:
        raise ConfigError("noise must lie in [0, 1]")
    if not 0.0 < cfg.aspect_presence <= 1.0:
        raise ConfigError("aspect_presence must lie in (0, 1]")
    if cfg.label_rule not in ("shared", "majority"):
        raise ConfigError(f"unknown label rule {cfg.label_rule!r}")
    free = cfg.doc_length - cfg.num_aspects * cfg.chunk_length
    if free < 0:
        raise ConfigError(
            f"{cfg.num_aspects} chunks of {cfg.chunk_length} words do not fit in documents of {cfg.doc_length}"
        )
    filler, lexicon = synthetic_lexicon(cfg)
    rng = np.random.default_rng(cfg.seed)
    # separate stream so the noise level does not change the documents
    flip_rng = np.random.default_rng([cfg.seed, 1])
    n_train = int(round(cfg.splits[0] * cfg.num_docs))
    n_val = int(round(cfg.splits[1] * cfg.num_docs))
    records = []
    for d in range(cfg.num_docs):
        if cfg.label_rule == "shared":
            polarities = np.full(cfg.num_aspects, rng.integers(0, 2))
        else:
            polarities = rng.integers(0, 2, size=cfg.num_aspects)
        present = np.ones(cfg.num_aspects, dtype=bool)
        if cfg.aspect_presence < 1.0:
            present = rng.random(cfg.num_aspects) < cfg.aspect_presence
            while not present.any():
                present = rng.random(cfg.num_aspects) < cfg.aspect_presence
        order = [a for a in rng.permutation(cfg.num_aspects) if present[a]]
        gap_budget = cfg.doc_length - len(order) * cfg.chunk_length
        # split the filler budget into len(order) + 1 gaps
        cuts = np.sort(rng.integers(0, gap_budget + 1, size=len(order)))
        gaps = np.diff(np.concatenate([[0], cuts, [gap_budget]]))
        words, spans = [], {}
        for slot, a in enumerate(order):
            words.extend(rng.choice(filler, size=gaps[slot]).tolist())
            start = len(words) + 1
            words.extend(rng.choice(lexicon[a][polarities[a]], size=cfg.chunk_length).tolist())
            spans[aspect_name(a)] = [[start, start + cfg.chunk_length - 1]]
        words.extend(rng.choice(filler, size=gaps[-1]).tolist())
        votes = polarities[present]
        if 2 * int(votes.sum()) == len(votes):
            label = int(votes[0])
        else:
            label = int(2 * int(votes.sum()) > len(votes))
        if flip_rng.random() < cfg.noise:
            label = 1 - label
        split = "train" if d < n_train else "val" if d < n_train + n_val else "test"
        records.append(
            {
                "schema": SCHEMA_VERSION,
                "text": " ".join(words),
                "label": label,
                "split": split,
                "aspects": {aspect_name(a): int(polarities[a]) for a in range(cfg.num_aspects) if present[a]},
                "annotations": {aspect_name(a): spans[aspect_name(a)] for a in range(cfg.num_aspects) if present[a]},
            }
        )
    return records


def reviews_from_records(records: Iterable[dict], truncation: Optional[int] = None, vocab: Optional[Vocabulary] = None):
    """Same as ``load_corpus`` for in-memory records."""
    reviews = [_parse_record(rec, i, truncation) for i, rec in enumerate(records, 1)]
    if vocab is None:
        vocab = Vocabulary.build(r.tokens for r in reviews if r.split == "train")
    for r in reviews:
        r.ids = vocab.encode(r.tokens)
    return reviews, vocab
