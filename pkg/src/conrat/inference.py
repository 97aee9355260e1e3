"""Deterministic prediction, concept pruning and rationale extraction."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np
import torch

from conrat.data import Review, Vocabulary, batches, collate
from conrat.errors import ConfigError, ParameterError, VocabularyMismatchError

RATIONALE_SCHEMA = 1


@dataclass
class PruneReport:
    scores: List[float]
    kept: List[int]  # 0-based concept indices, ascending
    k: int

    def to_dict(self):
        return {"scores": list(self.scores), "kept": list(self.kept), "k": self.k}

    @classmethod
    def from_dict(cls, d):
        return cls([float(s) for s in d["scores"]], [int(i) for i in d["kept"]], int(d["k"]))


def pairwise_overlap_ratios(masks: torch.Tensor, length: int) -> torch.Tensor:
    """``|support(M_i) & support(M_j)| / length`` for every concept pair, ``(..., K, K)``."""
    hard = (masks > 0).to(torch.float64)
    return (hard @ hard.transpose(-1, -2)) / length


def overlap_scores_from_masks(mask_batches: Iterable[torch.Tensor], length: int) -> np.ndarray:
    """Mean overlap ratio of each concept against all others, over all documents.

    ``mask_batches`` yields ``(B, K, T)`` tensors (or single ``(K, T)``
    documents).
    """
    total, docs = None, 0
    for masks in mask_batches:
        masks = torch.as_tensor(masks)
        if masks.dim() == 2:
            masks = masks.unsqueeze(0)
        k = masks.shape[-2]
        ratios = pairwise_overlap_ratios(masks, length)
        off = ratios.sum(-1) - torch.diagonal(ratios, dim1=-2, dim2=-1)
        per_doc = off / (k - 1) if k > 1 else torch.zeros_like(off)
        total = per_doc.sum(0) if total is None else total + per_doc.sum(0)
        docs += masks.shape[0]
    if not docs:
        raise ConfigError("overlap scores need at least one validation document")
    return (total / docs).numpy()


@torch.no_grad()
def eval_outputs(model, reviews: Sequence[Review], batch_size: int = 256, presence_override=None):
    """Yield ``(batch, ModelOutput)`` from deterministic eval-mode passes."""
    was_training = model.training
    model.eval()
    try:
        for batch in batches(reviews, batch_size):
            presence = None
            if presence_override is not None:
                presence = presence_override.to(torch.float32).expand(len(batch.labels), -1)
            yield batch, model(batch.tokens, batch.lengths, presence=presence)
    finally:
        model.train(was_training)


def compute_overlap_scores(model, reviews: Sequence[Review], batch_size: int = 256) -> PruneReport:
    """Selector-independent overlap scores on eval-mode masks; nothing is pruned yet."""
    if not reviews:
        raise ConfigError("overlap scores need a non-empty validation set")
    length = model.config.concept_length
    scores = overlap_scores_from_masks((out.masks for _, out in eval_outputs(model, reviews, batch_size)), length)
    k = len(scores)
    return PruneReport([float(s) for s in scores], list(range(k)), k)


def prune(scores: Sequence[float], k: int) -> PruneReport:
    """Keep the ``k`` concepts with the lowest scores; ties go to the lower index."""
    scores = [float(s) for s in scores]
    if not 1 <= k <= len(scores):
        raise ParameterError(f"k must lie in [1, {len(scores)}], got {k}")
    order = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    return PruneReport(scores, sorted(order[:k]), k)


def presence_override(report: Optional[PruneReport], num_concepts: int) -> Optional[torch.Tensor]:
    if report is None:
        return None
    if len(report.scores) != num_concepts or any(not 0 <= i < num_concepts for i in report.kept):
        raise ConfigError(f"prune report does not match a model with {num_concepts} concepts")
    s = torch.zeros(num_concepts)
    s[list(report.kept)] = 1.0
    return s


@dataclass
class ConceptSpan:
    concept: int  # 1-based
    start: int  # 1-based, inclusive
    end: int  # 1-based, inclusive
    presence: float
    contribution: float
    text: str = ""


@dataclass
class Rationale:
    tokens: List[str]
    concepts: List[ConceptSpan] = field(default_factory=list)
    label: int = 0
    probability: float = 0.0
    pruned: bool = False

    def to_dict(self):
        return {
            "schema": RATIONALE_SCHEMA,
            "tokens": list(self.tokens),
            "label": self.label,
            "probability": self.probability,
            "pruned": self.pruned,
            "concepts": [asdict(c) for c in self.concepts],
        }

    def to_json(self, indent=None) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=indent, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d):
        return cls(
            tokens=list(d["tokens"]),
            concepts=[ConceptSpan(**c) for c in d["concepts"]],
            label=int(d["label"]),
            probability=float(d["probability"]),
            pruned=bool(d.get("pruned", False)),
        )


def check_vocabulary(model, vocab: Optional[Vocabulary]):
    expected = getattr(model, "vocab_digest", None)
    if vocab is not None and expected is not None and vocab.digest() != expected:
        raise VocabularyMismatchError("the vocabulary differs from the one the model was trained with")
    if vocab is not None and len(vocab) != model.config.vocab_size:
        raise VocabularyMismatchError(
            f"vocabulary has {len(vocab)} entries, model expects {model.config.vocab_size}"
        )


def rationale_from_output(out, index: int, tokens: Sequence[str], alpha: torch.Tensor, report: Optional[PruneReport]) -> Rationale:
    length = int(out.lengths[index])
    starts = out.starts[index].tolist()
    kept = set(report.kept) if report is not None else None
    spans = []
    for k, start in enumerate(starts):
        if kept is not None and k not in kept:
            continue
        row = (out.masks[index, k, :length] > 0).nonzero().flatten().tolist()
        end = row[-1] if row else start
        margin = out.concept_logits[index, k, 1] - out.concept_logits[index, k, 0]
        spans.append(
            ConceptSpan(
                concept=k + 1,
                start=start + 1,
                end=end + 1,
                presence=float(out.presence[index, k]),
                contribution=float(alpha[k] * margin),
                text=" ".join(tokens[start : end + 1]),
            )
        )
    probs = out.log_probs[index].exp()
    label = int(probs.argmax())
    return Rationale(list(tokens), spans, label, float(probs[label]), pruned=report is not None)


@torch.no_grad()
def explain(model, ids: Sequence[int], tokens: Optional[Sequence[str]] = None, prune_report: Optional[PruneReport] = None, vocab: Optional[Vocabulary] = None):
    """Eval-mode pass over one document, returning ``(Rationale, ModelOutput)``.

    With a prune report, presence is forced to 1 for kept concepts and 0 for
    the others; without one it comes from the selector threshold.
    """
    check_vocabulary(model, vocab)
    ids = list(ids)
    if not ids:
        raise ParameterError("cannot explain an empty document")
    if max(ids) >= model.config.vocab_size or min(ids) < 0:
        raise VocabularyMismatchError("token index outside the model vocabulary")
    if tokens is None:
        tokens = vocab.decode(ids) if vocab is not None else [str(i) for i in ids]
    override = presence_override(prune_report, model.config.num_concepts)
    was_training = model.training
    model.eval()
    try:
        batch = collate([Review("", list(tokens), 0, ids=ids)])
        presence = override.unsqueeze(0) if override is not None else None
        out = model(batch.tokens, batch.lengths, presence=presence)
    finally:
        model.train(was_training)
    return rationale_from_output(out, 0, tokens, model.alpha.detach(), prune_report), out


def explain_many(model, reviews: Sequence[Review], prune_report: Optional[PruneReport] = None, batch_size: int = 256) -> List[Rationale]:
    override = presence_override(prune_report, model.config.num_concepts)
    out_list = []
    i = 0
    for batch, out in eval_outputs(model, reviews, batch_size, override):
        for j in range(len(batch.labels)):
            out_list.append(rationale_from_output(out, j, reviews[i + j].tokens, model.alpha.detach(), prune_report))
        i += len(batch.labels)
    return out_list
