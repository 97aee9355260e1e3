"""Token-level rationale metrics, concept-to-aspect matching and test evaluation.

Concept-to-aspect matching is automated: the one-to-one assignment that
maximizes the summed mean F1 on the validation split. Reports label it as
such (``"assignment": "max-f1 matching"``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from conrat.data import Review
from conrat.errors import ConfigError
from conrat.inference import PruneReport, eval_outputs, presence_override

METRIC_SCHEMA = 1


def token_prf(predicted: Set[int], gold: Set[int]) -> Tuple[float, float, float]:
    """Precision, recall and F1 of a predicted token set against a gold set."""
    predicted, gold = set(predicted), set(gold)
    hit = len(predicted & gold)
    p = hit / len(predicted) if predicted else 0.0
    r = hit / len(gold) if gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def annotated_aspects(reviews: Sequence[Review]) -> List[str]:
    names = set()
    for r in reviews:
        names.update(a for a, spans in r.annotations.items() if spans)
    return sorted(names)


def effective_token_sets(model, reviews: Sequence[Review], prune_report: Optional[PruneReport] = None, batch_size: int = 256):
    """Per document, the list of K token-index sets each concept contributes.

    A concept contributes its eval-mode mask when its presence is 1 (after
    any pruning override) and nothing otherwise.
    """
    override = presence_override(prune_report, model.config.num_concepts)
    out_sets = []
    for batch, out in eval_outputs(model, reviews, batch_size, override):
        effective = (out.masks > 0) & (out.presence.unsqueeze(-1) > 0.5)
        for row in effective:
            out_sets.append([set(row[k].nonzero().flatten().tolist()) for k in range(row.shape[0])])
    return out_sets


def f1_matrix(concept_sets, reviews: Sequence[Review], aspects: Sequence[str]) -> np.ndarray:
    """``K x A`` mean F1 of every (concept, aspect) pair over documents annotated for the aspect."""
    k = len(concept_sets[0]) if concept_sets else 0
    sums = np.zeros((k, len(aspects)))
    counts = np.zeros(len(aspects))
    for sets, review in zip(concept_sets, reviews):
        for a, aspect in enumerate(aspects):
            if not review.annotations.get(aspect):
                continue
            gold = review.gold_tokens(aspect)
            counts[a] += 1
            for c in range(k):
                sums[c, a] += token_prf(sets[c], gold)[2]
    return sums / np.maximum(counts, 1)


def assignment_from_matrix(scores: np.ndarray) -> Dict[int, int]:
    """Maximum-weight one-to-one matching of concepts (rows) to aspects (columns).

    Needs at least as many concepts as aspects; surplus concepts stay
    unassigned. Returns ``{concept: aspect}`` with 0-based indices.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.shape[0] < scores.shape[1]:
        raise ConfigError(f"{scores.shape[0]} concepts cannot cover {scores.shape[1]} aspects")
    rows, cols = linear_sum_assignment(scores, maximize=True)
    return {int(r): int(c) for r, c in zip(rows, cols)}


def assign_concepts_to_aspects(model, reviews: Sequence[Review], aspects: Optional[Sequence[str]] = None, prune_report=None):
    """Fit the concept-to-aspect map on annotated (validation) documents.

    Returns ``(assignment, f1)`` where ``assignment`` maps concept index to
    aspect name.
    """
    annotated = [r for r in reviews if any(r.annotations.values())]
    if not annotated:
        raise ConfigError("concept-to-aspect assignment needs annotated documents")
    aspects = list(aspects) if aspects is not None else annotated_aspects(annotated)
    sets = effective_token_sets(model, annotated, prune_report)
    scores = f1_matrix(sets, annotated, aspects)
    if prune_report is not None:
        kept = list(prune_report.kept)
        sub = assignment_from_matrix(scores[kept])
        return {kept[c]: aspects[a] for c, a in sub.items()}, scores
    return {c: aspects[a] for c, a in assignment_from_matrix(scores).items()}, scores


@dataclass
class AspectScore:
    precision: float
    recall: float
    f1: float
    documents: int
    concept: Optional[int] = None


@dataclass
class MetricReport:
    accuracy: float
    aspects: Dict[str, AspectScore] = field(default_factory=dict)
    assignment: Dict[int, str] = field(default_factory=dict)
    overlap: Dict[str, float] = field(default_factory=dict)
    documents: int = 0

    @property
    def macro(self) -> AspectScore:
        if not self.aspects:
            return AspectScore(0.0, 0.0, 0.0, 0)
        vals = list(self.aspects.values())
        return AspectScore(
            float(np.mean([v.precision for v in vals])),
            float(np.mean([v.recall for v in vals])),
            float(np.mean([v.f1 for v in vals])),
            int(sum(v.documents for v in vals)),
        )

    def to_dict(self):
        m = self.macro
        return {
            "schema": METRIC_SCHEMA,
            "accuracy": self.accuracy,
            "documents": self.documents,
            "assignment_method": "max-f1 matching",
            "assignment": {str(c + 1): a for c, a in sorted(self.assignment.items())},
            "macro": {"precision": m.precision, "recall": m.recall, "f1": m.f1},
            "aspects": {
                name: {
                    "precision": s.precision,
                    "recall": s.recall,
                    "f1": s.f1,
                    "documents": s.documents,
                    "concept": None if s.concept is None else s.concept + 1,
                }
                for name, s in self.aspects.items()
            },
            "overlap": dict(self.overlap),
        }

    def table(self) -> str:
        lines = [f"{'aspect':<16} {'concept':>7} {'P':>7} {'R':>7} {'F1':>7} {'docs':>6}"]
        for name, s in self.aspects.items():
            concept = "-" if s.concept is None else str(s.concept + 1)
            lines.append(f"{name:<16} {concept:>7} {s.precision:7.3f} {s.recall:7.3f} {s.f1:7.3f} {s.documents:6d}")
        m = self.macro
        lines.append(f"{'macro':<16} {'':>7} {m.precision:7.3f} {m.recall:7.3f} {m.f1:7.3f}")
        lines.append(f"accuracy {self.accuracy:.4f} over {self.documents} documents")
        return "\n".join(lines)


def evaluate(model, reviews: Sequence[Review], assignment: Dict[int, str], prune_report: Optional[PruneReport] = None, batch_size: int = 256) -> MetricReport:
    """Accuracy over all documents and per-aspect token P/R/F1 over annotated ones.

    Per-aspect scores are averaged over documents; the macro score averages
    aspects. ``assignment`` must come from the validation split.
    """
    k_total = model.config.num_concepts
    for c in assignment:
        if not 0 <= c < k_total:
            raise ConfigError(f"assignment refers to concept {c + 1} but the model has {k_total}")
    override = presence_override(prune_report, k_total)
    correct, n = 0, 0
    sums = {a: np.zeros(3) for a in assignment.values()}
    counts = {a: 0 for a in assignment.values()}
    overlap_sum, overlap_docs = None, 0
    idx = 0
    for batch, out in eval_outputs(model, reviews, batch_size, override):
        correct += int((out.log_probs.argmax(-1) == batch.labels).sum())
        n += len(batch.labels)
        effective = (out.masks > 0) & (out.presence.unsqueeze(-1) > 0.5)
        hard = (out.masks > 0).to(torch.float64)
        ratios = (hard @ hard.transpose(-1, -2)) / model.config.concept_length
        per_doc = ratios.sum((-1, -2)) - torch.diagonal(ratios, dim1=-2, dim2=-1).sum(-1)
        overlap_sum = float(per_doc.sum()) + (overlap_sum or 0.0)
        overlap_docs += len(batch.labels)
        for j in range(len(batch.labels)):
            review = reviews[idx + j]
            for concept, aspect in assignment.items():
                if not review.annotations.get(aspect):
                    continue
                pred = set(effective[j, concept].nonzero().flatten().tolist())
                sums[aspect] += token_prf(pred, review.gold_tokens(aspect))
                counts[aspect] += 1
        idx += len(batch.labels)
    inverse = {a: c for c, a in assignment.items()}
    aspects = {}
    for aspect in sorted(sums):
        cnt = counts[aspect]
        p, r, f = (sums[aspect] / cnt) if cnt else (0.0, 0.0, 0.0)
        aspects[aspect] = AspectScore(float(p), float(r), float(f), cnt, inverse[aspect])
    pairs = k_total * (k_total - 1)
    overlap = {"mean_pair_overlap": (overlap_sum / overlap_docs / pairs) if pairs and overlap_docs else 0.0}
    return MetricReport(correct / n if n else float("nan"), aspects, dict(assignment), overlap, n)
