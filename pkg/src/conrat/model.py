"""Concept generator, concept selector and predictor, plus their losses.

Shapes used below: ``B`` batch, ``K`` concepts, ``T`` padded length,
``D`` embedding size, ``H`` recurrent hidden size per direction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from conrat.errors import ParameterError
from conrat.masking import (
    as_generator,
    build_masks,
    concept_masks,
    mask_pad_scores,
    sample_presence,
    sample_starts,
)


@dataclass
class ModelConfig:
    vocab_size: int
    embedding_dim: int = 100
    hidden_size: int = 256
    num_concepts: int = 5
    concept_length: int = 10
    num_classes: int = 2
    dropout: float = 0.0
    gen_temperature: float = 1.0
    sel_temperature: float = 1.0
    attention_size: Optional[int] = None
    use_cnn: bool = False
    cnn_widths: tuple = (3, 5, 7)
    cnn_maps: int = 50
    leaky_slope: float = 0.01
    # initial presence logit, sigmoid(presence_bias) is the starting presence rate
    presence_bias: float = 0.0
    # ablation switch: s_k = 1 for every concept, selector bypassed
    force_presence: bool = False
    train_alpha: bool = True

    def __post_init__(self):
        self.cnn_widths = tuple(self.cnn_widths)
        if self.num_concepts < 1:
            raise ParameterError("num_concepts must be >= 1")
        if self.concept_length < 1:
            raise ParameterError("concept_length must be >= 1")
        if self.gen_temperature <= 0 or self.sel_temperature <= 0:
            raise ParameterError("Gumbel temperatures must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossWeights:
    overlap: float = 0.05
    diversity: float = 0.05
    distill: float = 0.5

    def __post_init__(self):
        for name in ("overlap", "diversity", "distill"):
            if getattr(self, name) < 0:
                raise ParameterError(f"loss weight {name} must be non-negative")


@dataclass
class ModelOutput:
    log_probs: torch.Tensor  # (B, C)
    concept_logits: torch.Tensor  # (B, K, C), P_k before alpha and s
    presence: torch.Tensor  # (B, K)
    masks: torch.Tensor  # (B, K, T)
    starts: torch.Tensor  # (B, K)
    concept_reps: torch.Tensor  # (B, K, dim)
    position_scores: torch.Tensor  # (B, K, T)
    presence_logits: torch.Tensor  # (B, K)
    lengths: torch.Tensor = field(repr=False, default=None)

    @property
    def probs(self):
        return self.log_probs.exp()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    pred: torch.Tensor
    overlap: torch.Tensor
    diversity: torch.Tensor
    distill: torch.Tensor

    def as_floats(self):
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def valid_positions(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device) < lengths.unsqueeze(-1)


def masked_max(h: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    return h.masked_fill(~valid.unsqueeze(-1), float("-inf")).amax(dim=1)


class RecurrentEncoder(nn.Module):
    """Bidirectional GRU over packed sequences; outputs are zero at pads."""

    def __init__(self, input_size, hidden_size):
        super().__init__()
        self.rnn = nn.GRU(input_size, hidden_size, batch_first=True, bidirectional=True)
        self.output_size = 2 * hidden_size

    def forward(self, x, lengths):
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out


class ConvFeatures(nn.Module):
    """Optional pre-attention feature layer: parallel 1-d convolutions of several widths."""

    def __init__(self, input_size, widths=(3, 5, 7), maps=50):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv1d(input_size, maps, w, padding=w // 2) for w in widths)
        self.output_size = maps * len(widths)

    def forward(self, h, valid):
        x = h.transpose(1, 2)
        feats = torch.cat([F.relu(conv(x)) for conv in self.convs], dim=1).transpose(1, 2)
        return feats * valid.unsqueeze(-1).to(feats.dtype)


class ConceptSelector(nn.Module):
    """Attention pooling restricted to each concept's mask, then a per-concept gate.

    The attention scorer is shared by all concepts, so two concepts with the
    same mask get the same representation. Each concept has its own gate
    vector and bias producing the presence logit.
    """

    def __init__(self, input_size, num_concepts, attention_size=None, use_cnn=False, cnn_widths=(3, 5, 7), cnn_maps=50, presence_bias=0.0):
        super().__init__()
        self.features = ConvFeatures(input_size, cnn_widths, cnn_maps) if use_cnn else None
        dim = self.features.output_size if use_cnn else input_size
        attention_size = attention_size or dim
        self.attn_proj = nn.Linear(dim, attention_size)
        self.attn_query = nn.Linear(attention_size, 1, bias=False)
        self.gate = nn.Parameter(torch.zeros(num_concepts, dim))
        self.gate_bias = nn.Parameter(torch.full((num_concepts,), float(presence_bias)))
        nn.init.normal_(self.gate, std=dim ** -0.5)
        self.output_size = dim

    def pool(self, h, masks, valid):
        """Return ``(reps, weights)``; rows with an empty mask pool to zero."""
        feats = self.features(h, valid) if self.features is not None else h
        scores = self.attn_query(torch.tanh(self.attn_proj(feats))).squeeze(-1).unsqueeze(1)
        support = masks.detach() > 0
        top = scores.masked_fill(~support, float("-inf")).amax(-1, keepdim=True)
        top = torch.where(torch.isfinite(top), top, torch.zeros_like(top))
        # masks multiply the unnormalized weights so straight-through gradients reach the generator
        unnorm = masks * torch.exp((scores - top).clamp(max=30.0))
        denom = unnorm.sum(-1, keepdim=True)
        weights = unnorm / torch.where(denom > 0, denom, torch.ones_like(denom))
        return weights @ feats, weights

    def forward(self, h, masks, valid):
        reps, _ = self.pool(h, masks, valid)
        logits = (reps * self.gate).sum(-1) + self.gate_bias
        return reps, logits


def overlap_loss(masks: torch.Tensor, length: int) -> torch.Tensor:
    """``||M M^T - length * I||_F^2`` per document; masks are ``(..., K, T)``."""
    gram = masks @ masks.transpose(-1, -2)
    eye = torch.eye(masks.shape[-2], dtype=masks.dtype, device=masks.device) * length
    return ((gram - eye) ** 2).sum(dim=(-1, -2))


def diversity_loss(reps: torch.Tensor) -> torch.Tensor:
    """Mean cosine similarity over ordered pairs of distinct concepts.

    Zero-norm rows contribute a cosine of 0. With a single concept there are
    no pairs and the loss is 0.
    """
    k = reps.shape[-2]
    if k < 2:
        return reps.new_zeros(reps.shape[:-2])
    norms = torch.linalg.vector_norm(reps, dim=-1, keepdim=True)
    unit = reps / torch.where(norms > 0, norms, torch.ones_like(norms))
    cos = unit @ unit.transpose(-1, -2)
    off = cos.sum(dim=(-1, -2)) - torch.diagonal(cos, dim1=-2, dim2=-1).sum(-1)
    return off / (k * (k - 1))


def aggregate(concept_logits, presence, alpha):
    """``sum_k alpha_k * P_k * s_k`` over the concept axis."""
    return (alpha.unsqueeze(-1) * concept_logits * presence.unsqueeze(-1)).sum(dim=-2)


def total_loss(output: ModelOutput, labels, weights: LossWeights, concept_length: int, teacher_prob=None) -> LossBreakdown:
    """Cross-entropy plus the weighted overlap, diversity and distillation terms, batch-averaged."""
    pred = F.nll_loss(output.log_probs, labels)
    overlap = overlap_loss(output.masks, concept_length).mean()
    div = diversity_loss(output.concept_reps).mean()
    total = pred + weights.overlap * overlap + weights.diversity * div
    if teacher_prob is not None:
        distill = ((teacher_prob - output.log_probs[:, 1].exp()) ** 2).mean()
        total = total + weights.distill * distill
    else:
        distill = pred.new_zeros(())
    return LossBreakdown(total, pred, overlap, div, distill)


class ConRAT(nn.Module):
    """Self-explaining classifier over K contiguous text concepts.

    ``self.training`` selects the mode: in train mode starts are Gumbel
    sampled and presence is relaxed-Bernoulli sampled; in eval mode both are
    deterministic argmax/threshold decisions.
    """

    def __init__(self, config: ModelConfig, embeddings=None):
        super().__init__()
        self.config = config
        c = config
        self.embedding = nn.Embedding(c.vocab_size, c.embedding_dim, padding_idx=0)
        if embeddings is not None:
            self.embedding.weight.data.copy_(torch.as_tensor(embeddings))
        self.dropout = nn.Dropout(c.dropout)
        self.generator = RecurrentEncoder(c.embedding_dim, c.hidden_size)
        self.position_head = nn.Linear(self.generator.output_size, c.num_concepts)
        self.selector = ConceptSelector(
            self.generator.output_size,
            c.num_concepts,
            attention_size=c.attention_size,
            use_cnn=c.use_cnn,
            cnn_widths=c.cnn_widths,
            cnn_maps=c.cnn_maps,
            presence_bias=c.presence_bias,
        )
        self.predictor = RecurrentEncoder(c.embedding_dim, c.hidden_size)
        self.output = nn.Linear(self.predictor.output_size, c.num_classes)
        self.alpha = nn.Parameter(torch.full((c.num_concepts,), 1.0 / c.num_concepts), requires_grad=c.train_alpha)

    def parameter_groups(self):
        return {
            "embedding": list(self.embedding.parameters()),
            "generator": list(self.generator.parameters()) + list(self.position_head.parameters()),
            "selector": list(self.selector.parameters()),
            "predictor": list(self.predictor.parameters()) + list(self.output.parameters()),
            "alpha": [self.alpha],
        }

    def count_parameters(self):
        counts = {name: sum(p.numel() for p in ps) for name, ps in self.parameter_groups().items()}
        counts["total"] = sum(counts.values())
        return counts

    def embed(self, tokens):
        return self.dropout(self.embedding(tokens))

    def generate_concepts(self, emb, lengths, seed=None, starts=None):
        """Return ``(masks, starts, scores, encoded)`` for embedded documents."""
        c = self.config
        valid = valid_positions(lengths, emb.shape[1])
        encoded = self.generator(emb, lengths)
        scores = mask_pad_scores(self.position_head(encoded).transpose(1, 2), valid)
        if starts is not None:
            masks = build_masks(starts, c.concept_length, lengths, max_len=emb.shape[1]).to(emb.dtype)
            return masks, starts, scores, encoded
        starts, soft = sample_starts(scores, c.gen_temperature, train=self.training, seed=seed, valid=valid)
        masks = concept_masks(starts, soft, c.concept_length, lengths, train=self.training)
        return masks, starts, scores, encoded

    def select_concepts(self, encoded, masks, lengths, seed=None, presence=None):
        """Return ``(presence, reps, presence_logits)``."""
        valid = valid_positions(lengths, encoded.shape[1])
        reps, logits = self.selector(encoded, masks, valid)
        if presence is None:
            if self.config.force_presence:
                presence = torch.ones_like(logits)
            else:
                presence = sample_presence(logits, self.config.sel_temperature, train=self.training, seed=seed)
        return presence, reps, logits

    def concept_predictions(self, emb, lengths, masks, presence):
        """Per-concept logits ``P_k`` from the gated inputs ``(M_k * s_k) * X``."""
        b, k, t = masks.shape
        gate = masks * presence.unsqueeze(-1)
        x = emb.unsqueeze(1) * gate.unsqueeze(-1)
        flat_lengths = lengths.repeat_interleave(k)
        h = self.predictor(x.reshape(b * k, t, -1), flat_lengths)
        pooled = masked_max(h, valid_positions(flat_lengths, t))
        hidden = F.leaky_relu(pooled, self.config.leaky_slope)
        return self.output(hidden).reshape(b, k, -1)

    def predict(self, emb, lengths, masks, presence):
        """Return ``(log_probs, concept_logits)``."""
        concept_logits = self.concept_predictions(emb, lengths, masks, presence)
        logits = aggregate(concept_logits, presence, self.alpha)
        return F.log_softmax(logits, dim=-1), concept_logits

    def forward(self, tokens, lengths, seed=None, starts=None, presence=None) -> ModelOutput:
        """Full pass. ``starts``/``presence`` freeze the discrete choices when given."""
        gen = as_generator(seed)
        emb = self.embed(tokens)
        masks, starts, scores, encoded = self.generate_concepts(emb, lengths, seed=gen, starts=starts)
        presence, reps, sel_logits = self.select_concepts(encoded, masks, lengths, seed=gen, presence=presence)
        log_probs, concept_logits = self.predict(emb, lengths, masks, presence)
        return ModelOutput(
            log_probs=log_probs,
            concept_logits=concept_logits,
            presence=presence,
            masks=masks,
            starts=starts,
            concept_reps=reps,
            position_scores=scores,
            presence_logits=sel_logits,
            lengths=lengths,
        )


class SingleRationaleModel(nn.Module):
    """Generator-predictor rationale model with one chunk and no selector.

    Built from a one-concept ``ConRAT``; the submodules are shared, not
    copied, so both views always hold the same parameters.
    """

    def __init__(self, base: ConRAT):
        super().__init__()
        if base.config.num_concepts != 1:
            raise ParameterError("a single-rationale view needs num_concepts == 1")
        self.config = base.config
        self.embedding = base.embedding
        self.dropout = base.dropout
        self.generator = base.generator
        self.position_head = base.position_head
        self.predictor = base.predictor
        self.output = base.output

    def forward(self, tokens, lengths, seed=None, starts=None, presence=None):
        c = self.config
        emb = self.dropout(self.embedding(tokens))
        t = emb.shape[1]
        valid = valid_positions(lengths, t)
        encoded = self.generator(emb, lengths)
        scores = mask_pad_scores(self.position_head(encoded).transpose(1, 2), valid)
        if starts is None:
            starts, soft = sample_starts(scores, c.gen_temperature, train=self.training, seed=as_generator(seed), valid=valid)
            masks = concept_masks(starts, soft, c.concept_length, lengths, train=self.training)
        else:
            masks = build_masks(starts, c.concept_length, lengths, max_len=t).to(emb.dtype)
        h = self.predictor(emb * masks[:, 0].unsqueeze(-1), lengths)
        hidden = F.leaky_relu(masked_max(h, valid), c.leaky_slope)
        logits = self.output(hidden)
        ones = torch.ones(masks.shape[:2], dtype=emb.dtype)
        return ModelOutput(
            log_probs=F.log_softmax(logits, dim=-1),
            concept_logits=logits.unsqueeze(1),
            presence=ones,
            masks=masks,
            starts=starts,
            concept_reps=torch.zeros(masks.shape[0], 1, 1, dtype=emb.dtype),
            position_scores=scores,
            presence_logits=torch.zeros_like(ones),
            lengths=lengths,
        )


class Teacher(nn.Module):
    """Full-input recurrent classifier used as the distillation target."""

    def __init__(self, config: ModelConfig, embeddings=None):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.embedding_dim, padding_idx=0)
        if embeddings is not None:
            self.embedding.weight.data.copy_(torch.as_tensor(embeddings))
        self.dropout = nn.Dropout(config.dropout)
        self.encoder = RecurrentEncoder(config.embedding_dim, config.hidden_size)
        self.output = nn.Linear(self.encoder.output_size, config.num_classes)

    def forward(self, tokens, lengths):
        emb = self.dropout(self.embedding(tokens))
        h = self.encoder(emb, lengths)
        hidden = F.leaky_relu(masked_max(h, valid_positions(lengths, emb.shape[1])), self.config.leaky_slope)
        return F.log_softmax(self.output(hidden), dim=-1)
