import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conrat.errors import ParameterError
from conrat.masking import build_masks
from conrat.model import (
    ConRAT,
    LossWeights,
    ModelConfig,
    SingleRationaleModel,
    Teacher,
    aggregate,
    diversity_loss,
    overlap_loss,
    total_loss,
)


def tiny_config(**kw):
    base = dict(vocab_size=30, embedding_dim=6, hidden_size=8, num_concepts=2, concept_length=3)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(n=4, t=12, vocab=30, seed=0, min_len=None):
    g = torch.Generator().manual_seed(seed)
    lengths = torch.randint(min_len or max(1, t // 2), t + 1, (n,), generator=g)
    lengths[0] = t
    tokens = torch.randint(2, vocab, (n, t), generator=g)
    tokens[torch.arange(t) >= lengths.unsqueeze(-1)] = 0
    labels = torch.randint(0, 2, (n,), generator=g)
    return tokens, lengths, labels


# -- overlap ---------------------------------------------------------------------


def test_overlap_hand_computed_gram():
    # 1-based starts (1, 3, 7) with length 4 in a document of 10 tokens
    masks = build_masks(torch.tensor([0, 2, 6]), 4, 10)
    assert (masks @ masks.T).tolist() == [[4, 2, 0], [2, 4, 0], [0, 0, 4]]
    assert overlap_loss(masks, 4).item() == 8.0


def test_overlap_disjoint_full_length_is_zero():
    masks = build_masks(torch.tensor([0, 4, 8]), 4, 12)
    assert overlap_loss(masks, 4).item() == 0.0


def test_overlap_identical_masks():
    masks = build_masks(torch.tensor([2, 2]), 5, 10)
    assert overlap_loss(masks, 5).item() == 2 * 5**2


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 30), st.data())
def test_overlap_zero_iff_disjoint_and_full(k, length, t, data):
    starts = data.draw(st.lists(st.integers(0, t - 1), min_size=k, max_size=k))
    masks = build_masks(torch.tensor(starts), length, t)
    rows = [set(np.flatnonzero(r.numpy())) for r in masks]
    disjoint = all(not (a & b) for a, b in itertools.combinations(rows, 2))
    full = all(len(r) == length for r in rows)
    assert (overlap_loss(masks, length).item() == 0.0) == (disjoint and full)


# -- diversity -------------------------------------------------------------------


@pytest.mark.parametrize(
    "reps,expected",
    [
        ([[1.0, 0.0], [0.0, 1.0]], 0.0),
        ([[1.0, 0.0], [1.0, 0.0]], 1.0),
        ([[1.0, 0.0], [-1.0, 0.0]], -1.0),
    ],
)
def test_diversity_constructions(reps, expected):
    assert diversity_loss(torch.tensor(reps)).item() == expected


def test_diversity_single_concept_and_zero_rows():
    assert diversity_loss(torch.randn(1, 5)).item() == 0.0
    reps = torch.tensor([[0.0, 0.0], [1.0, 2.0], [1.0, 2.0]])
    # only the ordered pair (2, 3) and (3, 2) contribute, each with cosine 1
    assert diversity_loss(reps).item() == pytest.approx(2 / 6)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000))
def test_diversity_symmetric_and_scale_invariant(k, seed):
    g = torch.Generator().manual_seed(seed)
    reps = torch.randn(k, 4, generator=g, dtype=torch.float64)
    perm = torch.randperm(k, generator=g)
    scale = torch.rand(k, 1, generator=g, dtype=torch.float64) * 10 + 0.1
    base = diversity_loss(reps).item()
    assert diversity_loss(reps[perm]).item() == pytest.approx(base, abs=1e-12)
    assert diversity_loss(reps * scale).item() == pytest.approx(base, abs=1e-12)


# -- aggregation and total loss --------------------------------------------------


def test_all_absent_concepts_give_uniform_prediction():
    logits = aggregate(torch.randn(3, 2), torch.zeros(3), torch.ones(3))
    assert logits.tolist() == [0.0, 0.0]
    assert torch.softmax(logits, -1).tolist() == [0.5, 0.5]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_aggregation_is_linear_in_alpha(k, seed):
    g = torch.Generator().manual_seed(seed)
    p = torch.randn(k, 2, generator=g, dtype=torch.float64)
    s = torch.rand(k, generator=g, dtype=torch.float64)
    a = torch.randn(k, generator=g, dtype=torch.float64)
    one, two = aggregate(p, s, a), aggregate(p, s, 2 * a)
    assert torch.allclose(two, 2 * one, rtol=0, atol=1e-12)
    if not torch.isclose(one[0], one[1]):
        assert one.argmax() == two.argmax()


def _output_with(log_probs, masks, reps):
    model_out = type("Out", (), {})()
    model_out.log_probs = log_probs
    model_out.masks = masks
    model_out.concept_reps = reps
    return model_out


def test_total_loss_is_cross_entropy_when_weights_vanish():
    model = ConRAT(tiny_config())
    tokens, lengths, labels = random_batch()
    out = model(tokens, lengths, seed=0)
    losses = total_loss(out, labels, LossWeights(0, 0, 0), 3)
    assert losses.total.item() == torch.nn.functional.nll_loss(out.log_probs, labels).item()


def test_distillation_term_arithmetic():
    log_probs = torch.log(torch.tensor([[0.4, 0.6]]))
    masks = build_masks(torch.tensor([[0, 3]]), 3, 6)
    reps = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])
    out = _output_with(log_probs, masks, reps)
    losses = total_loss(out, torch.tensor([1]), LossWeights(0.05, 0.05, 0.5), 3, teacher_prob=torch.tensor([0.9]))
    assert losses.distill.item() == pytest.approx(0.09, abs=1e-6)
    assert losses.total.item() - losses.pred.item() == pytest.approx(0.045, abs=1e-6)


def test_total_loss_near_zero_at_the_optimum():
    log_probs = torch.log(torch.tensor([[1e-9, 1.0 - 1e-9]]))
    masks = build_masks(torch.tensor([[0, 3]]), 3, 6)
    reps = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])
    losses = total_loss(_output_with(log_probs, masks, reps), torch.tensor([1]), LossWeights(), 3)
    assert losses.total.item() == pytest.approx(0.0, abs=1e-6)


# -- the full model --------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ParameterError):
        tiny_config(num_concepts=0)
    with pytest.raises(ParameterError):
        tiny_config(gen_temperature=0.0)
    with pytest.raises(ParameterError):
        LossWeights(overlap=-1.0)


@pytest.mark.parametrize("train", [True, False])
def test_forward_shapes_and_normalization(train):
    model = ConRAT(tiny_config(num_concepts=3))
    model.train(train)
    tokens, lengths, _ = random_batch(n=5)
    out = model(tokens, lengths, seed=1)
    assert out.log_probs.shape == (5, 2)
    assert out.concept_logits.shape == (5, 3, 2)
    assert out.masks.shape == (5, 3, 12)
    assert torch.allclose(out.log_probs.logsumexp(-1), torch.zeros(5), atol=1e-5)
    assert bool((out.starts < lengths.unsqueeze(-1)).all())
    pad = torch.arange(12) >= lengths.view(-1, 1, 1)
    assert float(out.masks.detach()[pad.expand_as(out.masks)].abs().sum()) == 0.0
    if train:
        assert bool(((out.presence > 0) & (out.presence < 1)).all())
    else:
        assert set(out.presence.unique().tolist()) <= {0.0, 1.0}
        assert set(out.masks.unique().tolist()) <= {0.0, 1.0}


def test_eval_forward_is_deterministic():
    model = ConRAT(tiny_config()).eval()
    tokens, lengths, _ = random_batch()
    a, b = model(tokens, lengths, seed=1), model(tokens, lengths, seed=2)
    assert torch.equal(a.log_probs, b.log_probs) and torch.equal(a.starts, b.starts)


def test_alpha_starts_at_one_over_k():
    model = ConRAT(tiny_config(num_concepts=4))
    assert model.alpha.tolist() == [0.25] * 4


def test_cnn_selector_variant_runs():
    model = ConRAT(tiny_config(use_cnn=True, cnn_maps=4))
    tokens, lengths, labels = random_batch()
    out = model(tokens, lengths, seed=0)
    total_loss(out, labels, LossWeights(), 3).total.backward()
    assert model.selector.features.convs[0].weight.grad is not None


def test_finite_difference_gradients():
    torch.manual_seed(0)
    model = ConRAT(tiny_config(num_concepts=2, hidden_size=8)).double()
    tokens, lengths, labels = random_batch(n=3, t=12)
    starts = torch.tensor([[0, 5], [2, 3], [1, 4]])
    presence = torch.tensor([[0.7, 0.4], [0.9, 0.2], [0.5, 0.6]], dtype=torch.float64)
    teacher_prob = torch.tensor([0.8, 0.3, 0.6], dtype=torch.float64)

    def loss():
        out = model(tokens, lengths, starts=starts, presence=presence)
        return total_loss(out, labels, LossWeights(0.05, 0.05, 0.5), 3, teacher_prob).total

    model.zero_grad()
    loss().backward()
    g = torch.Generator().manual_seed(1)
    h = 1e-6
    for name, p in model.named_parameters():
        if p.grad is None:
            continue
        flat = p.data.view(-1)
        for i in torch.randperm(flat.numel(), generator=g)[:4].tolist():
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss().item()
            flat[i] = orig - h
            down = loss().item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            an = p.grad.view(-1)[i].item()
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-4), (name, i, fd, an)


def test_gating_independence_of_absent_concept():
    model = ConRAT(tiny_config(num_concepts=3)).eval()
    tokens, lengths, _ = random_batch(n=1, t=12)
    starts = torch.tensor([[0, 4, 8]])
    presence = torch.tensor([[1.0, 0.0, 1.0]])
    base = model(tokens, lengths, starts=starts, presence=presence).log_probs
    perturbed = tokens.clone()
    perturbed[0, 4:7] = torch.tensor([3, 4, 5])
    again = model(perturbed, lengths, starts=starts, presence=presence).log_probs
    assert torch.equal(base, again)


@pytest.mark.parametrize("train", [False, True])
def test_single_concept_matches_single_rationale_model(train):
    base = ConRAT(tiny_config(num_concepts=1))
    base.alpha.data.fill_(1.0)
    single = SingleRationaleModel(base)
    base.train(train)
    single.train(train)
    tokens, lengths, _ = random_batch(n=8)
    a = base(tokens, lengths, seed=3, presence=torch.ones(8, 1))
    b = single(tokens, lengths, seed=3)
    assert torch.equal(a.starts, b.starts)
    assert torch.equal(a.log_probs, b.log_probs)


def test_single_rationale_view_requires_one_concept():
    with pytest.raises(ParameterError):
        SingleRationaleModel(ConRAT(tiny_config(num_concepts=2)))


def test_teacher_outputs_log_probabilities():
    teacher = Teacher(tiny_config())
    tokens, lengths, _ = random_batch()
    out = teacher(tokens, lengths)
    assert torch.allclose(out.logsumexp(-1), torch.zeros(len(tokens)), atol=1e-6)


def test_parameter_groups_cover_everything():
    model = ConRAT(tiny_config())
    grouped = sum(model.count_parameters()[k] for k in ("embedding", "generator", "selector", "predictor", "alpha"))
    assert grouped == sum(p.numel() for p in model.parameters())


def test_presence_bias_sets_the_starting_gate():
    model = ConRAT(tiny_config(presence_bias=2.5))
    assert torch.equal(model.selector.gate_bias.data, torch.full((2,), 2.5))
    assert model.selector.gate_bias.requires_grad
