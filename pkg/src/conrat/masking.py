"""Hard chunk masks and the differentiable surrogates used to train them.

Positions are 0-based throughout this module. A concept mask with start
``s`` and nominal length ``l`` covers ``[s, min(s + l - 1, T - 1)]``, so a
chunk that runs past the end of the document is truncated rather than shifted.

Forward values are always discrete (one-hot starts, binary masks, binary
presence at eval time). In training the backward pass goes through:

* the tempered softmax of the Gumbel-perturbed position scores, and
* a causal convolution of that softmax with an all-ones kernel of width ``l``,
  which is exactly the hard mask whenever the softmax is one-hot.
"""

from __future__ import annotations

from typing import Optional, Union

import torch
import torch.nn.functional as F

from conrat.errors import BoundsError, DegenerateInputError, ParameterError

PAD_LOGIT = -1e9
GUMBEL_EPS = 1e-10

Seed = Union[int, torch.Generator, None]


def as_generator(seed: Seed) -> Optional[torch.Generator]:
    if seed is None or isinstance(seed, torch.Generator):
        return seed
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def _uniform(shape, generator, eps=GUMBEL_EPS):
    # float64 so that 1 - eps stays below 1
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    return u * (1.0 - 2.0 * eps) + eps


def gumbel_noise(shape, generator=None, dtype=torch.float32):
    u = _uniform(shape, generator)
    return (-torch.log(-torch.log(u))).to(dtype)


def logistic_noise(shape, generator=None, dtype=torch.float32):
    u = _uniform(shape, generator)
    return (torch.log(u) - torch.log1p(-u)).to(dtype)


def _check_temperature(temperature):
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")


def mask_pad_scores(scores: torch.Tensor, valid: Optional[torch.Tensor]) -> torch.Tensor:
    """Replace scores at padded positions with ``PAD_LOGIT``.

    ``valid`` has the shape of ``scores`` without the concept axis, i.e.
    ``(..., T)`` against ``(..., K, T)``.
    """
    if valid is None:
        return scores
    return scores.masked_fill(~valid.bool().unsqueeze(-2), PAD_LOGIT)


def sample_starts(
    scores: torch.Tensor,
    temperature: float = 1.0,
    train: bool = True,
    seed: Seed = None,
    valid: Optional[torch.Tensor] = None,
):
    """Pick one start position per concept row.

    Returns ``(starts, soft)``: integer starts of shape ``(..., K)`` and the
    tempered softmax ``(..., K, T)`` that carries gradients back to
    ``scores``. In train mode Gumbel(0, 1) noise perturbs the scores before
    both the argmax and the softmax; in eval mode the argmax of the raw
    scores is taken. Ties go to the lowest index.
    """
    _check_temperature(temperature)
    if valid is not None and not bool(valid.bool().any(-1).all()):
        raise DegenerateInputError("a document has no valid (non-pad) positions")
    if scores.shape[-1] == 0:
        raise DegenerateInputError("cannot sample a start from an empty sequence")
    scores = mask_pad_scores(scores, valid)
    if train:
        noise = gumbel_noise(scores.shape, as_generator(seed), dtype=scores.dtype)
        scores = scores + noise
    starts = scores.argmax(dim=-1)
    soft = torch.softmax(scores / temperature, dim=-1)
    return starts, soft


def build_masks(starts: torch.Tensor, length: int, lengths, max_len: Optional[int] = None) -> torch.Tensor:
    """Binary masks ``(..., K, T)`` covering ``[start, min(start + length - 1, T - 1)]``.

    ``lengths`` is the real document length, either an int or a tensor with
    the batch shape of ``starts`` minus the concept axis.
    """
    if length < 1:
        raise ParameterError(f"concept length must be >= 1, got {length}")
    starts = torch.as_tensor(starts, dtype=torch.long)
    lengths = torch.as_tensor(lengths, dtype=torch.long)
    if max_len is None:
        max_len = int(lengths.max()) if lengths.numel() else 0
    lengths = lengths.unsqueeze(-1).expand_as(starts)
    if bool((starts < 0).any()) or bool((starts >= lengths).any()):
        raise BoundsError(f"start positions {starts.tolist()} outside documents of length {lengths.tolist()}")
    pos = torch.arange(max_len)
    lo = starts.unsqueeze(-1)
    hi = torch.minimum(starts + length - 1, lengths - 1).unsqueeze(-1)
    return ((pos >= lo) & (pos <= hi)).float()


def causal_window_sum(soft: torch.Tensor, length: int) -> torch.Tensor:
    """Causal convolution of each row with an all-ones kernel of width ``length``.

    ``out[..., t] = sum(soft[..., max(0, t - length + 1) : t + 1])``.
    """
    if length < 1:
        raise ParameterError(f"concept length must be >= 1, got {length}")
    shape = soft.shape
    flat = soft.reshape(-1, 1, shape[-1])
    kernel = torch.ones(1, 1, length, dtype=soft.dtype, device=soft.device)
    out = F.conv1d(F.pad(flat, (length - 1, 0)), kernel)
    return out.reshape(shape)


mask_backward_surrogate = causal_window_sum


def straight_through(hard: torch.Tensor, surrogate: torch.Tensor) -> torch.Tensor:
    """Forward value ``hard`` (bit-exact), gradient of ``surrogate``."""
    return hard + (surrogate - surrogate.detach())


def concept_masks(starts, soft, length, lengths, train=True):
    """Hard masks for ``starts``; in train mode they carry the surrogate gradient."""
    max_len = soft.shape[-1]
    hard = build_masks(starts, length, lengths, max_len=max_len).to(soft.dtype)
    if not train:
        return hard
    valid = (torch.arange(max_len) < torch.as_tensor(lengths).unsqueeze(-1)).to(soft.dtype)
    surrogate = causal_window_sum(soft, length) * valid.unsqueeze(-2)
    return straight_through(hard, surrogate)


def sample_presence(logits: torch.Tensor, temperature: float = 1.0, train: bool = True, seed: Seed = None) -> torch.Tensor:
    """Presence gates in ``[0, 1]`` for each concept logit.

    Train mode draws a binary-concrete (relaxed Bernoulli) sample,
    ``sigmoid((logit + logistic_noise) / temperature)``. Eval mode returns
    the hard decision ``sigmoid(logit) > 0.5``, so a logit of exactly 0
    gives 0.
    """
    _check_temperature(temperature)
    if not train:
        return (logits > 0).to(logits.dtype)
    noise = logistic_noise(logits.shape, as_generator(seed), dtype=logits.dtype)
    # keep samples strictly inside (0, 1) where the sigmoid rounds to an endpoint
    tiny = torch.finfo(logits.dtype).eps
    return torch.sigmoid((logits + noise) / temperature).clamp(tiny, 1.0 - tiny)
