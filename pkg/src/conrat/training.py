"""Teacher pretraining, the joint training loop, checkpoints and random search."""

from __future__ import annotations

import configparser
import copy
import dataclasses
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from conrat.data import Review, Vocabulary, batches
from conrat.errors import ConfigError, FormatError, TrainingDivergedError
from conrat.model import ConRAT, LossWeights, ModelConfig, Teacher, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "conrat-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    hidden_size: int = 256
    embedding_dim: int = 100
    lambda_overlap: float = 0.05
    lambda_diversity: float = 0.05
    lambda_distill: float = 0.5
    dropout: float = 0.0
    weight_decay: float = 0.0
    gen_temperature: float = 1.0
    sel_temperature: float = 1.0
    presence_bias: float = 0.0
    num_concepts: int = 5
    concept_length: int = 10
    max_epochs: int = 30
    truncation: int = 320
    seed: int = 0
    embeddings: Optional[str] = None
    use_cnn: bool = False
    force_presence: bool = False
    train_alpha: bool = True

    def __post_init__(self):
        if self.num_concepts < 1 or self.concept_length < 1:
            raise ConfigError("num_concepts and concept_length must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if min(self.lambda_overlap, self.lambda_diversity, self.lambda_distill) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.gen_temperature <= 0 or self.sel_temperature <= 0:
            raise ConfigError("temperatures must be positive")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_overlap, self.lambda_diversity, self.lambda_distill)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            embedding_dim=self.embedding_dim,
            hidden_size=self.hidden_size,
            num_concepts=self.num_concepts,
            concept_length=self.concept_length,
            dropout=self.dropout,
            gen_temperature=self.gen_temperature,
            sel_temperature=self.sel_temperature,
            presence_bias=self.presence_bias,
            use_cnn=self.use_cnn,
            force_presence=self.force_presence,
            train_alpha=self.train_alpha,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(name, raw: str, default):
    target = type(default) if default is not None else str
    if name == "embeddings":
        return raw or None
    if target is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        value = float(raw) if target in (int, float) else raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {target.__name__}") from None
    if target is int:
        if not value.is_integer():
            raise ConfigError(f"{name}: expected an integer, got {raw!r}")
        return int(value)
    return value


def parse_config_values(values: Dict[str, str], base: Optional[TrainConfig] = None) -> TrainConfig:
    base = base or TrainConfig()
    known = {f.name: getattr(base, f.name) for f in dataclasses.fields(TrainConfig)}
    changes = {}
    for key, raw in values.items():
        key = key.strip().replace("-", "_")
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _coerce(key, raw, known[key]) if isinstance(raw, str) else raw
    return base.replace(**changes)


def load_config(path, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Read a flat ``key = value`` file; ``#`` starts a comment line."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + Path(path).read_text(encoding="utf-8"))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config_values(dict(parser["config"]), base)


def save_config(config: TrainConfig, path):
    lines = [f"{k} = {'' if v is None else v}" for k, v in config.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def set_seed(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def build_model(config: TrainConfig, vocab_size: int, embeddings=None) -> ConRAT:
    set_seed(config.seed)
    return ConRAT(config.model_config(vocab_size), embeddings=embeddings)


@torch.no_grad()
def predict_labels(model, reviews: Sequence[Review], batch_size: int = 256) -> List[int]:
    was_training = model.training
    model.eval()
    out = []
    for batch in batches(reviews, batch_size):
        result = model(batch.tokens, batch.lengths)
        log_probs = result if isinstance(result, torch.Tensor) else result.log_probs
        out.extend(log_probs.argmax(-1).tolist())
    model.train(was_training)
    return out


def accuracy(model, reviews: Sequence[Review], batch_size: int = 256) -> float:
    if not reviews:
        return float("nan")
    preds = predict_labels(model, reviews, batch_size)
    return sum(int(p == r.label) for p, r in zip(preds, reviews)) / len(reviews)


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: List[Dict[str, float]] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = float("nan")


def _append_log(path, entry):
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def train_teacher(
    train: Sequence[Review],
    val: Sequence[Review],
    config: TrainConfig,
    embeddings=None,
    vocab_size: Optional[int] = None,
    log_path=None,
) -> TrainResult:
    """Full-input classifier trained with plain cross-entropy.

    The loss weights and concept settings of ``config`` do not apply here.
    """
    if not train:
        raise ConfigError("the teacher needs a non-empty training set")
    set_seed(config.seed)
    teacher = Teacher(config.model_config(vocab_size or _vocab_size(train, embeddings)), embeddings=embeddings)
    opt = torch.optim.Adam(teacher.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    result = TrainResult(teacher)
    best_state = None
    for epoch in range(config.max_epochs):
        teacher.train()
        total, count = 0.0, 0
        for batch in batches(train, config.batch_size, shuffle=True, seed=config.seed * 7919 + epoch):
            loss = torch.nn.functional.nll_loss(teacher(batch.tokens, batch.lengths), batch.labels)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"teacher loss became {float(loss.detach())} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            result.step_losses.append(float(loss.detach()))
            total += float(loss.detach()) * len(batch.labels)
            count += len(batch.labels)
        val_acc = accuracy(teacher, val) if val else float("nan")
        entry = {"epoch": epoch, "loss": total / count, "val_accuracy": val_acc}
        result.history.append(entry)
        _append_log(log_path, entry)
        log.info("teacher epoch %d loss %.4f val_acc %.4f", epoch, entry["loss"], val_acc)
        if best_state is None or (val and val_acc > result.best_val_accuracy):
            result.best_epoch, result.best_val_accuracy = epoch, val_acc
            best_state = copy.deepcopy(teacher.state_dict())
    teacher.load_state_dict(best_state)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return result


def _vocab_size(reviews, embeddings):
    if embeddings is not None:
        return len(embeddings)
    return max(max(r.ids) for r in reviews) + 1


def train_conrat(
    train: Sequence[Review],
    val: Sequence[Review],
    config: TrainConfig,
    teacher: Optional[Teacher] = None,
    embeddings=None,
    model: Optional[torch.nn.Module] = None,
    vocab_size: Optional[int] = None,
    log_path=None,
    callback: Optional[Callable[[int, torch.nn.Module, dict], None]] = None,
) -> TrainResult:
    """Minimize the joint loss with Adam; keep the epoch with the best dev accuracy.

    ``model`` may be passed to train an existing module (for example a
    ``SingleRationaleModel`` view). Ties in dev accuracy keep the earlier
    epoch. ``callback(epoch, model, entry)`` runs after each epoch's
    validation.
    """
    if not train:
        raise ConfigError("empty training set")
    if config.lambda_distill > 0 and teacher is None:
        raise ConfigError("lambda_distill > 0 requires a teacher; set lambda_distill = 0 to train without one")
    if model is None:
        model = build_model(config, vocab_size or _vocab_size(train, embeddings), embeddings)
    set_seed(config.seed)
    weights = config.loss_weights
    use_teacher = teacher is not None and config.lambda_distill > 0
    if use_teacher:
        teacher.eval()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    sampler = torch.Generator()
    sampler.manual_seed(config.seed)
    result = TrainResult(model)
    best_state = None
    for epoch in range(config.max_epochs):
        model.train()
        sums: Dict[str, float] = {}
        count = 0
        for batch in batches(train, config.batch_size, shuffle=True, seed=config.seed * 7919 + epoch):
            out = model(batch.tokens, batch.lengths, seed=sampler)
            teacher_prob = None
            if use_teacher:
                with torch.no_grad():
                    teacher_prob = teacher(batch.tokens, batch.lengths)[:, 1].exp()
            losses = total_loss(out, batch.labels, weights, config.concept_length, teacher_prob)
            if not torch.isfinite(losses.total):
                raise TrainingDivergedError(
                    f"loss became {float(losses.total.detach())} at epoch {epoch}, step {len(result.step_losses)}: "
                    f"{losses.as_floats()}"
                )
            opt.zero_grad()
            losses.total.backward()
            opt.step()
            n = len(batch.labels)
            result.step_losses.append(float(losses.total.detach()))
            for k, v in losses.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v * n
            count += n
        entry = {"epoch": epoch, **{f"loss_{k}": v / count for k, v in sums.items()}}
        entry["val_accuracy"] = accuracy(model, val) if val else float("nan")
        result.history.append(entry)
        _append_log(log_path, entry)
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, entry["loss_total"], entry["val_accuracy"])
        if callback is not None:
            callback(epoch, model, entry)
        val_acc = entry["val_accuracy"]
        if best_state is None or (not math.isnan(val_acc) and val_acc > result.best_val_accuracy):
            result.best_epoch, result.best_val_accuracy = epoch, val_acc
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return result


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, model, vocab: Optional[Vocabulary] = None, train_config: Optional[TrainConfig] = None, **meta):
    kind = "teacher" if isinstance(model, Teacher) else "conrat"
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "state_dict": model.state_dict(),
        "vocab": list(vocab.itos) if vocab is not None else None,
        "vocab_digest": vocab.digest() if vocab is not None else None,
        "meta": meta,
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Return ``(model, payload)``; the model is in eval mode."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises several unrelated types here
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a checkpoint written by this package")
    config = ModelConfig(**payload["model_config"])
    model = Teacher(config) if payload["kind"] == "teacher" else ConRAT(config)
    model.load_state_dict(payload["state_dict"])
    model.vocab_digest = payload.get("vocab_digest")
    model.eval()
    if payload["kind"] == "teacher":
        for p in model.parameters():
            p.requires_grad_(False)
    return model, payload


def checkpoint_vocab(payload) -> Optional[Vocabulary]:
    if payload.get("vocab") is None:
        return None
    return Vocabulary(payload["vocab"][2:])


# -- random search -------------------------------------------------------------

DEFAULT_SEARCH_SPACE: Dict[str, Any] = {
    "learning_rate": [0.0005, 0.00075, 0.001],
    "batch_size": [128],
    "hidden_size": [256],
    "lambda_diversity": [0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0],
    "lambda_overlap": [0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0],
    "lambda_distill": [0.5, 0.6],
    "dropout": [0.0, 0.1],
    "weight_decay": [0.0, 1e-8, 1e-10],
    "gen_temperature": {"uniform": [1.0, 1.5]},
    "sel_temperature": {"uniform": [1.0, 1.5]},
}


def load_search_space(path) -> Dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def sample_configs(space: Dict[str, Any], trials: int, base: TrainConfig, meta_seed: int = 0) -> List[TrainConfig]:
    """Draw ``trials`` configs; list entries are choices, ``{"uniform": [lo, hi]}`` is continuous."""
    if not space:
        raise ConfigError("empty search space")
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    rng = random.Random(meta_seed)
    out = []
    for _ in range(trials):
        values = {}
        for key in sorted(space):
            choice = space[key]
            if isinstance(choice, dict) and "uniform" in choice:
                lo, hi = choice["uniform"]
                values[key] = rng.uniform(lo, hi)
            elif isinstance(choice, (list, tuple)) and choice:
                values[key] = rng.choice(list(choice))
            else:
                raise ConfigError(f"search space entry {key!r} must be a non-empty list or {{'uniform': [lo, hi]}}")
        out.append(parse_config_values(values, base))
    return out


def random_search(
    space: Dict[str, Any],
    trials: int,
    train: Sequence[Review],
    val: Sequence[Review],
    base: TrainConfig,
    teacher: Optional[Teacher] = None,
    embeddings=None,
    vocab_size: Optional[int] = None,
    meta_seed: int = 0,
):
    """Train one model per sampled config and rank by dev accuracy.

    Returns ``(best_config, leaderboard)`` where the leaderboard lists
    ``(val_accuracy, trial, config)`` best first.
    """
    space = dict(space)
    if teacher is None:
        space.pop("lambda_distill", None)
        base = base.replace(lambda_distill=0.0)
    configs = sample_configs(space, trials, base, meta_seed)
    board = []
    for i, cfg in enumerate(configs):
        res = train_conrat(train, val, cfg, teacher=teacher, embeddings=embeddings, vocab_size=vocab_size)
        board.append((res.best_val_accuracy, i, cfg))
        log.info("trial %d val_acc %.4f", i, res.best_val_accuracy)
    board.sort(key=lambda row: (-row[0], row[1]))
    return board[0][2], board
