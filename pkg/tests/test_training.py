import math

import numpy as np
import pytest
import torch

from conrat.data import Review, Vocabulary
from conrat.errors import ConfigError, FormatError, TrainingDivergedError
from conrat.model import ConRAT, total_loss
from conrat.training import (
    DEFAULT_SEARCH_SPACE,
    TrainConfig,
    accuracy,
    build_model,
    checkpoint_vocab,
    load_checkpoint,
    load_config,
    random_search,
    sample_configs,
    save_checkpoint,
    save_config,
    train_conrat,
    train_teacher,
)
from conrat.data import batches

SMALL = dict(hidden_size=8, embedding_dim=8, num_concepts=2, concept_length=2, batch_size=16, lambda_distill=0.0)


def marker_corpus(n=200, length=10, seed=0):
    """Label 1 exactly when token 3 (the marker) occurs somewhere."""
    rng = np.random.default_rng(seed)
    reviews = []
    for i in range(n):
        ids = rng.integers(4, 20, size=length).tolist()
        label = i % 2
        if label:
            ids[rng.integers(0, length)] = 3
        reviews.append(Review(str(i), [str(t) for t in ids], label, ids=ids))
    return reviews


@pytest.fixture(scope="module")
def corpus():
    reviews = marker_corpus()
    return reviews[:160], reviews[160:]


def test_training_is_deterministic(corpus):
    train, val = corpus
    cfg = TrainConfig(max_epochs=2, seed=5, **SMALL)
    a = train_conrat(train, val, cfg, vocab_size=20)
    b = train_conrat(train, val, cfg, vocab_size=20)
    assert a.step_losses == b.step_losses
    assert a.history == b.history


def test_checkpoint_round_trip(tmp_path, corpus):
    train, val = corpus
    cfg = TrainConfig(max_epochs=1, **SMALL)
    model = train_conrat(train, val, cfg, vocab_size=20).model
    vocab = Vocabulary([str(i) for i in range(2, 20)])
    save_checkpoint(tmp_path / "m.pt", model, vocab, cfg, note="x")
    again, payload = load_checkpoint(tmp_path / "m.pt")
    assert payload["meta"] == {"note": "x"}
    assert checkpoint_vocab(payload).itos == vocab.itos
    assert again.vocab_digest == vocab.digest()
    batch = next(batches(val, 40))
    one = model(batch.tokens, batch.lengths)
    two = again(batch.tokens, batch.lengths)
    assert torch.equal(one.log_probs, two.log_probs)
    assert torch.equal(one.starts, two.starts)


def test_load_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.pt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError):
        load_checkpoint(path)
    torch.save({"format": "other"}, path)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_teacher_learns_the_marker_and_stays_frozen(corpus):
    train, val = corpus
    cfg = TrainConfig(max_epochs=5, learning_rate=0.01, **SMALL)
    res = train_teacher(train, val, cfg, vocab_size=20)
    assert res.best_val_accuracy >= 0.99
    teacher = res.model
    before = [p.clone() for p in teacher.parameters()]
    assert not any(p.requires_grad for p in teacher.parameters())
    train_conrat(train, val, cfg.replace(max_epochs=1, lambda_distill=0.5), teacher=teacher, vocab_size=20)
    assert all(torch.equal(a, b) for a, b in zip(before, teacher.parameters()))


def test_every_group_receives_gradient(corpus):
    train, _ = corpus
    model = build_model(TrainConfig(**SMALL), 20).train()
    batch = next(batches(train, 16))
    out = model(batch.tokens, batch.lengths, seed=0)
    total_loss(out, batch.labels, TrainConfig(**SMALL).loss_weights, 2).total.backward()
    for name, params in model.parameter_groups().items():
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in params), name


def test_one_small_step_lowers_the_loss(corpus):
    train, _ = corpus
    cfg = TrainConfig(**SMALL)
    model = build_model(cfg, 20).train()
    batch = next(batches(train, 32))
    opt = torch.optim.Adam(model.parameters(), lr=1e-4)

    def loss():
        return total_loss(model(batch.tokens, batch.lengths, seed=0), batch.labels, cfg.loss_weights, 2).total

    first = loss()
    opt.zero_grad()
    first.backward()
    opt.step()
    assert loss().item() < first.item()


def test_distillation_needs_a_teacher(corpus):
    train, val = corpus
    with pytest.raises(ConfigError):
        train_conrat(train, val, TrainConfig(**{**SMALL, "lambda_distill": 0.5}), vocab_size=20)
    with pytest.raises(ConfigError):
        train_conrat([], val, TrainConfig(**SMALL), vocab_size=20)


def test_non_finite_loss_raises(corpus):
    train, val = corpus
    model = build_model(TrainConfig(**SMALL), 20)
    model.output.bias.data.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError):
        train_conrat(train, val, TrainConfig(**SMALL), model=model)


def test_best_epoch_is_kept(corpus):
    train, val = corpus
    res = train_conrat(train, val, TrainConfig(max_epochs=3, **SMALL), vocab_size=20)
    accs = [e["val_accuracy"] for e in res.history]
    assert res.best_epoch == accs.index(max(accs))
    assert accuracy(res.model, val) == res.best_val_accuracy


def test_config_file_round_trip_and_precedence(tmp_path):
    cfg = TrainConfig(num_concepts=3, learning_rate=0.0005, use_cnn=True)
    save_config(cfg, tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == cfg
    (tmp_path / "d.ini").write_text("# tuned\nhidden_size = 64\nforce_presence = yes\n")
    loaded = load_config(tmp_path / "d.ini", TrainConfig(num_concepts=4))
    assert (loaded.hidden_size, loaded.force_presence, loaded.num_concepts) == (64, True, 4)


@pytest.mark.parametrize("text", ["bogus = 1\n", "hidden_size = 1.5\n", "use_cnn = maybe\n", "learning_rate = -1\n"])
def test_bad_config_files(tmp_path, text):
    (tmp_path / "c.ini").write_text(text)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.ini")


def test_sampled_configs_stay_in_range_and_are_seeded():
    base = TrainConfig()
    configs = sample_configs(DEFAULT_SEARCH_SPACE, 16, base, meta_seed=3)
    assert configs == sample_configs(DEFAULT_SEARCH_SPACE, 16, base, meta_seed=3)
    assert configs != sample_configs(DEFAULT_SEARCH_SPACE, 16, base, meta_seed=4)
    for cfg in configs:
        assert cfg.learning_rate in DEFAULT_SEARCH_SPACE["learning_rate"]
        assert cfg.lambda_overlap in DEFAULT_SEARCH_SPACE["lambda_overlap"]
        assert 1.0 <= cfg.gen_temperature <= 1.5 and 1.0 <= cfg.sel_temperature <= 1.5
    with pytest.raises(ConfigError):
        sample_configs({}, 1, base)
    with pytest.raises(ConfigError):
        sample_configs({"dropout": []}, 1, base)


def test_random_search_single_trial(corpus):
    train, val = corpus
    space = {"learning_rate": [0.001, 0.005], "lambda_distill": [0.5]}
    best, board = random_search(space, 1, train, val, TrainConfig(max_epochs=1, **SMALL), vocab_size=20)
    assert len(board) == 1 and board[0][2] == best
    assert best.lambda_distill == 0.0
    assert not math.isnan(board[0][0])


def test_untrained_model_type():
    assert isinstance(build_model(TrainConfig(**SMALL), 20), ConRAT)
