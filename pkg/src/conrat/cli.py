"""Command-line entry points.

Exit status is 0 on success, 1 for user or configuration errors (bad flags,
missing files, malformed inputs) and 2 for anything unexpected.

Training flags mirror the ``TrainConfig`` fields. Values are resolved as
command line > ``--config`` file > built-in defaults. Relative data paths
are looked up in ``$CONRAT_DATA_DIR`` when they do not exist as given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import traceback
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from conrat import viz
from conrat.ablation import SWITCHES, run_ablation, summarize
from conrat.data import (
    Review,
    SyntheticConfig,
    assign_splits,
    load_corpus,
    load_embeddings,
    prepare_reviews,
    read_jsonl,
    split_reviews,
    tokenize,
    generate_synthetic,
    write_jsonl,
)
from conrat.errors import ConfigError, ConratError
from conrat.evaluation import assign_concepts_to_aspects, evaluate
from conrat.inference import PruneReport, compute_overlap_scores, explain, explain_many, prune
from conrat.report import write_csv, write_history, write_json, write_metric_report
from conrat.training import (
    DEFAULT_SEARCH_SPACE,
    TrainConfig,
    checkpoint_vocab,
    load_checkpoint,
    load_config,
    load_search_space,
    random_search,
    save_checkpoint,
    save_config,
    train_conrat,
    train_teacher,
)

DATA_ENV = "CONRAT_DATA_DIR"
log = logging.getLogger("conrat")


class UsageError(ConratError):
    pass


# -- path and config helpers -----------------------------------------------------


def data_path(path: Optional[str], default_name: str = "corpus.jsonl") -> Path:
    base = os.environ.get(DATA_ENV)
    if path is None:
        if base is None:
            raise UsageError(f"no data file given; pass --data or set {DATA_ENV}")
        return Path(base) / default_name
    p = Path(path)
    if not p.exists() and base is not None and not p.is_absolute() and (Path(base) / p).exists():
        return Path(base) / p
    return p


def require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_config_flags(parser: argparse.ArgumentParser):
    """One flag per ``TrainConfig`` field, all defaulting to 'not given'."""
    group = parser.add_argument_group("training configuration")
    group.add_argument("--config", help="flat key = value file with TrainConfig fields")
    for f in dataclasses.fields(TrainConfig):
        default = f.default
        if isinstance(default, bool):
            group.add_argument(_flag(f.name), dest=f.name, default=None, action=argparse.BooleanOptionalAction)
        elif isinstance(default, int):
            group.add_argument(_flag(f.name), dest=f.name, type=int, default=None)
        elif isinstance(default, float):
            group.add_argument(_flag(f.name), dest=f.name, type=float, default=None)
        else:
            group.add_argument(_flag(f.name), dest=f.name, default=None)


def resolve_config(args) -> TrainConfig:
    config = TrainConfig()
    if getattr(args, "config", None):
        config = load_config(require_file(args.config), config)
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig) if getattr(args, f.name, None) is not None}
    return config.replace(**overrides)


def load_splits(path, truncation=None, vocab=None):
    reviews, vocab = load_corpus(require_file(path), truncation=truncation, vocab=vocab)
    splits = split_reviews(reviews)
    return splits, vocab


def maybe_embeddings(config: TrainConfig, vocab):
    if not config.embeddings:
        return None
    table = load_embeddings(require_file(config.embeddings), vocab, seed=config.seed)
    if table.shape[1] != config.embedding_dim:
        raise ConfigError(f"embedding file has dimension {table.shape[1]}, config says {config.embedding_dim}")
    return table


def load_model(path):
    model, payload = load_checkpoint(require_file(path))
    return model, payload, checkpoint_vocab(payload)


def load_prune(path) -> Optional[PruneReport]:
    if path is None:
        return None
    return PruneReport.from_dict(json.loads(require_file(path).read_text(encoding="utf-8")))


def load_eval_split(args, vocab, split: str) -> List[Review]:
    reviews, _ = load_corpus(require_file(data_path(args.data)), truncation=None, vocab=vocab)
    chosen = [r for r in reviews if r.split == split]
    if not chosen:
        raise UsageError(f"no documents in split {split!r}")
    return chosen


# -- subcommands -----------------------------------------------------------------


def cmd_synth_data(args):
    cfg = SyntheticConfig(
        vocab_size=args.vocab_size,
        num_aspects=args.aspects,
        chunk_length=args.chunk_length,
        num_docs=args.docs,
        noise=args.noise,
        seed=args.seed,
        doc_length=args.doc_length,
        label_rule=args.label_rule,
        aspect_presence=args.aspect_presence,
    )
    records = generate_synthetic(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, records)
    print(f"wrote {len(records)} documents to {out}")


def cmd_prepare_data(args):
    raw = [rec for _, rec in read_jsonl(require_file(args.input))]
    reviews = prepare_reviews(raw, args.rule, truncation=args.truncation, pros_cons=args.pros_cons)
    sizes = tuple(int(x) for x in args.splits.split(","))
    if len(sizes) != 3:
        raise UsageError("--splits needs three comma-separated sizes")
    reviews = assign_splits(reviews, sizes, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, (r.to_record() for r in reviews))
    print(f"wrote {len(reviews)} documents to {out}")


def cmd_train_teacher(args):
    config = resolve_config(args)
    splits, vocab = load_splits(data_path(args.data), config.truncation)
    embeddings = maybe_embeddings(config, vocab)
    result = train_teacher(splits["train"], splits["val"], config, embeddings=embeddings, vocab_size=len(vocab), log_path=args.log)
    save_checkpoint(args.out, result.model, vocab, config, best_epoch=result.best_epoch, val_accuracy=result.best_val_accuracy)
    print(f"teacher val accuracy {result.best_val_accuracy:.4f} (epoch {result.best_epoch}); saved {args.out}")


def cmd_train(args):
    config = resolve_config(args)
    splits, vocab = load_splits(data_path(args.data), config.truncation)
    teacher = None
    if args.teacher:
        teacher, _, teacher_vocab = load_model(args.teacher)
        if teacher_vocab is not None and teacher_vocab.digest() != vocab.digest():
            raise ConfigError("the teacher was trained with a different vocabulary")
    elif config.lambda_distill > 0:
        log.warning("no --teacher given; training with lambda_distill = 0")
        config = config.replace(lambda_distill=0.0)
    embeddings = maybe_embeddings(config, vocab)
    result = train_conrat(splits["train"], splits["val"], config, teacher=teacher, embeddings=embeddings, vocab_size=len(vocab), log_path=args.log)
    save_checkpoint(args.out, result.model, vocab, config, best_epoch=result.best_epoch, val_accuracy=result.best_val_accuracy)
    print(f"val accuracy {result.best_val_accuracy:.4f} (epoch {result.best_epoch}); saved {args.out}")
    if args.report_dir:
        outdir = Path(args.report_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        write_history(result.history, outdir / "history.csv")
        viz.plot_training_curve(result.history, outdir / "training_curve.png")


def cmd_search(args):
    config = resolve_config(args)
    splits, vocab = load_splits(data_path(args.data), config.truncation)
    space = load_search_space(require_file(args.space)) if args.space else DEFAULT_SEARCH_SPACE
    teacher = load_model(args.teacher)[0] if args.teacher else None
    embeddings = maybe_embeddings(config, vocab)
    best, board = random_search(
        space, args.trials, splits["train"], splits["val"], config, teacher=teacher, embeddings=embeddings, vocab_size=len(vocab), meta_seed=args.meta_seed
    )
    save_config(best, args.out)
    if args.board:
        write_csv([{"rank": r + 1, "trial": i, "val_accuracy": acc, **cfg.to_dict()} for r, (acc, i, cfg) in enumerate(board)], args.board)
    print(f"best trial {board[0][1]} val accuracy {board[0][0]:.4f}; config saved to {args.out}")


def cmd_prune(args):
    model, _, vocab = load_model(args.model)
    val = load_eval_split(args, vocab, "val")
    report = prune(compute_overlap_scores(model, val).scores, args.k)
    write_json(report.to_dict(), args.out)
    if args.figure:
        viz.plot_overlap_scores(report, args.figure)
    kept = ", ".join(str(i + 1) for i in report.kept)
    print(f"kept concepts {kept} of {len(report.scores)}; saved {args.out}")


def cmd_evaluate(args):
    model, _, vocab = load_model(args.model)
    report_prune = load_prune(args.prune)
    val = load_eval_split(args, vocab, "val")
    test = load_eval_split(args, vocab, args.split)
    assignment, _ = assign_concepts_to_aspects(model, val, prune_report=report_prune)
    report = evaluate(model, test, assignment, prune_report=report_prune)
    print(report.table())
    if args.out_dir:
        write_metric_report(report, args.out_dir)
        viz.plot_aspect_scores(report, Path(args.out_dir) / "aspect_scores.png")


def _document_from_args(args, vocab):
    if args.text is not None:
        tokens = tokenize(args.text)
        if not tokens:
            raise UsageError("--text is empty")
        return tokens, vocab.encode(tokens)
    reviews = load_eval_split(args, vocab, args.split)
    if not 0 <= args.index < len(reviews):
        raise UsageError(f"--index must lie in [0, {len(reviews) - 1}]")
    r = reviews[args.index]
    return r.tokens, r.ids


def cmd_explain(args):
    model, _, vocab = load_model(args.model)
    if vocab is None:
        raise UsageError("the checkpoint carries no vocabulary")
    tokens, ids = _document_from_args(args, vocab)
    rationale, _ = explain(model, ids, tokens=tokens, prune_report=load_prune(args.prune), vocab=vocab)
    text = rationale.to_json(indent=2)
    if args.json:
        Path(args.json).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    if args.html:
        viz.write_html(rationale, args.html)
    if args.figure:
        viz.plot_rationale(rationale, args.figure)


def cmd_ablate(args):
    config = resolve_config(args)
    splits, vocab = load_splits(data_path(args.data), config.truncation)
    teacher = load_model(args.teacher)[0] if args.teacher else None
    switches = [s for s in (args.switches.split(",") if args.switches else []) if s]
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_ablation(
        splits["train"], splits["val"], splits["test"], config, switches, seeds, teacher=teacher, embeddings=maybe_embeddings(config, vocab), vocab_size=len(vocab)
    )
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_csv([r.to_dict() for r in rows], outdir / "ablation_runs.csv")
    summary = summarize(rows)
    write_csv(summary, outdir / "ablation.csv")
    viz.plot_ablation(summary, outdir / "ablation.png")
    for entry in summary:
        print(f"{entry['setting']:<12} accuracy {entry['accuracy']:.3f}  macro F1 {entry['f1']:.3f}")


def cmd_export_samples(args):
    """Concept text with the label held out, for a human rating study."""
    model, _, vocab = load_model(args.model)
    reviews = load_eval_split(args, vocab, args.split)[: args.n]
    rationales = explain_many(model, reviews, prune_report=load_prune(args.prune))
    samples, answers = [], []
    for i, (review, rat) in enumerate(zip(reviews, rationales)):
        for span in rat.concepts:
            if span.presence <= 0.5:
                continue
            sid = f"{i}-{span.concept}"
            samples.append({"id": sid, "concept": span.concept, "text": span.text})
            answers.append({"id": sid, "label": review.label, "aspects": review.aspects})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, samples)
    write_jsonl(out.with_suffix(".answers.jsonl"), answers)
    print(f"wrote {len(samples)} samples to {out}")


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conrat", description="Concept-based rationalizer: train, prune, evaluate and explain.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a planted-concept corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=100)
    p.add_argument("--aspects", type=int, default=3)
    p.add_argument("--chunk-length", type=int, default=5)
    p.add_argument("--docs", type=int, default=2000)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--doc-length", type=int, default=SyntheticConfig.doc_length)
    p.add_argument("--label-rule", choices=("shared", "majority"), default=SyntheticConfig.label_rule)
    p.add_argument("--aspect-presence", type=float, default=SyntheticConfig.aspect_presence, help="probability that each aspect is mentioned")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("prepare-data", help="binarize rated reviews and assign balanced splits")
    p.add_argument("--input", required=True, help="JSONL with text and rating fields")
    p.add_argument("--out", required=True)
    p.add_argument("--rule", choices=("beer", "amazon"), default="beer")
    p.add_argument("--truncation", type=int, default=None)
    p.add_argument("--pros-cons", action="store_true", help="derive pros/cons pseudo-annotations")
    p.add_argument("--splits", default="50000,5000,5000", help="train,val,test sizes")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare_data)

    for name, func, help_text in (
        ("train-teacher", cmd_train_teacher, "train the full-input teacher"),
        ("train", cmd_train, "train a concept rationalizer"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--data")
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--log", help="append one JSON line per epoch here")
        if name == "train":
            p.add_argument("--teacher", help="teacher checkpoint for distillation")
            p.add_argument("--report-dir", help="write history.csv and training_curve.png here")
        add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("search", help="random hyperparameter search ranked by dev accuracy")
    p.add_argument("--data")
    p.add_argument("--space", help="JSON search space; defaults to the built-in ranges")
    p.add_argument("--trials", type=int, default=16)
    p.add_argument("--meta-seed", type=int, default=0)
    p.add_argument("--teacher")
    p.add_argument("--out", required=True, help="best config file")
    p.add_argument("--board", help="leaderboard CSV")
    add_config_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("prune", help="score concept overlap on the dev split and keep the k least overlapping")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--figure", help="bar chart of overlap scores (PNG)")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("evaluate", help="accuracy and token P/R/F1 with dev-fitted concept assignment")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--prune", help="prune report JSON")
    p.add_argument("--split", default="test")
    p.add_argument("--out-dir", help="write metrics.json, metrics.csv and aspect_scores.png here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="rationale for one document")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text")
    src.add_argument("--index", type=int, help="document index within --split of --data")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--prune")
    p.add_argument("--json", help="write the rationale JSON here instead of stdout")
    p.add_argument("--html")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablate", help="retrain with components switched off")
    p.add_argument("--data")
    p.add_argument("--switches", default=",".join(SWITCHES[:3]), help=f"comma-separated subset of {','.join(SWITCHES)}")
    p.add_argument("--seeds", default="0")
    p.add_argument("--teacher")
    p.add_argument("--out-dir", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-samples", help="concept excerpts with hidden labels for human rating")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--prune")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_samples)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage; that is a user error here
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ConratError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception:
        traceback.print_exc()
        print("internal error", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
