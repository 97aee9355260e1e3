"""Ablation runner: retrain with single components switched off and compare."""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

from conrat.data import Review
from conrat.errors import ConfigError
from conrat.evaluation import MetricReport, assign_concepts_to_aspects, evaluate
from conrat.training import TrainConfig, train_conrat

SWITCHES = ("overlap", "div", "selector", "teacher")
SETTING_NAMES = {
    None: "full",
    "overlap": "no-overlap",
    "div": "no-div",
    "selector": "no-selector",
    "teacher": "no-teacher",
}


def ablated_config(base: TrainConfig, switch: Optional[str]) -> TrainConfig:
    """``base`` with one component disabled; ``None`` returns it unchanged."""
    if switch is None:
        return base
    if switch == "overlap":
        return base.replace(lambda_overlap=0.0)
    if switch == "div":
        return base.replace(lambda_diversity=0.0)
    if switch == "selector":
        return base.replace(force_presence=True)
    if switch == "teacher":
        return base.replace(lambda_distill=0.0)
    raise ConfigError(f"unknown ablation switch {switch!r}; choose from {', '.join(SWITCHES)}")


@dataclass
class AblationRow:
    setting: str
    seed: int
    report: MetricReport
    best_epoch: int
    history: list

    def to_dict(self):
        m = self.report.macro
        return {
            "setting": self.setting,
            "seed": self.seed,
            "accuracy": self.report.accuracy,
            "precision": m.precision,
            "recall": m.recall,
            "f1": m.f1,
            "best_epoch": self.best_epoch,
        }


def run_ablation(
    train: Sequence[Review],
    val: Sequence[Review],
    test: Sequence[Review],
    base: TrainConfig,
    switches: Iterable[str] = (),
    seeds: Sequence[int] = (0,),
    teacher=None,
    embeddings=None,
    vocab_size: Optional[int] = None,
) -> List[AblationRow]:
    """Train the full model plus one model per switch, for every seed.

    The concept-to-aspect assignment of each run is fitted on ``val`` and
    scored on ``test``. Without a teacher the full model already runs with
    ``lambda_distill = 0``.
    """
    switches = list(dict.fromkeys(switches))
    for s in switches:
        ablated_config(base, s)  # validates the name
    if teacher is None:
        base = base.replace(lambda_distill=0.0)
    rows = []
    for seed in seeds:
        for switch in [None] + switches:
            cfg = ablated_config(base.replace(seed=seed), switch)
            result = train_conrat(train, val, cfg, teacher=teacher, embeddings=embeddings, vocab_size=vocab_size)
            assignment, _ = assign_concepts_to_aspects(result.model, val)
            report = evaluate(result.model, test, assignment)
            rows.append(AblationRow(SETTING_NAMES[switch], seed, report, result.best_epoch, result.history))
    return rows


def summarize(rows: Sequence[AblationRow]) -> List[Dict[str, float]]:
    """Median accuracy and macro P/R/F1 over seeds, one entry per setting in first-seen order."""
    groups: Dict[str, List[dict]] = {}
    for row in rows:
        groups.setdefault(row.setting, []).append(row.to_dict())
    out = []
    for setting, items in groups.items():
        entry = {"setting": setting, "seeds": len(items)}
        for key in ("accuracy", "precision", "recall", "f1"):
            entry[key] = statistics.median(d[key] for d in items)
        out.append(entry)
    return out
