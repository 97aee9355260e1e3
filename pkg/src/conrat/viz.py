"""HTML rendering of rationales and matplotlib figures for reports.

Figures are written with the Agg backend so that nothing here needs a display.
"""

from __future__ import annotations

import html
import re
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.colors import to_hex  # noqa: E402

from conrat.errors import BoundsError  # noqa: E402
from conrat.inference import PruneReport, Rationale  # noqa: E402

# everything XML 1.0 cannot carry, plus the remaining C0/C1 controls
_CONTROL = re.compile("[\x00-\x08\x0b\x0c\x0e-\x1f\x7f-\x9f\ud800-\udfff￾￿]")


def concept_color(k: int) -> str:
    """Hex color for 1-based concept ``k``; shared by the HTML and the figures."""
    return to_hex(plt.get_cmap("tab10")((k - 1) % 10))


def clean_text(text: str) -> str:
    return _CONTROL.sub("", text)


def token_layers(rationale: Rationale) -> List[List[int]]:
    """For each token, the ascending list of 1-based concepts whose span covers it."""
    n = len(rationale.tokens)
    layers: List[List[int]] = [[] for _ in range(n)]
    for span in sorted(rationale.concepts, key=lambda c: c.concept):
        if not 1 <= span.start <= span.end <= n:
            raise BoundsError(f"concept {span.concept} span [{span.start}, {span.end}] outside 1..{n}")
        for i in range(span.start - 1, span.end):
            layers[i].append(span.concept)
    return layers


def _span_class(layer: Sequence[int]) -> str:
    # the lowest concept index owns the color; the others are kept as layered classes
    head, rest = layer[0], layer[1:]
    return " ".join([f"concept c{head}"] + [f"also-c{k}" for k in rest])


def _style(concepts: Sequence[int]) -> str:
    rules = [
        "body { font-family: sans-serif; max-width: 60em; margin: 2em auto; line-height: 1.8; }",
        ".concept { padding: 0.1em 0.2em; border-radius: 0.2em; }",
        "table.legend { border-collapse: collapse; margin-top: 1.5em; }",
        "table.legend td, table.legend th { padding: 0.2em 0.8em; text-align: left; }",
    ]
    for k in concepts:
        rules.append(f".c{k} {{ background-color: {concept_color(k)}55; }}")
        rules.append(f".also-c{k} {{ border-bottom: 3px solid {concept_color(k)}; }}")
    return "\n".join(rules)


def render_html(rationale: Rationale, title: str = "Concept rationale") -> str:
    """Standalone XHTML page highlighting each listed concept's span.

    Tokens covered by several concepts form one span whose color comes from
    the lowest concept index; the other concepts appear as ``also-c{k}``
    classes (drawn as underlines). Concepts absent from ``rationale`` (for
    example pruned ones) appear nowhere.
    """
    layers = token_layers(rationale)
    concepts = sorted({c.concept for c in rationale.concepts})
    body: List[str] = []
    i = 0
    while i < len(layers):
        j = i
        while j + 1 < len(layers) and layers[j + 1] == layers[i]:
            j += 1
        text = html.escape(clean_text(" ".join(rationale.tokens[i : j + 1])))
        body.append(f'<span class="{_span_class(layers[i])}">{text}</span>' if layers[i] else text)
        i = j + 1
    rows = []
    for span in sorted(rationale.concepts, key=lambda c: c.concept):
        rows.append(
            f'<tr><td><span class="concept c{span.concept}">concept {span.concept}</span></td>'
            f"<td>{span.start}-{span.end}</td><td>{span.presence:.2f}</td><td>{span.contribution:+.3f}</td>"
            f"<td>{html.escape(clean_text(span.text))}</td></tr>"
        )
    legend = (
        '<table class="legend"><tr><th>concept</th><th>tokens</th><th>presence</th>'
        "<th>contribution</th><th>text</th></tr>" + "".join(rows) + "</table>"
    )
    verdict = f"predicted label {rationale.label} (p = {rationale.probability:.3f})"
    if rationale.pruned:
        verdict += ", pruned"
    return (
        "<!DOCTYPE html>\n"
        '<html xmlns="http://www.w3.org/1999/xhtml">\n'
        f'<head><meta charset="utf-8"/><title>{html.escape(clean_text(title))}</title>\n'
        f"<style>\n{_style(concepts)}\n</style></head>\n"
        f'<body>\n<p class="prediction">{verdict}</p>\n'
        f'<p class="document">{" ".join(body)}</p>\n{legend}\n</body>\n</html>\n'
    )


def write_html(rationale: Rationale, path, title: str = "Concept rationale") -> Path:
    path = Path(path)
    path.write_text(render_html(rationale, title), encoding="utf-8")
    return path


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_rationale(rationale: Rationale, path, max_tokens: int = 80) -> Path:
    """One row per concept; bars mark the selected span over token positions."""
    n = min(len(rationale.tokens), max_tokens)
    spans = sorted(rationale.concepts, key=lambda c: c.concept)
    fig, ax = plt.subplots(figsize=(max(6.0, 0.12 * n), 0.5 + 0.45 * max(len(spans), 1)))
    for row, span in enumerate(spans):
        width = min(span.end, n) - span.start + 1
        if width > 0:
            ax.barh(row, width, left=span.start - 0.5, color=concept_color(span.concept), alpha=0.8)
        ax.text(n + 1, row, f"{span.contribution:+.2f}", va="center", fontsize=8)
    ax.set_yticks(range(len(spans)))
    ax.set_yticklabels([f"c{s.concept}" for s in spans])
    ax.set_xlim(0.5, n + 6)
    ax.set_xlabel("token position")
    ax.invert_yaxis()
    return _save(fig, path)


def plot_aspect_scores(report, path) -> Path:
    """Grouped precision/recall/F1 bars per aspect."""
    names = list(report.aspects)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(names) + 1.5), 3.2))
    width = 0.25
    for i, metric in enumerate(("precision", "recall", "f1")):
        values = [getattr(report.aspects[a], metric) for a in names]
        ax.bar([x + (i - 1) * width for x in range(len(names))], values, width, label=metric)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1.05)
    ax.set_title(f"accuracy {report.accuracy:.3f}, macro F1 {report.macro.f1:.3f}", fontsize=10)
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def plot_training_curve(history: Sequence[Mapping[str, float]], path) -> Path:
    """Loss components (left axis) and validation accuracy (right axis) per epoch."""
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for key in ("loss_total", "loss_pred", "loss_diversity", "loss_distill"):
        if key in history[0]:
            ax.plot(epochs, [h[key] for h in history], label=key[5:])
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h.get("val_accuracy", float("nan")) for h in history], "k--", label="val accuracy")
    ax2.set_ylabel("val accuracy")
    ax2.set_ylim(0, 1.02)
    lines = ax.get_legend_handles_labels()
    lines2 = ax2.get_legend_handles_labels()
    ax.legend(lines[0] + lines2[0], lines[1] + lines2[1], fontsize=7, frameon=False, loc="center right")
    return _save(fig, path)


def plot_ablation(rows: Sequence[Mapping[str, float]], path) -> Path:
    """Accuracy and macro F1 per ablation setting; ``rows`` need ``setting``, ``accuracy`` and ``f1``."""
    labels = [r["setting"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.3 * len(rows) + 1.0), 3.2))
    x = range(len(rows))
    ax.bar([i - 0.2 for i in x], [r["accuracy"] for r in rows], 0.4, label="accuracy")
    ax.bar([i + 0.2 for i in x], [r["f1"] for r in rows], 0.4, label="macro F1")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def plot_overlap_scores(report: PruneReport, path) -> Path:
    """Per-concept overlap score; kept concepts are drawn in their color, pruned ones in grey."""
    k = len(report.scores)
    fig, ax = plt.subplots(figsize=(max(3.5, 0.6 * k + 1.5), 3.0))
    colors = [concept_color(i + 1) if i in report.kept else "#bbbbbb" for i in range(k)]
    ax.bar(range(1, k + 1), report.scores, color=colors)
    ax.set_xticks(range(1, k + 1))
    ax.set_xlabel("concept")
    ax.set_ylabel("mean overlap ratio")
    ax.set_title(f"kept {report.k} of {k}", fontsize=10)
    return _save(fig, path)


def figure_paths(outdir, names: Sequence[str]) -> Dict[str, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    return {n: outdir / f"{n}.png" for n in names}
