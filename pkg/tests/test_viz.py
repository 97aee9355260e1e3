import xml.etree.ElementTree as ET

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conrat.errors import BoundsError
from conrat.evaluation import AspectScore, MetricReport
from conrat.inference import ConceptSpan, PruneReport, Rationale
from conrat.viz import (
    plot_ablation,
    plot_aspect_scores,
    plot_overlap_scores,
    plot_rationale,
    plot_training_curve,
    render_html,
    token_layers,
    write_html,
)

NS = "{http://www.w3.org/1999/xhtml}"


def parse(page):
    return ET.fromstring(page)


def spans_of(root):
    doc = root.find(f".//{NS}p[@class='document']")
    return [(s.get("class"), s.text) for s in doc.iter(f"{NS}span")]


def test_single_concept_span():
    tokens = ["the", "head", "was", "thick", "and", "creamy"]
    r = Rationale(tokens, [ConceptSpan(1, 2, 4, 1.0, 0.3, "head was thick")], label=1, probability=0.8)
    root = parse(render_html(r))
    assert spans_of(root) == [("concept c1", "head was thick")]
    assert "".join(root.find(f".//{NS}p[@class='document']").itertext()) == "the head was thick and creamy"


def test_markup_in_tokens_is_escaped():
    r = Rationale(["<b>", "&", "x"], [ConceptSpan(1, 1, 2, 1.0, 0.0, "<b> &")])
    page = render_html(r, title="<script>")
    assert "<b>" not in page.split("<body>")[1]
    assert "&lt;b&gt; &amp;" in page
    assert parse(page).find(f".//{NS}title").text == "<script>"


def test_overlapping_concepts_are_layered():
    r = Rationale(list("abcdef"), [ConceptSpan(2, 3, 5, 1.0, 0.0), ConceptSpan(1, 2, 4, 1.0, 0.0)])
    assert token_layers(r) == [[], [1], [1, 2], [1, 2], [2], []]
    assert spans_of(parse(render_html(r))) == [
        ("concept c1", "b"),
        ("concept c1 also-c2", "c d"),
        ("concept c2", "e"),
    ]


def test_pruned_concepts_do_not_appear():
    r = Rationale(list("abcd"), [ConceptSpan(2, 1, 2, 1.0, 0.1)], pruned=True)
    page = render_html(r)
    assert "c1" not in page and "c3" not in page
    assert "pruned" in page


def test_span_out_of_bounds():
    with pytest.raises(BoundsError):
        render_html(Rationale(["a"], [ConceptSpan(1, 1, 2, 1.0, 0.0)]))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=6), min_size=1, max_size=12), st.data())
def test_arbitrary_tokens_give_well_formed_pages(tokens, data):
    n = len(tokens)
    concepts = []
    for k in range(1, data.draw(st.integers(0, 3)) + 1):
        start = data.draw(st.integers(1, n))
        end = data.draw(st.integers(start, n))
        concepts.append(ConceptSpan(k, start, end, 1.0, 0.0, " ".join(tokens[start - 1 : end])))
    root = parse(render_html(Rationale(tokens, concepts)))
    assert root.tag == f"{NS}html"


def test_write_html(tmp_path):
    path = write_html(Rationale(["a"], []), tmp_path / "r.html")
    assert parse(path.read_text(encoding="utf-8")) is not None


def _is_png(path):
    return path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_figures_are_written(tmp_path):
    r = Rationale(list("abcdefgh"), [ConceptSpan(1, 2, 4, 1.0, 0.2), ConceptSpan(2, 6, 8, 1.0, -0.1)])
    report = MetricReport(0.9, {"look": AspectScore(0.5, 0.6, 0.55, 10, 0)})
    history = [{"epoch": e, "loss_total": 1.0 / (e + 1), "loss_pred": 0.5, "val_accuracy": 0.5 + 0.1 * e} for e in range(3)]
    rows = [{"setting": "full", "accuracy": 0.9, "f1": 0.7}, {"setting": "no-div", "accuracy": 0.9, "f1": 0.4}]
    paths = [
        plot_rationale(r, tmp_path / "r.png"),
        plot_aspect_scores(report, tmp_path / "a.png"),
        plot_training_curve(history, tmp_path / "t.png"),
        plot_ablation(rows, tmp_path / "b.png"),
        plot_overlap_scores(PruneReport([0.5, 0.0, 0.5], [0, 1], 2), tmp_path / "o.png"),
    ]
    assert all(_is_png(p) for p in paths)
