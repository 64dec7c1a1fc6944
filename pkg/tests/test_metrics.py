import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mkgc.errors import InputError
from mkgc.metrics import MetricsReport, average_reports, evaluate_f1, filtered_rank, ranking_report
from mkgc.oracles import brute_force_rank, brute_force_ranking_metrics, brute_force_span_f1

TAGS = st.sampled_from(["O", "B-A", "I-A", "B-B", "I-B"])


def test_ranking_examples():
    rep = ranking_report([1, 1, 1])
    assert rep.mr == 1 and rep.hits1 == 1
    rep = ranking_report([2, 5, 8])
    assert rep.mr == 5 and rep.hits3 == pytest.approx(1 / 3) and rep.hits10 == 1
    with pytest.raises(InputError):
        ranking_report([])


def test_filtered_rank_removes_other_positives_and_is_pessimistic():
    scores = np.array([5.0, 4.0, 4.0, 3.0])
    assert filtered_rank(scores, 2) == 3  # tied with entity 1, counted after it
    assert filtered_rank(scores, 2, known=[0, 2]) == 2
    assert filtered_rank(scores, 0, known=[0, 1, 2, 3]) == 1


@given(st.lists(st.integers(0, 4), min_size=1, max_size=20), st.data(), st.floats(-1e3, 1e3))
def test_rank_matches_sort_oracle_and_shift(scores, data, c):
    gold = data.draw(st.integers(0, len(scores) - 1))
    known = data.draw(st.lists(st.integers(0, len(scores) - 1), max_size=5))
    s = np.array(scores, dtype=float)
    r = filtered_rank(s, gold, known)
    assert r == brute_force_rank(s, gold, known)
    assert filtered_rank(s + c, gold, known) == r


@given(st.lists(st.integers(1, 30), min_size=1, max_size=30))
def test_ranking_report_matches_oracle(ranks):
    rep = ranking_report(ranks)
    ref = brute_force_ranking_metrics(ranks)
    assert rep.mr == ref["mr"] and rep.hits1 == ref["hits1"] and rep.hits3 == ref["hits3"]
    assert rep.hits1 <= rep.hits3 <= rep.hits10


def test_f1_examples():
    rep = evaluate_f1(["a", "b"], ["a", "b"], "micro")
    assert (rep.precision, rep.recall, rep.f1) == (1, 1, 1)
    rep = evaluate_f1([["O", "O"]], [["B-A", "O"]], "span")
    assert (rep.precision, rep.recall, rep.f1) == (0, 0, 0)
    pred = [["B-A", "O", "B-B", "O", "B-A"]]
    gold = [["B-A", "O", "B-B", "B-A", "O"]]
    rep = evaluate_f1(pred, gold, "span")
    assert rep.precision == pytest.approx(2 / 3) and rep.recall == pytest.approx(2 / 3) and rep.f1 == pytest.approx(2 / 3)


def test_micro_f1_ignores_null_labels():
    rep = evaluate_f1(["none", "r1", "r2"], ["none", "r1", "none"], "micro", ["none"])
    assert rep.precision == 0.5 and rep.recall == 1.0


def test_f1_errors():
    with pytest.raises(InputError):
        evaluate_f1(["a"], ["a", "b"], "micro")
    with pytest.raises(InputError):
        evaluate_f1([["O"]], [["O", "O"]], "span")
    with pytest.raises(ValueError):
        evaluate_f1([], [], "macro")


@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.data())
def test_span_f1_matches_oracle(lengths, data):
    pred = [data.draw(st.lists(TAGS, min_size=n, max_size=n)) for n in lengths]
    gold = [data.draw(st.lists(TAGS, min_size=n, max_size=n)) for n in lengths]
    rep = evaluate_f1(pred, gold, "span")
    assert (rep.precision, rep.recall, rep.f1) == brute_force_span_f1(pred, gold)
    if rep.precision + rep.recall:
        assert rep.f1 == pytest.approx(2 * rep.precision * rep.recall / (rep.precision + rep.recall), abs=1e-12)


def test_report_text_roundtrip_and_average():
    rep = ranking_report([1, 3, 20])
    rep.meta["split"] = "test"
    back = MetricsReport.from_text(rep.to_text())
    assert back.mr == rep.mr and back.hits3 == rep.hits3 and back.meta["split"] == "test"
    avg = average_reports([ranking_report([1]), ranking_report([3])])
    assert avg.mr == 2 and avg.hits1 == 0.5 and avg.meta["runs"] == 2
    assert rep.tsv_columns() == ["mr", "hits1", "hits3", "hits10"]
    with pytest.raises(InputError):
        average_reports([])
