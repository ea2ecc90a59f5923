"""Metric oracles, process-graph conformance and the milestone suite."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcf import cfengine as cf
from flowcf import eventlog as el
from flowcf import evaluation as ev

TOK = st.sampled_from(["a", "b", "c", "d"])
SEQ = st.lists(TOK, min_size=0, max_size=8)


def dp_levenshtein(a, b):
    """Quadratic full-matrix reference implementation."""
    m, n = len(a), len(b)
    table = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        table[i][0] = i
    for j in range(n + 1):
        table[0][j] = j
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            table[i][j] = min(table[i - 1][j] + 1, table[i][j - 1] + 1,
                              table[i - 1][j - 1] + cost)
    return table[m][n]


# ---------------------------------------------------------------------------
# levenshtein
# ---------------------------------------------------------------------------

def test_levenshtein_examples():
    assert ev.levenshtein(["a", "b", "c"], ["a", "b", "c"]) == 0
    assert ev.levenshtein(["a", "b", "c"], ["a", "c"]) == 1
    assert ev.levenshtein([], ["x"] * 7) == 7
    assert ev.levenshtein(["x"] * 4, []) == 4


def test_levenshtein_matches_dp_reference_on_random_pairs():
    rng = np.random.default_rng(99)
    alphabet = list("abcdef")
    for _ in range(1000):
        a = [alphabet[i] for i in rng.integers(0, 6, size=rng.integers(0, 10))]
        b = [alphabet[i] for i in rng.integers(0, 6, size=rng.integers(0, 10))]
        assert ev.levenshtein(a, b) == dp_levenshtein(a, b)


@given(SEQ, SEQ)
@settings(max_examples=150, deadline=None)
def test_levenshtein_symmetry(a, b):
    assert ev.levenshtein(a, b) == ev.levenshtein(b, a)


@given(SEQ, SEQ, SEQ)
@settings(max_examples=150, deadline=None)
def test_levenshtein_triangle(a, b, c):
    assert ev.levenshtein(a, c) <= ev.levenshtein(a, b) + ev.levenshtein(b, c)


# ---------------------------------------------------------------------------
# proximity
# ---------------------------------------------------------------------------

def one_hot(ids, width):
    out = np.zeros((len(ids), width))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def test_proximity_identity_zero():
    a = one_hot(np.array([2, 3]), 5)
    r = one_hot(np.array([2, 2]), 4)
    assert ev.proximity_encoded(a, r, 0.3, a, r, 0.3) == 0.0


def test_proximity_single_substitution_sqrt2():
    a1 = one_hot(np.array([2, 3]), 5)
    a2 = one_hot(np.array([2, 4]), 5)
    r = one_hot(np.array([2, 2]), 4)
    got = ev.proximity_encoded(a1, r, 0.0, a2, r, 0.0)
    assert got == pytest.approx(np.sqrt(2.0), abs=1e-12)


def test_proximity_channel_masks():
    a1 = one_hot(np.array([2, 3]), 5)
    a2 = one_hot(np.array([2, 4]), 5)
    r1 = one_hot(np.array([2, 2]), 4)
    r2 = one_hot(np.array([2, 3]), 4)
    both = ev.proximity_encoded(a1, r1, 0.0, a2, r2, 0.0, "both")
    act = ev.proximity_encoded(a1, r1, 0.0, a2, r2, 0.0, "activity")
    res = ev.proximity_encoded(a1, r1, 0.0, a2, r2, 0.0, "resource")
    assert act == pytest.approx(np.sqrt(2.0))
    assert res == pytest.approx(np.sqrt(2.0))
    assert both == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# plausibility and diversity
# ---------------------------------------------------------------------------

def make_result(acts, ress=None, amount=1000.0):
    ress = ress or ["r"] * len(acts)
    return cf.CounterfactualResult(
        trace=list(zip(acts, ress)), amount=amount, losses={}, proximity=0.0,
        sparsity=0, plausible=True, iterations=0)


def test_plausibility_bank_member():
    log = el.EventLog(
        [el.Case("c0", [el.Event(a, "r") for a in ["a", "b", "c"]], 1.0)],
        el.Vocabulary.from_cases(
            [el.Case("c0", [el.Event(a, "r") for a in ["a", "b", "c"]], 1.0)]))
    bank = cf.KnowledgeBank(log, max_len=6)
    assert ev.plausibility(make_result(["a", "b"]), bank)
    assert not ev.plausibility(make_result(["b", "a"]), bank)


def test_diversity_counts():
    same = [make_result(["a", "b"])] * 3
    assert ev.diversity(same) == (1, 0)
    single = [make_result(["a"])]
    assert ev.diversity(single) == (1, None)
    triple = [make_result(x) for x in (["a", "b"], ["a", "c"], ["d"])]
    distinct, min_lev = ev.diversity(triple)
    assert distinct == 3
    assert min_lev == 1


# ---------------------------------------------------------------------------
# process graph
# ---------------------------------------------------------------------------

def test_mine_graph_and_conforms(chain_log):
    graph = ev.mine_graph(chain_log)
    for case in chain_log.cases:
        assert ev.conforms([e.activity for e in case.events], graph)
    assert not ev.conforms(["A_APPROVED", "A_SUBMITTED"], graph)
    assert not ev.conforms(["NOT_AN_ACTIVITY"], graph)


def test_edge_frequencies_positive(small_setup):
    graph = ev.mine_graph(small_setup["train_log"])
    assert all(count >= 1 for count in graph.edges.values())


def test_plausible_results_conform_to_mined_graph(small_setup):
    model, bank = small_setup["model"], small_setup["bank"]
    graph = ev.mine_graph(small_setup["train_log"])
    query = cf.CounterfactualQuery(
        prefix=[("A_SUBMITTED", "112"), ("A_PARTLYSUBMITTED", "112"),
                ("A_PREACCEPTED", "10906")],
        amount=20000.0, desired_activity="A_ACCEPTED", k=3)
    results = cf.generate(query, model, bank)
    for r in results:
        assert r.plausible
        assert ev.conforms([a for a, _ in r.trace], graph)


# ---------------------------------------------------------------------------
# milestone suite
# ---------------------------------------------------------------------------

def suite_queries():
    # both ask for a milestone the model does not currently predict
    return [
        cf.CounterfactualQuery(
            prefix=[("A_SUBMITTED", "112"), ("A_PARTLYSUBMITTED", "112"),
                    ("A_PREACCEPTED", "10906")],
            amount=42000.0, desired_activity="A_ACCEPTED", k=2),
        cf.CounterfactualQuery(
            prefix=[("A_SUBMITTED", "112"), ("A_PARTLYSUBMITTED", "112"),
                    ("A_PREACCEPTED", "10906"), ("W_Complete request", "10907")],
            amount=44000.0, desired_activity="A_FINALISED", k=2),
    ]


def test_suite_queries_are_true_counterfactual_scenarios(small_setup):
    from flowcf import predictor as pr

    model = small_setup["model"]
    for q in suite_queries():
        predicted, _ = pr.predict_next(model, q.prefix, q.amount)
        assert predicted != q.desired_activity


def test_suite_report_structure(small_setup):
    model, bank = small_setup["model"], small_setup["bank"]
    budget = cf.SearchBudget(max_iters=60)
    report = ev.run_milestone_suite(model, bank, suite_queries(), budget=budget)
    assert len(report.per_query) == 2
    algorithms = {(r.algorithm, r.dimension) for r in report.rows}
    assert algorithms == {("baseline", "activity"), ("baseline", "resource"),
                          ("milestone-search", "activity"),
                          ("milestone-search", "resource")}
    baseline_rows = [r for r in report.rows if r.algorithm == "baseline"]
    for row in baseline_rows:
        assert row.proximity_mean is None  # renders as "Not Found"
        assert not row.categorical
    search_rows = [r for r in report.rows if r.algorithm == "milestone-search"]
    for row in search_rows:
        assert row.proximity_mean is not None
        assert row.categorical and row.plausibility


def test_suite_means_recomputable_from_per_query(small_setup):
    model, bank = small_setup["model"], small_setup["bank"]
    report = ev.run_milestone_suite(model, bank, suite_queries(),
                                    budget=cf.SearchBudget(max_iters=60),
                                    run_baseline=False)
    for dim in ("activity", "resource"):
        row = next(r for r in report.rows
                   if r.algorithm == "milestone-search" and r.dimension == dim)
        values = [res[f"proximity_{dim}"]
                  for q in report.per_query for res in q["results"]]
        assert row.proximity_mean == pytest.approx(float(np.mean(values)))
        sparsities = [res[f"sparsity_{dim}"]
                      for q in report.per_query for res in q["results"]]
        assert row.sparsity_mean == pytest.approx(float(np.mean(sparsities)))


def test_suite_regenerates_byte_identically(small_setup):
    model, bank = small_setup["model"], small_setup["bank"]
    budget = cf.SearchBudget(max_iters=40)
    a = ev.run_milestone_suite(model, bank, suite_queries(), budget=budget)
    b = ev.run_milestone_suite(model, bank, suite_queries(), budget=budget)
    assert a.to_json().encode() == b.to_json().encode()
    assert a.to_text().encode() == b.to_text().encode()


def test_suite_propagates_failures_without_aborting(small_setup):
    model, bank = small_setup["model"], small_setup["bank"]
    bad = cf.CounterfactualQuery(prefix=[("A_SUBMITTED", "112")], amount=5000.0,
                                 desired_activity="A_SUBMITTED", k=1)
    report = ev.run_milestone_suite(model, bank, [bad], run_baseline=False)
    assert report.per_query[0]["results"] == []
    assert "error" in report.per_query[0]


def test_text_table_layout(small_setup):
    model, bank = small_setup["model"], small_setup["bank"]
    report = ev.run_milestone_suite(model, bank, suite_queries()[:1],
                                    budget=cf.SearchBudget(max_iters=40))
    text = report.to_text()
    lines = text.splitlines()
    assert lines[0].split()[:2] == ["Algorithm", "Dimension"]
    assert "Not Found" in text  # baseline columns
    assert len(lines) >= 6


def test_load_queries_round_trip(tmp_path):
    import json

    doc = {
        "milestones": ["M1"],
        "queries": [{"prefix": [["a", "r"]], "amount": 5, "milestone": "M1",
                     "amount_mutable": True, "k": 4}],
    }
    milestones, queries = ev.load_queries(doc)
    assert milestones == ["M1"]
    assert queries[0].desired_activity == "M1"
    assert queries[0].amount_mutable and queries[0].k == 4
