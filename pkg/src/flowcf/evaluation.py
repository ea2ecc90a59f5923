"""Counterfactual quality metrics, the milestone suite, and reporting.

Metrics are deliberately dumb and pure: Levenshtein on token sequences
for sparsity, L2 over PAD-aligned one-hot encodings plus the normalized
amount delta for proximity, exact prefix membership for plausibility,
and a mined directly-follows graph as the process-map cross-check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .eventlog import EventLog

if TYPE_CHECKING:  # pragma: no cover
    from .cfengine import CounterfactualResult, KnowledgeBank
    from .predictor import NextActivityModel

DEFAULT_MILESTONES = ["A_PREACCEPTED", "A_ACCEPTED", "A_FINALISED", "A_APPROVED"]


def levenshtein(a, b) -> int:
    """Unit-cost edit distance between two token sequences."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, tok_a in enumerate(a, start=1):
        current = [i]
        for j, tok_b in enumerate(b, start=1):
            cost = 0 if tok_a == tok_b else 1
            current.append(min(previous[j] + 1,        # deletion
                               current[j - 1] + 1,     # insertion
                               previous[j - 1] + cost))  # substitution
        previous = current
    return previous[-1]


def proximity_encoded(a_act: np.ndarray, a_res: np.ndarray, a_amount_norm: float,
                      b_act: np.ndarray, b_res: np.ndarray, b_amount_norm: float,
                      channels: str = "both") -> float:
    """L2 distance over stacked one-hot rows plus the normalized amount delta."""
    ssq = 0.0
    if channels in ("activity", "both"):
        ssq += float(((a_act - b_act) ** 2).sum())
    if channels in ("resource", "both"):
        ssq += float(((a_res - b_res) ** 2).sum())
    ssq += (a_amount_norm - b_amount_norm) ** 2
    return float(np.sqrt(ssq))


def proximity(result: "CounterfactualResult", query, model: "NextActivityModel",
              channels: str = "both") -> float:
    """Distance between a counterfactual and the query it explains."""
    from . import cfengine as cf  # local import keeps the module graph acyclic

    query_enc = cf.encode_query(query, model)
    acts = [a for a, _ in result.trace]
    ress = [r for _, r in result.trace]
    a_ids = np.array([model.vocab.activities.encode(t) for t in acts])
    r_ids = np.array([model.vocab.resources.encode(t) for t in ress])
    cand = cf.candidate_from_ids(a_ids, r_ids, model.normalize_amount(result.amount),
                                 model.vocab, model.config.max_len)
    return proximity_encoded(cand.activity_probs, cand.resource_probs, cand.amount_norm,
                             query_enc.activity_probs, query_enc.resource_probs,
                             query_enc.amount_norm, channels)


def plausibility(result: "CounterfactualResult", bank: "KnowledgeBank") -> bool:
    """Is the counterfactual's activity sequence a prefix of a known training trace?"""
    ids = [bank.vocab.activities.encode(a) for a, _ in result.trace]
    return bank.is_plausible(ids)


def diversity(results: list["CounterfactualResult"]) -> tuple[int, int | None]:
    """(number of distinct activity sequences, min pairwise Levenshtein or None)."""
    seqs = [r.activity_sequence() for r in results]
    distinct = len(set(seqs))
    if len(seqs) < 2:
        return distinct, None
    best = None
    for i in range(len(seqs)):
        for j in range(i + 1, len(seqs)):
            d = levenshtein(list(seqs[i]), list(seqs[j]))
            best = d if best is None else min(best, d)
    return distinct, best


# ---------------------------------------------------------------------------
# Directly-follows process graph
# ---------------------------------------------------------------------------

@dataclass
class ProcessGraph:
    nodes: set
    edges: dict  # (a, b) -> observed frequency


def mine_graph(log: EventLog) -> ProcessGraph:
    nodes, edges = set(), {}
    for case in log.cases:
        acts = [e.activity for e in case.events]
        nodes.update(acts)
        for a, b in zip(acts, acts[1:]):
            edges[(a, b)] = edges.get((a, b), 0) + 1
    return ProcessGraph(nodes, edges)


def conforms(trace: list[str], graph: ProcessGraph) -> bool:
    """Every consecutive activity pair of the trace is an observed edge."""
    if any(t not in graph.nodes for t in trace):
        return False
    return all((a, b) in graph.edges for a, b in zip(trace, trace[1:]))


# ---------------------------------------------------------------------------
# Milestone suite
# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    algorithm: str
    dimension: str
    proximity_mean: float | None   # None renders as "Not Found"
    sparsity_mean: float | None
    diversity: bool
    plausibility: bool
    categorical: bool
    n_success: int = 0
    n_failed: int = 0


@dataclass
class MetricReport:
    rows: list[ReportRow]
    per_query: list[dict]
    milestones: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "milestones": self.milestones,
            "rows": [
                {
                    "algorithm": r.algorithm,
                    "dimension": r.dimension,
                    "proximity": _fmt(r.proximity_mean),
                    "sparsity": _fmt(r.sparsity_mean),
                    "diversity": r.diversity,
                    "plausibility": r.plausibility,
                    "categorical": r.categorical,
                    "n_success": r.n_success,
                    "n_failed": r.n_failed,
                }
                for r in self.rows
            ],
            "per_query": self.per_query,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_text(self) -> str:
        headers = ["Algorithm", "Dimension", "Proximity", "Sparsity",
                   "Diversity", "Plausibility", "Categorical"]
        table = [headers]
        for r in self.rows:
            table.append([
                r.algorithm, r.dimension, _fmt(r.proximity_mean), _fmt(r.sparsity_mean),
                _check(r.diversity), _check(r.plausibility), _check(r.categorical),
            ])
        widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
        lines = []
        for idx, row in enumerate(table):
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
            if idx == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def _fmt(value: float | None) -> str:
    return "Not Found" if value is None else f"{value:.4f}"


def _check(flag: bool) -> str:
    return "yes" if flag else "no"


def load_queries(doc: dict):
    """Parse a {milestones, queries} configuration document."""
    from .cfengine import CounterfactualQuery

    queries = [
        CounterfactualQuery(
            prefix=[(a, r) for a, r in q["prefix"]],
            amount=float(q["amount"]),
            desired_activity=q["milestone"],
            amount_mutable=bool(q.get("amount_mutable", False)),
            k=int(q.get("k", 3)),
        )
        for q in doc["queries"]
    ]
    return list(doc.get("milestones", DEFAULT_MILESTONES)), queries


def run_milestone_suite(model: "NextActivityModel", knowledge: "KnowledgeBank",
                        queries, milestones: list[str] | None = None,
                        weights=None, budget=None,
                        run_baseline: bool = True) -> MetricReport:
    """Run the milestone queries through both generators and tabulate.

    Per-query tables keep every returned counterfactual so the summary
    means are recomputable; generator failures become entries in the
    table rather than aborting the suite.
    """
    from . import cfengine as cf

    weights = weights or cf.LossWeights()
    budget = budget or cf.SearchBudget()
    milestones = milestones or DEFAULT_MILESTONES

    per_query: list[dict] = []
    prox = {"activity": [], "resource": []}
    spar = {"activity": [], "resource": []}
    n_success = 0
    n_failed = 0
    all_plausible = True
    any_diverse = False
    baseline_rows: dict[str, ReportRow] = {}

    for qi, query in enumerate(queries):
        entry: dict = {
            "query": {
                "prefix": [[a, r] for a, r in query.prefix],
                "amount": query.amount,
                "milestone": query.desired_activity,
                "amount_mutable": query.amount_mutable,
                "k": query.k,
            },
        }
        try:
            results = cf.generate(query, model, knowledge, weights, budget)
        except (cf.NoCounterfactualFound, cf.NoReachableMilestone) as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
            entry["results"] = []
            n_failed += 1
            per_query.append(entry)
            continue
        n_success += 1
        distinct, _ = diversity(results)
        any_diverse = any_diverse or distinct > 1
        entry["results"] = []
        for r in results:
            all_plausible = all_plausible and r.plausible
            d = result_to_dict(r)
            d["proximity_activity"] = proximity(r, query, model, "activity")
            d["proximity_resource"] = proximity(r, query, model, "resource")
            d["sparsity_activity"] = levenshtein(
                [a for a, _ in r.trace], [a for a, _ in query.prefix])
            d["sparsity_resource"] = levenshtein(
                [x for _, x in r.trace], [x for _, x in query.prefix])
            for dim in ("activity", "resource"):
                prox[dim].append(d[f"proximity_{dim}"])
                spar[dim].append(d[f"sparsity_{dim}"])
            entry["results"].append(d)
        per_query.append(entry)

    rows = []
    if run_baseline and queries:
        from .cfengine import dice_baseline

        for dim in ("activity", "resource"):
            outcomes = [dice_baseline(q, model, knowledge, weights.lambda1,
                                      weights.lambda2, q.k, budget, dim)
                        for q in queries]
            found = [o for o in outcomes if o.status == "found"]
            row = ReportRow(
                algorithm="baseline", dimension=dim,
                proximity_mean=(float(np.mean([r.proximity for o in found
                                               for r in o.results])) if found else None),
                sparsity_mean=(float(np.mean([r.sparsity for o in found
                                              for r in o.results])) if found else None),
                diversity=True, plausibility=False, categorical=False,
                n_success=len(found), n_failed=len(outcomes) - len(found))
            baseline_rows[dim] = row
            rows.append(row)

    for dim in ("activity", "resource"):
        rows.append(ReportRow(
            algorithm="milestone-search", dimension=dim,
            proximity_mean=float(np.mean(prox[dim])) if prox[dim] else None,
            sparsity_mean=float(np.mean(spar[dim])) if spar[dim] else None,
            diversity=any_diverse, plausibility=all_plausible and n_success > 0,
            categorical=True, n_success=n_success, n_failed=n_failed))

    return MetricReport(rows=rows, per_query=per_query, milestones=milestones)


def result_to_dict(result: "CounterfactualResult") -> dict:
    return {
        "trace": [{"activity": a, "resource": r} for a, r in result.trace],
        "amount": result.amount,
        "losses": {k: round(v, 6) for k, v in sorted(result.losses.items())},
        "proximity": round(result.proximity, 6),
        "sparsity": result.sparsity,
        "plausible": result.plausible,
        "iterations": result.iterations,
        "source_case_id": result.source_case_id,
    }
