"""Counterfactual generation for next-activity predictions.

Two generators live here. The milestone-aware search relaxes a candidate
trace to per-position probability simplexes, seeds it from the most
similar milestone-reaching training traces, and runs gradient descent on
a four-part loss (class, distance, category, scenario) until the model
predicts the requested milestone and the discretized trace is a prefix
of a known training trace. The plain baseline optimizes the classic
objective (hinge + MAD-weighted L1 distance - determinantal diversity)
with hard per-step argmax re-projection of categorical rows, which is
exactly the procedure that stalls on categorical inputs; it is kept as a
comparison subject and succeeds only on numeric-only queries.

A candidate of length L carries the desired milestone pinned at its last
position; the model consumes the first L-1 events and must predict the
milestone for the candidate to count as a success.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import eventlog as el
from . import evaluation as ev
from . import predictor as pr
from .eventlog import EventLog, Vocabulary
from .numcore import Graph, Tensor
from .predictor import NextActivityModel

logger = logging.getLogger(__name__)


class NoReachableMilestone(ValueError):
    """No training trace contains the requested milestone activity."""


class NoCounterfactualFound(RuntimeError):
    """Every seed failed the search and the direct scan found nothing."""


class EmptyKnowledgeBase(ValueError):
    pass


@dataclass
class CounterfactualQuery:
    prefix: list[tuple[str, str]]  # (activity, resource) pairs
    amount: float
    desired_activity: str
    amount_mutable: bool = False
    k: int = 3

    def validate(self, vocab: Vocabulary) -> None:
        if not self.prefix:
            raise ValueError("query prefix must be non-empty")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.desired_activity not in vocab.activities:
            raise ValueError(f"milestone {self.desired_activity!r} not in vocabulary")


@dataclass
class LossWeights:
    w_class: float = 1.0
    w_dist: float = 0.5
    w_cat: float = 1.0
    w_scen: float = 1.0
    lambda1: float = 0.5   # baseline distance weight
    lambda2: float = 1.0   # baseline diversity weight
    channels: str = "both"  # which categorical channels may move: activity|resource|both

    def validate(self) -> None:
        if any(w < 0 for w in (self.w_class, self.w_dist, self.w_cat, self.w_scen,
                               self.lambda1, self.lambda2)):
            raise ValueError("loss weights must be non-negative")
        if self.channels not in ("activity", "resource", "both"):
            raise ValueError(f"unknown channel mask {self.channels!r}")


@dataclass
class SearchBudget:
    max_iters: int = 500
    check_every: int = 10
    step_size: float = 0.05
    scenario_temperature: float = 0.05
    margin: float = 1.0
    amount_grid: float = 250.0  # outputs round to this granularity
    scan_limit: int = 2000      # direct-evaluate the whole bank when it is this small
    polish: bool = True

    def validate(self) -> None:
        if self.max_iters < 1 or self.check_every < 1:
            raise ValueError("max_iters and check_every must be >= 1")
        if self.step_size <= 0 or self.scenario_temperature <= 0:
            raise ValueError("step_size and scenario_temperature must be positive")


@dataclass
class CandidateTrace:
    """Relaxed counterfactual: per-position simplex rows, padded to max_len."""

    activity_probs: np.ndarray  # (T, |A|), rows on the simplex; PAD one-hot past length
    resource_probs: np.ndarray  # (T, |R|)
    amount_norm: float
    length: int
    source_case_id: str = ""


@dataclass
class CounterfactualResult:
    trace: list[tuple[str, str]]  # ends at the milestone
    amount: float
    losses: dict[str, float]      # class / distance / category / scenario at the result
    proximity: float
    sparsity: int
    plausible: bool
    iterations: int
    source_case_id: str = ""

    def activity_sequence(self) -> tuple[str, ...]:
        return tuple(a for a, _ in self.trace)


@dataclass
class NotConverged:
    candidate: CandidateTrace
    losses: dict[str, float]
    iterations: int


@dataclass
class BaselineOutcome:
    """What the plain gradient baseline did: found / loop_detected / not_found."""

    status: str
    dimension: str
    iterations: int
    projection_changed: bool
    results: list[CounterfactualResult] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Knowledge bank
# ---------------------------------------------------------------------------

class KnowledgeBank:
    """Training traces as background knowledge for seeding and plausibility.

    Keeps encoded traces, the set of every activity-sequence prefix (the
    plausibility test), and lazily-built one-hot matrices per milestone
    for the scenario loss.
    """

    def __init__(self, log: EventLog, max_len: int):
        if not log.cases:
            raise EmptyKnowledgeBase("knowledge bank needs at least one trace")
        self.vocab = log.vocab
        self.max_len = max_len
        self.case_ids: list[str] = []
        self.act_seqs: list[np.ndarray] = []
        self.res_seqs: list[np.ndarray] = []
        self.amounts: list[float] = []
        self.prefix_set: set[tuple[int, ...]] = set()
        for case in log.cases:
            acts = [e.activity for e in case.events][:max_len]
            ress = [e.resource for e in case.events][:max_len]
            a = np.array([log.vocab.activities.encode(t) for t in acts], dtype=np.int64)
            r = np.array([log.vocab.resources.encode(t) for t in ress], dtype=np.int64)
            self.case_ids.append(case.case_id)
            self.act_seqs.append(a)
            self.res_seqs.append(r)
            self.amounts.append(case.amount)
            for plen in range(1, len(a) + 1):
                self.prefix_set.add(tuple(a[:plen].tolist()))
        self._scenario_cache: dict[tuple[int, str], tuple] = {}

    def __len__(self) -> int:
        return len(self.act_seqs)

    def is_plausible(self, act_ids: np.ndarray | list[int]) -> bool:
        return tuple(int(i) for i in act_ids) in self.prefix_set

    def milestone_entries(self, milestone_id: int) -> list[tuple[int, int]]:
        """(trace index, cut length) for traces containing the milestone at position >= 1.

        The cut is just after the first milestone occurrence, so the
        resulting prefix ends at the milestone and still leaves at least
        one event for the model to condition on.
        """
        entries = []
        for idx, seq in enumerate(self.act_seqs):
            hits = np.nonzero(seq == milestone_id)[0]
            if hits.size and hits[0] >= 1:
                entries.append((idx, int(hits[0]) + 1))
        return entries

    def scenario_matrix(self, milestone_id: int, channels: str = "both"):
        """One-hot bank over milestone-cut prefixes, flattened per trace.

        Returns (matrix, lengths) where matrix rows align with
        [activity rows | resource rows] flattened to max_len positions.
        """
        key = (milestone_id, channels)
        if key not in self._scenario_cache:
            entries = self.milestone_entries(milestone_id)
            n_act = len(self.vocab.activities)
            n_res = len(self.vocab.resources)
            t = self.max_len
            rows, lengths = [], []
            for idx, cut in entries:
                a = _pad_ids(self.act_seqs[idx][:cut], t)
                r = _pad_ids(self.res_seqs[idx][:cut], t)
                parts = []
                if channels in ("activity", "both"):
                    parts.append(_one_hot(a, n_act).ravel())
                if channels in ("resource", "both"):
                    parts.append(_one_hot(r, n_res).ravel())
                rows.append(np.concatenate(parts))
                lengths.append(cut)
            matrix = np.stack(rows) if rows else np.zeros((0, 0))
            self._scenario_cache[key] = (matrix, np.array(lengths, dtype=np.int64))
        return self._scenario_cache[key]


def _pad_ids(ids: np.ndarray, max_len: int) -> np.ndarray:
    out = np.full(max_len, el.PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids[:max_len]
    return out


def _one_hot(ids: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(ids), width))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of a vector onto the probability simplex."""
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u > css / np.arange(1, n + 1))[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def project_rows(rows: np.ndarray, support: np.ndarray) -> None:
    """In-place rowwise simplex projection restricted to `support` columns."""
    for i in range(rows.shape[0]):
        projected = project_simplex(rows[i, support])
        rows[i, :] = 0.0
        rows[i, support] = projected


# ---------------------------------------------------------------------------
# Encodings shared by the losses
# ---------------------------------------------------------------------------

def encode_query(query: CounterfactualQuery, model: NextActivityModel) -> CandidateTrace:
    """The query prefix as an exact one-hot CandidateTrace (identity encoding)."""
    t = model.config.max_len
    a_ids, seq_len = el.encode_tokens([p[0] for p in query.prefix],
                                      model.vocab.activities, t)
    r_ids, _ = el.encode_tokens([p[1] for p in query.prefix], model.vocab.resources, t)
    return CandidateTrace(
        activity_probs=_one_hot(a_ids, len(model.vocab.activities)),
        resource_probs=_one_hot(r_ids, len(model.vocab.resources)),
        amount_norm=model.normalize_amount(query.amount),
        length=seq_len,
    )


def candidate_from_ids(act_ids: np.ndarray, res_ids: np.ndarray, amount_norm: float,
                       vocab: Vocabulary, max_len: int, case_id: str = "") -> CandidateTrace:
    a = _pad_ids(np.asarray(act_ids), max_len)
    r = _pad_ids(np.asarray(res_ids), max_len)
    return CandidateTrace(
        activity_probs=_one_hot(a, len(vocab.activities)),
        resource_probs=_one_hot(r, len(vocab.resources)),
        amount_norm=amount_norm,
        length=int(len(act_ids)),
        source_case_id=case_id,
    )


# ---------------------------------------------------------------------------
# The four sub-losses
# ---------------------------------------------------------------------------

def class_loss(g: Graph, logits: Tensor, desired_id: int, margin: float = 1.0) -> Tensor:
    """Zero once the desired class beats every rival by the margin."""
    return g.hinge(logits, desired_id, margin)


def distance_loss(g: Graph, act_rows: Tensor, res_rows: Tensor, amount: Tensor | None,
                  query_enc: CandidateTrace, amount_mutable: bool) -> Tensor:
    """L2 norm between the relaxed candidate and the query's one-hot encoding."""
    diff_a = g.sub(g.reshape(act_rows, (-1,)), Tensor(query_enc.activity_probs.ravel()))
    diff_r = g.sub(g.reshape(res_rows, (-1,)), Tensor(query_enc.resource_probs.ravel()))
    ssq = g.add(g.sum(g.mul(diff_a, diff_a)), g.sum(g.mul(diff_r, diff_r)))
    if amount_mutable and amount is not None:
        d = g.add_const(g.reshape(amount, (1,)), -query_enc.amount_norm)
        ssq = g.add(ssq, g.sum(g.mul(d, d)))
    return g.sqrt(ssq)


def category_loss(g: Graph, act_rows: Tensor, res_rows: Tensor) -> Tensor:
    """Penalty for rows that drift off the simplex: (row sum - 1)^2 plus min(0, x)^2."""
    total = None
    for rows in (act_rows, res_rows):
        sums = g.add_const(g.sum(rows, axis=1), -1.0)
        term = g.sum(g.mul(sums, sums))
        neg = g.scale(g.sub(g.abs(rows), rows), 0.5)  # max(0, -x)
        term = g.add(term, g.sum(g.mul(neg, neg)))
        total = term if total is None else g.add(total, term)
    return total


def scenario_loss(g: Graph, cand_flat: Tensor, bank_matrix: np.ndarray,
                  bank_lengths: np.ndarray, cand_length: int, max_len: int,
                  temperature: float = 0.05, n_channels: int = 2) -> Tensor:
    """1 - (softmax-weighted similarity to the nearest known trace).

    Per-trace similarity is the mean one-hot inner product over the
    non-PAD positions of the longer of the two traces; trailing PAD-PAD
    matches are constants and get subtracted out. At temperature -> 0 this
    approaches the hard nearest-neighbour similarity; 0 loss means the
    candidate is exactly a known trace.
    """
    if bank_matrix.shape[0] == 0:
        raise EmptyKnowledgeBase("scenario loss needs a non-empty trace bank")
    span = np.maximum(bank_lengths, cand_length).astype(np.float64)
    pad_matches = n_channels * (max_len - span)
    inv = 1.0 / (n_channels * span)
    raw = g.reshape(g.matmul(Tensor(bank_matrix), g.reshape(cand_flat, (-1, 1))),
                    (bank_matrix.shape[0],))
    sims = g.mul(g.add(raw, Tensor(-pad_matches)), Tensor(inv))
    weights = g.softmax(g.scale(sims, 1.0 / temperature), axis=-1)
    return g.add_const(g.scale(g.dot(weights, sims), -1.0), 1.0)


def dice4el_total(g: Graph, parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of the four sub-losses."""
    total = g.scale(parts["class"], weights.w_class)
    total = g.add(total, g.scale(parts["distance"], weights.w_dist))
    total = g.add(total, g.scale(parts["category"], weights.w_cat))
    total = g.add(total, g.scale(parts["scenario"], weights.w_scen))
    return total


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------

def seed_candidates(query: CounterfactualQuery, knowledge: KnowledgeBank,
                    k: int, query_amount_norm: float) -> list[CandidateTrace]:
    """The k milestone-reaching training traces closest to the query prefix.

    Closeness is the Levenshtein distance between the query's activity
    sequence and the trace's same-length head; ties break to shorter
    cuts, then to the case id. Each selected trace becomes a one-hot
    candidate cut just after its first milestone position.
    """
    milestone_id = knowledge.vocab.activities.encode(query.desired_activity)
    entries = knowledge.milestone_entries(milestone_id)
    if not entries:
        raise NoReachableMilestone(
            f"no training trace reaches {query.desired_activity!r}")
    query_acts = [knowledge.vocab.activities.encode(a) for a, _ in query.prefix]
    scored = []
    for idx, cut in entries:
        head = knowledge.act_seqs[idx][: len(query_acts)].tolist()
        dist = ev.levenshtein(query_acts, head)
        scored.append((dist, cut, knowledge.case_ids[idx], idx))
    scored.sort()
    if len(scored) < k:
        logger.warning("milestone %s: only %d of %d requested seeds available",
                       query.desired_activity, len(scored), k)
    seeds = []
    for dist, cut, case_id, idx in scored[:k]:
        seeds.append(candidate_from_ids(
            knowledge.act_seqs[idx][:cut], knowledge.res_seqs[idx][:cut],
            query_amount_norm, knowledge.vocab, knowledge.max_len, case_id))
    return seeds


# ---------------------------------------------------------------------------
# Success test and result assembly
# ---------------------------------------------------------------------------

def _discretize(act_rows: np.ndarray, res_rows: np.ndarray, length: int,
                amount_norm: float, model: NextActivityModel, grid: float):
    act_ids = act_rows[:length].argmax(axis=1)
    res_ids = res_rows[:length].argmax(axis=1)
    amount = model.denormalize_amount(amount_norm)
    if grid > 0:
        amount = max(0.0, round(amount / grid) * grid)
    return act_ids, res_ids, amount


def _predicts_milestone(model: NextActivityModel, act_ids: np.ndarray,
                        res_ids: np.ndarray, amount: float, milestone_id: int) -> bool:
    """Does the model, fed everything before the final position, predict the milestone?"""
    eff = len(act_ids) - 1
    if eff < 1:
        return False
    a = _pad_ids(act_ids[:eff], model.config.max_len)[None, :]
    r = _pad_ids(res_ids[:eff], model.config.max_len)[None, :]
    preds, _ = pr.predict_ids(model, a, r, np.array([eff]),
                              np.array([model.normalize_amount(amount)]))
    return int(preds[0]) == milestone_id


def check_success(model: NextActivityModel, knowledge: KnowledgeBank,
                  act_ids: np.ndarray, res_ids: np.ndarray, amount: float,
                  milestone_id: int) -> bool:
    """The independent soundness test: milestone predicted and trace plausible."""
    if int(act_ids[-1]) != milestone_id:
        return False
    return (knowledge.is_plausible(act_ids)
            and _predicts_milestone(model, act_ids, res_ids, amount, milestone_id))


def _loss_snapshot(model: NextActivityModel, knowledge: KnowledgeBank,
                   query: CounterfactualQuery, query_enc: CandidateTrace,
                   act_rows: np.ndarray, res_rows: np.ndarray, length: int,
                   amount_norm: float, budget: SearchBudget,
                   milestone_id: int) -> dict[str, float]:
    """Evaluate the four sub-losses at a concrete candidate (no gradients kept)."""
    g = Graph(recording=False)
    act_t, res_t = Tensor(act_rows), Tensor(res_rows)
    amount_t = Tensor(np.array([[amount_norm]]))
    logits = pr.forward_soft(model, act_t, res_t, amount_t, length - 1, g)
    flat = Tensor(np.concatenate([act_rows.ravel(), res_rows.ravel()]))
    matrix, lengths = knowledge.scenario_matrix(milestone_id)
    return {
        "class": class_loss(g, logits, milestone_id, budget.margin).item(),
        "distance": distance_loss(g, act_t, res_t, amount_t, query_enc,
                                  query.amount_mutable).item(),
        "category": category_loss(g, act_t, res_t).item(),
        "scenario": scenario_loss(g, flat, matrix, lengths, length,
                                  knowledge.max_len, budget.scenario_temperature).item(),
    }


def _build_result(model: NextActivityModel, knowledge: KnowledgeBank,
                  query: CounterfactualQuery, query_enc: CandidateTrace,
                  act_ids: np.ndarray, res_ids: np.ndarray, amount: float,
                  budget: SearchBudget, milestone_id: int,
                  iterations: int, source_case_id: str) -> CounterfactualResult:
    vocab = model.vocab
    trace = [(vocab.activities.decode(int(a)), vocab.resources.decode(int(r)))
             for a, r in zip(act_ids, res_ids)]
    cand = candidate_from_ids(act_ids, res_ids, model.normalize_amount(amount),
                              vocab, knowledge.max_len, source_case_id)
    losses = _loss_snapshot(model, knowledge, query, query_enc,
                            cand.activity_probs, cand.resource_probs, cand.length,
                            cand.amount_norm, budget, milestone_id)
    proximity = ev.proximity_encoded(cand.activity_probs, cand.resource_probs,
                                     cand.amount_norm, query_enc.activity_probs,
                                     query_enc.resource_probs, query_enc.amount_norm)
    sparsity = ev.levenshtein([a for a, _ in trace], [a for a, _ in query.prefix])
    return CounterfactualResult(
        trace=trace, amount=amount, losses=losses, proximity=proximity,
        sparsity=sparsity, plausible=knowledge.is_plausible(act_ids),
        iterations=iterations, source_case_id=source_case_id)


def _polish(model: NextActivityModel, knowledge: KnowledgeBank,
            query: CounterfactualQuery, act_ids: np.ndarray, res_ids: np.ndarray,
            amount: float, milestone_id: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Greedy post-pass: revert positions to the query where success survives.

    Walks the overlap with the query front to back, trying the query's
    activity (plausibility re-checked) and resource at each position, and
    finally the query's amount. Each accepted revert strictly lowers the
    distance to the query, so this never hurts proximity.
    """
    act_ids = act_ids.copy()
    res_ids = res_ids.copy()
    q_acts = [model.vocab.activities.encode(a) for a, _ in query.prefix]
    q_ress = [model.vocab.resources.encode(r) for _, r in query.prefix]
    overlap = min(len(act_ids) - 1, len(q_acts))  # final position stays the milestone
    for t in range(overlap):
        if act_ids[t] != q_acts[t]:
            trial = act_ids.copy()
            trial[t] = q_acts[t]
            if (knowledge.is_plausible(trial)
                    and _predicts_milestone(model, trial, res_ids, amount, milestone_id)):
                act_ids = trial
        if res_ids[t] != q_ress[t]:
            trial = res_ids.copy()
            trial[t] = q_ress[t]
            if _predicts_milestone(model, act_ids, trial, amount, milestone_id):
                res_ids = trial
    if query.amount_mutable and amount != query.amount:
        if _predicts_milestone(model, act_ids, res_ids, query.amount, milestone_id):
            amount = query.amount
    return act_ids, res_ids, amount


# ---------------------------------------------------------------------------
# Gradient search
# ---------------------------------------------------------------------------

def optimize(seed: CandidateTrace, query: CounterfactualQuery, model: NextActivityModel,
             knowledge: KnowledgeBank, weights: LossWeights | None = None,
             budget: SearchBudget | None = None,
             on_step=None) -> CounterfactualResult | NotConverged:
    """Gradient descent on one relaxed candidate until the success test passes.

    Every step renormalizes the rows back onto the simplex (restricted to
    real data tokens), keeps PAD positions and the final milestone row
    pinned, and every `check_every` iterations discretizes the candidate
    by row argmax and runs the success test. `on_step` (if given) is
    called with the row arrays after every projection, for invariants.
    """
    weights = weights or LossWeights()
    budget = budget or SearchBudget()
    weights.validate()
    budget.validate()
    milestone_id = model.vocab.activities.encode(query.desired_activity)
    query_enc = encode_query(query, model)
    length = seed.length
    t_max = knowledge.max_len

    act_rows = seed.activity_probs.copy()
    res_rows = seed.resource_probs.copy()
    amount_norm = seed.amount_norm
    act_support = np.array(model.vocab.activities.data_ids, dtype=np.int64)
    res_support = np.array(model.vocab.resources.data_ids, dtype=np.int64)
    matrix, lengths = knowledge.scenario_matrix(milestone_id)
    min_amount_norm = model.normalize_amount(0.0)

    move_act = weights.channels in ("activity", "both")
    move_res = weights.channels in ("resource", "both")

    def success_check(iteration: int):
        a_ids, r_ids, amount = _discretize(act_rows, res_rows, length, amount_norm,
                                           model, budget.amount_grid)
        if check_success(model, knowledge, a_ids, r_ids, amount, milestone_id):
            if budget.polish:
                a_ids, r_ids, amount = _polish(model, knowledge, query, a_ids, r_ids,
                                               amount, milestone_id)
            return _build_result(model, knowledge, query, query_enc, a_ids, r_ids,
                                 amount, budget, milestone_id, iteration,
                                 seed.source_case_id)
        return None

    hit = success_check(0)
    if hit is not None:
        return hit

    last_losses: dict[str, float] = {}
    for it in range(1, budget.max_iters + 1):
        g = Graph(recording=True)
        act_t = Tensor(act_rows, requires_grad=True)
        res_t = Tensor(res_rows, requires_grad=True)
        amount_t = Tensor(np.array([[amount_norm]]), requires_grad=query.amount_mutable)
        logits = pr.forward_soft(model, act_t, res_t, amount_t, length - 1, g)
        flat = g.reshape(g.concat([g.reshape(act_t, (1, -1)), g.reshape(res_t, (1, -1))],
                                  axis=1), (-1,))
        parts = {
            "class": class_loss(g, logits, milestone_id, budget.margin),
            "distance": distance_loss(g, act_t, res_t, amount_t, query_enc,
                                      query.amount_mutable),
            "category": category_loss(g, act_t, res_t),
            "scenario": scenario_loss(g, flat, matrix, lengths, length, t_max,
                                      budget.scenario_temperature),
        }
        total = dice4el_total(g, parts, weights)
        g.backward(total)
        last_losses = {name: t.item() for name, t in parts.items()}

        if move_act and act_t.grad is not None:
            act_rows[:length - 1] -= budget.step_size * act_t.grad[:length - 1]
        if move_res and res_t.grad is not None:
            res_rows[:length] -= budget.step_size * res_t.grad[:length]
        if query.amount_mutable and amount_t.grad is not None:
            amount_norm = max(min_amount_norm,
                              amount_norm - budget.step_size * float(amount_t.grad.ravel()[0]))

        project_rows(act_rows[:length - 1], act_support)
        project_rows(res_rows[:length], res_support)
        act_rows[length - 1] = 0.0
        act_rows[length - 1, milestone_id] = 1.0
        act_rows[length:] = 0.0
        act_rows[length:, el.PAD_ID] = 1.0
        res_rows[length:] = 0.0
        res_rows[length:, el.PAD_ID] = 1.0
        if on_step is not None:
            on_step(act_rows, res_rows)

        if it % budget.check_every == 0:
            hit = success_check(it)
            if hit is not None:
                return hit

    candidate = CandidateTrace(act_rows.copy(), res_rows.copy(), amount_norm, length,
                               seed.source_case_id)
    return NotConverged(candidate, last_losses, budget.max_iters)


def _scan_bank(query: CounterfactualQuery, model: NextActivityModel,
               knowledge: KnowledgeBank, query_enc: CandidateTrace,
               budget: SearchBudget, milestone_id: int,
               deadline=None) -> list[CounterfactualResult]:
    """Direct evaluation of every milestone-cut training prefix (no gradients).

    This is the case-based arm of the search: each bank prefix is tested
    as-is with the query's amount. It guarantees the engine never returns
    anything farther from the query than the best plain bank candidate.
    """
    entries = knowledge.milestone_entries(milestone_id)
    if len(entries) > budget.scan_limit:
        return []
    t = knowledge.max_len
    amount = query.amount
    results = []
    batch, meta = [], []

    def flush():
        if not batch:
            return
        a = np.stack([b[0] for b in batch])
        r = np.stack([b[1] for b in batch])
        lens = np.array([b[2] for b in batch])
        amounts = np.full(len(batch), model.normalize_amount(amount))
        preds, _ = pr.predict_ids(model, a, r, lens, amounts)
        for pred, (idx, cut) in zip(preds, meta):
            if int(pred) == milestone_id:
                act_ids = knowledge.act_seqs[idx][:cut]
                res_ids = knowledge.res_seqs[idx][:cut]
                a_f, r_f, amt = act_ids, res_ids, amount
                if budget.polish:
                    a_f, r_f, amt = _polish(model, knowledge, query, act_ids, res_ids,
                                            amount, milestone_id)
                results.append(_build_result(
                    model, knowledge, query, query_enc, a_f, r_f, amt,
                    budget, milestone_id, 0, knowledge.case_ids[idx]))
        batch.clear()
        meta.clear()

    for idx, cut in entries:
        if deadline is not None and deadline():
            break
        eff = cut - 1
        batch.append((_pad_ids(knowledge.act_seqs[idx][:eff], t),
                      _pad_ids(knowledge.res_seqs[idx][:eff], t), eff))
        meta.append((idx, cut))
        if len(batch) >= 256:
            flush()
    flush()
    return results


def generate(query: CounterfactualQuery, model: NextActivityModel,
             knowledge: KnowledgeBank, weights: LossWeights | None = None,
             budget: SearchBudget | None = None,
             deadline=None) -> list[CounterfactualResult]:
    """Up to query.k counterfactuals with pairwise-distinct activity sequences.

    Runs the gradient search from the seeded candidates, merges in the
    direct bank scan, deduplicates by activity sequence (keeping the
    closest), and orders by proximity. `deadline` is an optional
    zero-argument callable polled between units of work; when it returns
    True the search stops early with whatever it has.
    """
    weights = weights or LossWeights()
    budget = budget or SearchBudget()
    query.validate(model.vocab)
    milestone_id = model.vocab.activities.encode(query.desired_activity)
    query_enc = encode_query(query, model)

    seeds = seed_candidates(query, knowledge, query.k, query_enc.amount_norm)
    found: list[CounterfactualResult] = []
    for seed in seeds:
        if deadline is not None and deadline():
            break
        out = optimize(seed, query, model, knowledge, weights, budget)
        if isinstance(out, CounterfactualResult):
            found.append(out)
    found.extend(_scan_bank(query, model, knowledge, query_enc, budget,
                            milestone_id, deadline))

    best: dict[tuple[str, ...], CounterfactualResult] = {}
    for res in found:
        key = res.activity_sequence()
        cur = best.get(key)
        if cur is None or (res.proximity, res.source_case_id) < (cur.proximity,
                                                                 cur.source_case_id):
            best[key] = res
    ordered = sorted(best.values(),
                     key=lambda r: (r.proximity, r.source_case_id, r.activity_sequence()))
    if not ordered:
        raise NoCounterfactualFound(
            f"no counterfactual reaches {query.desired_activity!r} within budget")
    return ordered[: query.k]


# ---------------------------------------------------------------------------
# Plain-objective baseline with hard re-projection
# ---------------------------------------------------------------------------

def _mad_weight(knowledge: KnowledgeBank, model: NextActivityModel) -> float:
    """Inverse median absolute deviation of the normalized amounts (1 if degenerate)."""
    amounts = np.array([model.normalize_amount(a) for a in knowledge.amounts])
    mad = float(np.median(np.abs(amounts - np.median(amounts))))
    return 1.0 / mad if mad > 1e-9 else 1.0


def dice_baseline(query: CounterfactualQuery, model: NextActivityModel,
                  knowledge: KnowledgeBank, lambda1: float = 0.5, lambda2: float = 1.0,
                  k: int | None = None, budget: SearchBudget | None = None,
                  dimension: str = "activity") -> BaselineOutcome:
    """The unmodified gradient objective with per-step argmax re-projection.

    `dimension` picks what is optimized: "activity" or "resource" rows
    (re-projected to hard one-hots after every step, which stalls the
    search), or "amount" (purely numeric, no projection, and the one case
    where this baseline works). Deterministic: candidates start exactly
    at the query encoding.
    """
    if dimension not in ("activity", "resource", "amount"):
        raise ValueError(f"unknown baseline dimension {dimension!r}")
    budget = budget or SearchBudget()
    k = k or query.k
    query.validate(model.vocab)
    milestone_id = model.vocab.activities.encode(query.desired_activity)
    query_enc = encode_query(query, model)
    length = query_enc.length
    mad_w = _mad_weight(knowledge, model)

    acts = [query_enc.activity_probs.copy() for _ in range(k)]
    ress = [query_enc.resource_probs.copy() for _ in range(k)]
    amounts = [query_enc.amount_norm for _ in range(k)]
    initial_ids = [(acts[i][:length].argmax(axis=1).tolist(),
                    ress[i][:length].argmax(axis=1).tolist()) for i in range(k)]

    def weighted_l1(g: Graph, a_t, r_t, amt_t):
        d_a = g.sum(g.abs(g.sub(g.reshape(a_t, (-1,)),
                                Tensor(query_enc.activity_probs.ravel()))))
        d_r = g.sum(g.abs(g.sub(g.reshape(r_t, (-1,)),
                                Tensor(query_enc.resource_probs.ravel()))))
        d = g.add(d_a, d_r)
        if dimension == "amount":
            diff = g.add_const(g.reshape(amt_t, (1,)), -query_enc.amount_norm)
            d = g.add(d, g.scale(g.sum(g.abs(diff)), mad_w))
        return d

    def harvest(iteration: int) -> list[CounterfactualResult]:
        """Concrete candidates whose (rounded) state already flips the prediction."""
        results = []
        for i in range(k):
            a_ids = acts[i][:length].argmax(axis=1)
            r_ids = ress[i][:length].argmax(axis=1)
            amount = model.denormalize_amount(amounts[i])
            if budget.amount_grid > 0:
                amount = max(0.0, round(amount / budget.amount_grid) * budget.amount_grid)
            preds, _ = pr.predict_ids(model, _pad_ids(a_ids, t_max)[None, :],
                                      _pad_ids(r_ids, t_max)[None, :],
                                      np.array([length]),
                                      np.array([model.normalize_amount(amount)]))
            if int(preds[0]) != milestone_id:
                continue
            vocab = model.vocab
            trace = [(vocab.activities.decode(int(a)), vocab.resources.decode(int(r)))
                     for a, r in zip(a_ids, r_ids)]
            cand = candidate_from_ids(a_ids, r_ids, model.normalize_amount(amount),
                                      vocab, t_max)
            results.append(CounterfactualResult(
                trace=trace, amount=amount, losses={},
                proximity=ev.proximity_encoded(
                    cand.activity_probs, cand.resource_probs, cand.amount_norm,
                    query_enc.activity_probs, query_enc.resource_probs,
                    query_enc.amount_norm),
                sparsity=ev.levenshtein([a for a, _ in trace],
                                        [a for a, _ in query.prefix]),
                plausible=knowledge.is_plausible(a_ids),
                iterations=iteration))
        return results

    t_max = model.config.max_len
    projection_changed = False
    for it in range(1, budget.max_iters + 1):
        g = Graph(recording=True)
        a_ts = [Tensor(acts[i], requires_grad=dimension == "activity") for i in range(k)]
        r_ts = [Tensor(ress[i], requires_grad=dimension == "resource") for i in range(k)]
        amt_ts = [Tensor(np.array([[amounts[i]]]), requires_grad=dimension == "amount")
                  for i in range(k)]

        y_total = None
        d_total = None
        for i in range(k):
            logits = pr.forward_soft(model, a_ts[i], r_ts[i], amt_ts[i], length, g)
            y = g.hinge(logits, milestone_id, budget.margin)
            d = weighted_l1(g, a_ts[i], r_ts[i], amt_ts[i])
            y_total = y if y_total is None else g.add(y_total, y)
            d_total = d if d_total is None else g.add(d_total, d)
        loss = g.add(g.scale(y_total, 1.0 / k), g.scale(d_total, lambda1 / k))
        if k > 1:
            kernel_rows = []
            for i in range(k):
                row = []
                for j in range(k):
                    if i == j:
                        row.append(Tensor(np.array([[1.0]])))
                    else:
                        dij = g.add(
                            g.sum(g.abs(g.sub(a_ts[i], a_ts[j]))),
                            g.sum(g.abs(g.sub(r_ts[i], r_ts[j]))))
                        if dimension == "amount":
                            dij = g.add(dij, g.sum(g.abs(g.sub(amt_ts[i], amt_ts[j]))))
                        entry = g.reciprocal(g.add_const(dij, 1.0))
                        row.append(g.reshape(entry, (1, 1)))
                kernel_rows.append(g.concat(row, axis=1))
            kernel = g.concat(kernel_rows, axis=0)
            loss = g.sub(loss, g.scale(g.det(kernel), lambda2))
        g.backward(loss)

        for i in range(k):
            if dimension == "activity" and a_ts[i].grad is not None:
                acts[i][:length] -= budget.step_size * a_ts[i].grad[:length]
                acts[i][:length] = _argmax_project(acts[i][:length])
            elif dimension == "resource" and r_ts[i].grad is not None:
                ress[i][:length] -= budget.step_size * r_ts[i].grad[:length]
                ress[i][:length] = _argmax_project(ress[i][:length])
            elif dimension == "amount" and amt_ts[i].grad is not None:
                amounts[i] -= budget.step_size * float(amt_ts[i].grad.ravel()[0])

        current_ids = [(acts[i][:length].argmax(axis=1).tolist(),
                        ress[i][:length].argmax(axis=1).tolist()) for i in range(k)]
        if current_ids != initial_ids:
            projection_changed = True

        results = harvest(it)
        if results:
            return BaselineOutcome("found", dimension, it, projection_changed, results)

    if dimension == "amount" or projection_changed:
        return BaselineOutcome("not_found", dimension, budget.max_iters,
                               projection_changed)
    return BaselineOutcome("loop_detected", dimension, budget.max_iters, False)


def _argmax_project(rows: np.ndarray) -> np.ndarray:
    out = np.zeros_like(rows)
    out[np.arange(rows.shape[0]), rows.argmax(axis=1)] = 1.0
    return out
