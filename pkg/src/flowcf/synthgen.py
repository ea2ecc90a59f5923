"""Deterministic synthetic loan-process logs for CI-scale tests.

Cases walk a fixed milestone skeleton (submission, pre-acceptance, an
optional rework loop, offer steps, final approval or decline) with
amount-correlated branching: the higher the requested amount, the more
likely a case loops through rework or gets declined. That correlation is
what makes amount-mutable counterfactuals exercisable without real data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .eventlog import Case, Event, EventLog, Vocabulary

A_SUBMITTED = "A_SUBMITTED"
A_PARTLYSUBMITTED = "A_PARTLYSUBMITTED"
A_PREACCEPTED = "A_PREACCEPTED"
A_DECLINED = "A_DECLINED"
W_COMPLETE = "W_Complete request"
A_ACCEPTED = "A_ACCEPTED"
A_FINALISED = "A_FINALISED"
O_SELECTED = "O_SELECTED"
O_CREATED = "O_CREATED"
O_SENT = "O_SENT"
A_APPROVED = "A_APPROVED"

HAPPY_PATH = [
    A_SUBMITTED, A_PARTLYSUBMITTED, A_PREACCEPTED,
    A_ACCEPTED, A_FINALISED, O_SELECTED, O_CREATED, O_SENT, A_APPROVED,
]

MAX_LOOPS = 3


@dataclass
class SynthConfig:
    n_cases: int = 500
    seed: int = 7
    loop_probability: float = 0.4      # intensity of the rework self-loop
    decline_probability: float = 0.15  # overall declined fraction
    amount_min: float = 2500.0
    amount_max: float = 50000.0
    resource_pool: int = 8
    branch_slope: float = 10.0         # steepness of the amount effect
    loop_noise: float = 0.0            # chance the loop count shifts by +-1

    def validate(self) -> None:
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        for name in ("loop_probability", "decline_probability", "loop_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.amount_min < 0 or self.amount_max <= self.amount_min:
            raise ValueError("need 0 <= amount_min < amount_max")
        if self.resource_pool < 1:
            raise ValueError("resource_pool must be >= 1")


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + np.exp(-x))


def generate(config: SynthConfig) -> EventLog:
    """Generate an event log; identical configs yield identical logs."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    pool = [str(10900 + i) for i in range(config.resource_pool)]
    # Fixed per-activity resource buckets, so resources carry signal.
    buckets = {
        act: [pool[(3 * i + j) % len(pool)] for j in range(min(3, len(pool)))]
        for i, act in enumerate(HAPPY_PATH + [A_DECLINED, W_COMPLETE])
    }

    lo, hi = config.amount_min, config.amount_max
    n_grid = int((hi - lo) // 250.0)
    cases: list[Case] = []
    for i in range(config.n_cases):
        amount = lo + 250.0 * rng.integers(0, n_grid + 1)
        a_norm = (amount - lo) / (hi - lo)
        lean = _sigmoid(config.branch_slope * (a_norm - 0.5))  # ~0 low, ~1 high

        declined = rng.random() < min(1.0, 2.0 * config.decline_probability * lean)
        decline_early = declined and rng.random() < 0.5

        n_loops = int(round(MAX_LOOPS * config.loop_probability * 2.0 * lean))
        if config.loop_noise > 0 and rng.random() < config.loop_noise:
            n_loops += int(rng.integers(0, 2)) * 2 - 1
        n_loops = min(max(n_loops, 0), MAX_LOOPS)

        acts = [A_SUBMITTED, A_PARTLYSUBMITTED]
        if decline_early:
            acts.append(A_DECLINED)
        else:
            acts.append(A_PREACCEPTED)
            acts.extend([W_COMPLETE] * n_loops)
            acts.extend([A_ACCEPTED, A_FINALISED, O_SELECTED, O_CREATED, O_SENT])
            acts.append(A_DECLINED if declined else A_APPROVED)

        events = []
        for t, act in enumerate(acts):
            if act in (A_SUBMITTED, A_PARTLYSUBMITTED):
                res = "112"
            else:
                bucket = buckets[act]
                res = bucket[int(rng.integers(0, len(bucket)))]
            events.append(Event(act, res, str(t)))
        cases.append(Case(f"case_{i:05d}", events, float(amount)))

    return EventLog(cases, Vocabulary.from_cases(cases))


def transition_graph(config: SynthConfig) -> set[tuple[str, str]]:
    """Every directly-follows pair the generator can emit (for self-conformance checks)."""
    edges = {
        (A_SUBMITTED, A_PARTLYSUBMITTED),
        (A_PARTLYSUBMITTED, A_DECLINED),
        (A_PARTLYSUBMITTED, A_PREACCEPTED),
        (A_PREACCEPTED, W_COMPLETE),
        (W_COMPLETE, W_COMPLETE),
        (W_COMPLETE, A_ACCEPTED),
        (A_PREACCEPTED, A_ACCEPTED),
        (A_ACCEPTED, A_FINALISED),
        (A_FINALISED, O_SELECTED),
        (O_SELECTED, O_CREATED),
        (O_CREATED, O_SENT),
        (O_SENT, A_APPROVED),
        (O_SENT, A_DECLINED),
    }
    return edges
