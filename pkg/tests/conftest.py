"""Shared fixtures: synthetic logs and session-scoped trained models.

The two trained models are expensive (seconds to minutes), so they are
built once per session and reused by the unit tests and the acceptance
suite alike.
"""

from __future__ import annotations

import numpy as np
import pytest

from flowcf import cfengine as cf
from flowcf import eventlog as el
from flowcf import predictor as pr
from flowcf import synthgen

CHAIN_SYNTH = dict(n_cases=200, seed=5, loop_probability=0.0, decline_probability=0.0)
SCALE_SYNTH = dict(n_cases=2000, seed=9, loop_probability=0.5, decline_probability=0.25,
                   branch_slope=12.0, loop_noise=0.15)

CHAIN_MODEL = dict(epochs=10, max_len=16, seed=7)
SCALE_MODEL = dict(epochs=6, max_len=16, seed=7)


@pytest.fixture(scope="session")
def chain_log() -> el.EventLog:
    """Deterministic straight-through log: every case is the same 9-step path."""
    return synthgen.generate(synthgen.SynthConfig(**CHAIN_SYNTH))


@pytest.fixture(scope="session")
def chain_model(chain_log):
    import time

    start = time.monotonic()
    model, report = pr.train(chain_log, pr.ModelConfig(**CHAIN_MODEL))
    model.train_seconds = time.monotonic() - start
    return model, report


@pytest.fixture(scope="session")
def scale_setup():
    """2,000 stochastic cases, an outer train/test split, and a trained model."""
    import time

    log = synthgen.generate(synthgen.SynthConfig(**SCALE_SYNTH))
    train_log, test_log = el.split_train_test(log, 0.2, seed=11)
    start = time.monotonic()
    model, report = pr.train(train_log, pr.ModelConfig(**SCALE_MODEL))
    train_seconds = time.monotonic() - start
    bank = cf.KnowledgeBank(el.EventLog(train_log.cases, model.vocab),
                            model.config.max_len)
    return {
        "log": log,
        "train_log": train_log,
        "test_log": test_log,
        "model": model,
        "report": report,
        "bank": bank,
        "train_seconds": train_seconds,
    }


@pytest.fixture(scope="session")
def small_setup():
    """A faster trained model for engine unit tests (600 cases, same process)."""
    cfg = synthgen.SynthConfig(n_cases=600, seed=3, loop_probability=0.5,
                               decline_probability=0.25, branch_slope=12.0,
                               loop_noise=0.15)
    log = synthgen.generate(cfg)
    train_log, test_log = el.split_train_test(log, 0.2, seed=11)
    model, report = pr.train(train_log, pr.ModelConfig(epochs=6, max_len=16, seed=1))
    bank = cf.KnowledgeBank(el.EventLog(train_log.cases, model.vocab),
                            model.config.max_len)
    return {
        "log": log,
        "train_log": train_log,
        "test_log": test_log,
        "model": model,
        "report": report,
        "bank": bank,
    }


def bigram_majority_accuracy(train_log: el.EventLog, test_log: el.EventLog) -> float:
    """Independent counting oracle: majority next activity given the last one."""
    from collections import Counter, defaultdict

    counts: dict[str, Counter] = defaultdict(Counter)
    for case in train_log.cases:
        acts = [e.activity for e in case.events] + [el.EOS]
        for a, b in zip(acts, acts[1:]):
            counts[a][b] += 1
    table = {a: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0]
             for a, c in counts.items()}
    overall = Counter()
    for c in counts.values():
        overall.update(c)
    fallback = min(overall.items(), key=lambda kv: (-kv[1], kv[0]))[0]

    hit = total = 0
    for case in test_log.cases:
        acts = [e.activity for e in case.events] + [el.EOS]
        for i in range(1, len(acts)):
            hit += int(table.get(acts[i - 1], fallback) == acts[i])
            total += 1
    return hit / total if total else 0.0
