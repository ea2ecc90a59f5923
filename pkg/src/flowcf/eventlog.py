"""Event-log parsing, vocabularies, prefix extraction and train/test splits.

The log model is deliberately small: a case is an ordered list of
(activity, resource) events plus one static requested amount. Every
downstream consumer (predictor, counterfactual search, evaluation) works
on the integer encodings produced here.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD = "<PAD>"
EOS = "<EOS>"
UNK = "<UNK>"

PAD_ID = 0
EOS_ID = 1

DEFAULT_SCHEMA = {
    "case_id": "case_id",
    "activity": "activity",
    "resource": "resource",
    "amount": "amount",
    "timestamp": "timestamp",
}


class MissingColumn(ValueError):
    """The CSV header does not contain a required schema column."""


class MalformedRow(ValueError):
    def __init__(self, row_number: int, message: str):
        super().__init__(f"row {row_number}: {message}")
        self.row_number = row_number


class NegativeAmount(ValueError):
    pass


class EmptyLog(ValueError):
    pass


@dataclass
class Event:
    activity: str
    resource: str
    timestamp: str | None = None


@dataclass
class Case:
    case_id: str
    events: list[Event]
    amount: float


class TokenMap:
    """Bijective token<->index map with PAD=0, EOS=1 and an optional UNK tail."""

    def __init__(self, tokens: list[str], with_unk: bool = True):
        self.index_to_token: list[str] = [PAD, EOS] + list(tokens)
        if with_unk:
            self.index_to_token.append(UNK)
        self.token_to_index = {t: i for i, t in enumerate(self.index_to_token)}
        if len(self.token_to_index) != len(self.index_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        self.unk_id = self.token_to_index.get(UNK)

    def __len__(self) -> int:
        return len(self.index_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_index

    def encode(self, token: str) -> int:
        idx = self.token_to_index.get(token)
        if idx is None:
            if self.unk_id is None:
                raise KeyError(token)
            return self.unk_id
        return idx

    def decode(self, index: int) -> str:
        return self.index_to_token[index]

    @property
    def data_tokens(self) -> list[str]:
        """Tokens that can actually occur in a trace (no PAD/EOS/UNK)."""
        reserved = {PAD, EOS, UNK}
        return [t for t in self.index_to_token if t not in reserved]

    @property
    def data_ids(self) -> list[int]:
        reserved = {PAD, EOS, UNK}
        return [i for i, t in enumerate(self.index_to_token) if t not in reserved]


class Vocabulary:
    def __init__(self, activities: TokenMap, resources: TokenMap):
        self.activities = activities
        self.resources = resources

    @classmethod
    def from_cases(cls, cases: list[Case], with_unk: bool = True) -> "Vocabulary":
        acts = sorted({e.activity for c in cases for e in c.events})
        ress = sorted({e.resource for c in cases for e in c.events})
        return cls(TokenMap(acts, with_unk), TokenMap(ress, with_unk))

    def to_dict(self) -> dict:
        return {
            "activities": self.activities.index_to_token,
            "resources": self.resources.index_to_token,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        vocab = cls.__new__(cls)
        for attr, key in (("activities", "activities"), ("resources", "resources")):
            tm = TokenMap.__new__(TokenMap)
            tm.index_to_token = list(d[key])
            tm.token_to_index = {t: i for i, t in enumerate(tm.index_to_token)}
            tm.unk_id = tm.token_to_index.get(UNK)
            setattr(vocab, attr, tm)
        return vocab


@dataclass
class EventLog:
    cases: list[Case]
    vocab: Vocabulary

    def __len__(self) -> int:
        return len(self.cases)

    def activity_sequences(self) -> list[list[str]]:
        return [[e.activity for e in c.events] for c in self.cases]


@dataclass
class PrefixSample:
    """One next-activity training example: a right-padded prefix and its label."""

    activity_ids: np.ndarray  # (T,) int64, PAD beyond seq_len
    resource_ids: np.ndarray  # (T,) int64
    seq_len: int
    amount_norm: float
    label: int
    case_id: str = ""


def parse_csv(path: str | Path, schema: dict | None = None) -> EventLog:
    """Read a comma-separated event log into an EventLog.

    Rows are grouped by case id and ordered by timestamp when a timestamp
    column is mapped and populated (stable sort: file order breaks ties);
    otherwise file order is kept. The vocabulary covers every token in
    the file.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise MissingColumn("file has no header row")
        header = set(reader.fieldnames)
        for key in ("case_id", "activity", "resource", "amount"):
            if schema[key] not in header:
                raise MissingColumn(f"column '{schema[key]}' (for {key}) not in header")
        has_ts = schema.get("timestamp") in header

        order: list[str] = []
        rows_by_case: dict[str, list[tuple]] = {}
        amounts: dict[str, float] = {}
        for lineno, row in enumerate(reader, start=2):
            cid = (row.get(schema["case_id"]) or "").strip()
            act = (row.get(schema["activity"]) or "").strip()
            res = (row.get(schema["resource"]) or "").strip()
            if not cid or not act or not res:
                raise MalformedRow(lineno, "empty case id, activity or resource")
            raw_amount = (row.get(schema["amount"]) or "").strip()
            if raw_amount:
                try:
                    amount = float(raw_amount)
                except ValueError:
                    raise MalformedRow(lineno, f"unparseable amount {raw_amount!r}") from None
                if amount < 0:
                    raise NegativeAmount(f"row {lineno}: amount {amount}")
                prev = amounts.get(cid)
                if prev is not None and prev != amount:
                    raise MalformedRow(lineno, f"case {cid} has conflicting amounts {prev} and {amount}")
                amounts[cid] = amount
            ts = (row.get(schema["timestamp"]) or "").strip() if has_ts else ""
            if cid not in rows_by_case:
                order.append(cid)
                rows_by_case[cid] = []
            rows_by_case[cid].append((_timestamp_key(ts), Event(act, res, ts or None)))

    cases = []
    for cid in order:
        rows = rows_by_case[cid]
        if any(key is not None for key, _ in rows):
            rows = sorted(rows, key=lambda r: (r[0] is None, r[0]))  # stable
        cases.append(Case(cid, [ev for _, ev in rows], amounts.get(cid, 0.0)))
    return EventLog(cases, Vocabulary.from_cases(cases))


def _timestamp_key(raw: str):
    if not raw:
        return None
    try:
        return (0, float(raw), "")
    except ValueError:
        return (1, 0.0, raw)  # ISO-8601 strings order lexicographically


def write_csv(log: EventLog, path: str | Path, schema: dict | None = None) -> None:
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    cols = [schema[k] for k in ("case_id", "activity", "resource", "amount", "timestamp")]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for case in log.cases:
            for ev in case.events:
                writer.writerow([case.case_id, ev.activity, ev.resource,
                                 _format_amount(case.amount), ev.timestamp or ""])


def _format_amount(a: float) -> str:
    return str(int(a)) if float(a).is_integer() else repr(a)


def amount_stats(log: EventLog) -> tuple[float, float]:
    """Mean/std of case amounts; std floors at 1 so z-scoring never divides by 0."""
    if not log.cases:
        return 0.0, 1.0
    amounts = np.array([c.amount for c in log.cases], dtype=np.float64)
    std = float(amounts.std())
    return float(amounts.mean()), std if std > 1e-9 else 1.0


def encode_tokens(tokens: list[str], token_map: TokenMap, max_len: int) -> tuple[np.ndarray, int]:
    """Right-padded id array for the last `max_len` tokens, plus the real length."""
    window = tokens[-max_len:] if len(tokens) > max_len else tokens
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    for i, tok in enumerate(window):
        ids[i] = token_map.encode(tok)
    return ids, len(window)


def decode_ids(ids: np.ndarray, token_map: TokenMap) -> list[str]:
    return [token_map.decode(int(i)) for i in ids if int(i) != PAD_ID]


def build_prefixes(
    log: EventLog,
    max_len: int,
    stats: tuple[float, float] | None = None,
) -> list[PrefixSample]:
    """Expand every case into (prefix, next-activity) samples.

    A case of n events yields n samples: prefixes of length 1..n-1
    labelled with the following activity, plus the full case labelled
    EOS. Prefixes longer than max_len keep their most recent events.
    Amounts are z-scored with `stats` (defaults to this log's own).
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    mean, std = stats if stats is not None else amount_stats(log)
    samples: list[PrefixSample] = []
    for case in log.cases:
        acts = [e.activity for e in case.events]
        ress = [e.resource for e in case.events]
        amount_norm = (case.amount - mean) / std
        for plen in range(1, len(acts) + 1):
            a_ids, seq_len = encode_tokens(acts[:plen], log.vocab.activities, max_len)
            r_ids, _ = encode_tokens(ress[:plen], log.vocab.resources, max_len)
            label = log.vocab.activities.encode(acts[plen]) if plen < len(acts) else EOS_ID
            samples.append(PrefixSample(a_ids, r_ids, seq_len, amount_norm, label, case.case_id))
    return samples


def split_train_test(log: EventLog, test_fraction: float, seed: int) -> tuple[EventLog, EventLog]:
    """Case-granular split; both halves share a vocabulary built from the training part."""
    if not log.cases:
        raise EmptyLog("cannot split an empty log")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    n = len(log.cases)
    if n < 2:
        raise ValueError("need at least 2 cases to split")
    n_test = min(max(int(round(n * test_fraction)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train_cases = [log.cases[i] for i in range(n) if i not in test_idx]
    test_cases = [log.cases[i] for i in range(n) if i in test_idx]
    vocab = Vocabulary.from_cases(train_cases)
    return EventLog(train_cases, vocab), EventLog(test_cases, vocab)


# ---------------------------------------------------------------------------
# Canonical JSON serialization (stable key order for checkpoints / service)
# ---------------------------------------------------------------------------

def log_to_dict(log: EventLog) -> dict:
    return {
        "cases": [
            {
                "case_id": c.case_id,
                "amount": c.amount,
                "events": [
                    {"activity": e.activity, "resource": e.resource, "timestamp": e.timestamp}
                    for e in c.events
                ],
            }
            for c in log.cases
        ],
        "vocab": log.vocab.to_dict(),
    }


def log_from_dict(d: dict) -> EventLog:
    cases = [
        Case(
            c["case_id"],
            [Event(e["activity"], e["resource"], e.get("timestamp")) for e in c["events"]],
            float(c["amount"]),
        )
        for c in d["cases"]
    ]
    return EventLog(cases, Vocabulary.from_dict(d["vocab"]))


def save_log(log: EventLog, path: str | Path) -> None:
    Path(path).write_text(json.dumps(log_to_dict(log), sort_keys=True), encoding="utf-8")


def load_log(path: str | Path) -> EventLog:
    return log_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
