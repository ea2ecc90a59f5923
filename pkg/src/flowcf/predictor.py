"""The next-activity model: a dual-branch network and its trainer.

Dynamic features (activity and resource sequences) run through embedding
tables and a single-layer LSTM; the static requested amount runs through
a small dense branch; both branches are concatenated into a linear head
over the activity vocabulary. PAD and UNK logits are masked so those
classes can never be predicted.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import eventlog as el
from .eventlog import EventLog, PrefixSample, Vocabulary
from .numcore import AdamState, Graph, Tensor, adam_step

CHECKPOINT_VERSION = "flowcf-ckpt-1"

LOGIT_MASK = -1e9  # exp() underflows to exactly 0 in float64

logger = logging.getLogger(__name__)


class UnknownToken(KeyError):
    """A query token is outside the vocabulary and the UNK policy is disabled."""


class VersionMismatch(ValueError):
    pass


class CorruptCheckpoint(ValueError):
    pass


@dataclass
class ModelConfig:
    activity_embed_dim: int = 32
    resource_embed_dim: int = 128
    lstm_hidden: int = 64
    dense_dim: int = 64
    dropout: float = 0.1
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.005
    seed: int = 42
    max_len: int = 25
    val_fraction: float = 0.2  # internal held-out share used for the EvalReport

    def validate(self) -> None:
        dims = (self.activity_embed_dim, self.resource_embed_dim, self.lstm_hidden,
                self.dense_dim, self.epochs, self.batch_size, self.max_len)
        if any(d <= 0 for d in dims):
            raise ValueError("all dimensions and counts must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass
class EvalReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray  # (|A|, |A|) int, rows = true class

    @classmethod
    def from_confusion(cls, confusion: np.ndarray) -> "EvalReport":
        conf = np.asarray(confusion, dtype=np.int64)
        total = conf.sum()
        accuracy = float(np.trace(conf) / total) if total else 0.0
        support = conf.sum(axis=1)
        predicted = conf.sum(axis=0)
        precisions, recalls, f1s = [], [], []
        for c in np.nonzero(support)[0]:
            tp = conf[c, c]
            p = tp / predicted[c] if predicted[c] else 0.0
            r = tp / support[c]
            precisions.append(p)
            recalls.append(r)
            f1s.append(2 * p * r / (p + r) if (p + r) else 0.0)
        if not precisions:
            return cls(accuracy, 0.0, 0.0, 0.0, conf)
        return cls(accuracy, float(np.mean(precisions)), float(np.mean(recalls)),
                   float(np.mean(f1s)), conf)


class NextActivityModel:
    """Trained parameters plus everything needed to encode a query."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary,
                 amount_mean: float, amount_std: float):
        self.config = config
        self.vocab = vocab
        self.amount_mean = amount_mean
        self.amount_std = amount_std
        self.params: dict[str, Tensor] = {}
        self.logit_mask = self._build_logit_mask()
        self.epoch_losses: list[float] = []

    # -- construction ---------------------------------------------------

    def _build_logit_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.vocab.activities))
        mask[el.PAD_ID] = LOGIT_MASK
        if self.vocab.activities.unk_id is not None:
            mask[self.vocab.activities.unk_id] = LOGIT_MASK
        return mask

    def init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        n_act = len(self.vocab.activities)
        n_res = len(self.vocab.resources)
        in_dim = cfg.activity_embed_dim + cfg.resource_embed_dim
        h = cfg.lstm_hidden

        def glorot(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        lstm_b = np.zeros(4 * h)
        lstm_b[h:2 * h] = 1.0  # forget-gate bias
        self.params = {
            "act_embed": Tensor(rng.uniform(-0.1, 0.1, size=(n_act, cfg.activity_embed_dim)), True),
            "res_embed": Tensor(rng.uniform(-0.1, 0.1, size=(n_res, cfg.resource_embed_dim)), True),
            "lstm_w": Tensor(glorot(in_dim + h, 4 * h), True),
            "lstm_b": Tensor(lstm_b, True),
            "amount_w": Tensor(glorot(1, cfg.dense_dim), True),
            "amount_b": Tensor(np.zeros(cfg.dense_dim), True),
            "head_w": Tensor(glorot(h + cfg.dense_dim, n_act), True),
            "head_b": Tensor(np.zeros(n_act), True),
        }

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def normalize_amount(self, amount: float) -> float:
        return (amount - self.amount_mean) / self.amount_std

    def denormalize_amount(self, amount_norm: float) -> float:
        return amount_norm * self.amount_std + self.amount_mean


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _lstm_cell(g: Graph, model: NextActivityModel, x_t: Tensor, h: Tensor, c: Tensor):
    hid = model.config.lstm_hidden
    z = g.concat([x_t, h], axis=1)
    gates = g.add(g.matmul(z, model.params["lstm_w"]), model.params["lstm_b"])
    i = g.sigmoid(g.slice_cols(gates, 0, hid))
    f = g.sigmoid(g.slice_cols(gates, hid, 2 * hid))
    cand = g.tanh(g.slice_cols(gates, 2 * hid, 3 * hid))
    o = g.sigmoid(g.slice_cols(gates, 3 * hid, 4 * hid))
    c_new = g.add(g.mul(f, c), g.mul(i, cand))
    h_new = g.mul(o, g.tanh(c_new))
    return h_new, c_new


def _head(g: Graph, model: NextActivityModel, h: Tensor, amount: Tensor, train: bool) -> Tensor:
    amt = g.tanh(g.add(g.matmul(amount, model.params["amount_w"]), model.params["amount_b"]))
    if train and model.config.dropout > 0:
        h = g.dropout(h, model.config.dropout, train)
        amt = g.dropout(amt, model.config.dropout, train)
    feat = g.concat([h, amt], axis=1)
    logits = g.add(g.matmul(feat, model.params["head_w"]), model.params["head_b"])
    return g.add(logits, Tensor(model.logit_mask))


def forward(model: NextActivityModel, act_ids: np.ndarray, res_ids: np.ndarray,
            seq_lens: np.ndarray, amounts_norm: np.ndarray,
            graph: Graph | None = None, train: bool = False) -> Tensor:
    """Masked logits (N, |A|) for a batch of right-padded prefixes.

    The recurrent state is frozen past each sample's real length, so the
    returned hidden state is the one at position seq_len - 1.
    """
    g = graph if graph is not None else Graph(recording=False)
    n, t_max = act_ids.shape
    hid = model.config.lstm_hidden
    h = Tensor(np.zeros((n, hid)))
    c = Tensor(np.zeros((n, hid)))
    steps = int(seq_lens.max())
    for t in range(steps):
        a_t = g.embedding_lookup(model.params["act_embed"], act_ids[:, t])
        r_t = g.embedding_lookup(model.params["res_embed"], res_ids[:, t])
        x_t = g.concat([a_t, r_t], axis=1)
        h_new, c_new = _lstm_cell(g, model, x_t, h, c)
        alive = (seq_lens > t).astype(np.float64)[:, None]
        m = Tensor(np.ascontiguousarray(np.broadcast_to(alive, (n, hid))))
        keep = Tensor(1.0 - m.data)
        h = g.add(g.mul(m, h_new), g.mul(keep, h))
        c = g.add(g.mul(m, c_new), g.mul(keep, c))
    amount = Tensor(amounts_norm.reshape(n, 1))
    return _head(g, model, h, amount, train)


def forward_soft(model: NextActivityModel, act_rows: Tensor, res_rows: Tensor,
                 amount_norm: Tensor, eff_len: int, graph: Graph) -> Tensor:
    """Differentiable forward over relaxed one-hot rows (single candidate).

    `act_rows` is (T, |A|) and `res_rows` (T, |R|); only the first
    `eff_len` positions are consumed. Row simplexes are mixed into the
    embedding tables by matrix product, so gradients flow back to the rows.
    """
    g = graph
    hid = model.config.lstm_hidden
    h = Tensor(np.zeros((1, hid)))
    c = Tensor(np.zeros((1, hid)))
    for t in range(eff_len):
        a_t = g.matmul(g.slice_rows(act_rows, t, t + 1), model.params["act_embed"])
        r_t = g.matmul(g.slice_rows(res_rows, t, t + 1), model.params["res_embed"])
        x_t = g.concat([a_t, r_t], axis=1)
        h, c = _lstm_cell(g, model, x_t, h, c)
    return _head(g, model, h, amount_norm, train=False)


def _stack(samples: list[PrefixSample]):
    act = np.stack([s.activity_ids for s in samples])
    res = np.stack([s.resource_ids for s in samples])
    lens = np.array([s.seq_len for s in samples], dtype=np.int64)
    amounts = np.array([s.amount_norm for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return act, res, lens, amounts, labels


# ---------------------------------------------------------------------------
# Training / evaluation
# ---------------------------------------------------------------------------

def train(log: EventLog, config: ModelConfig | None = None) -> tuple[NextActivityModel, EvalReport]:
    """Train on `log` and report metrics on an internal case-level hold-out.

    Fully deterministic for a fixed config.seed: parameter init, epoch
    shuffling and dropout all draw from generators derived from it.
    """
    config = config or ModelConfig()
    config.validate()
    if not log.cases:
        raise el.EmptyLog("cannot train on an empty log")

    train_log, val_log = el.split_train_test(log, config.val_fraction, config.seed)
    stats = el.amount_stats(train_log)
    model = NextActivityModel(config, train_log.vocab, stats[0], stats[1])
    model.init_params(np.random.default_rng(config.seed))
    logger.info("model has %d trainable parameters (|A|=%d, |R|=%d)",
                model.param_count(), len(model.vocab.activities),
                len(model.vocab.resources))

    samples = el.build_prefixes(train_log, config.max_len, stats)
    val_samples = el.build_prefixes(val_log, config.max_len, stats)

    shuffle_rng = np.random.default_rng(config.seed)
    graph = Graph(recording=True, seed=config.seed + 1)
    state = AdamState(learning_rate=config.learning_rate)
    params = list(model.params.values())

    epoch_losses: list[float] = []
    for _epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(samples))
        epoch_loss = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[lo:lo + config.batch_size]]
            act, res, lens, amounts, labels = _stack(batch)
            logits = forward(model, act, res, lens, amounts, graph, train=True)
            loss = graph.cross_entropy(logits, labels)
            epoch_loss += loss.item() * len(batch)
            graph.backward(loss)
            adam_step(params, state)
        epoch_losses.append(epoch_loss / max(len(samples), 1))
    model.epoch_losses = epoch_losses

    report = evaluate(model, val_samples)
    return model, report


def evaluate(model: NextActivityModel, samples: list[PrefixSample],
             batch_size: int = 512) -> EvalReport:
    n_act = len(model.vocab.activities)
    confusion = np.zeros((n_act, n_act), dtype=np.int64)
    for lo in range(0, len(samples), batch_size):
        batch = samples[lo:lo + batch_size]
        act, res, lens, amounts, labels = _stack(batch)
        logits = forward(model, act, res, lens, amounts)
        preds = logits.data.argmax(axis=1)
        for true, pred in zip(labels, preds):
            confusion[true, pred] += 1
    return EvalReport.from_confusion(confusion)


def predict_ids(model: NextActivityModel, act_ids: np.ndarray, res_ids: np.ndarray,
                seq_lens: np.ndarray, amounts_norm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch prediction on already-encoded prefixes: (argmax ids, softmax probs)."""
    logits = forward(model, act_ids, res_ids, seq_lens, amounts_norm)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    return logits.data.argmax(axis=1), probs


def encode_prefix(model: NextActivityModel, prefix: list[tuple[str, str]], amount: float):
    """Encode a raw (activity, resource) prefix for the model; UNK policy applies."""
    if not prefix:
        raise ValueError("prefix must be non-empty")
    try:
        a_ids, seq_len = el.encode_tokens([p[0] for p in prefix],
                                          model.vocab.activities, model.config.max_len)
        r_ids, _ = el.encode_tokens([p[1] for p in prefix],
                                    model.vocab.resources, model.config.max_len)
    except KeyError as exc:
        raise UnknownToken(str(exc)) from exc
    return a_ids, r_ids, seq_len, model.normalize_amount(amount)


def predict_next(model: NextActivityModel, prefix: list[tuple[str, str]],
                 amount: float) -> tuple[str, np.ndarray]:
    """Most likely next activity for a running case (ties break to the lowest index)."""
    a_ids, r_ids, seq_len, amount_norm = encode_prefix(model, prefix, amount)
    preds, probs = predict_ids(model, a_ids[None, :], r_ids[None, :],
                               np.array([seq_len]), np.array([amount_norm]))
    return model.vocab.activities.decode(int(preds[0])), probs[0]


def top_k_activities(model: NextActivityModel, probs: np.ndarray, k: int = 5):
    order = np.argsort(-probs, kind="stable")[:k]
    return [(model.vocab.activities.decode(int(i)), float(probs[i])) for i in order]


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save(model: NextActivityModel, path: str | Path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocab": model.vocab.to_dict(),
        "amount_mean": model.amount_mean,
        "amount_std": model.amount_std,
        "params": {
            name: {"shape": list(p.data.shape), "data": p.data.ravel().tolist()}
            for name, p in model.params.items()
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load(path: str | Path) -> NextActivityModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise CorruptCheckpoint(f"{path}: not a checkpoint document")
    if doc["version"] != CHECKPOINT_VERSION:
        raise VersionMismatch(f"expected {CHECKPOINT_VERSION}, found {doc['version']}")
    try:
        config = ModelConfig(**doc["config"])
        vocab = Vocabulary.from_dict(doc["vocab"])
        model = NextActivityModel(config, vocab, doc["amount_mean"], doc["amount_std"])
        model.params = {
            name: Tensor(np.array(entry["data"]).reshape(entry["shape"]), True)
            for name, entry in doc["params"].items()
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    return model
