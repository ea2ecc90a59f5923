"""Model forward contracts, training behaviour and checkpointing."""

from __future__ import annotations

import numpy as np
import pytest

from flowcf import eventlog as el
from flowcf import predictor as pr
from flowcf import synthgen
from flowcf.numcore import Graph, Tensor


def tiny_config(**overrides):
    base = dict(activity_embed_dim=8, resource_embed_dim=8, lstm_hidden=12,
                dense_dim=8, epochs=2, batch_size=32, max_len=8, seed=3)
    base.update(overrides)
    return pr.ModelConfig(**base)


def make_model(seqs, config=None):
    cases = [el.Case(f"c{i}", [el.Event(a, "r") for a in seq], 100.0 + i)
             for i, seq in enumerate(seqs)]
    vocab = el.Vocabulary.from_cases(cases)
    config = config or tiny_config()
    model = pr.NextActivityModel(config, vocab, 100.0, 10.0)
    model.init_params(np.random.default_rng(config.seed))
    return model, el.EventLog(cases, vocab)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_forward_shape_and_finite():
    model, log = make_model([["a", "b", "c"]])
    s = el.build_prefixes(log, model.config.max_len)[1]
    logits = pr.forward(model, s.activity_ids[None], s.resource_ids[None],
                        np.array([s.seq_len]), np.array([s.amount_norm]))
    assert logits.data.shape == (1, len(model.vocab.activities))
    assert np.isfinite(logits.data[:, 2:]).all()


def test_forward_identical_rows_without_dropout():
    model, log = make_model([["a", "b", "c", "d"]])
    s = el.build_prefixes(log, model.config.max_len)[2]
    act = np.stack([s.activity_ids, s.activity_ids])
    res = np.stack([s.resource_ids, s.resource_ids])
    logits = pr.forward(model, act, res, np.array([s.seq_len] * 2),
                        np.array([s.amount_norm] * 2), train=False)
    np.testing.assert_array_equal(logits.data[0], logits.data[1])


def test_zero_init_model_is_uniform_over_unmasked():
    model, log = make_model([["a", "b"]])
    for p in model.params.values():
        p.data[:] = 0.0
    tok, probs = pr.predict_next(model, [("a", "r")], 100.0)
    unmasked = [i for i in range(len(model.vocab.activities))
                if model.logit_mask[i] == 0.0]
    expected = 1.0 / len(unmasked)
    for i in unmasked:
        assert probs[i] == pytest.approx(expected, abs=1e-12)
    assert probs[el.PAD_ID] == 0.0
    assert probs[model.vocab.activities.unk_id] == 0.0


def test_masked_classes_probability_zero():
    model, log = make_model([["a", "b", "c"]])
    _, probs = pr.predict_next(model, [("a", "r"), ("b", "r")], 120.0)
    assert probs[el.PAD_ID] == 0.0
    assert probs[model.vocab.activities.unk_id] == 0.0
    assert probs.sum() == pytest.approx(1.0)


def test_soft_forward_matches_hard_forward_on_one_hots():
    model, log = make_model([["a", "b", "c", "d"]])
    s = el.build_prefixes(log, model.config.max_len)[3]
    hard = pr.forward(model, s.activity_ids[None], s.resource_ids[None],
                      np.array([s.seq_len]), np.array([s.amount_norm]))
    n_act = len(model.vocab.activities)
    n_res = len(model.vocab.resources)
    act_rows = np.zeros((model.config.max_len, n_act))
    act_rows[np.arange(model.config.max_len), s.activity_ids] = 1.0
    res_rows = np.zeros((model.config.max_len, n_res))
    res_rows[np.arange(model.config.max_len), s.resource_ids] = 1.0
    soft = pr.forward_soft(model, Tensor(act_rows), Tensor(res_rows),
                           Tensor(np.array([[s.amount_norm]])), s.seq_len,
                           Graph(recording=False))
    np.testing.assert_array_equal(hard.data, soft.data)


def test_prefix_beyond_max_len_keeps_recent_window():
    model, log = make_model([["a", "b", "c"]], tiny_config(max_len=2))
    tok, _ = pr.predict_next(model, [("a", "r")] * 5, 100.0)
    assert tok in model.vocab.activities.index_to_token


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_train_chain_log_reaches_full_accuracy(chain_model):
    _model, report = chain_model
    assert report.accuracy == 1.0


def test_train_loss_finite_and_decreasing_early(chain_model):
    model, _ = chain_model
    losses = model.epoch_losses
    assert all(np.isfinite(losses))
    assert losses[1] < losses[0]
    assert losses[2] < losses[1]


def test_train_empty_log_raises():
    with pytest.raises(el.EmptyLog):
        pr.train(el.EventLog([], el.Vocabulary.from_cases([])), tiny_config())


def test_train_deterministic_checkpoints(tmp_path):
    cfg = synthgen.SynthConfig(n_cases=40, seed=2, loop_probability=0.3,
                               decline_probability=0.2)
    log = synthgen.generate(cfg)
    paths = []
    for name in ("a", "b"):
        model, _ = pr.train(log, tiny_config(epochs=2))
        path = tmp_path / f"{name}.ckpt.json"
        pr.save(model, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_predict_next_on_chain(chain_model):
    model, _ = chain_model
    prefix = [("A_SUBMITTED", "112")]
    tok, probs = pr.predict_next(model, prefix, 10000.0)
    assert tok == "A_PARTLYSUBMITTED"
    assert probs.max() > 0.9


def test_predict_eos_after_complete_case(chain_log, chain_model):
    model, _ = chain_model
    case = chain_log.cases[0]
    prefix = [(e.activity, e.resource) for e in case.events]
    tok, _ = pr.predict_next(model, prefix, case.amount)
    assert tok == el.EOS


def test_unknown_token_maps_to_unk(chain_model):
    model, _ = chain_model
    tok, _ = pr.predict_next(model, [("A_SUBMITTED", "never-seen-resource")], 9000.0)
    assert tok in model.vocab.activities.index_to_token


def test_unknown_token_raises_when_unk_disabled():
    cases = [el.Case("c0", [el.Event("a", "r")], 1.0)]
    vocab = el.Vocabulary.from_cases(cases, with_unk=False)
    model = pr.NextActivityModel(tiny_config(), vocab, 0.0, 1.0)
    model.init_params(np.random.default_rng(0))
    with pytest.raises(pr.UnknownToken):
        pr.predict_next(model, [("a", "never-seen")], 1.0)


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------

def test_metrics_recomputable_from_confusion(chain_model):
    model, report = chain_model
    again = pr.EvalReport.from_confusion(report.confusion)
    assert again.accuracy == report.accuracy
    assert again.macro_precision == report.macro_precision
    assert again.macro_recall == report.macro_recall
    assert again.macro_f1 == report.macro_f1


def test_confusion_row_sums_are_support(chain_model):
    model, report = chain_model
    assert report.confusion.sum() > 0
    assert (report.confusion.sum(axis=1) >= 0).all()
    assert 0.0 <= report.accuracy <= 1.0
    for v in (report.macro_precision, report.macro_recall, report.macro_f1):
        assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def test_save_load_round_trip_bitwise(tmp_path, chain_model):
    model, _ = chain_model
    path = tmp_path / "m.ckpt.json"
    pr.save(model, path)
    loaded = pr.load(path)
    prefix = [("A_SUBMITTED", "112"), ("A_PARTLYSUBMITTED", "112")]
    a_ids, r_ids, seq_len, amt = pr.encode_prefix(model, prefix, 12345.0)
    before = pr.forward(model, a_ids[None], r_ids[None], np.array([seq_len]),
                        np.array([amt])).data
    after = pr.forward(loaded, a_ids[None], r_ids[None], np.array([seq_len]),
                       np.array([amt])).data
    np.testing.assert_array_equal(before, after)


def test_load_truncated_checkpoint(tmp_path, chain_model):
    model, _ = chain_model
    path = tmp_path / "m.ckpt.json"
    pr.save(model, path)
    path.write_bytes(path.read_bytes()[: 500])
    with pytest.raises(pr.CorruptCheckpoint):
        pr.load(path)


def test_load_version_mismatch(tmp_path):
    path = tmp_path / "m.ckpt.json"
    path.write_text('{"version": "some-other-format"}')
    with pytest.raises(pr.VersionMismatch):
        pr.load(path)


def test_checkpoint_is_self_contained(tmp_path, chain_model):
    model, _ = chain_model
    path = tmp_path / "m.ckpt.json"
    pr.save(model, path)
    loaded = pr.load(path)
    # the loaded model carries vocabulary and amount stats of its own
    assert loaded.vocab.activities.index_to_token == model.vocab.activities.index_to_token
    assert loaded.amount_mean == model.amount_mean
    tok_a, _ = pr.predict_next(model, [("A_SUBMITTED", "112")], 20000.0)
    tok_b, _ = pr.predict_next(loaded, [("A_SUBMITTED", "112")], 20000.0)
    assert tok_a == tok_b
