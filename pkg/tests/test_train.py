import json
import math
import os

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vulberta.checkpoint import read_header
from vulberta.errors import ConfigError
from vulberta.heads import CNNClassifier
from vulberta.ingest import Sample
from vulberta.model import MaskedLanguageModel, preset
from vulberta.synthetic import generate_labelled
from vulberta.tokenizer import encode_source
from vulberta.train import (PlateauScheduler, TrainConfig, TrainingError, TrainLog, evaluate, finetune,
                            load_classifier, pretrain, report_from_probabilities, save_classifier)

MAX_LEN = 64


@pytest.fixture(scope="module")
def corpus(fixture_corpus, fixture_vocab):
    return [encode_source(c, fixture_vocab, MAX_LEN) for c in fixture_corpus[:60]]


@pytest.fixture(scope="module")
def toy_cfg(fixture_vocab):
    return preset("toy", len(fixture_vocab), max_positions=MAX_LEN + 2, dropout=0.0)


def pre_cfg(**kw):
    base = dict(max_steps=10, batch_size=4, eval_every=5, max_len=MAX_LEN, valid_fraction=0.1, lr=1e-3)
    return TrainConfig.for_phase("pretrain", **{**base, **kw})


def ft_cfg(**kw):
    base = dict(lr=1e-2, max_epochs=3, batch_size=8, max_len=MAX_LEN, early_stop_patience=None)
    return TrainConfig.for_phase("finetune", **{**base, **kw})


# --- scheduler -------------------------------------------------------------------

def test_plateau_reductions_at_third_and_fifth_evaluation():
    s = PlateauScheduler(None, factor=0.1, patience=2, lr=1.0)
    lrs = [s.step(5.0) for _ in range(5)]
    assert lrs == pytest.approx([1.0, 1.0, 0.1, 0.1, 0.01])


def test_improvement_resets_patience_and_min_lr_holds():
    s = PlateauScheduler(None, factor=0.5, patience=2, min_lr=0.3, lr=1.0)
    assert [s.step(v) for v in (3, 4, 2, 4, 4, 4, 4, 4, 4)] == [1, 1, 1, 1, 0.5, 0.5, 0.3, 0.3, 0.3]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0.01, 0.99), st.integers(1, 5))
def test_lr_never_increases(values, factor, patience):
    s = PlateauScheduler(None, factor=factor, patience=patience, min_lr=1e-4, lr=1.0)
    prev = 1.0
    for v in values:
        lr = s.step(v)
        assert 1e-4 <= lr <= prev
        prev = lr


def test_scheduler_state_round_trip():
    s = PlateauScheduler(None, factor=0.1, patience=3, lr=2.0)
    for v in (1, 2, 2):
        s.step(v)
    t = PlateauScheduler(None, factor=0.1, patience=3, lr=9.0)
    t.load_state_dict(json.loads(json.dumps(s.state_dict())))
    assert t.step(2) == s.step(2) == pytest.approx(0.2)


# --- log and config ------------------------------------------------------------------

def test_train_log_ordering_and_jsonl():
    log = TrainLog()
    log.append(step=0, train_loss=None)
    log.append(step=3, train_loss=1.5)
    with pytest.raises(ValueError):
        log.append(step=2, train_loss=1.0)
    assert [json.loads(l) for l in log.to_jsonl().splitlines()] == log.records
    assert log.losses() == [1.5]


def test_phase_defaults():
    p = TrainConfig.for_phase("pretrain")
    f = TrainConfig.for_phase("finetune")
    assert (p.lr, p.max_steps, p.batch_size, p.max_len) == (5e-4, 500_000, 16, 512)
    assert (f.lr, f.max_epochs, f.batch_size, f.max_len) == (3e-5, 10, 8, 1024)
    assert p.scheduler.factor == 0.1 and p.scheduler.patience == 2


@pytest.mark.parametrize("bad", [dict(lr=0), dict(batch_size=0), dict(mask_rate=1.0),
                                 dict(scheduler={"factor": 1.5}), dict(class_weights=[1, -1]),
                                 dict(dtype="float16"), dict(phase="other")])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_dict_round_trip_and_unknown_field():
    cfg = TrainConfig.for_phase("pretrain", lr=1e-4, scheduler={"factor": 0.5, "patience": 1})
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError, match="lerning_rate"):
        TrainConfig.from_dict({"lerning_rate": 1})
    with pytest.raises(ConfigError):
        TrainConfig(phase="pretrain")


# --- pre-training ----------------------------------------------------------------------

def test_pretrain_logs_initial_loss_and_writes_checkpoint(tmp_path, toy_cfg, corpus, fixture_vocab):
    path, log, _ = pretrain(toy_cfg, pre_cfg(), corpus, tmp_path, fixture_vocab.checksum)
    assert path == os.path.join(tmp_path, "pretrain-10.ckpt")
    assert log.records[0]["step"] == 0 and log.records[0]["valid_loss"] > 0
    # untrained loss sits near ln |V|
    assert abs(log.records[0]["valid_loss"] - math.log(len(fixture_vocab))) < 0.5
    assert [r["step"] for r in log.records] == list(range(11))
    assert [r["step"] for r in log.records if r["valid_loss"] is not None] == [0, 5, 10]
    assert read_header(path)["vocab_checksum"] == fixture_vocab.checksum


def test_pretrain_deterministic(toy_cfg, corpus):
    _, a, ma = pretrain(toy_cfg, pre_cfg(seed=3), corpus)
    _, b, mb = pretrain(toy_cfg, pre_cfg(seed=3), corpus)
    _, c, _ = pretrain(toy_cfg, pre_cfg(seed=4), corpus)
    assert a.losses() == b.losses() and a.losses() != c.losses()
    for pa, pb in zip(ma.parameters(), mb.parameters()):
        assert torch.equal(pa, pb)


def test_resume_matches_uninterrupted_run(tmp_path, toy_cfg, corpus):
    cfg = pre_cfg(max_steps=12, checkpoint_every=4, eval_every=3)
    _, full, m_full = pretrain(toy_cfg, cfg, corpus, tmp_path / "a")
    # a crash after step 4 leaves exactly this file behind
    _, resumed, m_res = pretrain(toy_cfg, cfg, corpus, tmp_path / "b",
                                 resume_from=tmp_path / "a" / "pretrain-4.ckpt")
    assert len(resumed) == len(full)
    for r, f in zip(resumed.records, full.records):
        for key in ("train_loss", "valid_loss", "lr"):
            if f[key] is None:
                assert r[key] is None
            else:
                assert abs(r[key] - f[key]) <= 1e-9
    for pa, pb in zip(m_full.parameters(), m_res.parameters()):
        assert (pa - pb).abs().max().item() <= 1e-9


def test_non_finite_loss_names_last_checkpoint(tmp_path, toy_cfg, corpus):
    cfg = pre_cfg(lr=1e30, max_steps=20, checkpoint_every=1, eval_every=100)
    with pytest.raises(TrainingError) as info:
        pretrain(toy_cfg, cfg, corpus, tmp_path)
    last = info.value.last_checkpoint
    assert last is not None and os.path.exists(last) and last in str(info.value)


def test_pretrain_needs_two_sequences(toy_cfg, corpus):
    with pytest.raises(ConfigError):
        pretrain(toy_cfg, pre_cfg(), corpus[:1])


# --- fine-tuning ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def labelled():
    return generate_labelled(32, seed=0)


@pytest.fixture(scope="module")
def pretrained(toy_cfg):
    torch.manual_seed(0)
    return MaskedLanguageModel(toy_cfg)


def test_unit_class_weights_equal_no_weights(pretrained, labelled, fixture_vocab):
    _, a, _ = finetune(pretrained, "mlp", ft_cfg(), labelled, labelled[:8], fixture_vocab)
    _, b, _ = finetune(pretrained, "mlp", ft_cfg(class_weights=[1.0, 1.0]), labelled, labelled[:8],
                       fixture_vocab)
    assert a.losses() == b.losses()
    assert a.losses("valid_loss") == b.losses("valid_loss")


def test_class_weights_change_the_loss(pretrained, labelled, fixture_vocab):
    _, a, _ = finetune(pretrained, "cnn", ft_cfg(max_epochs=1), labelled, labelled[:8], fixture_vocab)
    _, b, _ = finetune(pretrained, "cnn", ft_cfg(max_epochs=1, class_weights=[1.0, 3.0]), labelled,
                       labelled[:8], fixture_vocab)
    assert a.losses() != b.losses()


def test_best_epoch_is_argmax_of_validation_metric(tmp_path, pretrained, labelled, fixture_vocab):
    cfg = ft_cfg(max_epochs=8, lr=3e-3)
    path, log, model = finetune(pretrained, "cnn", cfg, labelled[:24], labelled[24:], fixture_vocab,
                                out_dir=tmp_path)
    metrics = [r["valid_metric"] for r in log.records]
    best_epoch = int(np.argmax(metrics)) + 1
    header = read_header(path)
    assert header["epoch"] == best_epoch and path.endswith("cnn-best.ckpt")
    loaded, _ = load_classifier(path)
    for pa, pb in zip(model.state_dict().values(), loaded.state_dict().values()):
        assert torch.equal(pa, pb)


def test_early_stopping(pretrained, labelled, fixture_vocab):
    cfg = ft_cfg(max_epochs=30, lr=1e-9, early_stop_patience=2)
    _, log, _ = finetune(pretrained, "mlp", cfg, labelled, labelled[:8], fixture_vocab)
    assert len(log) < 30


def test_finetune_rejects_bad_labels(pretrained, fixture_vocab):
    with pytest.raises(ConfigError):
        finetune(pretrained, "mlp", ft_cfg(), [Sample("int f(){}", 2)], [Sample("int g(){}", 0)],
                 fixture_vocab)


def test_finetune_from_checkpoint_file(tmp_path, toy_cfg, corpus, labelled, fixture_vocab):
    pre_path, _, _ = pretrain(toy_cfg, pre_cfg(max_steps=2), corpus, tmp_path, fixture_vocab.checksum)
    for head in ("mlp", "cnn"):
        best, _, _ = finetune(pre_path, head, ft_cfg(max_epochs=1), labelled, labelled[:8], fixture_vocab,
                              out_dir=tmp_path)
        model, header = load_classifier(best)
        assert header["max_len"] == MAX_LEN and header["vocab_checksum"] == fixture_vocab.checksum
        assert header["source_hash"] is not None


# --- evaluation -----------------------------------------------------------------------------

def _constant_cnn(vocab_size, winner):
    model = CNNClassifier(torch.zeros(vocab_size, 4), kernels=(2, 3, 4), filters=2)
    with torch.no_grad():
        model.out.weight.zero_()
        model.out.bias.copy_(torch.tensor([1.0, 0.0] if winner == 0 else [0.0, 1.0]))
    return model


def test_constant_classifier_report(tmp_path, labelled, fixture_vocab):
    path = tmp_path / "c.ckpt"
    save_classifier(_constant_cnn(len(fixture_vocab), 0), "cnn", path, MAX_LEN, fixture_vocab.checksum)
    report, probs = evaluate(path, labelled, fixture_vocab)
    assert report.accuracy == 50.0 and report.recall == 0.0 and report.mcc == 0.0
    assert "mcc" in report.degenerate and report.roc_auc == 50.0


def test_perfect_classifier_and_probability_file(tmp_path, pretrained, labelled, fixture_vocab):
    best, _, _ = finetune(pretrained, "cnn", ft_cfg(max_epochs=50, max_steps=200, lr=3e-3), labelled,
                          labelled, fixture_vocab, out_dir=tmp_path)
    rep_path, probs_path = tmp_path / "r.json", tmp_path / "p.jsonl"
    report, _ = evaluate(best, labelled, fixture_vocab, rep_path, probs_path)
    assert report.accuracy == 100.0 and report.f1 == 100.0 and report.mcc == 100.0
    assert report.roc_auc == 100.0 and report.pr_auc == 100.0
    rebuilt = report_from_probabilities(probs_path)
    assert rebuilt.to_dict() == report.to_dict()
    assert json.loads(rep_path.read_text()) == report.to_dict()
    rows = [json.loads(l) for l in probs_path.read_text().splitlines()]
    assert [r["id"] for r in rows] == [s.origin for s in labelled]
