import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fcsum import corpus, model, tensor as tc, training
from fcsum.corpus import END_ID, PAD_ID, START_ID
from fcsum.gradcheck import random_record


def record_with_summary(hp, words, vocab, rid="r"):
    rec = random_record(hp, np.random.default_rng(0), rid)
    rec.summary_ids = np.asarray(corpus.encode_summary(words, vocab, hp.comlen), dtype=np.int64)
    return rec


# -- expansion -------------------------------------------------------------------

def test_play_mp3_files_expansion(tiny_hp):
    vocab = corpus.build_vocab([["play", "mp3", "files"]], 10, corpus.SUMMARY_RESERVED)
    rec = record_with_summary(tiny_hp, ["play", "mp3", "files"], vocab)
    samples = training.expand_teacher_forcing(rec)
    got = [(vocab.decode([i for i in s.prefix if i != PAD_ID]), vocab.token(s.target)) for s in samples]
    assert got == [(["<st>"], "play"), (["<st>", "play"], "mp3"),
                   (["<st>", "play", "mp3"], "files"), (["<st>", "play", "mp3", "files"], "<et>")]
    for s in samples:
        assert s.prefix[0] == START_ID and s.target != PAD_ID
        assert s.prefix.shape == (tiny_hp.comlen,)
        assert s.record is rec


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 10))
def test_sample_count_is_words_plus_one(nwords):
    hp = corpus.HyperParams.desk(comlen=14)
    vocab = corpus.build_vocab([[f"w{i}" for i in range(10)]], 20, corpus.SUMMARY_RESERVED)
    rec = record_with_summary(hp, [f"w{i}" for i in range(nwords)], vocab)
    assert len(training.expand_teacher_forcing(rec)) == nwords + 1


def test_expand_all_total(desk_data):
    _, vocabs, records = desk_data
    total = sum(len(corpus.summary_words(r, vocabs.summary)) + 1 for r in records)
    assert len(training.expand_all(records)) == total


def test_malformed_records(tiny_hp, rng):
    rec = random_record(tiny_hp, rng)
    rec.summary_ids = rec.summary_ids.copy()
    rec.summary_ids[0] = 5
    with pytest.raises(training.MalformedRecordError, match="<st>"):
        training.expand_teacher_forcing(rec)
    rec.summary_ids[0] = START_ID
    rec.summary_ids[rec.summary_ids == END_ID] = 5
    with pytest.raises(training.MalformedRecordError, match="<et>"):
        training.expand_teacher_forcing(rec)


def test_prefixes_are_reference_only(tiny_hp, tiny_data):
    # a model rigged to always predict UNK cannot change the teacher-forced prefixes
    _, records = tiny_data
    params = model.init_model(tiny_hp, seed=0)
    params.arrays["out.W"][:] = 0
    params.arrays["out.b"][:] = 0
    params.arrays["out.b"][corpus.UNK_ID] = 50
    samples = training.expand_all(records)
    before = [s.prefix.copy() for s in samples]
    training.train_epoch(params, samples, tc.Adam(lr=0.01), 8, tc.init_rng(0))
    assert all(np.array_equal(a, s.prefix) for a, s in zip(before, samples))
    assert not any(corpus.UNK_ID in s.prefix for s in samples if corpus.UNK_ID not in s.record.summary_ids)


# -- epochs ------------------------------------------------------------------------

def test_zero_learning_rate_keeps_params(tiny_hp, tiny_data):
    _, records = tiny_data
    params = model.init_model(tiny_hp, seed=0)
    snapshot = params.copy()
    samples = training.expand_all(records)
    stats = training.train_epoch(params, samples, tc.Adam(lr=0.0), 4, tc.init_rng(0))
    assert all(np.array_equal(params.arrays[k], snapshot.arrays[k]) for k in params.arrays)
    ev = training.evaluate_samples(params, samples)
    assert stats.loss == pytest.approx(ev.loss, rel=1e-5)
    assert stats.accuracy == ev.accuracy


def test_repeated_sample_loss_improves(tiny_hp, tiny_data):
    _, records = tiny_data
    params = model.init_model(tiny_hp, seed=0)
    sample = training.expand_teacher_forcing(records[0])[1]
    opt = tc.Adam(lr=1e-2)
    losses = []
    for _ in range(50):
        loss, grads, _, _ = training.loss_and_grads(params, [sample])
        opt.step(params.arrays, grads)
        losses.append(loss)
    assert losses[-1] < losses[0]
    assert training.validate(params, [sample]) == 1.0


def test_same_seed_same_trajectory(tiny_hp, tiny_data):
    _, records = tiny_data
    samples = training.expand_all(records)

    def run():
        params = model.init_model(tiny_hp, seed=1)
        opt, rng = tc.Adam(lr=1e-2), tc.init_rng(3)
        return [training.train_epoch(params, samples, opt, 4, rng).loss for _ in range(3)]

    assert run() == run()


def test_numeric_failure_names_node(tiny_hp, tiny_data):
    _, records = tiny_data
    params = model.init_model(tiny_hp, seed=0)
    params.arrays["squash.W"][0, 0] = np.nan
    with pytest.raises(tc.NumericError, match="node"):
        training.loss_and_grads(params, training.expand_teacher_forcing(records[0]))


def test_validate_accuracy_properties(tiny_hp, tiny_data):
    _, records = tiny_data
    params = model.init_model(tiny_hp, seed=0)
    samples = training.expand_all(records)
    acc = training.validate(params, samples)
    assert 0 <= acc <= 0.5
    probs, _ = model.forward_batch(params, params.tensors(), [s.record for s in samples],
                                   np.stack([s.prefix for s in samples]))
    pred = probs.value.argmax(axis=1)
    correct = [s for s, p in zip(samples, pred) if p == s.target]
    wrong = [s for s, p in zip(samples, pred) if p != s.target]
    if wrong:
        base = training.validate(params, wrong[:3])
        mixed = training.validate(params, wrong[:3] + correct + correct)
        assert mixed >= base


# -- config ------------------------------------------------------------------------

def test_parse_config():
    cfg = training.parse_config("epochs = 3\nlr = 0.01  # fast\nuse_fc = false\nrnn_units = 8\n")
    assert (cfg.epochs, cfg.lr, cfg.use_fc, cfg.hp.rnn_units, cfg.hp.n) == (3, 0.01, False, 8, 6)
    assert training.parse_config("", {"epochs": 2}).epochs == 2
    with pytest.raises(ValueError, match="unknown key"):
        training.parse_config("colour = blue")
    with pytest.raises(ValueError):
        training.parse_config("epochs = 0")


def test_default_config_is_desk_preset():
    cfg = training.TrainConfig()
    hp = cfg.hp
    assert (cfg.epochs, cfg.batch_size) == (10, 32)
    assert (hp.embed_code, hp.rnn_units, hp.squash_units, hp.n, hp.m, hp.tdatlen, hp.astlen, hp.comlen) == \
        (16, 32, 32, 6, 10, 20, 30, 8)
    assert max(hp.code_vocab, hp.summary_vocab, hp.ast_vocab) <= 512


# -- fit ---------------------------------------------------------------------------

def test_fit_single_epoch(tiny_hp, tiny_data, tmp_path):
    _, records = tiny_data
    cfg = training.TrainConfig(epochs=1, batch_size=8, checkpoint_dir=str(tmp_path), hp=tiny_hp)
    result = training.fit(model.init_model(tiny_hp, seed=0), records[:6], records[6:], cfg)
    assert result.best_epoch == 1 and len(result.history) == 1
    assert (tmp_path / "epoch_001.fcsm").exists()


def test_fit_earliest_tie_and_history(tiny_hp, tiny_data, tmp_path):
    _, records = tiny_data
    fake = iter([0.1, 0.5, 0.5])
    cfg = training.TrainConfig(epochs=3, batch_size=8, checkpoint_dir=str(tmp_path), hp=tiny_hp)
    result = training.fit(model.init_model(tiny_hp, seed=0), records[:6], records[6:], cfg,
                          validate_fn=lambda p, s: next(fake))
    assert result.best_epoch == 2
    assert result.best_checkpoint.endswith("epoch_002.fcsm")
    with open(tmp_path / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["epoch"] for r in rows] == ["1", "2", "3"]
    assert list(rows[0]) == ["epoch", "train_loss", "train_acc", "val_acc", "checkpoint"]


def test_fit_unwritable_directory(tiny_hp, tiny_data, tmp_path):
    _, records = tiny_data
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = training.TrainConfig(epochs=1, checkpoint_dir=str(blocker / "sub"), hp=tiny_hp)
    with pytest.raises(OSError):
        training.fit(model.init_model(tiny_hp, seed=0), records[:6], records[6:], cfg)
