from dataclasses import replace
import json
import struct

import numpy as np
import pytest

from reciter_id import trainer
from reciter_id.audio_io import read_wav
from reciter_id.classify import HeadParams, SpeakerModel, class_weights
from reciter_id.encoder import EncoderConfig, init_encoder_params
from reciter_id.errors import (ConfigError, CorruptCheckpoint, DivergedLoss, EmptySplit, MissingClass,
                               VersionMismatch)
from reciter_id.numcore import Tensor
from reciter_id.synthgen import synth_corpus
from reciter_id.trainer import (BEST_CHECKPOINT, CHECKPOINT_MAGIC, LABEL_CACHE_FILE, LAST_CHECKPOINT,
                                TRAINLOG_FILE, TrainLog, evaluate, evaluate_detailed, finetune, finetune_validation,
                                load_checkpoint, load_label_cache, load_model, pretrain,
                                read_checkpoint_header, save_checkpoint, save_label_cache)

from conftest import TINY_CONV, make_manifest


# ---------------------------------------------------------------------------
# training log
# ---------------------------------------------------------------------------

def test_trainlog_csv_round_trip(tmp_path):
    log = TrainLog()
    log.record(1, 2.5)
    log.record(2, 2.25)
    log.record_validation(2.0, 0.5)
    log.record(3, 1.75)
    log.write_csv(tmp_path / TRAINLOG_FILE)
    assert (tmp_path / TRAINLOG_FILE).read_text().splitlines()[0] == 'step,TL,VL,VA'
    assert TrainLog.read_csv(tmp_path / TRAINLOG_FILE).rows == log.rows


def test_trainlog_steps_increase():
    log = TrainLog()
    log.record(2, 1.0)
    with pytest.raises(ValueError):
        log.record(2, 1.0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _tensors(seed=0):
    rng = np.random.default_rng(seed)
    return {'a': rng.standard_normal((3, 4)).astype(np.float32), 'b': rng.standard_normal(5).astype(np.float32),
            'scalar': np.float32(1.5)}


def test_checkpoint_round_trip_is_exact(tmp_path, train_config):
    tensors = _tensors()
    path = save_checkpoint(tensors, train_config, tmp_path / 'x.ckpt', {'step': 7})
    checkpoint = load_checkpoint(path)
    assert list(checkpoint.tensors) == ['a', 'b', 'scalar']
    for name, value in tensors.items():
        np.testing.assert_array_equal(checkpoint.tensors[name], value)
        assert checkpoint.tensors[name].shape == np.shape(value)
        assert checkpoint.tensors[name].dtype == np.float32
    assert checkpoint.meta == {'step': 7}
    assert trainer.TrainConfig.from_dict(checkpoint.config) == train_config
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)


def test_checkpoint_header_only(tmp_path, train_config):
    path = save_checkpoint(_tensors(), train_config, tmp_path / 'x.ckpt')
    header = read_checkpoint_header(path)
    assert [(t['name'], t['shape']) for t in header['tensors']] == [('a', [3, 4]), ('b', [5]), ('scalar', [])]
    assert header['config']['objective'] == 'finetune'


def _rewrite_header(path, edit):
    data = path.read_bytes()
    (length,) = struct.unpack('<Q', data[8:16])
    header = json.loads(data[16:16 + length])
    edit(header)
    raw = json.dumps(header).encode('utf-8')
    path.write_bytes(data[:8] + struct.pack('<Q', len(raw)) + raw + data[16 + length:])


def test_checkpoint_corruption(tmp_path, train_config):
    path = save_checkpoint(_tensors(), train_config, tmp_path / 'x.ckpt')
    data = path.read_bytes()

    path.write_bytes(data[:-3])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
    path.write_bytes(b'NOTACKPT' + data[8:])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
    path.write_bytes(data[:20])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)

    path.write_bytes(data)
    _rewrite_header(path, lambda h: h.update(format_version=2))
    with pytest.raises(VersionMismatch):
        load_checkpoint(path)

    path.write_bytes(data)
    _rewrite_header(path, lambda h: h['tensors'][1].update(offset=4))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_label_cache(tmp_path):
    path = tmp_path / LABEL_CACHE_FILE
    assert load_label_cache(path, 'k1') is None
    save_label_cache(path, {'a.wav': np.array([1, 2, 3]), 'b.wav': np.array([0])}, 'k1')
    labels = load_label_cache(path, 'k1')
    np.testing.assert_array_equal(labels['a.wav'], [1, 2, 3])
    np.testing.assert_array_equal(labels['b.wav'], [0])
    assert load_label_cache(path, 'k2') is None


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def test_finetune_outputs(corpus, train_config):
    checkpoint, log = finetune(train_config, corpus)
    directory = checkpoint.path.parent
    for name in (BEST_CHECKPOINT, LAST_CHECKPOINT, TRAINLOG_FILE):
        assert (directory / name).is_file()
    assert log.steps == [1, 2, 3]
    assert log.rows[0][2] is None
    assert log.rows[1][2] is not None and log.rows[2][2] is not None
    assert all(np.isfinite(row[1]) for row in log.rows)
    assert checkpoint.meta['labels'] == ['R01', 'R02', 'R03']
    assert checkpoint.meta['objective'] == 'finetune'
    assert TrainLog.read_csv(directory / TRAINLOG_FILE).steps == [1, 2, 3]


def test_single_step_run(corpus, train_config):
    _, log = finetune(replace(train_config, max_iter=1), corpus)
    assert len(log) == 1
    assert log.rows[0][2] is not None


def test_training_is_deterministic(corpus, train_config, tmp_path):
    first, log_a = finetune(replace(train_config, checkpoint_dir=str(tmp_path / 'a')), corpus)
    second, log_b = finetune(replace(train_config, checkpoint_dir=str(tmp_path / 'b')), corpus)
    assert log_a.rows == log_b.rows
    assert list(first.tensors) == list(second.tensors)
    for name in first.tensors:
        np.testing.assert_array_equal(first.tensors[name], second.tensors[name])


def test_best_checkpoint_records_its_validation_loss(corpus, train_config):
    # checkpoints store float32, so train in float32 for an exact reload
    config = replace(train_config, dtype='float32', max_iter=4, eval_interval=1)
    finetune(config, corpus)
    best = load_checkpoint(f'{config.checkpoint_dir}/{BEST_CHECKPOINT}')
    model = load_model(best.path)
    vl, va = finetune_validation(model, corpus, class_weights(corpus, 'train'), config)
    assert vl == pytest.approx(best.meta['VL'], abs=1e-6)
    assert va == pytest.approx(best.meta['VA'], abs=1e-6)


def test_early_stopping_waits_for_patience(corpus, train_config):
    config = replace(train_config, lr=0.0, max_iter=20, eval_interval=1, patience=3)
    _, log = finetune(config, corpus)
    assert log.steps == [1, 2, 3, 4]


def test_diverged_loss_keeps_last_checkpoint(corpus, train_config, monkeypatch):
    calls = []
    real = trainer.weighted_cross_entropy

    def flaky(logits, targets, weights):
        calls.append(1)
        loss = real(logits, targets, weights)
        return loss * float('nan') if len(calls) == 3 else loss
    monkeypatch.setattr(trainer, 'weighted_cross_entropy', flaky)

    config = replace(train_config, max_iter=5, eval_interval=100)
    with pytest.raises(DivergedLoss) as info:
        finetune(config, corpus)
    assert info.value.step == 3
    last = load_checkpoint(info.value.checkpoint_path)
    assert info.value.checkpoint_path.name == LAST_CHECKPOINT
    assert 'head.out.weight' in last.tensors
    assert TrainLog.read_csv(info.value.checkpoint_path.parent / TRAINLOG_FILE).steps == [1, 2]


def test_finetune_rejects_other_objectives(corpus, train_config):
    with pytest.raises(ConfigError):
        finetune(replace(train_config, objective='w2v'), corpus)
    with pytest.raises(ConfigError):
        pretrain(train_config, corpus)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def test_pretrain_w2v(corpus, train_config):
    checkpoint, log = pretrain(replace(train_config, objective='w2v'), corpus)
    assert len(log) == 3
    assert all(np.isfinite(row[1]) for row in log.rows)
    assert checkpoint.meta['objective'] == 'w2v'
    assert 'codebook.vectors' in checkpoint.tensors
    with pytest.raises(CorruptCheckpoint):
        load_model(checkpoint)


def test_pretrain_hubert_and_refine(corpus, train_config, tmp_path):
    config = replace(train_config, objective='hubert', checkpoint_dir=str(tmp_path / 'it1'))
    checkpoint, log = pretrain(config, corpus)
    assert checkpoint.meta == dict(checkpoint.meta, objective='hubert', refined=False)
    assert checkpoint.tensors['hubert.proj'].shape == (16, 4)
    assert all(row[3] is None or 0.0 <= row[3] <= 1.0 for row in log.rows)
    assert (tmp_path / 'it1' / LABEL_CACHE_FILE).is_file()

    second = replace(config, checkpoint_dir=str(tmp_path / 'it2'))
    refined, _ = pretrain(second, corpus, refine_from=checkpoint.path)
    assert refined.meta['refined'] is True
    assert (tmp_path / 'it2' / LABEL_CACHE_FILE).is_file()

    with pytest.raises(ConfigError):
        pretrain(replace(config, objective='w2v'), corpus, refine_from=checkpoint.path)


def test_hubert_reuses_label_cache(corpus, train_config, tmp_path, monkeypatch):
    config = replace(train_config, objective='hubert', max_iter=1, checkpoint_dir=str(tmp_path))
    pretrain(config, corpus)

    def fail(*args, **kwargs):
        raise AssertionError('teacher labels recomputed')
    monkeypatch.setattr(trainer, 'mfcc_teacher_labels', fail)
    pretrain(config, corpus)
    with pytest.raises(AssertionError):
        pretrain(replace(config, n_clusters=3), corpus)


def test_label_cache_follows_audio_and_splits(train_config, tmp_path, monkeypatch):
    config = replace(train_config, objective='hubert', checkpoint_dir=str(tmp_path / 'ckpt'))
    calls = []
    compute = trainer.mfcc_teacher_labels

    def counting(*args, **kwargs):
        calls.append(1)
        return compute(*args, **kwargs)
    monkeypatch.setattr(trainer, 'mfcc_teacher_labels', counting)

    first = synth_corpus(3, 6, 0.5, tmp_path / 'data', seed=0)
    old = trainer._teacher_labels(config, first, read_wav)
    assert trainer._teacher_labels(config, first, read_wav).keys() == old.keys()
    assert len(calls) == 1

    second = synth_corpus(3, 6, 0.5, tmp_path / 'data', seed=7)
    assert [e.path for e in second.entries] == [e.path for e in first.entries]
    new = trainer._teacher_labels(config, second, read_wav)
    assert len(calls) == 2
    fresh = trainer._teacher_labels(replace(config, checkpoint_dir=str(tmp_path / 'fresh')), second, read_wav)
    for path, labels in new.items():
        np.testing.assert_array_equal(labels, fresh[path])

    r01 = [e for e in second.entries if e.speaker == 'R01']
    train, val = next(e for e in r01 if e.split == 'train'), next(e for e in r01 if e.split == 'val')
    swapped = {train.path: 'val', val.path: 'train'}
    resplit = second.with_entries(replace(e, split=swapped.get(e.path, e.split)) for e in second.entries)
    trainer._teacher_labels(config, resplit, read_wav)
    assert len(calls) == 4


def test_finetune_from_pretrained_encoder(corpus, train_config, tmp_path):
    small = EncoderConfig(conv_layers=TINY_CONV, model_dim=8, n_heads=2, n_layers=1, ffn_dim=16,
                          mask_prob=0.2, mask_span=3, max_positions=512)
    init, _ = pretrain(replace(train_config, objective='w2v', encoder=small, codebook_entries=4,
                               checkpoint_dir=str(tmp_path / 'pre')), corpus)
    checkpoint, _ = finetune(replace(train_config, checkpoint_dir=str(tmp_path / 'fine'), max_iter=1),
                             corpus, init=init.path)
    assert checkpoint.config['encoder']['model_dim'] == 8
    model = load_model(checkpoint.path)
    assert model.encoder_config == small
    assert model.labels == ['R01', 'R02', 'R03']


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _always_first(encoder):
    rng = np.random.default_rng(0)
    head = HeadParams(Tensor(rng.standard_normal((16, 8))), Tensor(np.zeros(8)),
                      Tensor(np.zeros((8, 3))), Tensor([10.0, 0.0, 0.0]))
    return SpeakerModel(encoder, init_encoder_params(encoder, 0), head, ['R01', 'R02', 'R03'], 0.25)


def test_evaluate_constant_model(corpus, tiny_encoder):
    result = evaluate_detailed(_always_first(tiny_encoder), corpus, 'test', batch_size=2)
    np.testing.assert_array_equal(result.confusion.counts, [[1, 0, 0], [1, 0, 0], [1, 0, 0]])
    np.testing.assert_allclose(result.report.recall, [1.0, 0.0, 0.0])
    assert result.report.accuracy == pytest.approx(1 / 3)
    assert [r[0] for r in result.predictions] == [e.path for e in corpus.in_split('test')]
    assert all(r[2] == 'R01' for r in result.predictions)


def test_evaluate_trained_model(corpus, train_config):
    checkpoint, _ = finetune(train_config, corpus)
    model = load_model(checkpoint.path)
    report = evaluate(model, corpus, 'val')
    cm_total = int(report.support.sum())
    assert cm_total == 3
    assert 0.0 <= report.accuracy <= 1.0
    assert report.accuracy * cm_total == pytest.approx(round(report.accuracy * cm_total))


def test_evaluate_errors(corpus, tiny_encoder):
    model = _always_first(tiny_encoder)
    with pytest.raises(EmptySplit):
        evaluate(model, make_manifest({'R01': 2}), 'test')
    with pytest.raises(MissingClass):
        evaluate(model, make_manifest({'R09': 2}, split='test'), 'test')
