import json
import struct
from collections import Counter

import numpy as np
import pytest

from reciter_id.audio_io import (AudioClip, batch_iter, load_manifest, read_wav, save_manifest,
                                 split_counts, stratified_split, write_wav)
from reciter_id.errors import (ClassTooSmall, DuplicatePath, EmptySplit, NotWav, ParseError,
                               Truncated, UnsupportedFormat)

from conftest import constant_loader, make_manifest


def _wav_bytes(raw, rate=16000, channels=1, bits=16, tag=1):
    pcm = np.asarray(raw, dtype='<i2').tobytes()
    return struct.pack('<4sI4s4sIHHIIHH4sI', b'RIFF', 36 + len(pcm), b'WAVE', b'fmt ', 16, tag,
                       channels, rate, rate * channels * bits // 8, channels * bits // 8, bits,
                       b'data', len(pcm)) + pcm


def test_read_wav_scale(tmp_path):
    path = tmp_path / 'a.wav'
    path.write_bytes(_wav_bytes([0, -32768, 16384]))
    clip = read_wav(path)
    np.testing.assert_array_equal(clip.samples, [0.0, -1.0, 0.5])
    assert clip.sample_rate == 16000
    assert clip.source_path == str(path)


def test_write_wav_endpoints_and_header(tmp_path):
    path = tmp_path / 'b.wav'
    write_wav(AudioClip(np.array([1.0, 0.0, -1.0])), path)
    data = path.read_bytes()
    np.testing.assert_array_equal(np.frombuffer(data[44:], dtype='<i2'), [32767, 0, -32768])

    write_wav(AudioClip(np.zeros(16000)), path)
    data = path.read_bytes()
    assert struct.unpack('<I', data[40:44])[0] == 32000
    assert len(data) == 44 + 32000


def test_wav_round_trip_on_grid(tmp_path):
    raw = np.random.default_rng(0).integers(-32768, 32768, size=1000)
    clip = AudioClip(raw / 32768.0, 8000)
    path = tmp_path / 'c.wav'
    write_wav(clip, path)
    back = read_wav(path)
    np.testing.assert_array_equal(back.samples, clip.samples)
    assert back.sample_rate == 8000


@pytest.mark.parametrize('payload, error', [
    (b'RIFX' + b'\x00' * 40, NotWav),
    (b'hello', NotWav),
    (b'RIF', Truncated),
    (_wav_bytes([1, 2, 3], channels=2), UnsupportedFormat),
    (_wav_bytes([1, 2, 3], bits=8), UnsupportedFormat),
    (_wav_bytes([1, 2, 3], tag=3), UnsupportedFormat),
    (_wav_bytes([1, 2, 3, 4])[:-3], Truncated),
])
def test_read_wav_errors(tmp_path, payload, error):
    path = tmp_path / 'bad.wav'
    path.write_bytes(payload)
    with pytest.raises(error):
        read_wav(path)


def test_audio_clip_rejects_out_of_range():
    with pytest.raises(ValueError):
        AudioClip(np.array([0.0, 1.5]))
    with pytest.raises(UnsupportedFormat):
        AudioClip(np.zeros((2, 3)))


def _write_manifest(path, records):
    path.write_text(''.join(json.dumps(r) + '\n' for r in records), encoding='utf-8')


def test_load_manifest_label_index(tmp_path):
    path = tmp_path / 'm.jsonl'
    _write_manifest(path, [
        {'path': 'x/1.wav', 'speaker': 'R02', 'split': 'train', 'duration_s': 1.0},
        {'path': 'x/2.wav', 'speaker': 'R01', 'split': 'val', 'duration_s': 2.0},
    ])
    manifest = load_manifest(path)
    assert manifest.label_index == {'R01': 0, 'R02': 1}
    assert manifest.labels == ['R01', 'R02']
    assert manifest.resolve(manifest.entries[0]) == tmp_path / 'x/1.wav'


def test_load_manifest_ten_speakers(tmp_path):
    path = tmp_path / 'm.jsonl'
    _write_manifest(path, [{'path': f'{s}/{i}.wav', 'speaker': f'R{s + 1:02d}', 'split': 'train',
                            'duration_s': 2.0} for s in range(10) for i in range(100)])
    manifest = load_manifest(path)
    assert len(manifest) == 1000
    assert manifest.n_classes == 10


def test_load_manifest_empty(tmp_path):
    path = tmp_path / 'm.jsonl'
    path.write_text('')
    manifest = load_manifest(path)
    assert len(manifest) == 0
    assert manifest.label_index == {}


@pytest.mark.parametrize('bad_line', [
    '{"path": "b.wav", "speaker": "R01", "split": "train"}',
    '{"path": "b.wav", "speaker": "R01", "split": "holdout", "duration_s": 1.0}',
    '{"path": "b.wav", "speaker": "R01", "split": "train", "duration_s": -1}',
    '{"path": "b.wav", "speaker": "R01", "split": "train", "duration_s": 1.0, "extra": 1}',
    '[1, 2, 3]',
    '{not json',
])
def test_load_manifest_parse_error_line(tmp_path, bad_line):
    path = tmp_path / 'm.jsonl'
    good = json.dumps({'path': 'a.wav', 'speaker': 'R01', 'split': 'train', 'duration_s': 1.0})
    path.write_text(good + '\n' + bad_line + '\n', encoding='utf-8')
    with pytest.raises(ParseError) as info:
        load_manifest(path)
    assert info.value.line == 2


def test_load_manifest_duplicate_path(tmp_path):
    path = tmp_path / 'm.jsonl'
    record = {'path': 'a.wav', 'speaker': 'R01', 'split': 'train', 'duration_s': 1.0}
    _write_manifest(path, [record, record])
    with pytest.raises(DuplicatePath):
        load_manifest(path)


def test_save_manifest_round_trip(tmp_path):
    manifest = make_manifest({'R01': 2, 'R02': 1})
    path = tmp_path / 'm.jsonl'
    save_manifest(manifest, path)
    back = load_manifest(path)
    assert back.entries == manifest.entries
    save_manifest(back, tmp_path / 'again.jsonl')
    assert (tmp_path / 'again.jsonl').read_bytes() == path.read_bytes()


@pytest.mark.parametrize('n, expected', [
    (100, [80, 10, 10]),
    (10, [8, 1, 1]),
    (3, [1, 1, 1]),
    (4, [2, 1, 1]),
    (6, [4, 1, 1]),
])
def test_split_counts(n, expected):
    assert split_counts(n, (0.8, 0.1, 0.1)) == expected


@pytest.mark.parametrize('n', range(5, 31))
def test_split_counts_stay_near_target(n):
    counts = split_counts(n, (0.8, 0.1, 0.1))
    assert sum(counts) == n
    for count, ratio in zip(counts, (0.8, 0.1, 0.1)):
        assert abs(count - n * ratio) <= 1


def test_stratified_split_per_class_sizes():
    manifest = stratified_split(make_manifest({'R01': 100, 'R02': 100, 'R03': 10}), seed=3)
    counts = Counter((e.speaker, e.split) for e in manifest.entries)
    for speaker in ('R01', 'R02'):
        assert (counts[speaker, 'train'], counts[speaker, 'val'], counts[speaker, 'test']) == (80, 10, 10)
    assert (counts['R03', 'train'], counts['R03', 'val'], counts['R03', 'test']) == (8, 1, 1)
    assert len(manifest) == 210


def test_stratified_split_deterministic():
    manifest = make_manifest({'R01': 20, 'R02': 15})
    a = stratified_split(manifest, seed=7)
    b = stratified_split(manifest, seed=7)
    c = stratified_split(manifest, seed=8)
    assert a.entries == b.entries
    assert [e.split for e in a.entries] != [e.split for e in c.entries]
    assert [e.path for e in a.entries] == [e.path for e in manifest.entries]


def test_stratified_split_errors():
    with pytest.raises(ClassTooSmall):
        stratified_split(make_manifest({'R01': 10, 'R02': 2}))
    with pytest.raises(ValueError):
        stratified_split(make_manifest({'R01': 10}), ratios=(0.5, 0.5, 0.5))


def test_batch_iter_sizes_and_coverage():
    manifest = make_manifest({'R01': 13, 'R02': 12})
    batches = list(batch_iter(manifest, 'train', 10, 1.0, seed=0, loader=constant_loader(8000)))
    assert [len(b.paths) for b in batches] == [10, 10, 5]
    paths = [p for b in batches for p in b.paths]
    assert sorted(paths) == sorted(e.path for e in manifest.entries)
    for b in batches:
        np.testing.assert_array_equal(b.class_ids, [manifest.class_id(p.split('/')[0]) for p in b.paths])


def test_batch_iter_truncates_long_clips():
    manifest = make_manifest({'R01': 3})
    for train in (True, False):
        batch = next(batch_iter(manifest, 'train', 3, 4.0, seed=1, train=train,
                                loader=constant_loader(5 * 16000)))
        assert batch.waveforms.shape == (3, 64000)
        assert np.all(batch.lengths == 64000)
        if not train:
            assert np.all(batch.offsets == 0)


def test_batch_iter_offset_quantum():
    manifest = make_manifest({'R01': 8})
    for batch in batch_iter(manifest, 'train', 4, 0.5, seed=2, offset_quantum=320,
                            loader=constant_loader(16000)):
        assert np.all(batch.offsets % 320 == 0)


def test_batch_iter_pads_with_zeros():
    manifest = make_manifest({'R01': 2})
    lengths = {'R01/000.wav': 100, 'R01/001.wav': 60}

    def loader(path):
        return AudioClip(np.full(lengths[str(path)], 0.25))
    batch = next(batch_iter(manifest, 'train', 2, 1.0, seed=0, train=False, loader=loader))
    np.testing.assert_array_equal(batch.lengths, [100, 60])
    assert np.all(batch.waveforms[1, 60:] == 0.0)
    assert np.all(batch.waveforms[1, :60] == 0.25)


def test_batch_iter_deterministic():
    manifest = make_manifest({'R01': 9, 'R02': 9})
    loader = constant_loader(20000)

    def run(seed):
        return [(b.paths, b.offsets.tolist()) for b in batch_iter(manifest, 'train', 4, 1.0, seed, loader=loader)]
    assert run(5) == run(5)
    assert run(5) != run(6)


def test_batch_iter_empty_split():
    with pytest.raises(EmptySplit):
        batch_iter(make_manifest({'R01': 3}), 'test', 2, 1.0, seed=0)
