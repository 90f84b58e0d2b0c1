"""
WAV decoding/encoding, corpus manifests and seeded batching.

Only RIFF/WAVE PCM16 mono files are accepted. Manifests are UTF-8 files with
one JSON object per line, validated against ``schema/manifest_entry.json``.
"""
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional
import json
import math
import struct

import jsonschema
import numpy as np
from logzero import logger

from .errors import (ClassTooSmall, DuplicatePath, EmptySplit, NotWav, ParseError,
                     Truncated, UnsupportedFormat)
from .utils import load_schema


SPLITS = ('train', 'val', 'test')
DEFAULT_SAMPLE_RATE = 16000
DEFAULT_RATIOS = (0.8, 0.1, 0.1)


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono waveform with amplitudes in [-1, 1]."""
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    source_path: Optional[str] = None

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise UnsupportedFormat(f'AudioClip must be mono, got shape {samples.shape}')
        if int(self.sample_rate) <= 0:
            raise ValueError(f'sample_rate must be positive, got {self.sample_rate}')
        if samples.size and not (np.all(np.isfinite(samples)) and np.abs(samples).max() <= 1.0):
            raise ValueError('AudioClip samples must lie in [-1, 1]')
        samples.setflags(write=False)
        object.__setattr__(self, 'samples', samples)
        object.__setattr__(self, 'sample_rate', int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate


def read_wav(path):
    """
    Decode a RIFF/WAVE PCM16 mono file.

    Samples are raw_i16 / 32768.0.

    Raises
    ------
    NotWav, UnsupportedFormat, Truncated
    """
    data = Path(path).read_bytes()
    if len(data) < 12:
        if data and b'RIFF'.startswith(data[:4]):
            raise Truncated(f'{path}: file ends inside the RIFF header')
        raise NotWav(f'{path}: not a RIFF/WAVE file')
    if data[0:4] != b'RIFF' or data[8:12] != b'WAVE':
        raise NotWav(f'{path}: bad RIFF/WAVE magic')

    sample_rate = None
    pcm = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        size = struct.unpack_from('<I', data, pos + 4)[0]
        body_start = pos + 8
        if body_start + size > len(data):
            raise Truncated(f'{path}: chunk {chunk_id!r} claims {size} bytes past end of file')
        body = data[body_start:body_start + size]
        if chunk_id == b'fmt ':
            if size < 16:
                raise UnsupportedFormat(f'{path}: fmt chunk of {size} bytes')
            tag, channels, rate, _, _, bits = struct.unpack_from('<HHIIHH', body)
            if tag != 1 or channels != 1 or bits != 16:
                raise UnsupportedFormat(
                    f'{path}: need PCM16 mono, got format tag {tag}, {channels} channels, {bits} bits')
            if rate == 0:
                raise UnsupportedFormat(f'{path}: sample rate 0')
            sample_rate = rate
        elif chunk_id == b'data':
            if sample_rate is None:
                raise UnsupportedFormat(f'{path}: data chunk before fmt chunk')
            pcm = body
            break
        pos = body_start + size + (size & 1)

    if sample_rate is None:
        raise UnsupportedFormat(f'{path}: missing fmt chunk')
    if pcm is None:
        raise Truncated(f'{path}: missing data chunk')
    if len(pcm) % 2:
        raise Truncated(f'{path}: odd number of PCM16 data bytes')
    raw = np.frombuffer(pcm, dtype='<i2')
    return AudioClip(raw.astype(np.float64) / 32768.0, sample_rate, str(path))


def write_wav(clip, path):
    """
    Encode ``clip`` as PCM16 mono; amplitude a is stored as round(a * 32768)
    clamped to [-32768, 32767], the inverse of ``read_wav`` on its grid.
    """
    samples = clip.samples
    if samples.size and np.abs(samples).max() > 1.0:
        raise ValueError('write_wav needs samples in [-1, 1]')
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype('<i2').tobytes()
    rate = clip.sample_rate
    header = struct.pack('<4sI4s4sIHHIIHH4sI',
                         b'RIFF', 36 + len(pcm), b'WAVE',
                         b'fmt ', 16, 1, 1, rate, rate * 2, 2, 16,
                         b'data', len(pcm))
    Path(path).write_bytes(header + pcm)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    speaker: str
    split: str
    duration_s: float


@dataclass(frozen=True)
class Manifest:
    """
    Corpus description. ``label_index`` maps speaker labels to class ids in
    sorted label order; ``root`` anchors relative entry paths.
    """
    entries: tuple = ()
    label_index: dict = field(default_factory=dict)
    root: Optional[Path] = None

    @classmethod
    def from_entries(cls, entries, root=None):
        entries = tuple(entries)
        seen = set()
        for entry in entries:
            if entry.path in seen:
                raise DuplicatePath(f'duplicate manifest path {entry.path}')
            seen.add(entry.path)
        labels = sorted({e.speaker for e in entries})
        label_index = {label: i for i, label in enumerate(labels)}
        return cls(entries, label_index, Path(root) if root is not None else None)

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self):
        return sorted(self.label_index, key=self.label_index.get)

    @property
    def n_classes(self):
        return len(self.label_index)

    def class_id(self, speaker):
        return self.label_index[speaker]

    def in_split(self, split):
        return tuple(e for e in self.entries if e.split == split)

    def resolve(self, entry):
        path = Path(entry.path)
        if path.is_absolute() or self.root is None:
            return path
        return self.root / path

    def with_entries(self, entries):
        """Same label space and root, new entries."""
        return Manifest.from_entries(entries, root=self.root)


def load_manifest(path):
    """
    Parse a line-delimited JSON manifest.

    Raises
    ------
    ParseError
        Carries the 1-based line number of the offending record.
    DuplicatePath
    """
    path = Path(path)
    validator = jsonschema.Draft7Validator(load_schema('manifest_entry.json'))
    entries = []
    seen = set()
    for line_number, raw in enumerate(path.read_bytes().splitlines(), start=1):
        try:
            text = raw.decode('utf-8').strip()
        except UnicodeDecodeError as e:
            raise ParseError('not valid UTF-8', line=line_number) from e
        if not text:
            continue
        try:
            record = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f'invalid JSON: {e.msg}', line=line_number) from e
        if not isinstance(record, dict):
            raise ParseError('record must be a JSON object', line=line_number)
        error = next(iter(sorted(validator.iter_errors(record), key=str)), None)
        if error is not None:
            raise ParseError(error.message, line=line_number)
        if not math.isfinite(record['duration_s']):
            raise ParseError('duration_s must be finite', line=line_number)
        if record['path'] in seen:
            raise DuplicatePath(f'line {line_number}: duplicate path {record["path"]}')
        seen.add(record['path'])
        entries.append(ManifestEntry(record['path'], record['speaker'], record['split'],
                                     float(record['duration_s'])))
    manifest = Manifest.from_entries(entries, root=path.parent)
    logger.debug(f'Loaded {len(manifest)} entries, {manifest.n_classes} speakers from {path}')
    return manifest


def save_manifest(manifest, path):
    """Write ``manifest`` as canonical JSON lines (fixed key order)."""
    lines = []
    for e in manifest.entries:
        record = {'path': e.path, 'speaker': e.speaker, 'split': e.split,
                  'duration_s': round(float(e.duration_s), 6)}
        lines.append(json.dumps(record))
    Path(path).write_text(''.join(line + '\n' for line in lines), encoding='utf-8')


def split_counts(n, ratios):
    """
    Per-class split sizes: one entry per split first, then each remaining
    entry goes to the split with the largest deficit against n * ratio.
    """
    targets = [n * r for r in ratios]
    counts = [1] * len(ratios)
    for _ in range(n - len(ratios)):
        deficits = [t - c for t, c in zip(targets, counts)]
        counts[int(np.argmax(deficits))] += 1
    return counts


def stratified_split(manifest, ratios=DEFAULT_RATIOS, seed=0):
    """
    Reassign the split of every entry, class by class, with a seeded shuffle.
    Entry order is preserved; only the ``split`` field changes.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f'ratios must be three positive fractions summing to 1, got {ratios}')
    by_class = defaultdict(list)
    for entry in manifest.entries:
        by_class[entry.speaker].append(entry)

    rng = np.random.default_rng(seed)
    assignment = {}
    for label in manifest.labels:
        members = by_class[label]
        if len(members) < 3:
            raise ClassTooSmall(f'speaker {label} has {len(members)} entries, need at least 3')
        order = rng.permutation(len(members))
        start = 0
        for split, count in zip(SPLITS, split_counts(len(members), ratios)):
            for k in order[start:start + count]:
                assignment[members[k].path] = split
            start += count
    return manifest.with_entries(replace(e, split=assignment[e.path]) for e in manifest.entries)


class Batch(NamedTuple):
    waveforms: np.ndarray
    class_ids: np.ndarray
    lengths: np.ndarray
    paths: tuple
    offsets: np.ndarray


def _window(samples, limit, rng, quantum):
    if samples.size <= limit:
        return samples, 0
    if rng is None:
        return samples[:limit], 0
    slots = (samples.size - limit) // quantum
    offset = int(rng.integers(0, slots + 1)) * quantum
    return samples[offset:offset + limit], offset


def batch_iter(manifest, split, batch_size, max_len_s, seed, train=True,
               offset_quantum=1, loader=read_wav):
    """
    Mini-batches over one epoch of ``split``.

    In training mode the epoch order is a seeded permutation and over-long
    clips are cut to a seeded random window whose start is a multiple of
    ``offset_quantum`` samples. Otherwise the manifest order and the first
    ``max_len_s`` seconds are used. Clips are zero-padded to the batch
    maximum; ``lengths`` holds the valid sample count per row.
    """
    if batch_size < 1:
        raise ValueError(f'batch_size must be >= 1, got {batch_size}')
    entries = manifest.in_split(split)
    if not entries:
        raise EmptySplit(f'split {split!r} is empty')

    def _generate():
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(entries)) if train else np.arange(len(entries))
        for start in range(0, len(order), batch_size):
            chunk = [entries[i] for i in order[start:start + batch_size]]
            windows, offsets = [], []
            rate = None
            for entry in chunk:
                clip = loader(manifest.resolve(entry))
                if rate is not None and clip.sample_rate != rate:
                    raise UnsupportedFormat(f'{entry.path}: sample rate {clip.sample_rate} != {rate}')
                rate = clip.sample_rate
                limit = int(round(max_len_s * rate))
                window, offset = _window(clip.samples, limit, rng if train else None, offset_quantum)
                windows.append(window)
                offsets.append(offset)
            lengths = np.array([w.size for w in windows], dtype=np.int64)
            waveforms = np.zeros((len(windows), int(lengths.max())), dtype=np.float64)
            for row, window in enumerate(windows):
                waveforms[row, :window.size] = window
            yield Batch(
                waveforms=waveforms,
                class_ids=np.array([manifest.class_id(e.speaker) for e in chunk], dtype=np.int64),
                lengths=lengths,
                paths=tuple(e.path for e in chunk),
                offsets=np.array(offsets, dtype=np.int64),
            )
    return _generate()
