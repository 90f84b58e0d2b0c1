"""
Deterministic synthetic multi-speaker corpus.

Each speaker is a source-filter voice: a harmonic source at its fundamental
frequency (with slow seeded pitch jitter) shaped by three formant resonators,
plus white noise at a fixed SNR.
"""
from dataclasses import dataclass
from pathlib import Path
import math

import numpy as np
from logzero import logger
from scipy.signal import lfilter

from .audio_io import (AudioClip, DEFAULT_RATIOS, DEFAULT_SAMPLE_RATE, Manifest,
                       ManifestEntry, save_manifest, stratified_split, write_wav)
from .errors import IndexOutOfRange
from .utils import derive_seed, ensure_dir


MAX_SPEAKERS = 64
_LEVELS = 8
_JITTER_SEGMENT_S = 0.1
_JITTER = 0.02
_PEAK = 0.9


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    f0: float
    formants: tuple
    bandwidths: tuple
    snr_db: float

    def __post_init__(self):
        if not 70.0 <= self.f0 <= 300.0:
            raise ValueError(f'f0 {self.f0} Hz outside [70, 300]')
        if len(self.formants) != 3 or any(b <= a for a, b in zip(self.formants, self.formants[1:])):
            raise ValueError(f'formants must be 3 strictly increasing frequencies, got {self.formants}')


def speaker_label(index):
    return f'R{index + 1:02d}'


def make_speaker_profile(index, seed):
    """
    Profile ``index`` sits on an 8x8 grid of pitch levels (25 Hz apart) and
    formant sets (F2 150 Hz apart); the grid walk gives consecutive indices
    distinct pitch and formant levels. ``seed`` only adds small jitter.
    """
    if not 0 <= index < MAX_SPEAKERS:
        raise IndexOutOfRange(f'speaker index {index} outside 0..{MAX_SPEAKERS - 1}')
    pitch_level = index % _LEVELS
    formant_level = (index // _LEVELS + 3 * pitch_level) % _LEVELS
    rng = np.random.default_rng(derive_seed(seed, index))
    f0 = 90.0 + 25.0 * pitch_level + rng.uniform(-3.0, 3.0)
    formants = (
        300.0 + 50.0 * formant_level + rng.uniform(-15.0, 15.0),
        900.0 + 150.0 * formant_level + rng.uniform(-15.0, 15.0),
        2200.0 + 120.0 * formant_level + rng.uniform(-15.0, 15.0),
    )
    bandwidths = tuple(float(b + rng.uniform(-5.0, 5.0)) for b in (60.0, 90.0, 140.0))
    return SpeakerProfile(
        speaker_id=speaker_label(index),
        f0=float(f0),
        formants=tuple(float(f) for f in formants),
        bandwidths=bandwidths,
        snr_db=float(rng.uniform(22.0, 30.0)),
    )


def _resonator(frequency, bandwidth, sample_rate):
    r = math.exp(-math.pi * bandwidth / sample_rate)
    theta = 2.0 * math.pi * frequency / sample_rate
    return [1.0 - r], [1.0, -2.0 * r * math.cos(theta), r * r]


def synth_clip(profile, duration_s, seed, sample_rate=DEFAULT_SAMPLE_RATE):
    """Render ``duration_s`` seconds of ``profile``, peak-normalized to 0.9."""
    if not 0.5 <= duration_s <= 10.0:
        raise ValueError(f'duration_s must lie in [0.5, 10], got {duration_s}')
    n = int(round(duration_s * sample_rate))
    rng = np.random.default_rng(seed)

    segment = int(round(_JITTER_SEGMENT_S * sample_rate))
    jitter = 1.0 + rng.uniform(-_JITTER, _JITTER, size=math.ceil(n / segment))
    f_inst = np.repeat(profile.f0 * jitter, segment)[:n]
    phase = 2.0 * np.pi * np.cumsum(f_inst) / sample_rate

    n_harmonics = int(0.45 * sample_rate / (profile.f0 * (1.0 + _JITTER)))
    source = np.zeros(n)
    for h in range(1, n_harmonics + 1):
        source += np.sin(h * phase) / h

    voiced = source
    for frequency, bandwidth in zip(profile.formants, profile.bandwidths):
        b, a = _resonator(frequency, bandwidth, sample_rate)
        voiced = lfilter(b, a, voiced)

    power = np.mean(voiced ** 2)
    noise = rng.standard_normal(n) * math.sqrt(power / 10.0 ** (profile.snr_db / 10.0))
    mixed = voiced + noise
    return AudioClip(_PEAK * mixed / np.abs(mixed).max(), sample_rate)


def synth_corpus(n_speakers, clips_per_speaker, duration_s, out_dir, seed):
    """
    Write ``out_dir/<speaker_id>/<clip_index>.wav`` for every clip and
    ``out_dir/manifest.jsonl`` with stratified (0.8, 0.1, 0.1) splits.
    """
    if not 1 <= n_speakers <= MAX_SPEAKERS:
        raise IndexOutOfRange(f'n_speakers must lie in 1..{MAX_SPEAKERS}, got {n_speakers}')
    out_dir = ensure_dir(out_dir)
    entries = []
    for s in range(n_speakers):
        profile = make_speaker_profile(s, seed)
        ensure_dir(out_dir / profile.speaker_id)
        logger.info(f'Synthesizing {clips_per_speaker} clips for {profile.speaker_id} '
                    f'(f0 {profile.f0:.1f} Hz)')
        for c in range(clips_per_speaker):
            clip = synth_clip(profile, duration_s, derive_seed(seed, s, c))
            relative = f'{profile.speaker_id}/{c:04d}.wav'
            write_wav(clip, out_dir / relative)
            entries.append(ManifestEntry(relative, profile.speaker_id, 'train', clip.duration_s))
    manifest = stratified_split(Manifest.from_entries(entries, root=Path(out_dir)),
                                DEFAULT_RATIOS, seed)
    save_manifest(manifest, out_dir / 'manifest.jsonl')
    return manifest
