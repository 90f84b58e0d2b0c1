import numpy as np
import pytest

from reciter_id.audio_io import AudioClip, Manifest, ManifestEntry
from reciter_id.encoder import EncoderConfig
from reciter_id.numcore import precision
from reciter_id.synthgen import synth_corpus
from reciter_id.trainer import TrainConfig


# hop 20 samples, receptive field 40 samples
TINY_CONV = ((8, 10, 5), (8, 3, 2), (8, 3, 2))


@pytest.fixture
def float64():
    with precision(np.float64):
        yield


@pytest.fixture
def tiny_encoder():
    return EncoderConfig(conv_layers=TINY_CONV, model_dim=16, n_heads=2, n_layers=1, ffn_dim=32,
                         mask_prob=0.2, mask_span=3, max_positions=512)


@pytest.fixture(scope='session')
def corpus(tmp_path_factory):
    """3 speakers x 6 clips of 0.5 s; per speaker 4 train, 1 val, 1 test."""
    out = tmp_path_factory.mktemp('corpus')
    manifest = synth_corpus(3, 6, 0.5, out, seed=0)
    return manifest


@pytest.fixture
def train_config(tmp_path, tiny_encoder):
    return TrainConfig(objective='finetune', max_iter=3, batch_size=4, eval_interval=2,
                       max_len_s=0.25, checkpoint_dir=str(tmp_path / 'ckpt'), encoder=tiny_encoder,
                       dtype='float64', n_clusters=4, kmeans_iters=10, codebook_entries=8,
                       num_distractors=3)


def make_manifest(counts, split='train', duration_s=1.0):
    """Manifest with ``counts[speaker]`` entries per speaker."""
    entries = [ManifestEntry(f'{speaker}/{i:03d}.wav', speaker, split, duration_s)
               for speaker, n in counts.items() for i in range(n)]
    return Manifest.from_entries(entries)


def constant_loader(n_samples, sample_rate=16000):
    """Loader returning the same-length ramp for every path."""
    def load(path):
        return AudioClip(np.linspace(-0.5, 0.5, n_samples), sample_rate, str(path))
    return load
