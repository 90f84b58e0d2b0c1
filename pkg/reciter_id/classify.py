"""
Speaker classification head on mean-pooled context frames.
"""
from dataclasses import dataclass, field
from collections import Counter
import math

import numpy as np

from .encoder import EncoderConfig, feature_encoder, frame_valid_mask, transformer_encode
from .errors import MissingClass, ShapeMismatch, UnsupportedFormat
from .numcore import Tensor, _as_tensor, gelu, linear, mean_pool, no_grad, softmax


DEFAULT_MAX_LEN_S = 2.0


@dataclass
class HeadParams:
    hidden: Tensor
    hidden_bias: Tensor
    out: Tensor
    out_bias: Tensor

    @property
    def n_classes(self):
        return self.out.shape[1]

    def parameters(self):
        return {'head.hidden.weight': self.hidden, 'head.hidden.bias': self.hidden_bias,
                'head.out.weight': self.out, 'head.out.bias': self.out_bias}

    @classmethod
    def from_parameters(cls, params):
        return cls(params['head.hidden.weight'], params['head.hidden.bias'],
                   params['head.out.weight'], params['head.out.bias'])


def init_head(model_dim, n_classes, seed, hidden_dim=None):
    """Single hidden layer of width ``hidden_dim`` (default 2 * model_dim)."""
    hidden_dim = hidden_dim or 2 * model_dim
    rng = np.random.default_rng(seed)
    return HeadParams(
        hidden=Tensor(rng.standard_normal((model_dim, hidden_dim)) / math.sqrt(model_dim), requires_grad=True),
        hidden_bias=Tensor(np.zeros(hidden_dim), requires_grad=True),
        out=Tensor(rng.standard_normal((hidden_dim, n_classes)) / math.sqrt(hidden_dim), requires_grad=True),
        out_bias=Tensor(np.zeros(n_classes), requires_grad=True),
    )


def mlp_head(pooled, params):
    """logits = linear(gelu(linear(pooled)))"""
    pooled = _as_tensor(pooled)
    if pooled.shape[-1] != params.hidden.shape[0]:
        raise ShapeMismatch(f'pooled width {pooled.shape[-1]} vs head input {params.hidden.shape[0]}')
    return linear(gelu(linear(pooled, params.hidden, params.hidden_bias)), params.out, params.out_bias)


def class_weights(manifest, split):
    """
    Inverse-frequency weights w_c = N / (C * n_c) over the entries of ``split``.

    Raises
    ------
    MissingClass
        When a speaker of the manifest has no entry in ``split``.
    """
    counts = Counter(e.speaker for e in manifest.in_split(split))
    missing = [label for label in manifest.labels if counts[label] == 0]
    if missing:
        raise MissingClass(f'split {split!r} has no entries for {", ".join(missing)}')
    total = sum(counts.values())
    n_classes = manifest.n_classes
    return Tensor([total / (n_classes * counts[label]) for label in manifest.labels])


@dataclass
class SpeakerModel:
    """Encoder parameters, head and label space of a fine-tuned model."""
    encoder_config: EncoderConfig
    encoder_params: dict
    head: HeadParams
    labels: list
    max_len_s: float = DEFAULT_MAX_LEN_S
    label_index: dict = field(init=False)

    def __post_init__(self):
        if len(self.labels) != self.head.n_classes:
            raise ShapeMismatch(f'{len(self.labels)} labels for a head of {self.head.n_classes} classes')
        self.label_index = {label: i for i, label in enumerate(self.labels)}

    def parameters(self):
        params = dict(self.encoder_params)
        params.update(self.head.parameters())
        return params


def forward_logits(model, waveforms, lengths):
    """
    Unmasked forward pass over a zero-padded batch.

    waveforms : array[B, time]; lengths : valid samples per row
    """
    latents = feature_encoder(_as_tensor(waveforms), model.encoder_params, model.encoder_config)
    valid = frame_valid_mask(lengths, model.encoder_config, latents.shape[-2])
    context = transformer_encode(latents, valid, model.encoder_params, model.encoder_config)
    return mlp_head(mean_pool(context, valid), model.head)


def predict(clip, model, label_index=None):
    """
    Deterministic speaker decision on the first ``model.max_len_s`` seconds
    of ``clip``. Returns (label, probs).
    """
    if clip.sample_rate != model.encoder_config.sample_rate:
        raise UnsupportedFormat(f'clip is sampled at {clip.sample_rate} Hz, the model expects '
                                f'{model.encoder_config.sample_rate} Hz')
    label_index = label_index or model.label_index
    labels = sorted(label_index, key=label_index.get)
    limit = int(round(model.max_len_s * clip.sample_rate))
    samples = clip.samples[:limit]
    with no_grad():
        logits = forward_logits(model, samples[None, :], [samples.size])
        probs = softmax(logits)[0]
    return labels[int(np.argmax(probs.data))], probs
