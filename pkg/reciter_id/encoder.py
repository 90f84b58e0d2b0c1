"""
Shared representation stack.

``mfcc`` gives the teacher features for k-means targets; ``feature_encoder``
turns raw audio into latent frames; ``span_mask`` hides spans of latent
frames behind a learned embedding; ``transformer_encode`` turns latent
frames into context frames.
"""
from dataclasses import asdict, dataclass
import math

import numpy as np
import scipy.fft
import scipy.signal

from .errors import ClipTooShort, EmptyLabels, InputTooShort, ShapeMismatch
from .numcore import (Tensor, _as_tensor, conv1d, conv1d_output_length, gelu, layer_norm,
                      linear, matmul, softmax, swapaxes, where)


DEFAULT_CONV_LAYERS = (
    (64, 10, 5), (64, 3, 2), (64, 3, 2), (64, 3, 2), (64, 3, 2), (64, 2, 2), (64, 2, 2),
)

MFCC_WINDOW_S = 0.025
MFCC_HOP_S = 0.010
MEL_FILTERS = 26
MEL_FMAX = 8000.0


@dataclass(frozen=True)
class EncoderConfig:
    """Sizes of the convolutional encoder and the transformer."""
    conv_layers: tuple = DEFAULT_CONV_LAYERS
    model_dim: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 128
    mask_prob: float = 0.065
    mask_span: int = 10
    max_positions: int = 512
    sample_rate: int = 16000

    def __post_init__(self):
        object.__setattr__(self, 'conv_layers', tuple(tuple(int(v) for v in layer)
                                                      for layer in self.conv_layers))
        if not self.conv_layers:
            raise ValueError('at least one conv layer is required')
        if self.model_dim % self.n_heads:
            raise ValueError(f'model_dim {self.model_dim} not divisible by n_heads {self.n_heads}')
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f'mask_prob must lie in [0, 1], got {self.mask_prob}')
        if self.mask_span < 1:
            raise ValueError(f'mask_span must be >= 1, got {self.mask_span}')

    @property
    def hop(self):
        """Samples between consecutive latent frames."""
        return int(np.prod([stride for _, _, stride in self.conv_layers]))

    @property
    def receptive_field(self):
        field, jump = 1, 1
        for _, width, stride in self.conv_layers:
            field += (width - 1) * jump
            jump *= stride
        return field

    def output_length(self, n_samples):
        """Number of latent frames for ``n_samples`` of audio (0 if too short)."""
        length = int(n_samples)
        for _, width, stride in self.conv_layers:
            if length < width:
                return 0
            length = conv1d_output_length(length, width, stride)
        return length

    def to_dict(self):
        return {k: [list(layer) for layer in v] if k == 'conv_layers' else v
                for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, mapping):
        return cls(**mapping)


@dataclass(frozen=True)
class MaskSpec:
    masked_indices: frozenset
    spans: tuple

    @property
    def index_array(self):
        return np.array(sorted(self.masked_indices), dtype=np.int64)

    def __len__(self):
        return len(self.masked_indices)


# ---------------------------------------------------------------------------
# MFCC teacher features
# ---------------------------------------------------------------------------

def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filter_edges(sample_rate, n_filters=MEL_FILTERS, fmax=MEL_FMAX):
    """(low, center, high) in Hz for each triangular filter."""
    fmax = min(fmax, sample_rate / 2.0)
    points = _mel_to_hz(np.linspace(0.0, _hz_to_mel(fmax), n_filters + 2))
    return np.stack([points[:-2], points[1:-1], points[2:]], axis=1)


def mel_filterbank(n_fft, sample_rate, n_filters=MEL_FILTERS, fmax=MEL_FMAX):
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_filter_edges(sample_rate, n_filters, fmax)
    low, center, high = edges[:, 0:1], edges[:, 1:2], edges[:, 2:3]
    rising = (freqs - low) / (center - low)
    falling = (high - freqs) / (high - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel_energies(clip, n_filters=MEL_FILTERS):
    """25 ms Hann frames every 10 ms -> log energies of the mel filters."""
    rate = clip.sample_rate
    window = int(round(MFCC_WINDOW_S * rate))
    hop = int(round(MFCC_HOP_S * rate))
    x = clip.samples
    if x.size < window:
        raise ClipTooShort(f'clip of {x.size} samples is shorter than one {window}-sample window')
    n_frames = (x.size - window) // hop + 1
    frames = x[np.arange(n_frames)[:, None] * hop + np.arange(window)[None, :]]
    frames = frames * scipy.signal.get_window('hann', window)
    n_fft = 1 << (window - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n_fft, axis=-1)) ** 2 / n_fft
    energies = power @ mel_filterbank(n_fft, rate, n_filters).T
    return np.log(np.maximum(energies, 1e-10))


def mfcc(clip, n_coeffs=13):
    """Tensor[frames, n_coeffs] of DCT-II coefficients of the log mel energies."""
    coeffs = scipy.fft.dct(log_mel_energies(clip), type=2, axis=-1, norm='ortho')
    return Tensor(coeffs[:, :n_coeffs])


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_encoder_params(config, seed):
    """Parameter tensors keyed by checkpoint name."""
    rng = np.random.default_rng(seed)
    d = config.model_dim
    params = {}

    def add(name, value):
        params[name] = Tensor(value, requires_grad=True)

    in_channels = 1
    for i, (channels, width, _) in enumerate(config.conv_layers):
        fan_in = in_channels * width
        add(f'conv.{i}.weight', rng.standard_normal((channels, in_channels, width)) * math.sqrt(2.0 / fan_in))
        add(f'conv.{i}.ln.gamma', np.ones(channels))
        add(f'conv.{i}.ln.beta', np.zeros(channels))
        in_channels = channels
    add('feature_proj.weight', rng.standard_normal((in_channels, d)) / math.sqrt(in_channels))
    add('feature_proj.bias', np.zeros(d))
    add('mask_embedding', rng.uniform(-0.5, 0.5, d))
    add('pos_embedding', rng.standard_normal((config.max_positions, d)) * 0.02)

    for layer in range(config.n_layers):
        prefix = f'layers.{layer}.'
        add(prefix + 'ln1.gamma', np.ones(d))
        add(prefix + 'ln1.beta', np.zeros(d))
        for proj in ('q', 'k', 'v', 'o'):
            add(prefix + f'attn.{proj}.weight', rng.standard_normal((d, d)) / math.sqrt(d))
            add(prefix + f'attn.{proj}.bias', np.zeros(d))
        add(prefix + 'ln2.gamma', np.ones(d))
        add(prefix + 'ln2.beta', np.zeros(d))
        add(prefix + 'ffn.in.weight', rng.standard_normal((d, config.ffn_dim)) / math.sqrt(d))
        add(prefix + 'ffn.in.bias', np.zeros(config.ffn_dim))
        add(prefix + 'ffn.out.weight', rng.standard_normal((config.ffn_dim, d)) / math.sqrt(config.ffn_dim))
        add(prefix + 'ffn.out.bias', np.zeros(d))
    return params


# ---------------------------------------------------------------------------
# Latent frames
# ---------------------------------------------------------------------------

def feature_encoder(waveform, params, config):
    """
    conv1d -> layer_norm -> gelu per conv layer, then a linear projection.

    waveform : Tensor[..., time] -> Tensor[..., frames, model_dim]
    """
    x = _as_tensor(waveform)
    if x.shape[-1] < config.receptive_field:
        raise InputTooShort(f'{x.shape[-1]} samples is shorter than the '
                            f'{config.receptive_field}-sample receptive field')
    h = x.reshape(*x.shape[:-1], 1, x.shape[-1])
    n_layers = len(config.conv_layers)
    for i, (_, _, stride) in enumerate(config.conv_layers):
        h = swapaxes(conv1d(h, params[f'conv.{i}.weight'], stride), -1, -2)
        h = gelu(layer_norm(h, params[f'conv.{i}.ln.gamma'], params[f'conv.{i}.ln.beta']))
        if i < n_layers - 1:
            h = swapaxes(h, -1, -2)
    return linear(h, params['feature_proj.weight'], params['feature_proj.bias'])


def frame_valid_mask(lengths, config, n_frames):
    """Boolean [batch, n_frames]: latent frame t only sees valid samples."""
    valid = np.array([config.output_length(n) for n in lengths])
    return np.arange(n_frames)[None, :] < valid[:, None]


def compute_mask_spec(length, mask_prob, mask_span, rng, min_spans=0):
    """
    Every position starts a span with probability ``mask_prob``; spans are
    ``mask_span`` long, clipped at ``length``, and may overlap. With
    ``min_spans`` extra starts are drawn uniformly until that many exist.
    """
    starts = np.flatnonzero(rng.random(length) < mask_prob)
    missing = min(min_spans, length) - starts.size
    if missing > 0:
        free = np.setdiff1d(np.arange(length), starts)
        starts = np.sort(np.concatenate([starts, rng.choice(free, size=missing, replace=False)]))
    spans = tuple((int(s), int(min(mask_span, length - s))) for s in starts)
    masked = frozenset(t for s, n in spans for t in range(s, s + n))
    return MaskSpec(masked, spans)


def span_mask(frames, mask_embedding, config, seed, valid_length=None, min_spans=0):
    """
    Replace masked positions of frames[T, d] by ``mask_embedding``.
    Only the first ``valid_length`` positions are eligible.
    """
    frames = _as_tensor(frames)
    T = frames.shape[-2]
    length = T if valid_length is None else int(valid_length)
    spec = compute_mask_spec(length, config.mask_prob, config.mask_span,
                             np.random.default_rng(seed), min_spans)
    mask = np.zeros(T, dtype=bool)
    mask[spec.index_array] = True
    return where(mask[:, None], mask_embedding, frames), spec


def span_mask_batch(frames, mask_embedding, config, seeds, valid_lengths, min_spans=0):
    """Batched ``span_mask`` over frames[B, T, d], one seed per utterance."""
    B, T = frames.shape[0], frames.shape[1]
    mask = np.zeros((B, T), dtype=bool)
    specs = []
    for b in range(B):
        spec = compute_mask_spec(int(valid_lengths[b]), config.mask_prob, config.mask_span,
                                 np.random.default_rng(seeds[b]), min_spans)
        mask[b, spec.index_array] = True
        specs.append(spec)
    return where(mask[..., None], mask_embedding, frames), specs


# ---------------------------------------------------------------------------
# Context network
# ---------------------------------------------------------------------------

def self_attention(x, params, prefix, n_heads, key_mask=None, return_weights=False):
    """Multi-head scaled dot-product attention; ``key_mask`` True = attendable."""
    *lead, T, d = x.shape
    dh = d // n_heads

    def split_heads(t):
        return swapaxes(t.reshape(*lead, T, n_heads, dh), -2, -3)

    q = split_heads(linear(x, params[prefix + 'attn.q.weight'], params[prefix + 'attn.q.bias']))
    k = split_heads(linear(x, params[prefix + 'attn.k.weight'], params[prefix + 'attn.k.bias']))
    v = split_heads(linear(x, params[prefix + 'attn.v.weight'], params[prefix + 'attn.v.bias']))
    scores = matmul(q, swapaxes(k, -1, -2)) / math.sqrt(dh)
    weights = softmax(scores, mask=key_mask)
    context = swapaxes(matmul(weights, v), -2, -3).reshape(*lead, T, d)
    out = linear(context, params[prefix + 'attn.o.weight'], params[prefix + 'attn.o.bias'])
    return (out, weights) if return_weights else out


def _key_mask(valid_mask):
    if valid_mask is None:
        return None
    valid_mask = np.asarray(valid_mask, dtype=bool)
    return valid_mask[..., None, None, :]


def transformer_encode(frames, valid_mask, params, config, return_hidden=False):
    """
    h_o = frames + positional embedding, then ``n_layers`` pre-norm blocks
    (self-attention and feed-forward, each with a residual connection).
    Invalid (padding) positions are excluded as attention keys.

    With ``return_hidden`` also returns [h_o, block 1 output, ...].
    """
    frames = _as_tensor(frames)
    T, d = frames.shape[-2], frames.shape[-1]
    if d != config.model_dim:
        raise ShapeMismatch(f'frames have width {d}, model_dim is {config.model_dim}')
    if T > config.max_positions:
        raise ShapeMismatch(f'{T} frames exceed max_positions {config.max_positions}')
    key_mask = _key_mask(valid_mask)
    h = frames + params['pos_embedding'][:T]
    hidden = [h]
    for layer in range(config.n_layers):
        prefix = f'layers.{layer}.'
        a = layer_norm(h, params[prefix + 'ln1.gamma'], params[prefix + 'ln1.beta'])
        h = h + self_attention(a, params, prefix, config.n_heads, key_mask)
        f = layer_norm(h, params[prefix + 'ln2.gamma'], params[prefix + 'ln2.beta'])
        f = gelu(linear(f, params[prefix + 'ffn.in.weight'], params[prefix + 'ffn.in.bias']))
        h = h + linear(f, params[prefix + 'ffn.out.weight'], params[prefix + 'ffn.out.bias'])
        hidden.append(h)
    return (h, hidden) if return_hidden else h


def frame_align(teacher_labels, target_len, teacher_hop=160, teacher_win=400,
                latent_hop=320, latent_win=400):
    """
    Label of latent frame t = label of the teacher frame whose window center
    is nearest to t's center; ties go to the earlier teacher frame. Hops and
    windows are in samples.
    """
    labels = np.asarray(teacher_labels)
    if labels.size == 0:
        raise EmptyLabels('frame_align needs at least one teacher label')
    t = np.arange(int(target_len), dtype=np.int64)
    # twice the center offset relative to teacher frame 0, in samples
    offset = 2 * t * latent_hop + latent_win - teacher_win
    base = np.floor_divide(offset, 2 * teacher_hop)
    remainder = offset - base * 2 * teacher_hop
    nearest = base + (remainder > teacher_hop)
    return labels[np.clip(nearest, 0, labels.size - 1)]
