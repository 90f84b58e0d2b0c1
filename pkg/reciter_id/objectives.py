"""
Self-supervised pretraining objectives.

* wav2vec2 style: Gumbel product quantizer, masked contrastive loss over
  in-utterance distractors, codebook diversity penalty.
* HuBERT style: k-means teacher (MFCC first, then hidden states of a
  pretrained encoder) and cross-entropy on masked frames only.

Batched inputs carry a leading utterance axis; masks are then one
``MaskSpec`` per utterance.
"""
from dataclasses import dataclass
from typing import NamedTuple
import math

import numpy as np
from logzero import logger
from scipy.spatial.distance import cdist

from .audio_io import read_wav
from .encoder import feature_encoder, frame_align, mfcc, transformer_encode
from .errors import (BadLabel, EmptyMask, NumericError, ShapeMismatch, TooFewMasked,
                     TooFewPoints)
from .numcore import (Tensor, _as_tensor, clamp_min, concat, cosine_similarity, cross_entropy,
                      exp, gumbel_softmax, linear, log, matmul, no_grad, softmax, swapaxes)
from .utils import derive_seed


DEFAULT_GROUPS = 2
DEFAULT_ENTRIES = 32
DEFAULT_DISTRACTORS = 10
DEFAULT_KAPPA = 0.1
DEFAULT_ALPHA = 0.1
MAX_CLUSTER_SAMPLE = 100_000


# ---------------------------------------------------------------------------
# Quantizer
# ---------------------------------------------------------------------------

@dataclass
class Codebook:
    """
    G groups of V entries, each entry d/G wide. ``proj_weight`` and
    ``proj_bias`` map a latent frame to G*V selection logits.
    """
    groups: int
    entries_per_group: int
    vectors: Tensor
    proj_weight: Tensor
    proj_bias: Tensor

    @property
    def entry_dim(self):
        return self.vectors.shape[-1]

    def parameters(self):
        return {'codebook.vectors': self.vectors,
                'codebook.proj.weight': self.proj_weight,
                'codebook.proj.bias': self.proj_bias}

    @classmethod
    def from_parameters(cls, params):
        vectors = params['codebook.vectors']
        return cls(vectors.shape[0], vectors.shape[1], vectors,
                   params['codebook.proj.weight'], params['codebook.proj.bias'])


def init_codebook(model_dim, seed, groups=DEFAULT_GROUPS, entries_per_group=DEFAULT_ENTRIES):
    if model_dim % groups:
        raise ValueError(f'model_dim {model_dim} not divisible by {groups} codebook groups')
    rng = np.random.default_rng(seed)
    n_logits = groups * entries_per_group
    return Codebook(
        groups=groups,
        entries_per_group=entries_per_group,
        vectors=Tensor(rng.uniform(-1.0, 1.0, (groups, entries_per_group, model_dim // groups)),
                       requires_grad=True),
        proj_weight=Tensor(rng.standard_normal((model_dim, n_logits)) / math.sqrt(model_dim),
                           requires_grad=True),
        proj_bias=Tensor(np.zeros(n_logits), requires_grad=True),
    )


def gumbel_temperature(step, start=2.0, end=0.5, decay=0.999995):
    """Annealed Gumbel temperature max(end, start * decay**step)."""
    return max(end, start * decay ** step)


def quantize(latents, codebook, temperature, seed, noise=None):
    """
    Hard Gumbel selection of one entry per (frame, group).

    Returns
    -------
    quantized : Tensor[..., T, d]
        Concatenation of the selected entries across groups. Gradients reach
        the logits through the straight-through estimator.
    code_probs : Tensor[..., T, G, V]
        Noise-free softmax of the selection logits.
    """
    latents = _as_tensor(latents)
    *lead, T, d = latents.shape
    G, V = codebook.groups, codebook.entries_per_group
    if d != G * codebook.entry_dim:
        raise ShapeMismatch(f'latents of width {d} vs codebook of {G} x {codebook.entry_dim}')
    logits = linear(latents, codebook.proj_weight, codebook.proj_bias).reshape(*lead, T, G, V)
    code_probs = softmax(logits)
    selection = gumbel_softmax(logits, temperature, seed, hard=True, noise=noise)
    # [..., G, T, V] @ [G, V, d/G] -> [..., G, T, d/G]
    chosen = matmul(swapaxes(selection, -2, -3), codebook.vectors)
    quantized = swapaxes(chosen, -2, -3).reshape(*lead, T, d)
    return quantized, code_probs


# ---------------------------------------------------------------------------
# Masked positions
# ---------------------------------------------------------------------------

def _masked_positions(x, masks):
    """Flatten (utterance, frame) pairs of the masked positions."""
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
        masks = [masks]
    if len(masks) != x.shape[0]:
        raise ShapeMismatch(f'{len(masks)} masks for a batch of {x.shape[0]}')
    counts = np.array([len(m) for m in masks], dtype=np.int64)
    rows = np.repeat(np.arange(len(masks)), counts)
    cols = np.concatenate([m.index_array for m in masks]) if counts.sum() else np.zeros(0, np.int64)
    if cols.size and cols.max() >= x.shape[1]:
        raise ShapeMismatch(f'masked index {cols.max()} beyond {x.shape[1]} frames')
    return x, rows, cols, counts


def contrastive_logits(context, quantized, mask, K=DEFAULT_DISTRACTORS, kappa=DEFAULT_KAPPA, seed=0):
    """
    Logits cos(c_t, q) / kappa over [q_t, K distractors] for every masked
    frame t, shape [n_masked, K + 1]. Distractors are drawn uniformly with
    replacement from the other masked frames of the same utterance.

    Raises
    ------
    TooFewMasked
        When an utterance has fewer than two masked frames.
    """
    context, quantized = _as_tensor(context), _as_tensor(quantized)
    if context.shape != quantized.shape:
        raise ShapeMismatch(f'context {context.shape} vs quantized {quantized.shape}')
    if K < 1:
        raise ValueError(f'need at least one distractor, got K={K}')
    context, rows, cols, counts = _masked_positions(context, mask)
    quantized = quantized.reshape(*context.shape)
    if np.any(counts < 2):
        raise TooFewMasked(f'contrastive loss needs >= 2 masked frames per utterance, got {counts.min()}')

    rng = np.random.default_rng(seed)
    picks = []
    start = 0
    for count in counts:
        draw = rng.integers(0, count - 1, size=(count, K))
        draw += draw >= np.arange(count)[:, None]
        picks.append(draw + start)
        start += count
    picks = np.concatenate(picks)

    d = context.shape[-1]
    c = context[rows, cols]
    q = quantized[rows, cols]
    n = c.shape[0]
    candidates = concat([q.reshape(n, 1, d), q[picks]], axis=1)
    return cosine_similarity(c.reshape(n, 1, d), candidates) / float(kappa)


def contrastive_loss(context, quantized, mask, K=DEFAULT_DISTRACTORS, kappa=DEFAULT_KAPPA, seed=0):
    """Mean cross-entropy of picking q_t among {q_t} and its K distractors."""
    logits = contrastive_logits(context, quantized, mask, K, kappa, seed)
    return cross_entropy(logits, np.zeros(logits.shape[0], dtype=np.int64))


def diversity_penalty(code_probs, valid_mask=None):
    """
    (1/G) sum_g (1 - exp(H(p_g)) / V) where p_g is the average code
    distribution of group g over frames. 0 for uniform usage, 1 - 1/V when
    a single code is used.
    """
    probs = _as_tensor(code_probs)
    G, V = probs.shape[-2], probs.shape[-1]
    flat = probs.reshape(-1, G, V)
    if valid_mask is None:
        avg = flat.mean(axis=0)
    else:
        w = np.asarray(valid_mask, dtype=bool).reshape(-1).astype(probs.dtype)
        if w.size != flat.shape[0]:
            raise ShapeMismatch(f'valid_mask covers {w.size} frames, probs have {flat.shape[0]}')
        avg = (flat * (w / w.sum())[:, None, None]).sum(axis=0)
    entropy = -(avg * log(clamp_min(avg, 1e-12))).sum(axis=-1)
    return (1.0 - exp(entropy) / float(V)).mean()


class W2VTerms(NamedTuple):
    total: Tensor
    contrastive: Tensor
    diversity: Tensor
    accuracy: float


def w2v_loss_terms(context, latents, codebook, mask, K=DEFAULT_DISTRACTORS, kappa=DEFAULT_KAPPA,
                   alpha=DEFAULT_ALPHA, temperature=2.0, seed=0, valid_mask=None):
    """
    Loss terms of the wav2vec2 objective. ``accuracy`` is the fraction of
    masked frames whose positive outranks all distractors.
    """
    quantized, code_probs = quantize(latents, codebook, temperature, derive_seed(seed, 0))
    logits = contrastive_logits(context, quantized, mask, K, kappa, derive_seed(seed, 1))
    contrastive = cross_entropy(logits, np.zeros(logits.shape[0], dtype=np.int64))
    diversity = diversity_penalty(code_probs, valid_mask)
    accuracy = float(np.mean(np.argmax(logits.data, axis=-1) == 0))
    return W2VTerms(contrastive + alpha * diversity, contrastive, diversity, accuracy)


def pretrain_loss_w2v(context, latents, codebook, mask, K=DEFAULT_DISTRACTORS, kappa=DEFAULT_KAPPA,
                      alpha=DEFAULT_ALPHA, temperature=2.0, seed=0, valid_mask=None):
    """contrastive_loss + alpha * diversity_penalty, quantizing the unmasked latents."""
    return w2v_loss_terms(context, latents, codebook, mask, K, kappa, alpha,
                          temperature, seed, valid_mask).total


# ---------------------------------------------------------------------------
# k-means teacher
# ---------------------------------------------------------------------------

@dataclass
class Centroids:
    k: int
    means: np.ndarray
    inertia: float
    history: tuple = ()

    @property
    def n_iters(self):
        return len(self.history)


def _features_array(features):
    data = features.data if isinstance(features, Tensor) else features
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeMismatch(f'features must be [N, f], got {data.shape}')
    return data


def _nearest(X, means, chunk_size=4096):
    """Nearest centroid (lowest id on ties) and its squared distance."""
    labels = np.empty(len(X), dtype=np.int64)
    dist2 = np.empty(len(X))
    for start in range(0, len(X), chunk_size):
        d2 = cdist(X[start:start + chunk_size], means, 'sqeuclidean')
        labels[start:start + chunk_size] = d2.argmin(axis=1)
        dist2[start:start + chunk_size] = d2.min(axis=1)
    return labels, dist2


def _kmeans_plus_plus(X, k, rng):
    chosen = [int(rng.integers(len(X)))]
    closest = cdist(X, X[chosen], 'sqeuclidean')[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            index = int(rng.choice(len(X), p=closest / total))
        else:
            index = int(rng.choice(np.setdiff1d(np.arange(len(X)), chosen)))
        chosen.append(index)
        closest = np.minimum(closest, cdist(X, X[index:index + 1], 'sqeuclidean')[:, 0])
    return X[chosen].copy()


def kmeans_fit(features, k, max_iters=100, seed=0):
    """
    Lloyd's algorithm from a seeded k-means++ start. Stops at an assignment
    fixpoint or after ``max_iters``. A cluster left empty by an update is
    re-seeded at the point farthest from its centroid.

    Raises
    ------
    TooFewPoints
    """
    X = _features_array(features)
    if k < 1:
        raise ValueError(f'k must be >= 1, got {k}')
    if len(X) < k:
        raise TooFewPoints(f'{len(X)} points for {k} clusters')
    rng = np.random.default_rng(seed)
    means = _kmeans_plus_plus(X, k, rng)
    labels = None
    history = []
    for _ in range(max_iters):
        new_labels, dist2 = _nearest(X, means)
        inertia = float(dist2.sum())
        if history and inertia > history[-1] * (1.0 + 1e-9) + 1e-12:
            raise NumericError(f'k-means inertia increased from {history[-1]} to {inertia}')
        history.append(inertia)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(means)
        np.add.at(sums, labels, X)
        filled = counts > 0
        means[filled] = sums[filled] / counts[filled, None]
        for j in np.flatnonzero(~filled):
            far = int(dist2.argmax())
            logger.debug(f'Re-seeding empty cluster {j} at point {far}')
            means[j] = X[far]
            dist2[far] = 0.0
    _, dist2 = _nearest(X, means)
    return Centroids(k=k, means=means, inertia=float(dist2.sum()), history=tuple(history))


def kmeans_assign(features, centroids):
    X = _features_array(features)
    if X.shape[1] != centroids.means.shape[1]:
        raise ShapeMismatch(f'features of width {X.shape[1]} vs centroids of width '
                            f'{centroids.means.shape[1]}')
    return _nearest(X, centroids.means)[0]


def masked_prediction_loss(context, teacher_labels, mask, proj):
    """
    Mean cross-entropy of softmax(context_t @ proj) against the teacher
    label, over masked frames only.

    Raises
    ------
    EmptyMask, BadLabel
    """
    context = _as_tensor(context)
    labels = np.asarray(teacher_labels)
    if labels.shape != context.shape[:-1]:
        raise ShapeMismatch(f'labels {labels.shape} vs context {context.shape}')
    context, rows, cols, _ = _masked_positions(context, mask)
    if rows.size == 0:
        raise EmptyMask('masked prediction needs at least one masked frame')
    targets = labels.reshape(context.shape[:-1])[rows, cols].astype(np.int64)
    n_clusters = proj.shape[-1]
    if np.any((targets < 0) | (targets >= n_clusters)):
        raise BadLabel(f'teacher labels must lie in 0..{n_clusters - 1}')
    logits = matmul(context[rows, cols], proj)
    return cross_entropy(logits, targets)


def masked_prediction_accuracy(context, teacher_labels, mask, proj):
    """Fraction of masked frames whose arg-max cluster equals the teacher label."""
    context = _as_tensor(context)
    labels = np.asarray(teacher_labels)
    context, rows, cols, _ = _masked_positions(context, mask)
    if rows.size == 0:
        raise EmptyMask('masked prediction needs at least one masked frame')
    scores = context.data[rows, cols] @ _as_tensor(proj).data
    targets = labels.reshape(context.shape[:-1])[rows, cols]
    return float(np.mean(scores.argmax(axis=-1) == targets))


def _sample_rows(blocks, limit, seed):
    X = np.concatenate(blocks)
    if len(X) <= limit:
        return X
    rng = np.random.default_rng(seed)
    return X[np.sort(rng.choice(len(X), size=limit, replace=False))]


def cluster_labels(features_by_path, fit_paths, k, seed, max_iters=100,
                   sample_limit=MAX_CLUSTER_SAMPLE):
    """
    Fit k-means on (a seeded sample of at most ``sample_limit`` frames of)
    the ``fit_paths`` features, then label every frame of every clip.
    """
    sample = _sample_rows([features_by_path[p] for p in fit_paths], sample_limit, seed)
    centroids = kmeans_fit(sample, k, max_iters, seed)
    logger.info(f'k-means teacher: k={k}, {len(sample)} frames, inertia {centroids.inertia:.4g} '
                f'after {centroids.n_iters} iterations')
    labels = {path: kmeans_assign(feats, centroids) for path, feats in features_by_path.items()}
    return labels, centroids


def mfcc_teacher_labels(manifest, encoder_config, k, seed, max_iters=100, fit_split='train',
                        n_coeffs=13, loader=None, sample_limit=MAX_CLUSTER_SAMPLE):
    """
    First-iteration HuBERT targets: k-means over MFCC frames of the
    ``fit_split`` clips, aligned from the 10 ms MFCC rate to the latent rate.
    Returns {manifest path: int label vector at latent rate}.
    """
    loader = loader or read_wav
    features = {}
    n_latent = {}
    for entry in manifest.entries:
        clip = loader(manifest.resolve(entry))
        features[entry.path] = mfcc(clip, n_coeffs).data.astype(np.float64)
        n_latent[entry.path] = encoder_config.output_length(len(clip))
    fit_paths = [e.path for e in manifest.in_split(fit_split)]
    labels, _ = cluster_labels(features, fit_paths, k, seed, max_iters, sample_limit)
    window = int(round(0.025 * encoder_config.sample_rate))
    hop = int(round(0.010 * encoder_config.sample_rate))
    return {path: frame_align(labels[path], n_latent[path], hop, window,
                              encoder_config.hop, encoder_config.receptive_field)
            for path in labels}


def hidden_states(waveform, params, config, layer_index):
    """
    Hidden states of one clip at ``layer_index`` (0 = positional-embedded
    latents), computed in windows of at most ``max_positions`` frames.
    """
    samples = np.asarray(waveform, dtype=np.float64)
    n_frames = config.output_length(samples.size)
    window = (config.max_positions - 1) * config.hop + config.receptive_field
    step = config.max_positions * config.hop
    blocks = []
    with no_grad():
        for start in range(0, max(n_frames, 1) * config.hop, step):
            chunk = samples[start:start + window]
            if chunk.size < config.receptive_field:
                break
            latents = feature_encoder(Tensor(chunk), params, config)
            _, hidden = transformer_encode(latents, None, params, config, return_hidden=True)
            blocks.append(hidden[layer_index].data)
    if not blocks:
        return np.zeros((0, config.model_dim))
    return np.concatenate(blocks)[:n_frames].astype(np.float64)


def refine_targets(params, config, manifest, layer_index, k, seed, max_iters=100,
                   fit_split='train', loader=None, sample_limit=MAX_CLUSTER_SAMPLE):
    """
    Second-iteration targets: k-means over hidden states of a pretrained
    encoder. Returns {manifest path: label vector at latent rate}.
    """
    loader = loader or read_wav
    if not 0 <= layer_index <= config.n_layers:
        raise ValueError(f'layer_index must lie in 0..{config.n_layers}, got {layer_index}')
    features = {entry.path: hidden_states(loader(manifest.resolve(entry)).samples,
                                          params, config, layer_index)
                for entry in manifest.entries}
    fit_paths = [e.path for e in manifest.in_split(fit_split)]
    labels, _ = cluster_labels(features, fit_paths, k, seed, max_iters, sample_limit)
    return labels
