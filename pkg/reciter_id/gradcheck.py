"""
Gradient suite: every differentiable primitive, a tiny composed encoder,
the pretraining objectives and the classification head, each compared
against finite differences over a range of seeds.
"""
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from logzero import logger

from .classify import HeadParams, mlp_head
from .encoder import (EncoderConfig, MaskSpec, feature_encoder, init_encoder_params, self_attention,
                      span_mask, transformer_encode)
from .errors import UsageError
from .numcore import (clamp_min, concat, conv1d, cosine_similarity, exp, gelu, getitem, grad_check,
                      gumbel_softmax, layer_norm, linear, log, log_softmax, matmul, mean_pool, softmax,
                      stack, swapaxes, tanh, tmean, tsum, vector_norm, weighted_cross_entropy, where)
from .objectives import Codebook, contrastive_loss, diversity_penalty, masked_prediction_loss, quantize


GRAD_TOLERANCE = 1e-4
DEFAULT_SEEDS = tuple(range(10))

TINY_ENCODER = EncoderConfig(conv_layers=((4, 4, 2), (4, 3, 2)), model_dim=8, n_heads=2, n_layers=1,
                             ffn_dim=16, mask_prob=0.2, mask_span=2, max_positions=6)
# 28 samples -> 6 latent frames for TINY_ENCODER
TINY_SAMPLES = 28


@dataclass(frozen=True)
class GradCase:
    """``build(seed)`` returns (op, input arrays)."""
    name: str
    build: Callable


class CaseResult(NamedTuple):
    name: str
    max_error: float
    seeds: int
    tolerance: float

    @property
    def passed(self):
        return self.max_error < self.tolerance


def _away_from_zero(rng, shape, margin=0.2):
    """Standard-normal draws pushed at least ``margin`` away from 0."""
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + margin)


def _simple(name, op, *shapes):
    """Case with standard-normal inputs of the given shapes."""
    def build(seed):
        rng = np.random.default_rng(seed)
        return op, [rng.standard_normal(shape) for shape in shapes]
    return GradCase(name, build)


def _division(seed):
    rng = np.random.default_rng(seed)
    return (lambda a, b: a / b), [rng.standard_normal((3, 4)), _away_from_zero(rng, (3, 4))]


def _positive_ops(seed):
    rng = np.random.default_rng(seed)
    return (lambda x: log(x) + x ** 1.5 - x ** -1), [np.abs(rng.standard_normal((3, 4))) + 0.5]


def _clamp(seed):
    rng = np.random.default_rng(seed)
    return (lambda x: clamp_min(x, 0.0)), [_away_from_zero(rng, (4, 5))]


def _where(seed):
    rng = np.random.default_rng(seed)
    condition = rng.random((3, 4)) < 0.5
    return (lambda a, b: where(condition, a, b)), [rng.standard_normal((3, 4)), rng.standard_normal(4)]


def _getitem(seed):
    rng = np.random.default_rng(seed)
    rows = np.array([0, 2, 2, 1])
    return (lambda x: getitem(x, (rows, slice(1, None)))), [rng.standard_normal((3, 5))]


def _masked_softmax(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((4, 6)) < 0.7
    mask[:, 0] = True
    return (lambda x: softmax(x, mask=mask)), [rng.standard_normal((4, 6))]


def _mean_pool(seed):
    rng = np.random.default_rng(seed)
    valid = rng.random((2, 5)) < 0.6
    valid[:, 0] = True
    return (lambda x: mean_pool(x, valid)), [rng.standard_normal((2, 5, 3))]


def _cross_entropy(seed):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, 4, size=5)
    weights = rng.uniform(0.5, 2.0, size=4)
    return (lambda x: weighted_cross_entropy(x, targets, weights)), [rng.standard_normal((5, 4))]


def _gumbel(seed):
    rng = np.random.default_rng(seed)
    return (lambda x: gumbel_softmax(x, 0.7, seed)), [rng.standard_normal((3, 5))]


def _attention(seed):
    rng = np.random.default_rng(seed)
    d = 4
    names = [f'attn.{p}.{kind}' for p in 'qkvo' for kind in ('weight', 'bias')]
    values = [rng.standard_normal((d, d) if name.endswith('weight') else d) * 0.5 for name in names]
    key_mask = np.array([[True, True, True], [True, True, False]])[:, None, None, :]

    def op(x, *param_values):
        return self_attention(x, dict(zip(names, param_values)), '', 2, key_mask)
    return op, [rng.standard_normal((2, 3, d))] + values


def _tiny_encoder(seed):
    """Waveform -> conv encoder -> span mask -> one transformer block."""
    rng = np.random.default_rng(seed)
    params = init_encoder_params(TINY_ENCODER, seed)
    names = sorted(params)
    values = [params[name].data.astype(np.float64) + 0.1 * rng.standard_normal(params[name].shape)
              for name in names]

    def op(waveform, *param_values):
        p = dict(zip(names, param_values))
        latents = feature_encoder(waveform, p, TINY_ENCODER)
        masked, _ = span_mask(latents, p['mask_embedding'], TINY_ENCODER, seed, min_spans=1)
        return transformer_encode(masked, None, p, TINY_ENCODER)
    return op, [rng.standard_normal(TINY_SAMPLES)] + values


def _masked_layout(rng, T, n_masked):
    indices = frozenset(int(i) for i in rng.choice(T, size=n_masked, replace=False))
    return MaskSpec(indices, tuple((i, 1) for i in sorted(indices)))


def _contrastive(seed):
    rng = np.random.default_rng(seed)
    masks = [_masked_layout(rng, 6, 4), _masked_layout(rng, 6, 3)]
    return ((lambda c, q: contrastive_loss(c, q, masks, K=3, kappa=0.5, seed=seed)),
            [rng.standard_normal((2, 6, 8)), rng.standard_normal((2, 6, 8))])


def _diversity(seed):
    rng = np.random.default_rng(seed)
    return (lambda x: diversity_penalty(softmax(x))), [rng.standard_normal((6, 2, 5))]


def _code_probs(seed):
    """Quantizer selection probabilities feeding the diversity penalty."""
    rng = np.random.default_rng(seed)

    def op(latents, weight, bias):
        codebook = Codebook(2, 5, np.zeros((2, 5, 4)), weight, bias)
        _, probs = quantize(latents, codebook, 1.0, seed)
        return diversity_penalty(probs)
    return op, [rng.standard_normal((6, 8)), rng.standard_normal((8, 10)) * 0.5, rng.standard_normal(10) * 0.1]


def _masked_prediction(seed):
    rng = np.random.default_rng(seed)
    mask = _masked_layout(rng, 6, 3)
    labels = rng.integers(0, 5, size=6)
    return ((lambda c, proj: masked_prediction_loss(c, labels, mask, proj)),
            [rng.standard_normal((6, 8)), rng.standard_normal((8, 5)) * 0.5])


def _head(seed):
    rng = np.random.default_rng(seed)
    valid = np.array([[True] * 6, [True] * 4 + [False] * 2])
    targets = np.array([0, 2])
    weights = np.array([1.0, 2.0, 0.5])

    def op(frames, hidden, hidden_bias, out, out_bias):
        logits = mlp_head(mean_pool(frames, valid), HeadParams(hidden, hidden_bias, out, out_bias))
        return weighted_cross_entropy(logits, targets, weights)
    return op, [rng.standard_normal((2, 6, 8)), rng.standard_normal((8, 16)) * 0.3,
                rng.standard_normal(16) * 0.1, rng.standard_normal((16, 3)) * 0.3, rng.standard_normal(3) * 0.1]


def gradient_cases():
    return [
        _simple('add/sub/mul', lambda a, b: a * b + a - b, (3, 4), (4,)),
        GradCase('div', _division),
        GradCase('log/power', _positive_ops),
        _simple('exp', exp, (3, 4)),
        _simple('tanh', tanh, (3, 4)),
        GradCase('clamp_min', _clamp),
        _simple('vector_norm', lambda x: vector_norm(x, axis=-1), (3, 4)),
        GradCase('where', _where),
        _simple('sum/mean', lambda x: tsum(x, axis=0) * tmean(x, axis=1, keepdims=True), (3, 4)),
        _simple('reshape/swapaxes', lambda x: swapaxes(x.reshape(2, 3, 2), 0, 2) ** 2, (3, 4)),
        GradCase('getitem', _getitem),
        _simple('concat', lambda a, b: concat([a, b * b], axis=1), (2, 3), (2, 2)),
        _simple('stack', lambda a, b: stack([a, a * b], axis=1), (2, 3), (2, 3)),
        _simple('matmul', matmul, (2, 3, 4), (4, 5)),
        _simple('linear', linear, (3, 4), (4, 5), (5,)),
        _simple('conv1d', lambda x, k: conv1d(x, k, stride=2), (2, 3, 9), (4, 3, 3)),
        _simple('layer_norm', layer_norm, (3, 5), (5,), (5,)),
        _simple('gelu', gelu, (3, 4)),
        _simple('softmax', softmax, (4, 6)),
        GradCase('softmax(masked)', _masked_softmax),
        _simple('log_softmax', log_softmax, (4, 6)),
        GradCase('weighted_cross_entropy', _cross_entropy),
        _simple('cosine_similarity', cosine_similarity, (3, 4), (1, 4)),
        GradCase('mean_pool', _mean_pool),
        GradCase('gumbel_softmax', _gumbel),
        GradCase('self_attention', _attention),
        GradCase('tiny_encoder', _tiny_encoder),
        GradCase('contrastive_loss', _contrastive),
        GradCase('diversity_penalty', _diversity),
        GradCase('quantizer_probs', _code_probs),
        GradCase('masked_prediction_loss', _masked_prediction),
        GradCase('classifier_head', _head),
    ]


def check_case(case, seeds=DEFAULT_SEEDS, tolerance=GRAD_TOLERANCE):
    worst = 0.0
    for seed in seeds:
        op, inputs = case.build(seed)
        worst = max(worst, grad_check(op, [np.shape(v) for v in inputs], seed, inputs=inputs))
    return CaseResult(case.name, worst, len(seeds), tolerance)


def run_suite(seeds=DEFAULT_SEEDS, names=None, tolerance=GRAD_TOLERANCE):
    """
    Run every case (or those in ``names``) and log one line per case.
    Returns the list of ``CaseResult``.
    """
    cases = gradient_cases()
    if names is not None:
        unknown = set(names) - {case.name for case in cases}
        if unknown:
            raise UsageError(f'unknown gradient cases: {", ".join(sorted(unknown))}')
        cases = [case for case in cases if case.name in names]
    results = []
    for case in cases:
        result = check_case(case, seeds, tolerance)
        log = logger.info if result.passed else logger.error
        log(f'{case.name:<24} max rel err {result.max_error:.2e} over {result.seeds} seeds '
            f'{"ok" if result.passed else "FAIL"}')
        results.append(result)
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f'{len(failed)} of {len(results)} gradient checks failed: {", ".join(failed)}')
    else:
        logger.info(f'All {len(results)} gradient checks passed')
    return results
