"""
Training loops, training log, checkpoint files and evaluation.

Checkpoint file layout::

    8 bytes   magic b'RIDCKPT\\x00'
    8 bytes   little-endian uint64 header length
    n bytes   UTF-8 JSON header (format version, config snapshot, meta,
              tensor directory of name/shape/offset/nbytes)
    payload   concatenated little-endian float32 tensors
"""
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple, Optional
import json
import os
import math
import struct

import jsonschema
import numpy as np
import pandas as pd
from logzero import logger

from .audio_io import batch_iter, read_wav
from .classify import (DEFAULT_MAX_LEN_S, HeadParams, SpeakerModel, class_weights,
                       forward_logits, init_head)
from .encoder import (EncoderConfig, feature_encoder, frame_valid_mask, init_encoder_params,
                      span_mask_batch, transformer_encode)
from .errors import (CorruptCheckpoint, ConfigError, DivergedLoss, EmptySplit, MissingClass,
                     ShapeMismatch, VersionMismatch)
from .metrics import confusion_matrix, log_confusion, precision_recall_f1
from .numcore import (Adam, Tensor, backward, debug_mode, no_grad, precision,
                      weighted_cross_entropy)
from .objectives import (Codebook, gumbel_temperature, init_codebook, masked_prediction_accuracy,
                         masked_prediction_loss, mfcc_teacher_labels, refine_targets, w2v_loss_terms)
from .utils import config_hash, derive_seed, ensure_dir, file_digest, load_schema


OBJECTIVES = ('w2v', 'hubert', 'finetune')
CHECKPOINT_MAGIC = b'RIDCKPT\x00'
CHECKPOINT_VERSION = 1
BEST_CHECKPOINT = 'best.ckpt'
LAST_CHECKPOINT = 'last.ckpt'
TRAINLOG_FILE = 'trainlog.csv'
LABEL_CACHE_FILE = 'teacher_labels.jsonl'


@dataclass
class TrainConfig:
    objective: str = 'finetune'
    max_iter: int = 500
    batch_size: int = 8
    lr: Optional[float] = None
    seed: int = 0
    eval_interval: int = 10
    patience: int = 10
    max_len_s: float = DEFAULT_MAX_LEN_S
    checkpoint_dir: str = 'checkpoints'
    dtype: str = 'float32'
    debug: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    min_spans: int = 2
    # wav2vec2
    num_distractors: int = 10
    kappa: float = 0.1
    alpha: float = 0.1
    codebook_groups: int = 2
    codebook_entries: int = 32
    gumbel_start: float = 2.0
    gumbel_end: float = 0.5
    gumbel_decay: float = 0.999995
    # HuBERT
    n_clusters: int = 100
    kmeans_iters: int = 100
    cluster_sample: int = 100_000
    refine_layer: int = 1
    # fine-tuning
    weighted_loss: bool = True
    freeze_encoder: bool = False
    head_hidden: Optional[int] = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f'objective must be one of {", ".join(OBJECTIVES)}, got {self.objective!r}')
        if self.max_iter < 1:
            raise ConfigError(f'max_iter must be >= 1, got {self.max_iter}')
        if self.eval_interval < 1:
            raise ConfigError(f'eval_interval must be >= 1, got {self.eval_interval}')
        if self.dtype not in ('float32', 'float64'):
            raise ConfigError(f'dtype must be float32 or float64, got {self.dtype!r}')

    @property
    def learning_rate(self):
        if self.lr is not None:
            return self.lr
        return 1e-3 if self.objective == 'finetune' else 5e-4

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == 'float64' else np.float32

    def to_dict(self):
        values = asdict(self)
        values['encoder'] = self.encoder.to_dict()
        return values

    @classmethod
    def from_dict(cls, mapping):
        values = {f.name: mapping[f.name] for f in fields(cls) if f.name in mapping}
        if 'encoder' in values:
            values['encoder'] = EncoderConfig.from_dict(values['encoder'])
        return cls(**values)


# ---------------------------------------------------------------------------
# Training log
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    """Rows of (step, TL, VL, VA); VL and VA are None between evaluations."""
    rows: list = field(default_factory=list)

    def record(self, step, tl):
        if self.rows and step <= self.rows[-1][0]:
            raise ValueError(f'step {step} does not follow step {self.rows[-1][0]}')
        self.rows.append([int(step), float(tl), None, None])

    def record_validation(self, vl, va):
        self.rows[-1][2] = float(vl)
        self.rows[-1][3] = None if va is None else float(va)

    def __len__(self):
        return len(self.rows)

    @property
    def steps(self):
        return [row[0] for row in self.rows]

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=['step', 'TL', 'VL', 'VA'])

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path):
        df = pd.read_csv(path)
        rows = []
        for step, tl, vl, va in df[['step', 'TL', 'VL', 'VA']].itertuples(index=False):
            rows.append([int(step), float(tl),
                         None if pd.isna(vl) else float(vl),
                         None if pd.isna(va) else float(va)])
        return cls(rows)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: dict
    config: dict
    meta: dict = field(default_factory=dict)
    path: Optional[Path] = None


def _as_array(value):
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def save_checkpoint(tensors, config, path, meta=None):
    """Write ``tensors`` (name -> Tensor or array) as float32 with a JSON header."""
    path = Path(path)
    directory = []
    blobs = []
    offset = 0
    for name, value in tensors.items():
        # 0-d tensors stay 0-d
        blob = np.asarray(_as_array(value), dtype='<f4')
        directory.append({'name': name, 'shape': list(blob.shape), 'offset': offset, 'nbytes': blob.nbytes})
        blobs.append(blob.tobytes())
        offset += blob.nbytes
    header = {
        'format_version': CHECKPOINT_VERSION,
        'config': config.to_dict() if isinstance(config, TrainConfig) else dict(config),
        'meta': dict(meta or {}),
        'tensors': directory,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_bytes(CHECKPOINT_MAGIC + struct.pack('<Q', len(header_bytes)) + header_bytes + b''.join(blobs))
    tmp.replace(path)
    return path


def _read_header(handle, path):
    prefix = handle.read(16)
    if len(prefix) < 16 or prefix[:8] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f'{path}: not a checkpoint file')
    (length,) = struct.unpack('<Q', prefix[8:])
    if 16 + length > os.fstat(handle.fileno()).st_size:
        raise CorruptCheckpoint(f'{path}: header runs past end of file')
    raw = handle.read(length)
    if len(raw) != length:
        raise CorruptCheckpoint(f'{path}: header truncated')
    try:
        header = json.loads(raw.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f'{path}: unreadable header') from e
    if not isinstance(header, dict):
        raise CorruptCheckpoint(f'{path}: header is not a JSON object')
    version = header.get('format_version')
    if isinstance(version, int) and version != CHECKPOINT_VERSION:
        raise VersionMismatch(f'{path}: format version {version}, expected {CHECKPOINT_VERSION}')
    error = next(iter(jsonschema.Draft7Validator(load_schema('checkpoint_header.json')).iter_errors(header)), None)
    if error is not None:
        raise CorruptCheckpoint(f'{path}: bad header: {error.message}')
    expected = 0
    for entry in header['tensors']:
        # the schema lets integral floats such as 1e0 through
        if any(type(v) is not int for v in (*entry['shape'], entry['offset'], entry['nbytes'])):
            raise CorruptCheckpoint(f'{path}: directory entry {entry["name"]!r} has non-integer sizes')
        count = math.prod(entry['shape'])
        if entry['offset'] != expected or entry['nbytes'] != 4 * count:
            raise CorruptCheckpoint(f'{path}: directory entry {entry["name"]!r} is inconsistent')
        expected += entry['nbytes']
    header['payload_bytes'] = expected
    return header


def read_checkpoint_header(path):
    """Header of a checkpoint (tensor names, shapes, config) without the payload."""
    with open(path, 'rb') as f:
        return _read_header(f, path)


def load_checkpoint(path):
    """
    Raises
    ------
    CorruptCheckpoint, VersionMismatch
    """
    with open(path, 'rb') as f:
        header = _read_header(f, path)
        payload = f.read()
    if len(payload) != header['payload_bytes']:
        raise CorruptCheckpoint(f'{path}: payload has {len(payload)} bytes, '
                                f'directory needs {header["payload_bytes"]}')
    tensors = {}
    for entry in header['tensors']:
        chunk = payload[entry['offset']:entry['offset'] + entry['nbytes']]
        tensors[entry['name']] = np.frombuffer(chunk, dtype='<f4').reshape(entry['shape']).copy()
    return Checkpoint(tensors, header['config'], header['meta'], Path(path))


def _load_params(params, checkpoint, names=None):
    """Copy checkpoint tensors into ``params`` where names match."""
    for name, value in checkpoint.tensors.items():
        if name not in params or (names is not None and name not in names):
            continue
        if params[name].shape != value.shape:
            raise ShapeMismatch(f'checkpoint tensor {name} has shape {value.shape}, '
                                f'model expects {params[name].shape}')
        params[name] = Tensor(value, requires_grad=True)
    return params


def load_model(path):
    """Rebuild a ``SpeakerModel`` from a fine-tuning checkpoint."""
    checkpoint = path if isinstance(path, Checkpoint) else load_checkpoint(path)
    config = TrainConfig.from_dict(checkpoint.config)
    labels = checkpoint.meta.get('labels')
    if not labels:
        raise CorruptCheckpoint(f'{checkpoint.path}: no label list; not a fine-tuned model')
    params = init_encoder_params(config.encoder, 0)
    missing = sorted(set(params) - set(checkpoint.tensors))
    if missing:
        raise CorruptCheckpoint(f'{checkpoint.path}: missing encoder tensors {", ".join(missing[:5])}')
    _load_params(params, checkpoint)
    head = HeadParams.from_parameters(
        {name: Tensor(value) for name, value in checkpoint.tensors.items() if name.startswith('head.')})
    return SpeakerModel(config.encoder, params, head, list(labels),
                        checkpoint.meta.get('max_len_s', config.max_len_s))


# ---------------------------------------------------------------------------
# Teacher label cache
# ---------------------------------------------------------------------------

def save_label_cache(path, labels, key):
    lines = [json.dumps({'config_hash': key})]
    lines += [json.dumps({'path': p, 'labels': [int(v) for v in seq]}) for p, seq in labels.items()]
    Path(path).write_text(''.join(line + '\n' for line in lines), encoding='utf-8')


def load_label_cache(path, key):
    """Cached labels, or None when missing or built with another config."""
    path = Path(path)
    if not path.is_file():
        return None
    with open(path, 'r', encoding='utf-8') as f:
        records = [json.loads(line) for line in f if line.strip()]
    if not records or records[0].get('config_hash') != key:
        logger.info(f'Teacher label cache {path} is stale')
        return None
    return {r['path']: np.asarray(r['labels'], dtype=np.int64) for r in records[1:]}


def _teacher_labels(config, manifest, loader, source=None):
    encoder = config.encoder
    key = config_hash({
        'source': source.digest if source else 'mfcc', 'k': config.n_clusters, 'iters': config.kmeans_iters,
        'seed': config.seed, 'sample': config.cluster_sample, 'hop': encoder.hop,
        'receptive_field': encoder.receptive_field, 'layer': config.refine_layer if source else None,
        'entries': [(e.path, e.split, file_digest(manifest.resolve(e))) for e in manifest.entries],
    })
    cache = Path(config.checkpoint_dir) / LABEL_CACHE_FILE
    labels = load_label_cache(cache, key)
    if labels is not None:
        logger.info(f'Using cached teacher labels from {cache}')
        return labels
    if source is None:
        labels = mfcc_teacher_labels(manifest, encoder, config.n_clusters,
                                     derive_seed(config.seed, 6), config.kmeans_iters,
                                     loader=loader, sample_limit=config.cluster_sample)
    else:
        labels = refine_targets(source.params, encoder, manifest, config.refine_layer,
                                config.n_clusters, derive_seed(config.seed, 7),
                                config.kmeans_iters, loader=loader,
                                sample_limit=config.cluster_sample)
    save_label_cache(cache, labels, key)
    return labels


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------

class _Refinement(NamedTuple):
    params: dict
    digest: str


def _cached_loader():
    return lru_cache(maxsize=None)(read_wav)


def _batch_stream(manifest, config, offset_quantum, loader):
    epoch = 0
    while True:
        yield from batch_iter(manifest, 'train', config.batch_size, config.max_len_s,
                              derive_seed(config.seed, 3, epoch), True, offset_quantum, loader)
        epoch += 1


def _encode_masked(params, encoder, batch, seed, min_spans):
    latents = feature_encoder(Tensor(batch.waveforms), params, encoder)
    n_frames = latents.shape[-2]
    valid = frame_valid_mask(batch.lengths, encoder, n_frames)
    seeds = [derive_seed(seed, 0, b) for b in range(len(batch.lengths))]
    masked, specs = span_mask_batch(latents, params['mask_embedding'], encoder, seeds,
                                    valid.sum(axis=1), min_spans)
    context = transformer_encode(masked, valid, params, encoder)
    return latents, context, valid, specs


def _batch_labels(labels, batch, n_frames, hop):
    out = np.zeros((len(batch.paths), n_frames), dtype=np.int64)
    for row, (path, offset) in enumerate(zip(batch.paths, batch.offsets)):
        start = int(offset) // hop
        seq = labels[path][start:start + n_frames]
        out[row, :seq.size] = seq
    return out


def _pretrain_loss(config, params, batch, seed, step, labels):
    """(loss, accuracy) of one pretraining batch."""
    latents, context, valid, specs = _encode_masked(params, config.encoder, batch, seed,
                                                    config.min_spans)
    if config.objective == 'w2v':
        terms = w2v_loss_terms(context, latents, Codebook.from_parameters(params), specs,
                               config.num_distractors, config.kappa, config.alpha,
                               gumbel_temperature(step, config.gumbel_start, config.gumbel_end,
                                                  config.gumbel_decay),
                               derive_seed(seed, 1), valid)
        return terms.total, terms.accuracy
    targets = _batch_labels(labels, batch, context.shape[-2], config.encoder.hop)
    loss = masked_prediction_loss(context, targets, specs, params['hubert.proj'])
    return loss, masked_prediction_accuracy(context, targets, specs, params['hubert.proj'])


def pretrain_validation(config, params, manifest, labels=None, loader=read_wav):
    """
    Mean pretraining loss and accuracy over the val split, with masks fixed
    per val batch and the Gumbel temperature of the last step.
    """
    losses, accuracies = [], []
    with no_grad():
        for index, batch in enumerate(batch_iter(manifest, 'val', config.batch_size, config.max_len_s,
                                                 config.seed, train=False, loader=loader)):
            loss, accuracy = _pretrain_loss(config, params, batch, derive_seed(config.seed, 5, index),
                                            config.max_iter, labels)
            losses.append(float(loss.item()))
            accuracies.append(accuracy)
    return float(np.mean(losses)), float(np.mean(accuracies))


def _diverged(config, params, log, step, meta):
    directory = Path(config.checkpoint_dir)
    path = save_checkpoint(params, config, directory / LAST_CHECKPOINT, dict(meta, step=max(step - 2, 0)))
    log.write_csv(directory / TRAINLOG_FILE)
    raise DivergedLoss(f'training loss is not finite at step {step}; last good parameters in {path}',
                       step=step, checkpoint_path=path)


def _train(config, params, trainable, step_loss, validate, meta):
    """
    Shared loop: Adam steps on ``trainable``, validation every
    ``eval_interval`` steps, best-VL checkpoint, early stopping after
    ``patience`` evaluations without improvement (fine-tuning only).
    """
    directory = ensure_dir(config.checkpoint_dir)
    (directory / BEST_CHECKPOINT).unlink(missing_ok=True)
    optimizer = Adam(trainable, lr=config.learning_rate)
    log = TrainLog()
    best_vl = math.inf
    stale = 0
    last_good = {name: p.data.copy() for name, p in params.items()}
    for step in range(1, config.max_iter + 1):
        snapshot = {name: p.data.copy() for name, p in params.items()}
        optimizer.zero_grad()
        loss = step_loss(step)
        tl = float(loss.item())
        if not math.isfinite(tl):
            _diverged(config, last_good, log, step, meta)
        last_good = snapshot
        backward(loss)
        optimizer.step()
        log.record(step, tl)
        if step % config.eval_interval and step != config.max_iter:
            continue
        vl, va = validate()
        log.record_validation(vl, va)
        logger.info(f'step {step}/{config.max_iter}: TL={tl:.4f} VL={vl:.4f} VA={va:.4f}')
        if vl < best_vl:
            best_vl = vl
            stale = 0
            save_checkpoint(params, config, directory / BEST_CHECKPOINT,
                            dict(meta, step=step, VL=vl, VA=va))
        else:
            stale += 1
            if config.objective == 'finetune' and stale >= config.patience:
                logger.info(f'Early stop at step {step}: VL has not improved for {stale} evaluations')
                break
    save_checkpoint(params, config, directory / LAST_CHECKPOINT, dict(meta, step=log.steps[-1]))
    log.write_csv(directory / TRAINLOG_FILE)
    best = directory / BEST_CHECKPOINT
    return load_checkpoint(best if best.is_file() else directory / LAST_CHECKPOINT), log


def pretrain(config, manifest, refine_from=None, loader=None):
    """
    Self-supervised pretraining with the wav2vec2 (``w2v``) or HuBERT
    (``hubert``) objective. ``refine_from`` (a HuBERT checkpoint) selects the
    second iteration: targets come from its hidden states at
    ``config.refine_layer`` and training continues from its parameters.
    """
    if config.objective not in ('w2v', 'hubert'):
        raise ConfigError(f'pretrain needs objective w2v or hubert, got {config.objective!r}')
    if refine_from is not None and config.objective != 'hubert':
        raise ConfigError('target refinement applies to the hubert objective only')
    loader = loader or _cached_loader()
    ensure_dir(config.checkpoint_dir)
    with precision(config.np_dtype), debug_mode(config.debug):
        if refine_from is not None:
            source = refine_from if isinstance(refine_from, Checkpoint) else load_checkpoint(refine_from)
            config = replace(config, encoder=EncoderConfig.from_dict(source.config['encoder']))
        params = init_encoder_params(config.encoder, derive_seed(config.seed, 1))
        labels = None
        if config.objective == 'w2v':
            codebook = init_codebook(config.encoder.model_dim, derive_seed(config.seed, 2),
                                     config.codebook_groups, config.codebook_entries)
            params.update(codebook.parameters())
        else:
            if refine_from is not None:
                _load_params(params, source)
                refinement = _Refinement(params, config_hash(source.meta) + str(source.path))
                labels = _teacher_labels(config, manifest, loader, refinement)
            else:
                labels = _teacher_labels(config, manifest, loader)
            rng = np.random.default_rng(derive_seed(config.seed, 2))
            d = config.encoder.model_dim
            params['hubert.proj'] = Tensor(rng.standard_normal((d, config.n_clusters)) / math.sqrt(d),
                                           requires_grad=True)
        logger.info(f'Pretraining ({config.objective}) for {config.max_iter} steps, '
                    f'{len(manifest.in_split("train"))} training clips')
        stream = _batch_stream(manifest, config, config.encoder.hop, loader)

        def step_loss(step):
            return _pretrain_loss(config, params, next(stream), derive_seed(config.seed, 4, step),
                                  step, labels)[0]

        def validate():
            return pretrain_validation(config, params, manifest, labels, loader)

        meta = {'objective': config.objective, 'refined': refine_from is not None}
        return _train(config, params, list(params.values()), step_loss, validate, meta)


def finetune_validation(model, manifest, weights, config, loader=read_wav):
    """(weighted CE, accuracy) over the val split, first ``max_len_s`` seconds per clip."""
    logits, targets = [], []
    with no_grad():
        for batch in batch_iter(manifest, 'val', config.batch_size, config.max_len_s,
                                config.seed, train=False, loader=loader):
            logits.append(forward_logits(model, batch.waveforms, batch.lengths).data)
            targets.append(batch.class_ids)
        logits = np.concatenate(logits)
        targets = np.concatenate(targets)
        loss = weighted_cross_entropy(Tensor(logits), targets, weights)
    return float(loss.item()), float(np.mean(logits.argmax(axis=1) == targets))


def finetune(config, manifest, init=None, loader=None):
    """
    Supervised training of encoder and head with (weighted) cross-entropy.
    ``init`` may be a pretraining checkpoint; its encoder tensors are
    loaded and its encoder sizes take precedence over ``config.encoder``.
    """
    if config.objective != 'finetune':
        raise ConfigError(f'finetune needs objective finetune, got {config.objective!r}')
    loader = loader or _cached_loader()
    with precision(config.np_dtype), debug_mode(config.debug):
        if init is not None:
            init = init if isinstance(init, Checkpoint) else load_checkpoint(init)
            config = replace(config, encoder=EncoderConfig.from_dict(init.config['encoder']))
        params = init_encoder_params(config.encoder, derive_seed(config.seed, 1))
        if init is not None:
            _load_params(params, init)
        head = init_head(config.encoder.model_dim, manifest.n_classes, derive_seed(config.seed, 2),
                         config.head_hidden)
        model = SpeakerModel(config.encoder, params, head, manifest.labels, config.max_len_s)
        if config.weighted_loss:
            weights = class_weights(manifest, 'train')
        else:
            weights = Tensor(np.ones(manifest.n_classes))
        logger.info(f'Fine-tuning on {len(manifest.in_split("train"))} clips, '
                    f'{manifest.n_classes} speakers, class weights {np.round(weights.data, 3).tolist()}')
        trainable = list(head.parameters().values())
        if config.freeze_encoder:
            for tensor in params.values():
                tensor.requires_grad = False
        else:
            trainable = list(params.values()) + trainable
        stream = _batch_stream(manifest, config, 1, loader)

        def step_loss(step):
            batch = next(stream)
            logits = forward_logits(model, batch.waveforms, batch.lengths)
            return weighted_cross_entropy(logits, batch.class_ids, weights)

        def validate():
            return finetune_validation(model, manifest, weights, config, loader)

        meta = {'objective': 'finetune', 'labels': list(manifest.labels), 'max_len_s': config.max_len_s}
        return _train(config, model.parameters(), trainable, step_loss, validate, meta)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

class Evaluation(NamedTuple):
    report: object
    confusion: object
    predictions: list


def evaluate_detailed(model, manifest, split='test', batch_size=8, loader=read_wav):
    """
    Speaker decisions for every clip of ``split`` in manifest order, with
    the confusion matrix, metrics and per-clip prediction records.
    """
    entries = manifest.in_split(split)
    if not entries:
        raise EmptySplit(f'split {split!r} is empty')
    unknown = sorted({e.speaker for e in entries} - set(model.label_index))
    if unknown:
        raise MissingClass(f'speakers unknown to the model: {", ".join(unknown)}')
    preds, targets, records = [], [], []
    with no_grad():
        for batch in batch_iter(manifest, split, batch_size, model.max_len_s, 0, train=False, loader=loader):
            logits = forward_logits(model, batch.waveforms, batch.lengths).data
            preds.extend(int(p) for p in logits.argmax(axis=1))
    for entry, predicted in zip(entries, preds):
        target = model.label_index[entry.speaker]
        targets.append(target)
        records.append((entry.path, entry.speaker, model.labels[predicted]))
    cm = confusion_matrix(preds, targets, len(model.labels), model.labels)
    log_confusion(cm, title=f'Confusion matrix ({split})')
    return Evaluation(precision_recall_f1(cm), cm, records)


def evaluate(model, manifest, split='test', batch_size=8, loader=read_wav):
    return evaluate_detailed(model, manifest, split, batch_size, loader).report
