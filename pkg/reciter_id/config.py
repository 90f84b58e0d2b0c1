"""
Training configuration files.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. Values are typed by ``schema/train_config.json`` and validated
against it, then sizes from the chosen preset in ``presets.yml`` fill the
encoder keys the file leaves unset.
"""
from pathlib import Path
import re

import jsonschema
import yaml

from .encoder import DEFAULT_CONV_LAYERS, EncoderConfig
from .errors import ConfigError
from .trainer import TrainConfig
from .utils import ensure_dir, load_presets, load_schema


DEFAULT_PRESET = 'desk'
EFFECTIVE_CONFIG_FILE = 'effective_config.yml'
ENCODER_KEYS = ('model_dim', 'n_heads', 'n_layers', 'ffn_dim', 'max_positions', 'mask_prob', 'mask_span')

_LINE = re.compile(r'^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$')
_TRUE = {'true', 'yes', 'on', '1'}
_FALSE = {'false', 'no', 'off', '0'}


def _coerce(text, kind, key, line):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in '\'"':
        text = text[1:-1]
    try:
        if kind == 'integer':
            return int(text)
        if kind == 'number':
            return float(text)
        if kind == 'boolean':
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
    except ValueError as e:
        raise ConfigError(f'{key}: cannot read {text!r} as {kind}', line=line) from e
    return text


def read_config_file(path):
    """Typed mapping of the keys set in ``path``."""
    properties = load_schema('train_config.json')['properties']
    values = {}
    for number, raw in enumerate(Path(path).read_text(encoding='utf-8').splitlines(), start=1):
        text = raw.split('#', 1)[0].strip()
        if not text:
            continue
        match = _LINE.match(text)
        if match is None:
            raise ConfigError(f"expected 'key = value', got {text!r}", line=number)
        key, value = match.groups()
        if key not in properties:
            raise ConfigError(f'unknown key {key!r}', line=number)
        if key in values:
            raise ConfigError(f'duplicate key {key!r}', line=number)
        values[key] = _coerce(value, properties[key].get('type'), key, number)
    return values


def validate_config(values):
    validator = jsonschema.Draft7Validator(load_schema('train_config.json'))
    error = next(iter(sorted(validator.iter_errors(values), key=lambda e: list(e.path))), None)
    if error is not None:
        where = '.'.join(str(p) for p in error.path)
        raise ConfigError(f'{where}: {error.message}' if where else error.message)


def build_train_config(values):
    """TrainConfig from a validated flat mapping (preset sizes as defaults)."""
    values = dict(values)
    preset = values.pop('preset', DEFAULT_PRESET)
    presets = load_presets()
    if preset not in presets:
        raise ConfigError(f'unknown preset {preset!r}')
    sizes = dict(presets[preset])
    for key in (*ENCODER_KEYS, 'conv_channels'):
        if key in values:
            sizes[key] = values.pop(key)
    channels = sizes.pop('conv_channels')
    try:
        encoder = EncoderConfig(conv_layers=tuple((channels, w, s) for _, w, s in DEFAULT_CONV_LAYERS),
                                **sizes)
        return TrainConfig(encoder=encoder, **values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_train_config(path=None, overrides=None):
    """
    Config file values, then ``overrides`` (CLI flags, None entries
    ignored), validated and assembled into a ``TrainConfig``.
    """
    values = read_config_file(path) if path is not None else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    validate_config(values)
    return build_train_config(values)


def flatten_config(config):
    """Flat key/value view of ``config`` in the config-file vocabulary."""
    values = config.to_dict()
    encoder = values.pop('encoder')
    for key in ENCODER_KEYS:
        values[key] = encoder[key]
    values['conv_channels'] = encoder['conv_layers'][0][0]
    values['lr'] = config.learning_rate
    return {k: v for k, v in values.items() if v is not None}


def write_effective_config(config, directory):
    path = ensure_dir(directory) / EFFECTIVE_CONFIG_FILE
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(flatten_config(config), f, sort_keys=True, default_flow_style=False)
    return path
