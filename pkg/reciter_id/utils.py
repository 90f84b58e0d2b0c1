from pathlib import Path
import importlib.resources as pkg_resources
import hashlib
import json

import numpy as np
import yaml

from . import schema


def load_schema(name):
    """Load a JSON schema shipped in the ``schema`` sub-package."""
    with pkg_resources.files(schema).joinpath(name).open('r', encoding='utf-8') as f:
        return json.load(f)


def load_presets():
    """Model-size presets from presets.yml."""
    with pkg_resources.files(__package__).joinpath('presets.yml').open('r', encoding='utf-8') as f:
        return yaml.safe_load(f)


def derive_seed(*keys):
    """Deterministic 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def config_hash(mapping):
    """Stable short hash of a JSON-serialisable mapping."""
    text = json.dumps(mapping, sort_keys=True, default=str)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]


def ensure_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def file_digest(path):
    """sha256 of a file's bytes, or None when it does not exist."""
    path = Path(path)
    if not path.is_file():
        return None
    return hashlib.sha256(path.read_bytes()).hexdigest()
