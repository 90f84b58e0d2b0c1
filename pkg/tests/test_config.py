import pytest
import yaml

from reciter_id.config import (EFFECTIVE_CONFIG_FILE, flatten_config, load_train_config, read_config_file,
                               write_effective_config)
from reciter_id.errors import ConfigError
from reciter_id.trainer import TrainConfig


def _write(tmp_path, text):
    path = tmp_path / 'train.cfg'
    path.write_text(text, encoding='utf-8')
    return path


def test_read_and_coerce(tmp_path):
    path = _write(tmp_path, '# comment\n'
                            'objective = hubert\n'
                            'max_iter = 20   # inline comment\n'
                            '\n'
                            'lr = 2e-4\n'
                            'weighted_loss = no\n'
                            'checkpoint_dir = "runs/a b"\n')
    assert read_config_file(path) == {'objective': 'hubert', 'max_iter': 20, 'lr': 2e-4,
                                      'weighted_loss': False, 'checkpoint_dir': 'runs/a b'}


@pytest.mark.parametrize('text, line', [
    ('max_iter = 5\nbogus_key = 1\n', 2),
    ('max_iter = 5\nmax_iter = 6\n', 2),
    ('max_iter = five\n', 1),
    ('seed = 1\n\nthis is not a pair\n', 3),
    ('debug = maybe\n', 1),
])
def test_read_errors_carry_line(tmp_path, text, line):
    with pytest.raises(ConfigError) as info:
        read_config_file(_write(tmp_path, text))
    assert info.value.line == line


@pytest.mark.parametrize('text', [
    'max_iter = 0\n',
    'mask_prob = 1.5\n',
    'objective = supervised\n',
    'preset = huge\n',
    'lr = 0\n',
])
def test_schema_rejects_out_of_range(tmp_path, text):
    with pytest.raises(ConfigError):
        load_train_config(_write(tmp_path, text))


def test_defaults_use_desk_preset():
    config = load_train_config()
    assert isinstance(config, TrainConfig)
    assert config.objective == 'finetune'
    assert config.encoder.model_dim == 64
    assert config.encoder.n_layers == 2
    assert config.encoder.hop == 320
    assert all(channels == 64 for channels, _, _ in config.encoder.conv_layers)


def test_preset_and_explicit_sizes(tmp_path):
    config = load_train_config(_write(tmp_path, 'preset = base\nn_layers = 3\nconv_channels = 32\n'))
    assert config.encoder.model_dim == 768
    assert config.encoder.n_heads == 12
    assert config.encoder.n_layers == 3
    assert config.encoder.conv_layers[0] == (32, 10, 5)


def test_inconsistent_sizes_are_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_train_config(_write(tmp_path, 'model_dim = 10\nn_heads = 4\n'))


def test_overrides_win(tmp_path):
    path = _write(tmp_path, 'seed = 1\nmax_iter = 50\ncheckpoint_dir = runs/x\n')
    config = load_train_config(path, {'seed': 7, 'max_iter': None, 'objective': 'w2v'})
    assert config.seed == 7
    assert config.max_iter == 50
    assert config.objective == 'w2v'
    assert config.checkpoint_dir == 'runs/x'
    assert config.learning_rate == 5e-4


def test_effective_config_written(tmp_path):
    config = load_train_config(_write(tmp_path, 'preset = desk\nmodel_dim = 32\nseed = 3\n'))
    path = write_effective_config(config, tmp_path / 'run')
    assert path == tmp_path / 'run' / EFFECTIVE_CONFIG_FILE
    values = yaml.safe_load(path.read_text())
    assert values == flatten_config(config)
    assert values['model_dim'] == 32 and values['seed'] == 3 and values['lr'] == 1e-3

    reloaded = load_train_config(None, values)
    assert reloaded.encoder == config.encoder
    assert flatten_config(reloaded) == values


def test_train_config_direct_validation():
    with pytest.raises(ConfigError):
        TrainConfig(objective='nope')
    with pytest.raises(ConfigError):
        TrainConfig(max_iter=0)
    with pytest.raises(ConfigError):
        TrainConfig(eval_interval=0)
    with pytest.raises(ConfigError):
        TrainConfig(dtype='float16')
