"""Defaults and loading for the training and augmentation configuration.

A config file is a JSON document with optional ``"train"`` and ``"augment"`` sections. Anything left out takes its
default; any key that isn't in the defaults is an error.
"""
import json
from pathlib import Path
import numpy as np
import aljpy

class ConfigError(ValueError):
    pass

TRAIN = aljpy.dotdict(
    initial_lr=.1,
    lr_decay_factor=.5,
    plateau_patience=10,
    early_stop_patience=20,
    tolerance=1e-6,
    batch_size=8,
    max_epochs=100,
    seed=0,
    input_height=88,
    input_width=120,
    alpha=.01,
    train_split='train',
    val_split='val',
    workers=1)

def _op(probability=.5, **ranges):
    return aljpy.dotdict(enabled=True, probability=probability, **ranges)

# Flip first, then the photometric ops, then sun patches last so that the noise doesn't blur the patch edges
ORDER = ('flip', 'gaussian_noise', 'multiply', 'add_rgb', 'add_hsv', 'simplex', 'motion_blur', 'contrast', 'sun')
PHOTOMETRIC = ('gaussian_noise', 'multiply', 'add_rgb', 'add_hsv', 'simplex', 'motion_blur', 'contrast')

AUGMENT = aljpy.dotdict(
    seed=0,
    order=list(ORDER),
    flip=_op(),
    gaussian_noise=_op(sigma=[0., .05]),
    multiply=_op(factor=[.7, 1.3]),
    add_rgb=_op(delta=[-.1, .1]),
    add_hsv=_op(hue=[-.05, .05], saturation=[-.2, .2], value=[-.2, .2]),
    simplex=_op(amplitude=[0., .1], scale=[.02, .1]),
    motion_blur=_op(length=[3, 5, 7, 9], angle=[0., 180.]),
    contrast=_op(alpha=[.5, 1.5]),
    sun=_op(count=[1, 4], factor=[1.1, 1.8]))

# Keys whose values are lists of choices rather than [low, high] ranges
CHOICES = {('motion_blur', 'length')}

# Hard bounds on every augmentation parameter. Configured ranges have to lie inside them, and so does every value
# handed to an op.
LIMITS = {
    ('gaussian_noise', 'sigma'): (0., 1.),
    ('multiply', 'factor'): (0., 4.),
    ('add_rgb', 'delta'): (-1., 1.),
    ('add_hsv', 'hue'): (-1., 1.),
    ('add_hsv', 'saturation'): (-1., 1.),
    ('add_hsv', 'value'): (-1., 1.),
    ('simplex', 'amplitude'): (0., 1.),
    ('simplex', 'scale'): (1e-3, 1.),
    ('motion_blur', 'length'): (1, 31),
    ('motion_blur', 'angle'): (-360., 360.),
    ('contrast', 'alpha'): (0., 4.),
    ('sun', 'count'): (0, 16),
    ('sun', 'factor'): (0., 4.)}

def check_limits(op, key, value):
    """Raises a :class:`ConfigError` unless every entry of ``value`` lies within the bounds for ``op.key``."""
    low, high = LIMITS[(op, key)]
    if not all(low <= v <= high for v in np.ravel(value)):
        raise ConfigError(f'{op}.{key} must lie in [{low}, {high}], got {value}')

def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    return d

def _dotted(d):
    if isinstance(d, dict):
        return aljpy.dotdict({k: _dotted(v) for k, v in d.items()})
    return d

def merge(defaults, overrides, prefix=''):
    """Deep-merges ``overrides`` onto ``defaults``, raising a :class:`ConfigError` on any key not in ``defaults``."""
    if not isinstance(overrides, dict):
        raise ConfigError(f'Config section "{prefix.rstrip(".") or "root"}" should be an object, got {overrides!r}')
    result = _dotted(_plain(defaults))
    for k, v in overrides.items():
        if k not in defaults:
            raise ConfigError(f'Unknown config key "{prefix}{k}"')
        if isinstance(defaults[k], dict):
            result[k] = merge(defaults[k], v, prefix=f'{prefix}{k}.')
        else:
            result[k] = _dotted(v)
    return result

def validate_train(train):
    if not train.initial_lr > 0:
        raise ConfigError(f'initial_lr must be positive, got {train.initial_lr}')
    if not 0 < train.lr_decay_factor < 1:
        raise ConfigError(f'lr_decay_factor must be in (0, 1), got {train.lr_decay_factor}')
    for k in ('plateau_patience', 'early_stop_patience', 'batch_size', 'workers'):
        if not (isinstance(train[k], int) and train[k] >= 1):
            raise ConfigError(f'{k} must be a positive integer, got {train[k]}')
    if train.max_epochs < 0:
        raise ConfigError(f'max_epochs must be non-negative, got {train.max_epochs}')
    if train.input_height % 4 or train.input_width % 4:
        raise ConfigError(f'Input size must be a multiple of 4, got {train.input_height}x{train.input_width}')
    if not 0 < train.alpha < 1:
        raise ConfigError(f'alpha must be in (0, 1), got {train.alpha}')
    return train

def validate_augment(augment):
    unknown = set(augment.order) - set(ORDER)
    if unknown:
        raise ConfigError(f'Unknown augmentations in order: {sorted(unknown)}')
    for name in ORDER:
        op = augment[name]
        if not 0 <= op.probability <= 1:
            raise ConfigError(f'{name}.probability must be in [0, 1], got {op.probability}')
        for k, v in op.items():
            if k in ('enabled', 'probability'):
                continue
            if (name, k) in CHOICES:
                if not isinstance(v, (list, tuple)) or not v:
                    raise ConfigError(f'{name}.{k} needs at least one choice')
            elif not isinstance(v, (list, tuple)) or len(v) != 2 or v[0] > v[1]:
                raise ConfigError(f'{name}.{k} must be a [low, high] range with low <= high, got {v}')
            if (name, k) in LIMITS:
                check_limits(name, k, v)
    return augment

def resolve(overrides={}):
    """Merges a parsed config document onto the defaults and validates the result."""
    unknown = set(overrides) - {'train', 'augment'}
    if unknown:
        raise ConfigError(f'Unknown config key "{sorted(unknown)[0]}"')
    return aljpy.dotdict(
        train=validate_train(merge(TRAIN, overrides.get('train', {}), 'train.')),
        augment=validate_augment(merge(AUGMENT, overrides.get('augment', {}), 'augment.')))

def load_config(path=None):
    """Loads and validates a JSON config file. With no path, returns the defaults."""
    if path is None:
        return resolve()
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f'{path}: {e.msg} at line {e.lineno}, column {e.colno}')
    if not isinstance(doc, dict):
        raise ConfigError(f'{path}: the config should be a JSON object')
    return resolve(doc)

def dumps(config):
    return json.dumps(_plain(config), indent=2)

def test_defaults(tmp_path):
    (tmp_path / 'empty.json').write_text('{}')
    config = load_config(tmp_path / 'empty.json')
    assert config.train.initial_lr == .1
    assert config.train.plateau_patience == 10
    assert config.augment.sun.factor == [1.1, 1.8]
    assert list(config.augment.order) == list(ORDER)

def test_overrides(tmp_path):
    (tmp_path / 'c.json').write_text('{"train": {"plateau_patience": 10, "batch_size": 128}, "augment": {"sun": {"enabled": false}}}')
    config = load_config(tmp_path / 'c.json')
    assert config.train.plateau_patience == 10
    assert config.train.batch_size == 128
    assert config.augment.sun.enabled is False
    assert config.augment.sun.count == [1, 4]
    # The defaults aren't touched
    assert AUGMENT.sun.enabled is True

def test_unknown_key(tmp_path):
    import pytest
    (tmp_path / 'c.json').write_text('{"train": {"batchsize": 128}}')
    with pytest.raises(ConfigError, match='batchsize'):
        load_config(tmp_path / 'c.json')

    for doc in ('{"train": 3}', '{"augment": [1]}', '{"augment": {"sun": true}}'):
        (tmp_path / 'c.json').write_text(doc)
        with pytest.raises(ConfigError, match='should be an object'):
            load_config(tmp_path / 'c.json')

def test_parse_error(tmp_path):
    import pytest
    (tmp_path / 'c.json').write_text('{\n  "train": {,}\n}')
    with pytest.raises(ConfigError, match='line 2'):
        load_config(tmp_path / 'c.json')

def test_validation():
    import pytest
    with pytest.raises(ConfigError):
        resolve({'augment': {'flip': {'probability': 1.5}}})
    with pytest.raises(ConfigError):
        resolve({'augment': {'multiply': {'factor': [1.3, .7]}}})
    with pytest.raises(ConfigError, match='contrast.alpha'):
        resolve({'augment': {'contrast': {'alpha': [.5, 6.]}}})
    with pytest.raises(ConfigError, match='gaussian_noise.sigma'):
        resolve({'augment': {'gaussian_noise': {'sigma': .05}}})
    with pytest.raises(ConfigError):
        resolve({'train': {'lr_decay_factor': 1.}})
