"""
Run configuration.

A run config file is flat `key = value` text. Keys are the dotted names of
settings.FLOWRESTORE_DEFAULTS; values are coerced to the type of the default.
Unknown keys are rejected before anything is written to disk.
"""
import dataclasses
import hashlib
import os
from enum import Enum

from django.conf import settings

from .exceptions import ConfigError

CONFIG_FILE_NAME = 'config.txt'

TRUE_WORDS = ('1', 'true', 'yes', 'on')
FALSE_WORDS = ('0', 'false', 'no', 'off')


def parse_config_text(text, source='<config>'):
    """ split `key = value` lines into a dict of raw strings """
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f'{source}:{line_no}: expected `key = value`, got {line!r}')
        key, value = (part.strip() for part in line.split('=', 1))
        if not key:
            raise ConfigError(f'{source}:{line_no}: empty key')
        if key in values:
            raise ConfigError(f'{source}:{line_no}: duplicate key {key!r}')
        values[key] = value
    return values


def coerce_value(key, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        word = str(value).strip().lower()
        if word in TRUE_WORDS:
            return True
        if word in FALSE_WORDS:
            return False
        raise ConfigError(f'{key}: expected a boolean, got {value!r}')

    if isinstance(default, tuple):
        if isinstance(value, str):
            items = [item for item in value.replace(',', ' ').split() if item]
        else:
            items = list(value)
        item_type = type(default[0]) if default else str
        try:
            return tuple(item_type(item) for item in items)
        except (TypeError, ValueError):
            raise ConfigError(f'{key}: expected a list of {item_type.__name__}, got {value!r}')

    try:
        if isinstance(default, int):
            # accept `3.0` style ints written by hand, reject real fractions
            number = float(value)
            if not number.is_integer():
                raise ValueError
            return int(number)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f'{key}: expected {type(default).__name__}, got {value!r}')

    return str(value).strip()


def format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ', '.join(format_value(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """ resolved, typed view over FLOWRESTORE_DEFAULTS plus file and flag overrides """

    def __init__(self, values):
        self._values = dict(values)

    @classmethod
    def defaults(cls):
        return cls(settings.FLOWRESTORE_DEFAULTS)

    @classmethod
    def resolve(cls, path=None, overrides=None, text=None):
        defaults = settings.FLOWRESTORE_DEFAULTS
        raw = {}
        if path:
            try:
                with open(path, encoding='utf-8') as config_file:
                    text = config_file.read()
            except OSError as exc:
                raise ConfigError(f'cannot read config file {path}: {exc}')
        if text is not None:
            raw.update(parse_config_text(text, source=path or '<config>'))

        for key, value in (overrides or {}).items():
            if value is not None:
                raw[key] = value

        unknown = sorted(set(raw) - set(defaults))
        if unknown:
            raise ConfigError('unknown config keys: ' + ', '.join(unknown))

        values = dict(defaults)
        for key, value in raw.items():
            values[key] = coerce_value(key, value, defaults[key])

        if values['schema_version'] != settings.FLOWRESTORE_SCHEMA_VERSION:
            raise ConfigError(
                f"schema_version {values['schema_version']} is not supported "
                f'(expected {settings.FLOWRESTORE_SCHEMA_VERSION})'
            )
        return cls(values)

    def __getitem__(self, key):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f'unknown config key {key!r}')

    def __contains__(self, key):
        return key in self._values

    def section(self, prefix):
        """ `model.depth` -> {'depth': ...} for prefix 'model' """
        head = prefix + '.'
        return {
            key[len(head):]: value
            for key, value in self._values.items()
            if key.startswith(head)
        }

    def build(self, cls, prefix, **extra):
        """ instantiate a config dataclass from the `prefix.` keys it declares """
        names = {field.name for field in dataclasses.fields(cls)}
        values = {key: value for key, value in self.section(prefix).items() if key in names}
        values.update(extra)
        try:
            return cls(**values)
        except ValueError as exc:
            raise ConfigError(f'{prefix}: {exc}')

    def replace(self, **changes):
        values = dict(self._values)
        for dotted, value in changes.items():
            key = dotted.replace('__', '.')
            if key not in values:
                raise ConfigError(f'unknown config key {key!r}')
            values[key] = coerce_value(key, value, values[key])
        return RunConfig(values)

    def to_text(self):
        lines = [f'{key} = {format_value(self._values[key])}' for key in sorted(self._values)]
        return '\n'.join(lines) + '\n'

    def fingerprint(self):
        return hashlib.sha256(self.to_text().encode('utf-8')).hexdigest()[:16]

    def echo(self, directory):
        """ write the resolved config next to the outputs it produced """
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, CONFIG_FILE_NAME)
        with open(path, 'w', encoding='utf-8') as config_file:
            config_file.write(self.to_text())
        return path


def read_echoed_config(directory):
    """ reload the config a previous command echoed into `directory` """
    return RunConfig.resolve(path=os.path.join(directory, CONFIG_FILE_NAME))


def dataclass_to_text(instance):
    lines = []
    for field in dataclasses.fields(instance):
        value = getattr(instance, field.name)
        if isinstance(value, Enum):
            value = value.value
        lines.append(f'{field.name} = {format_value(value)}')
    return '\n'.join(lines) + '\n'


def dataclass_from_text(cls, text):
    """ inverse of dataclass_to_text; every field of `cls` must have a default """
    raw = parse_config_text(text, source=cls.__name__)
    template = cls()
    names = {field.name for field in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f'{cls.__name__}: unknown keys ' + ', '.join(unknown))

    values = {}
    for key, value in raw.items():
        default = getattr(template, key)
        if isinstance(default, Enum):
            default = default.value
        values[key] = coerce_value(key, value, default)
    return cls(**values)
