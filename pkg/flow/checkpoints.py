"""
Checkpoint archives.

One torch.save archive per model:
    kind        'backbone' or 'codec'
    config      ModelConfig / CodecSpec as `key = value` text
    metadata    free-form `key = value` text (optimizer, variant, steps, ...)
    parameters  ordered mapping of parameter name -> tensor
"""
import pickle
from collections import OrderedDict

import torch

from main.config import format_value, parse_config_text
from main.exceptions import CheckpointError, ParameterError, ShapeError

from .codecs import CodecKind, CodecSpec, build_codec, freeze
from .networks import I2IFlowTransformer, ModelConfig

BACKBONE = 'backbone'
CODEC = 'codec'
ARCHIVE_KEYS = ('kind', 'config', 'metadata', 'parameters')


def metadata_to_text(metadata):
    return ''.join(f'{key} = {format_value(metadata[key])}\n' for key in sorted(metadata))


def save_archive(path, kind, config_text, module, metadata=None):
    parameters = OrderedDict(
        (name, tensor.detach().cpu().clone())
        for name, tensor in module.state_dict().items()
    )
    archive = {
        'kind': kind,
        'config': config_text,
        'metadata': metadata_to_text(metadata or {}),
        'parameters': parameters,
    }
    torch.save(archive, path)
    return path


def read_archive(path, kind):
    try:
        archive = torch.load(path, map_location='cpu', weights_only=True)
    except (pickle.UnpicklingError, RuntimeError, EOFError, ValueError) as exc:
        raise CheckpointError(f'{path} is not a readable checkpoint archive: {exc}')
    if not isinstance(archive, dict):
        raise CheckpointError(f'{path} holds a {type(archive).__name__}, not a checkpoint archive')
    if archive.get('kind') != kind:
        raise ParameterError(f'{path} holds a {archive.get("kind")!r} checkpoint, expected {kind!r}')
    missing = [key for key in ARCHIVE_KEYS if key not in archive]
    if missing:
        raise CheckpointError(f'{path} lacks archive entries: {", ".join(missing)}')
    return archive


def load_parameters(module, parameters, path):
    """ strict load that reports every config-to-shape inconsistency at once """
    expected = module.state_dict()
    problems = []
    for name in sorted(set(expected) | set(parameters)):
        if name not in parameters:
            problems.append(f'missing {name}')
        elif name not in expected:
            problems.append(f'unexpected {name}')
        elif tuple(parameters[name].shape) != tuple(expected[name].shape):
            problems.append(
                f'{name}: stored {tuple(parameters[name].shape)}, config implies {tuple(expected[name].shape)}'
            )
    if problems:
        raise ShapeError(f'{path} does not match its stored config: ' + '; '.join(problems))
    try:
        module.load_state_dict(parameters, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f'{path}: {exc}')
    return module


def save_checkpoint(path, model, metadata=None):
    return save_archive(path, BACKBONE, model.config.to_text(), model, metadata)


def load_checkpoint(path):
    """ -> (model in eval mode, metadata dict) """
    archive = read_archive(path, BACKBONE)
    config = ModelConfig.from_text(archive['config'])
    model = load_parameters(I2IFlowTransformer(config), archive['parameters'], path)
    model.eval()
    return model, parse_config_text(archive['metadata'], source=path)


def save_codec(path, codec, metadata=None):
    return save_archive(path, CODEC, codec.spec.to_text(), codec, metadata)


def load_codec(path):
    archive = read_archive(path, CODEC)
    spec = CodecSpec.from_text(archive['config'])
    codec = load_parameters(build_codec(spec), archive['parameters'], path)
    return freeze(codec)


def resolve_codec(spec, checkpoint_path=''):
    """ the codec a run should use: identity needs no weights, the autoencoder does """
    if checkpoint_path:
        codec = load_codec(checkpoint_path)
        if codec.spec != spec:
            raise ParameterError(f'codec checkpoint {checkpoint_path} was trained for {codec.spec}, not {spec}')
        return codec
    if spec.kind is not CodecKind.IDENTITY:
        raise ParameterError('the strided autoencoder codec needs codec.checkpoint (see train_codec)')
    return freeze(build_codec(spec))
