import os

from main.commands import BaseRunCommand
from main.exceptions import ConfigError
from main.imaging import load_directory, save_grid

from .checkpoints import load_checkpoint, resolve_codec
from .codecs import CodecSpec
from .sampling import SampleConfig


class FlowCommand(BaseRunCommand):
    """ commands that load a backbone checkpoint and sample from it """

    def sample_config(self, **changes):
        return self.run_config.build(SampleConfig, 'sample', **changes)

    def codec_spec(self):
        return self.run_config.build(CodecSpec, 'codec')

    def codec(self, metadata=None):
        """
        The codec named by the run config. A checkpoint trained in latent mode
        records the codec it was trained with; a mismatch is a config error.
        """
        spec = self.codec_spec()
        if metadata and metadata.get('codec_kind', spec.kind.value) != spec.kind.value:
            raise ConfigError(
                f"checkpoint was trained with codec {metadata['codec_kind']}, config says {spec.kind.value}"
            )
        checkpoint = self.run_config['codec.checkpoint'] or (metadata or {}).get('codec_checkpoint', '')
        return resolve_codec(spec, self.workpath(checkpoint))

    def load_model(self, path):
        model, metadata = load_checkpoint(self.workpath(path))
        self.say(f'loaded {model.config.variant.value} model from {path} ({metadata.get("steps", "?")} steps)')
        return model, metadata

    def load_inputs(self, directory):
        names, grids = load_directory(self.workpath(directory))
        if not names:
            raise ConfigError(f'{directory} holds no images')
        return names, grids

    def write_outputs(self, directory, names, images):
        for name, image in zip(names, images):
            save_grid(os.path.join(directory, f'{name}.png'), image.numpy())
