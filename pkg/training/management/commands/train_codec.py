import os

import numpy as np
import torch

from main.exceptions import ConfigError

from evaluation.reports import paired_scores
from flow.checkpoints import save_codec
from flow.codecs import CodecKind, build_codec, train_autoencoder
from flow.commands import FlowCommand
from motion.datasets import load_manifest

CODEC_NAME = 'codec.pt'


def clean_stack(manifest):
    grids = [manifest.load_pair(record)[0] for record in manifest.records]
    return torch.from_numpy(np.stack(grids).astype(np.float32))[:, None]


class Command(FlowCommand):
    help = 'Pretrain and freeze the strided autoencoder codec on the clean training images'
    config_flags = {
        'steps': 'codec.train_steps',
        'factor': 'codec.spatial_factor',
        'channels': 'codec.latent_channels',
    }

    def add_run_arguments(self, parser):
        parser.add_argument('--dataset', required=True)
        parser.add_argument('--out', required=True)
        parser.add_argument('--steps', type=int)
        parser.add_argument('--factor', type=int, help='spatial downsampling factor, a power of two')
        parser.add_argument('--channels', type=int, help='latent channels')

    def resolve_config(self, options):
        return super().resolve_config(options).replace(codec__kind=CodecKind.STRIDED_AE.value)

    def run(self):
        spec = self.codec_spec()
        dataset = self.workpath(self.options['dataset'])
        train = load_manifest(dataset, 'train')
        if not len(train):
            raise ConfigError(f'{dataset} has no training pairs')
        images = clean_stack(train)

        out_dir = self.prepare_output(self.workpath(self.options['out']))
        codec, loss = train_autoencoder(
            build_codec(spec), images,
            steps=self.run_config['codec.train_steps'],
            lr=self.run_config['codec.lr'],
            batch_size=self.run_config['train.batch_size'],
            seed=self.run_config['train.seed'],
        )
        metadata = {'steps': self.run_config['codec.train_steps'], 'final_l1': loss}

        val = load_manifest(dataset, 'val')
        if len(val):
            references = clean_stack(val)
            with torch.no_grad():
                reconstructions = codec.decode(codec.encode(references))
            ssims, maes = paired_scores(reconstructions[:, 0].numpy(), references[:, 0].numpy())
            metadata.update(val_ssim=float(ssims.mean()), val_mae=float(maes.mean()))
            self.say(f'val reconstruction: ssim {ssims.mean():.4f}, mae {maes.mean():.4f}')

        path = save_codec(os.path.join(out_dir, CODEC_NAME), codec, metadata)
        self.success(f'codec {spec.kind.value} x{spec.spatial_factor} saved to {path} (l1 {loss:.5f})')
