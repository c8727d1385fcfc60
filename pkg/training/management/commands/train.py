from main.exceptions import ConfigError

from flow.commands import FlowCommand
from flow.networks import ModelConfig, Variant
from motion.datasets import load_manifest
from training.trainer import TrainConfig, fit


class Command(FlowCommand):
    help = 'Train a PRIMARY or BIS flow-matching backbone on a gated paired dataset'
    config_flags = {
        'variant': 'model.variant',
        'seed': 'train.seed',
        'epochs': 'train.epochs',
        'max_steps': 'train.max_steps',
        'batch_size': 'train.batch_size',
    }

    def add_run_arguments(self, parser):
        parser.add_argument('--dataset', required=True, help='directory written by `simulate`')
        parser.add_argument('--out', required=True, help='run directory for the checkpoint and train log')
        parser.add_argument('--variant', choices=[variant.value for variant in Variant])
        parser.add_argument('--seed', type=int)
        parser.add_argument('--epochs', type=int)
        parser.add_argument('--max-steps', dest='max_steps', type=int)
        parser.add_argument('--batch-size', dest='batch_size', type=int)

    def run(self):
        model_config = self.run_config.build(ModelConfig, 'model')
        train_config = self.run_config.build(
            TrainConfig, 'train', variant=model_config.variant, p_drop=model_config.p_drop,
        )
        sample_config = self.sample_config()
        codec = self.codec()

        dataset = self.workpath(self.options['dataset'])
        train = load_manifest(dataset, 'train')
        val = load_manifest(dataset, 'val')
        if not len(train):
            raise ConfigError(f'{dataset} has no training pairs')

        image_size = train.load_pair(train.records[0])[0].shape[0]
        latent_shape = codec.spec.latent_shape(image_size)
        if latent_shape != model_config.latent_shape:
            raise ConfigError(
                f'{image_size}px images encode to {latent_shape}, the model is configured for {model_config.latent_shape}'
            )

        out_dir = self.prepare_output(self.workpath(self.options['out']))
        self.say(f'training {model_config.variant.value} on {len(train)} pairs (seed {train_config.seed})')
        result = fit(
            train, model_config, train_config, codec, out_dir,
            val_manifest=val if len(val) else None,
            sample_config=sample_config,
            extra_metadata={'codec_checkpoint': self.workpath(self.run_config['codec.checkpoint'])},
        )
        self.success(f'{result.steps} steps, final loss {result.losses[-1]:.5f}, checkpoint {result.checkpoint}')
