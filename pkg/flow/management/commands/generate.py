import numpy as np

from main.exceptions import ParameterError

from flow.commands import FlowCommand
from flow.networks import Variant
from flow.sampling import restore_batch

DEGENERATE_WARNING = (
    'the primary variant keeps its control branch on the source when y is dropped; '
    'guidance-0 samples from it are expected to fail qualitatively'
)


class Command(FlowCommand):
    help = 'Sample images without source guidance (guidance 0 by default)'
    config_flags = {
        'count': 'generate.count',
        'guidance': 'generate.guidance',
        'steps': 'sample.steps',
        'seed': 'sample.seed',
    }

    def add_run_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--out', required=True)
        parser.add_argument('--count', type=int)
        parser.add_argument('--steps', type=int)
        parser.add_argument('--seed', type=int)
        parser.add_argument('--guidance', type=float)
        parser.add_argument('--input', help='source images for a primary checkpoint; blank sources otherwise')

    def sources(self, model, codec, count):
        if self.options.get('input'):
            _, grids = self.load_inputs(self.options['input'])
            return [grids[index % len(grids)] for index in range(count)]
        if model.config.variant is Variant.BIS:
            return [None] * count
        size = model.config.latent_size * codec.spec.spatial_factor
        return [np.zeros((size, size)) for _ in range(count)]

    def run(self):
        count = self.run_config['generate.count']
        if count < 1:
            raise ParameterError(f'count must be at least 1, got {count}')
        config = self.sample_config(guidance=self.run_config['generate.guidance'])

        model, metadata = self.load_model(self.options['checkpoint'])
        codec = self.codec(metadata)
        if model.config.variant is Variant.PRIMARY and config.guidance == 0:
            self.warn(DEGENERATE_WARNING)

        sources = self.sources(model, codec, count)
        out_dir = self.prepare_output(self.workpath(self.options['out']))
        images = restore_batch(model, sources, config, codec=codec)
        self.write_outputs(out_dir, [f'sample_{index:04d}' for index in range(count)], images)
        self.success(f'{count} samples written to {out_dir}')
