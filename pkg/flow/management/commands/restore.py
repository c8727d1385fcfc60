from flow.commands import FlowCommand
from flow.sampling import Solver, restore_batch


class Command(FlowCommand):
    help = 'Restore every image of a directory with a trained checkpoint'
    config_flags = {
        'steps': 'sample.steps',
        'guidance': 'sample.guidance',
        'solver': 'sample.solver',
        'seed': 'sample.seed',
    }

    def add_run_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--input', required=True, help='directory of corrupted images')
        parser.add_argument('--out', required=True)
        parser.add_argument('--steps', type=int)
        parser.add_argument('--guidance', type=float)
        parser.add_argument('--solver', choices=[solver.value for solver in Solver])
        parser.add_argument('--seed', type=int)

    def run(self):
        config = self.sample_config()
        model, metadata = self.load_model(self.options['checkpoint'])
        codec = self.codec(metadata)
        names, sources = self.load_inputs(self.options['input'])

        out_dir = self.prepare_output(self.workpath(self.options['out']))
        self.say(f'restoring {len(names)} images: {config.steps} {config.solver.value} steps, guidance {config.guidance}')
        restored = restore_batch(model, sources, config, codec=codec)
        self.write_outputs(out_dir, names, restored)
        self.success(f'{len(restored)} restored images written to {out_dir}')
