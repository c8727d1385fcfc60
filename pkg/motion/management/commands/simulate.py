from main.commands import BaseRunCommand
from main.exceptions import BuildError

from evaluation.metrics import SsimSpec
from motion.datasets import (
    SPLITS, BuildSettings, PreprocessSpec, build_dataset, directory_sources, phantom_sources, verify_manifest,
)
from motion.simulation import GateSpec, MotionSpec


def build_settings(run_config):
    return BuildSettings(
        gate=run_config.build(GateSpec, 'gate'),
        preprocess=run_config.build(PreprocessSpec, 'data'),
        motion=run_config.build(MotionSpec, 'motion'),
        ssim=run_config.build(SsimSpec, 'ssim'),
        split_fractions=run_config['data.split_fractions'],
        pairs_per_image=run_config['data.pairs_per_image'],
        failure_tolerance=run_config['data.failure_tolerance'],
        seed=run_config['data.seed'],
        workers=run_config['data.workers'],
    )


class Command(BaseRunCommand):
    help = 'Build a gated paired dataset from synthetic phantoms or a directory of clean images'
    config_flags = {
        'count': 'data.phantom_count',
        'source': 'data.source_dir',
        'seed': 'data.seed',
        'workers': 'data.workers',
    }

    def add_run_arguments(self, parser):
        parser.add_argument('--out', required=True, help='dataset directory')
        parser.add_argument('--gate', nargs=2, type=float, metavar=('S0', 'S1'), help='SSIM acceptance interval')
        parser.add_argument('--count', type=int, help='number of phantoms')
        parser.add_argument('--source', help='directory of clean grayscale images, used instead of phantoms')
        parser.add_argument('--seed', type=int)
        parser.add_argument('--workers', type=int)
        parser.add_argument('--verify', action='store_true', help='re-read every pair and recompute its gate SSIM')

    def resolve_config(self, options):
        run_config = super().resolve_config(options)
        if options.get('gate'):
            s0, s1 = options['gate']
            run_config = run_config.replace(gate__s0=s0, gate__s1=s1)
        return run_config

    def run(self):
        settings = build_settings(self.run_config)
        source_dir = self.run_config['data.source_dir']
        if source_dir:
            sources = directory_sources(self.workpath(source_dir))
        else:
            sources = phantom_sources(self.run_config['data.phantom_count'], settings.preprocess.target_size)

        out_dir = self.prepare_output(self.workpath(self.options['out']))
        self.say(f'gating {len(sources)} clean images into ({settings.gate.s0}, {settings.gate.s1})')
        manifests = build_dataset(sources, out_dir, settings)
        for split in SPLITS:
            self.say(f'{split}: {len(manifests[split])} pairs')

        if self.options['verify']:
            problems = [problem for split in SPLITS for problem in verify_manifest(manifests[split], settings.ssim)]
            if problems:
                raise BuildError(f'{len(problems)} persisted pairs failed verification', offenders=problems)
            self.say('every persisted pair reloads and passes the gate')

        self.success(f'dataset written to {out_dir}')
