"""
Sampling ablations on trained checkpoints.

    steps grid        restore at every steps setting, guidance fixed
    guidance grid     restore at every guidance setting, steps fixed; with a
                      reference set the guidance with the lowest FID is kept
    generation grid   guidance-0 samples of every checkpoint at every steps setting

Each grid is written as one tiled PNG (input | one column per setting | reference)
next to per-setting image directories and the metric tables.
"""
import json
import os
from dataclasses import replace

from main.exceptions import ConfigError
from main.imaging import load_directory, tile_grids

from evaluation.features import build_extractor, extract_features
from evaluation.metrics import SsimSpec
from evaluation.reports import DISTRIBUTION, PAIRED, EvaluationReport, add_distribution, add_paired, match_pairs
from flow.commands import FlowCommand
from flow.management.commands.generate import DEGENERATE_WARNING
from flow.networks import Variant
from flow.sampling import restore_batch


class Command(FlowCommand):
    help = 'Sweep sampling steps and guidance, and grid guidance-0 generation across checkpoints'
    config_flags = {
        'steps_list': 'ablate.steps_list',
        'guidance_list': 'ablate.guidance_list',
        'generation_steps_list': 'ablate.generation_steps_list',
        'rows': 'ablate.grid_rows',
    }

    def add_run_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True, nargs='+',
                            help='the first checkpoint is swept; all of them enter the generation grid')
        parser.add_argument('--input', required=True, help='directory of corrupted images')
        parser.add_argument('--reference', help='clean references matched by file name, enables the metric tables')
        parser.add_argument('--out', required=True)
        parser.add_argument('--steps-list', dest='steps_list', type=int, nargs='+')
        parser.add_argument('--guidance-list', dest='guidance_list', type=float, nargs='+')
        parser.add_argument('--generation-steps-list', dest='generation_steps_list', type=int, nargs='+')
        parser.add_argument('--rows', type=int, help='images per grid')

    def run(self):
        rows = self.run_config['ablate.grid_rows']
        if rows < 1:
            raise ConfigError(f'ablate.grid_rows must be positive, got {rows}')
        base = self.sample_config()
        models = [self.load_model(path) for path in self.options['checkpoint']]
        names, sources = self.load_inputs(self.options['input'])

        references = None
        if self.options.get('reference'):
            reference_names, reference_grids = load_directory(self.workpath(self.options['reference']))
            _, references = match_pairs(names, sources, reference_names, reference_grids)

        self.out_dir = self.prepare_output(self.workpath(self.options['out']))
        self.paired = EvaluationReport(PAIRED, self.run_config.fingerprint())
        self.distribution = EvaluationReport(DISTRIBUTION, self.run_config.fingerprint())
        self.ssim_spec = self.run_config.build(SsimSpec, 'ssim')
        self.extractor = build_extractor(self.run_config['eval.feature_extractor'], self.run_config['eval.feature_seed'])
        self.reference_features = extract_features(references, self.extractor) if references is not None else None

        model, metadata = models[0]
        codec = self.codec(metadata)

        settings = [(f'steps={steps}', replace(base, steps=steps))
                    for steps in self.run_config['ablate.steps_list']]
        self.sweep('steps', model, codec, names, sources, references, settings, rows)

        settings = [(f'guidance={guidance:.1f}', replace(base, guidance=guidance))
                    for guidance in self.run_config['ablate.guidance_list']]
        fids = self.sweep('guidance', model, codec, names, sources, references, settings, rows)
        if fids:
            self.record_best_guidance(fids)

        self.generation_grid(models, sources, rows)

        if references is not None:
            self.paired.write(os.path.join(self.out_dir, 'paired'))
            self.say(self.paired.table())
        if self.distribution.records:
            self.distribution.write(os.path.join(self.out_dir, 'distribution'))
            self.say(self.distribution.table())
        self.success(f'ablation written to {self.out_dir}')

    def sweep(self, name, model, codec, names, sources, references, settings, rows):
        """ restore under every setting, tile the first `rows` inputs, score when references exist """
        columns = []
        fids = {}
        for label, config in settings:
            outputs = restore_batch(model, sources, config, codec=codec)
            self.write_outputs(os.path.join(self.out_dir, name, label.split('=', 1)[1]), names, outputs)
            restored = [image[0].numpy() for image in outputs]
            columns.append(restored)
            if references is not None:
                add_paired(self.paired, label, restored, references, self.ssim_spec)
                if len(restored) >= 2:
                    fid, _, _ = self.score_distribution(label, restored)
                    fids[label, config.guidance] = fid
            self.say(f'{name} {label}: done')

        grid = [[sources[index]] + [column[index] for column in columns]
                + ([references[index]] if references is not None else [])
                for index in range(min(rows, len(sources)))]
        tile_grids(grid).save(os.path.join(self.out_dir, f'{name}_grid.png'))
        return fids

    def score_distribution(self, label, images):
        return add_distribution(
            self.distribution, label, images, self.reference_features, self.extractor,
            kid_subset_size=self.run_config['eval.kid_subset_size'],
            kid_subsets=self.run_config['eval.kid_subsets'],
            kid_seed=self.run_config['eval.kid_seed'],
        )

    def record_best_guidance(self, fids):
        (label, guidance), fid = min(fids.items(), key=lambda item: item[1])
        with open(os.path.join(self.out_dir, 'best_guidance.json'), 'w', encoding='utf-8') as best_file:
            json.dump({'guidance': guidance, 'fid': fid}, best_file, sort_keys=True)
        self.say(f'lowest FID {fid:.2f} at {label}')

    def generation_grid(self, models, sources, rows):
        """ one row per (checkpoint, sample), one column per steps setting, guidance 0 """
        base = self.sample_config(guidance=0.0)
        grid = []
        for position, (model, metadata) in enumerate(models):
            variant = model.config.variant
            if variant is Variant.PRIMARY:
                self.warn(f'checkpoint {position}: {DEGENERATE_WARNING}')
            if variant is Variant.BIS:
                generation_sources = [None] * rows
            else:
                generation_sources = [sources[index % len(sources)] for index in range(rows)]
            codec = self.codec(metadata)

            columns = []
            for steps in self.run_config['ablate.generation_steps_list']:
                config = replace(base, steps=steps)
                samples = [image[0].numpy() for image in restore_batch(model, generation_sources, config, codec=codec)]
                columns.append(samples)
                if self.reference_features is not None and rows >= 2:
                    self.score_distribution(f'{position}:{variant.value} g=0 steps={steps}', samples)
            grid.extend([column[index] for column in columns] for index in range(rows))

        tile_grids(grid).save(os.path.join(self.out_dir, 'generation_grid.png'))
