from main.commands import BaseRunCommand
from main.exceptions import ConfigError
from main.imaging import load_directory

from evaluation.features import build_extractor, extract_features
from evaluation.metrics import SsimSpec
from evaluation.reports import DISTRIBUTION, MODES, PAIRED, EvaluationReport, add_distribution, add_paired, match_pairs


class Command(BaseRunCommand):
    help = 'Score restored images against references: paired SSIM/MAE or distribution FID/KID'
    config_flags = {'mode': 'eval.mode'}

    def add_run_arguments(self, parser):
        parser.add_argument('--restored', required=True, help='directory of images to score')
        parser.add_argument('--reference', required=True, help='clean references (paired) or reference set')
        parser.add_argument('--out', required=True, help='report directory')
        parser.add_argument('--mode', choices=MODES)
        parser.add_argument('--baseline', help='second image directory reported as its own row, e.g. the corrupted inputs')
        parser.add_argument('--method', default='restored', help='row label of --restored')
        parser.add_argument('--baseline-name', dest='baseline_name', default='corrupted')

    def methods(self):
        methods = [(self.options['method'], self.options['restored'])]
        if self.options.get('baseline'):
            methods.append((self.options['baseline_name'], self.options['baseline']))
        return methods

    def run(self):
        mode = self.run_config['eval.mode']
        if mode not in MODES:
            raise ConfigError(f'eval.mode must be one of {MODES}, got {mode!r}')
        report = EvaluationReport(mode, self.run_config.fingerprint())
        reference_names, references = load_directory(self.workpath(self.options['reference']))
        methods = [(label, load_directory(self.workpath(directory))) for label, directory in self.methods()]

        if mode == PAIRED:
            ssim_spec = self.run_config.build(SsimSpec, 'ssim')
            for label, (names, grids) in methods:
                restored, matched = match_pairs(names, grids, reference_names, references)
                add_paired(report, label, restored, matched, ssim_spec)

        if mode == DISTRIBUTION:
            extractor = build_extractor(self.run_config['eval.feature_extractor'], self.run_config['eval.feature_seed'])
            reference_features = extract_features(references, extractor)
            for label, (_, grids) in methods:
                add_distribution(
                    report, label, grids, reference_features, extractor,
                    kid_subset_size=self.run_config['eval.kid_subset_size'],
                    kid_subsets=self.run_config['eval.kid_subsets'],
                    kid_seed=self.run_config['eval.kid_seed'],
                )

        out_dir = self.prepare_output(self.workpath(self.options['out']))
        report.write(out_dir)
        self.say(report.table())
        self.success(f'report written to {out_dir}')
