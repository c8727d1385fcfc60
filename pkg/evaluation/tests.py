import io
import json
import os
import tempfile

import numpy as np
import torch
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase

from main.exceptions import (
    EXIT_CONFIG_ERROR, EXIT_RUNTIME_ERROR, ConfigError, NumericalError, ParameterError, ShapeError,
)
from main.imaging import save_grid

from flow.checkpoints import save_checkpoint
from flow.networks import ModelConfig, Variant, build_model

from .features import RandomConvExtractor, build_extractor, extract_features
from .metrics import (
    FeatureStats, SsimSpec, fit_stats, format_kid, frechet_distance, kid, mae_normed, mmd2_unbiased, ssim,
)
from .reports import DISTRIBUTION, PAIRED, EvaluationReport, add_paired, match_pairs


def brute_force_ssim(a, b, spec):
    """ window-by-window SSIM with explicit weighted sums """
    window = spec.window()
    size = spec.window_size
    scores = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            mu_a, mu_b = np.sum(window * pa), np.sum(window * pb)
            var_a = np.sum(window * (pa - mu_a) ** 2)
            var_b = np.sum(window * (pb - mu_b) ** 2)
            cov = np.sum(window * (pa - mu_a) * (pb - mu_b))
            scores.append(((2 * mu_a * mu_b + spec.c1) * (2 * cov + spec.c2))
                          / ((mu_a ** 2 + mu_b ** 2 + spec.c1) * (var_a + var_b + spec.c2)))
    return np.mean(scores)


def brute_force_mmd2(x, y):
    def k(a, b):
        return (np.dot(a, b) / len(a) + 1) ** 3

    m = len(x)
    within_x = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    within_y = sum(k(y[i], y[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    across = sum(k(x[i], y[j]) for i in range(m) for j in range(m)) / (m * m)
    return within_x + within_y - 2 * across


class SsimTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(0)
        self.a = rng.random((24, 24))
        self.b = np.clip(self.a + 0.1 * rng.standard_normal((24, 24)), 0, 1)

    def test_identical_images(self):
        self.assertAlmostEqual(ssim(self.a, self.a), 1.0, places=12)

    def test_agrees_with_the_windowed_oracle(self):
        for spec in (SsimSpec(), SsimSpec(window_size=7, window_sigma=1.0)):
            self.assertLessEqual(abs(ssim(self.a, self.b, spec) - brute_force_ssim(self.a, self.b, spec)), 1e-6)

    def test_symmetric_and_below_one(self):
        self.assertAlmostEqual(ssim(self.a, self.b), ssim(self.b, self.a), places=12)
        self.assertLess(ssim(self.a, self.b), 1.0)

    def test_validation(self):
        with self.assertRaises(ShapeError):
            ssim(self.a, self.b[:20])
        with self.assertRaises(ParameterError):
            ssim(self.a[:8, :8], self.b[:8, :8])
        with self.assertRaises(ParameterError):
            SsimSpec(window_size=10)

    def test_normalised_mae(self):
        self.assertEqual(mae_normed(-np.ones((4, 4)), np.ones((4, 4))), 1.0)
        self.assertEqual(mae_normed(self.a, self.a), 0.0)

    def test_mae_uses_the_declared_range_not_per_image_extremes(self):
        # a constant image against a shifted constant: per-image min-max would report 0
        self.assertEqual(mae_normed(np.zeros((4, 4)), np.full((4, 4), 0.5)), 0.25)
        self.assertEqual(mae_normed(np.zeros((4, 4)), np.full((4, 4), 0.5), value_range=(0.0, 1.0)), 0.5)
        expected = np.mean(np.abs((self.a + 1) / 2 - (self.b + 1) / 2))
        self.assertAlmostEqual(mae_normed(self.a, self.b), expected, places=12)


class FrechetTests(SimpleTestCase):

    def test_equal_covariances_leave_the_mean_term(self):
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        p = FeatureStats(np.array([0.0, 0.0]), cov, 10)
        q = FeatureStats(np.array([1.0, 2.0]), cov, 10)
        self.assertLessEqual(abs(frechet_distance(p, q) - 5.0), 1e-8)

    def test_swapped_diagonal_covariances(self):
        p = FeatureStats(np.zeros(2), np.diag([1.0, 4.0]), 10)
        q = FeatureStats(np.zeros(2), np.diag([4.0, 1.0]), 10)
        self.assertLessEqual(abs(frechet_distance(p, q) - 2.0), 1e-8)

    def test_a_set_against_itself(self):
        features = np.random.default_rng(0).standard_normal((50, 8))
        stats = fit_stats(features)
        self.assertLessEqual(frechet_distance(stats, stats), 1e-8)

    def test_problems(self):
        with self.assertRaises(ShapeError):
            frechet_distance(FeatureStats(np.zeros(2), np.eye(2), 2), FeatureStats(np.zeros(3), np.eye(3), 2))
        with self.assertRaises(NumericalError):
            frechet_distance(FeatureStats(np.zeros(2), np.diag([1.0, -1.0]), 2),
                             FeatureStats(np.zeros(2), np.eye(2), 2))
        with self.assertRaises(ParameterError):
            fit_stats(np.zeros((1, 4)))


class KidTests(SimpleTestCase):

    def test_unbiased_estimate_matches_kernel_sums(self):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((6, 3)), rng.standard_normal((6, 3)) + 0.5
        self.assertLessEqual(abs(mmd2_unbiased(x, y) - brute_force_mmd2(x, y)), 1e-10)

    def test_split_halves_of_one_distribution_centre_on_zero(self):
        inside = 0
        for trial in range(40):
            features = np.random.default_rng(100 + trial).standard_normal((200, 8))
            mean, std = kid(features[:100], features[100:], subset_size=50, n_subsets=20, seed=trial)
            inside += abs(mean) <= 3 * std
        self.assertGreaterEqual(inside, 38)

    def test_different_distributions_score_higher(self):
        rng = np.random.default_rng(2)
        near, _ = kid(rng.standard_normal((100, 4)), rng.standard_normal((100, 4)), 50, 10)
        far, _ = kid(rng.standard_normal((100, 4)), rng.standard_normal((100, 4)) + 2.0, 50, 10)
        self.assertGreater(far, near)

    def test_subsets_are_seeded(self):
        features = np.random.default_rng(3).standard_normal((40, 4))
        self.assertEqual(kid(features[:20], features[20:], 10, 5, seed=4), kid(features[:20], features[20:], 10, 5, seed=4))

    def test_subset_limits(self):
        features = np.zeros((10, 4))
        with self.assertRaises(ParameterError):
            kid(features, features, subset_size=11)
        with self.assertRaises(ParameterError):
            kid(features, features, subset_size=1)
        with self.assertRaises(ShapeError):
            kid(features, np.zeros((10, 3)))

    def test_format(self):
        self.assertEqual(format_kid(0.001, 0.0005), '0.001000 ± 0.000500')


class FeatureTests(SimpleTestCase):

    def setUp(self):
        self.images = [np.tanh(np.random.default_rng(seed).standard_normal((32, 32))) for seed in range(5)]

    def test_extractor_is_fixed_by_its_seed(self):
        state = torch.random.get_rng_state()
        first = extract_features(self.images, RandomConvExtractor(seed=3))
        self.assertTrue(torch.equal(state, torch.random.get_rng_state()))
        second = extract_features(self.images, build_extractor(seed=3))
        other = extract_features(self.images, RandomConvExtractor(seed=4))
        self.assertEqual(first.shape, (5, RandomConvExtractor.dim))
        self.assertEqual(first.dtype, np.float64)
        np.testing.assert_array_equal(first, second)
        self.assertFalse(np.array_equal(first, other))

    def test_batching_does_not_change_features(self):
        extractor = RandomConvExtractor()
        np.testing.assert_allclose(extract_features(self.images, extractor, batch_size=2),
                                   extract_features(self.images, extractor), atol=1e-6)

    def test_problems(self):
        extractor = RandomConvExtractor()
        with self.assertRaises(ParameterError):
            extract_features([], extractor)
        with self.assertRaises(ShapeError):
            extract_features([np.zeros((32, 32)), np.zeros((16, 16))], extractor)
        with self.assertRaises(ConfigError):
            build_extractor('evaluation.features.MissingExtractor')


class ReportTests(SimpleTestCase):

    def test_paired_table_layout(self):
        report = EvaluationReport(PAIRED, 'abc')
        clean = [np.zeros((16, 16)), np.full((16, 16), 0.5)]
        add_paired(report, 'restored', clean, clean)
        add_paired(report, 'corrupted', [grid + 0.1 for grid in clean], clean)
        table = report.table()
        header = table.splitlines()[0]
        self.assertIn('SSIM ↑', header)
        self.assertIn('MAE (normed) ↓', header)
        self.assertEqual(len(table.splitlines()), 4)
        self.assertIn('1.000', table.splitlines()[2])
        self.assertEqual(report.value('corrupted', 'mae'), 0.05)

    def test_distribution_cells(self):
        report = EvaluationReport(DISTRIBUTION)
        report.add('restored', 'fid', 12.3456)
        report.add('restored', 'kid', 0.0123, 0.001)
        table = report.table()
        self.assertIn('FID ↓', table)
        self.assertIn('12.35', table)
        self.assertIn('0.012300 ± 0.001000', table)

    def test_written_report(self):
        report = EvaluationReport(PAIRED, 'f00')
        report.add('restored', 'ssim', 0.9, 0.01, 3)
        with tempfile.TemporaryDirectory() as directory:
            report.write(directory)
            with open(os.path.join(directory, 'report.jsonl'), encoding='utf-8') as records:
                record = json.loads(records.readline())
            self.assertTrue(os.path.exists(os.path.join(directory, 'report.txt')))
        self.assertEqual(record, {'method': 'restored', 'metric': 'ssim', 'value': 0.9, 'std': 0.01,
                                  'count': 3, 'config': 'f00'})

    def test_pairs_match_by_name(self):
        grids, references = match_pairs(['b', 'a'], [1, 2], ['a', 'b'], [10, 20])
        self.assertEqual(references, [20, 10])
        with self.assertRaises(ParameterError):
            match_pairs(['c'], [1], ['a'], [10])
        with self.assertRaises(ParameterError):
            EvaluationReport('unpaired')


def write_images(directory, count, size=32, seed=0, offset=0.0):
    rng = np.random.default_rng(seed)
    for index in range(count):
        grid = np.clip(np.tanh(rng.standard_normal((size, size))) + offset, -1.0, 1.0)
        save_grid(os.path.join(directory, f'img{index}.png'), grid)


class EvaluateCommandTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.images = os.path.join(self.tmp.name, 'images')
        write_images(self.images, 6)

    def evaluate(self, out, *args):
        stdout = io.StringIO()
        call_command('evaluate', '--restored', self.images, '--reference', self.images, '--out', out,
                     *args, stdout=stdout)
        with open(os.path.join(out, 'report.jsonl'), encoding='utf-8') as records:
            return {(record['method'], record['metric']): record for record in map(json.loads, records)}

    def test_self_evaluation_paired(self):
        out = os.path.join(self.tmp.name, 'paired')
        records = self.evaluate(out)
        self.assertAlmostEqual(records['restored', 'ssim']['value'], 1.0, places=12)
        self.assertEqual(records['restored', 'mae']['value'], 0.0)
        self.assertTrue(os.path.exists(os.path.join(out, 'config.txt')))
        with open(os.path.join(out, 'report.txt'), encoding='utf-8') as table:
            self.assertIn('SSIM ↑', table.read())

    def test_self_evaluation_distribution(self):
        records = self.evaluate(os.path.join(self.tmp.name, 'distribution'), '--mode', 'distribution')
        self.assertLessEqual(records['restored', 'fid']['value'], 1e-6)
        self.assertIsNotNone(records['restored', 'kid']['std'])

    def test_baseline_row(self):
        baseline = os.path.join(self.tmp.name, 'baseline')
        write_images(baseline, 6, offset=0.2)
        records = self.evaluate(os.path.join(self.tmp.name, 'with_baseline'), '--baseline', baseline)
        self.assertEqual(len(records), 4)
        self.assertLess(records['corrupted', 'ssim']['value'], records['restored', 'ssim']['value'])
        self.assertGreater(records['corrupted', 'mae']['value'], 0.0)

    def test_unknown_mode_in_config_file(self):
        config = os.path.join(self.tmp.name, 'bad.cfg')
        with open(config, 'w', encoding='utf-8') as config_file:
            config_file.write('eval.mode = unpaired\n')
        with self.assertRaises(CommandError) as raised:
            self.evaluate(os.path.join(self.tmp.name, 'bad'), '--config', config)
        self.assertEqual(raised.exception.returncode, EXIT_CONFIG_ERROR)

    def test_unmatched_names_are_a_runtime_error(self):
        others = os.path.join(self.tmp.name, 'others')
        save_grid(os.path.join(others, 'stranger.png'), np.zeros((32, 32)))
        with self.assertRaises(CommandError) as raised:
            call_command('evaluate', '--restored', others, '--reference', self.images,
                         '--out', os.path.join(self.tmp.name, 'unmatched'), stdout=io.StringIO())
        self.assertEqual(raised.exception.returncode, EXIT_RUNTIME_ERROR)


TINY = dict(latent_size=16, patch_size=4, hidden_dim=32, depth=2, heads=2, control_depth=1)


class AblateCommandTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.inputs = os.path.join(self.tmp.name, 'inputs')
        self.references = os.path.join(self.tmp.name, 'references')
        write_images(self.inputs, 3, size=16, seed=1)
        write_images(self.references, 3, size=16, seed=2)
        self.checkpoints = []
        for variant in Variant:
            path = os.path.join(self.tmp.name, f'{variant.value}.pt')
            save_checkpoint(path, build_model(ModelConfig(variant=variant, **TINY), seed=0))
            self.checkpoints.append(path)

    def test_grids_tables_and_best_guidance(self):
        out = os.path.join(self.tmp.name, 'ablation')
        stderr = io.StringIO()
        call_command(
            'ablate', '--checkpoint', *self.checkpoints, '--input', self.inputs, '--reference', self.references,
            '--out', out, '--steps-list', '1', '2', '--guidance-list', '1.0', '1.5',
            '--generation-steps-list', '1', '2', '--rows', '2', stdout=io.StringIO(), stderr=stderr,
        )
        for name in ('steps_grid.png', 'guidance_grid.png', 'generation_grid.png', 'best_guidance.json',
                     'config.txt', os.path.join('paired', 'report.txt'), os.path.join('distribution', 'report.txt'),
                     os.path.join('steps', '2', 'img0.png'), os.path.join('guidance', '1.5', 'img2.png')):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)

        with open(os.path.join(out, 'best_guidance.json'), encoding='utf-8') as best_file:
            self.assertIn(json.load(best_file)['guidance'], (1.0, 1.5))
        with open(os.path.join(out, 'paired', 'report.jsonl'), encoding='utf-8') as records:
            methods = {json.loads(line)['method'] for line in records}
        self.assertEqual(methods, {'steps=1', 'steps=2', 'guidance=1.0', 'guidance=1.5'})
        self.assertIn('expected to fail qualitatively', stderr.getvalue())

    def test_defaults_follow_the_documented_grids(self):
        from main.config import RunConfig

        config = RunConfig.resolve()
        self.assertEqual(config['ablate.steps_list'], (2, 5, 10, 20, 40))
        self.assertEqual(len(config['ablate.guidance_list']), 10)
        self.assertEqual(config['ablate.guidance_list'][0], 1.0)
        self.assertAlmostEqual(config['ablate.guidance_list'][-1], 1.9)
