import filecmp
import io
import os
import tempfile

import numpy as np
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase
from PIL import Image

from main.exceptions import (
    EXIT_CONFIG_ERROR, BuildError, GateFailureError, ParameterError, ShapeError, TrajectoryError,
)
from main.imaging import load_grid, save_grid, sidecar_path, to_signed, to_unit

from evaluation.metrics import ssim

from .datasets import (
    SPLITS, BuildSettings, Interpolation, PreprocessSpec, assign_splits, build_dataset, directory_sources,
    load_manifest, phantom_sources, preprocess, verify_manifest,
)
from .phantoms import generate_phantom
from .simulation import (
    GateSpec, MotionSegment, MotionSpec, MotionTrajectory, corrupt, draw_trajectory, generate_pair, phase_ramp,
)


def signed_phantom(seed, size=64):
    return to_signed(generate_phantom(seed, size))


class PhantomTests(SimpleTestCase):

    def test_phantoms_are_deterministic_per_seed(self):
        np.testing.assert_array_equal(generate_phantom(3, 64), generate_phantom(3, 64))
        self.assertFalse(np.array_equal(generate_phantom(3, 64), generate_phantom(4, 64)))

    def test_range_and_shape(self):
        phantom = generate_phantom(0, 128)
        self.assertEqual(phantom.shape, (128, 128))
        self.assertGreaterEqual(phantom.min(), 0.0)
        self.assertLessEqual(phantom.max(), 1.0)
        self.assertGreater(phantom.std(), 0.05)

    def test_minimum_size(self):
        with self.assertRaises(ParameterError):
            generate_phantom(0, 16)


class PreprocessTests(SimpleTestCase):

    def test_short_side_is_resized_then_centre_cropped(self):
        image = np.tile(np.linspace(0, 1, 150), (100, 1))
        result = preprocess(image, PreprocessSpec(target_size=64))
        self.assertEqual(result.shape, (64, 64))
        self.assertGreaterEqual(result.min(), -1.0)
        self.assertLessEqual(result.max(), 1.0)
        # the ramp survives the resize
        self.assertLess(result[:, 0].mean(), result[:, -1].mean())
        self.assertAlmostEqual(result.mean(), 0.0, delta=0.05)

    def test_constant_images_map_linearly(self):
        for interpolation in Interpolation:
            result = preprocess(np.full((80, 96), 0.75), PreprocessSpec(target_size=64, interpolation=interpolation))
            np.testing.assert_allclose(result, 0.5, atol=1e-6)

    def test_exact_size_is_only_mapped(self):
        image = generate_phantom(1, 64)
        np.testing.assert_allclose(preprocess(image, PreprocessSpec(target_size=64)), to_signed(image))

    def test_smaller_images_are_never_upsampled(self):
        with self.assertRaises(ShapeError):
            preprocess(np.zeros((50, 80)), PreprocessSpec(target_size=64))

    def test_spec_validation(self):
        with self.assertRaises(ParameterError):
            PreprocessSpec(crop='random')
        with self.assertRaises(ParameterError):
            PreprocessSpec(interpolation='bicubic')


class KSpaceTests(SimpleTestCase):

    def setUp(self):
        self.clean = signed_phantom(5)

    def test_identity_trajectory_returns_the_image(self):
        corrupted = corrupt(self.clean, MotionTrajectory.identity(64))
        self.assertLessEqual(np.abs(corrupted - self.clean).max(), 1e-5)

    def test_integer_translation_matches_a_circular_shift(self):
        trajectory = MotionTrajectory((MotionSegment(0, 64, dx=3.0, dy=-2.0),))
        corrupted = corrupt(self.clean, trajectory)
        expected = np.roll(self.clean, shift=(-2, 3), axis=(0, 1))
        self.assertLessEqual(np.abs(corrupted - expected).max(), 1e-4)

    def test_phase_ramp_is_unit_modulus_and_trivial_at_zero_shift(self):
        np.testing.assert_allclose(np.abs(phase_ramp(16, 1.3, -0.4)), 1.0)
        np.testing.assert_array_equal(phase_ramp(16, 0, 0), np.ones((16, 16)))

    def test_motion_in_outer_rows_corrupts_the_image(self):
        trajectory = MotionTrajectory((
            MotionSegment(0, 16, dx=4.0),
            MotionSegment(16, 48),
            MotionSegment(48, 64, dy=-4.0, theta=0.05),
        ))
        corrupted = corrupt(self.clean, trajectory)
        self.assertEqual(corrupted.shape, self.clean.shape)
        self.assertLessEqual(np.abs(corrupted).max(), 1.0)
        self.assertLess(ssim(to_unit(self.clean), to_unit(corrupted)), 0.999)

    def test_trajectories_must_tile_the_rows(self):
        gap = MotionTrajectory((MotionSegment(0, 30), MotionSegment(32, 64)))
        overlap = MotionTrajectory((MotionSegment(0, 33), MotionSegment(32, 64)))
        short = MotionTrajectory((MotionSegment(0, 60),))
        for trajectory in (gap, overlap, short, MotionTrajectory(())):
            with self.assertRaises(TrajectoryError):
                corrupt(self.clean, trajectory)

    def test_non_square_images_are_rejected(self):
        with self.assertRaises(ShapeError):
            corrupt(np.zeros((32, 64)), MotionTrajectory.identity(32))

    def test_drawn_trajectories_cover_every_row(self):
        rng = np.random.default_rng(0)
        spec = MotionSpec(still_center_probability=1.0)
        for severity in (0.0, 0.3, 1.0):
            trajectory = draw_trajectory(severity, rng, 64, spec)
            trajectory.validate(64)
            centre = [segment for segment in trajectory.segments if segment.start <= 32 < segment.stop]
            self.assertTrue(centre[0].still)
            for segment in trajectory.segments:
                self.assertLessEqual(abs(segment.dx), severity * spec.max_shift)
                self.assertLessEqual(abs(segment.theta), severity * spec.max_rotation)
        with self.assertRaises(ParameterError):
            draw_trajectory(1.5, rng, 64)

    def test_strong_motion_is_clipped_into_the_value_range(self):
        rng = np.random.default_rng(4)
        image = signed_phantom(5)
        for _ in range(20):
            corrupted = corrupt(image, draw_trajectory(1.0, rng, 64))
            self.assertGreaterEqual(corrupted.min(), -1.0)
            self.assertLessEqual(corrupted.max(), 1.0)
        unit = corrupt(to_unit(image), draw_trajectory(1.0, rng, 64), value_range=(0.0, 1.0))
        self.assertGreaterEqual(unit.min(), 0.0)
        self.assertLessEqual(unit.max(), 1.0)

    def test_full_severity_shifts_spread_over_the_whole_bound(self):
        rng = np.random.default_rng(11)
        spec = MotionSpec(still_center_probability=0.0)
        shifts = np.array([
            segment.dx
            for _ in range(2000)
            for segment in draw_trajectory(1.0, rng, 64, spec).segments
        ])
        self.assertLessEqual(np.abs(shifts).max(), spec.max_shift)
        self.assertGreater(np.abs(shifts).max(), 0.95 * spec.max_shift)
        # uniform on [-8, 8]: zero mean, std 8 / sqrt(3)
        self.assertAlmostEqual(shifts.mean(), 0.0, delta=0.3)
        self.assertAlmostEqual(shifts.std(), spec.max_shift / np.sqrt(3), delta=0.3)

    def test_trajectory_dicts(self):
        trajectory = draw_trajectory(0.5, np.random.default_rng(1), 64)
        self.assertEqual(MotionTrajectory.from_dicts(trajectory.to_dicts()), trajectory)


class GateTests(SimpleTestCase):

    def test_generated_phantom_pairs_pass_the_gate_under_recomputation(self):
        gate = GateSpec(0.6, 0.9, max_retries=50)
        for seed in range(100):
            clean = signed_phantom(seed, 128)
            pair = generate_pair(clean, gate, seed)
            recomputed = ssim(to_unit(pair.clean), to_unit(pair.corrupted))
            self.assertTrue(gate.accepts(recomputed), f'seed {seed}: ssim {recomputed}')
            self.assertAlmostEqual(recomputed, pair.gate_ssim, places=12)
            self.assertLessEqual(pair.attempts, 50)

    def test_corruption_keeps_the_overall_intensity(self):
        gate = GateSpec(0.6, 0.9, max_retries=50)
        for seed in range(100):
            pair = generate_pair(signed_phantom(seed, 128), gate, seed)
            clean_level = np.mean(np.abs(pair.clean))
            corrupted_level = np.mean(np.abs(pair.corrupted))
            self.assertLessEqual(abs(corrupted_level - clean_level), 0.2 * clean_level, f'seed {seed}')

    def test_pairs_are_reproducible_from_their_seed(self):
        clean = signed_phantom(2)
        first = generate_pair(clean, GateSpec(), 17)
        second = generate_pair(clean, GateSpec(), 17)
        np.testing.assert_array_equal(first.corrupted, second.corrupted)
        self.assertEqual(first.trajectory, second.trajectory)

    def test_unreachable_gate_reports_the_closest_draw(self):
        with self.assertRaises(GateFailureError) as raised:
            generate_pair(signed_phantom(0), GateSpec(0.01, 0.02, max_retries=3), 0)
        self.assertEqual(raised.exception.attempts, 3)
        self.assertGreater(raised.exception.closest_ssim, 0.02)

    def test_gate_validation(self):
        for s0, s1 in ((0.9, 0.6), (0.0, 0.5), (0.5, 1.0)):
            with self.assertRaises(ParameterError):
                GateSpec(s0, s1)
        self.assertFalse(GateSpec().accepts(0.9))
        self.assertTrue(GateSpec().accepts(0.75))


class DatasetTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.settings = BuildSettings(preprocess=PreprocessSpec(target_size=64), split_fractions=(0.6, 0.2, 0.2))

    def build(self, name, sources=None, settings=None):
        sources = sources or phantom_sources(10, 64)
        return build_dataset(sources, os.path.join(self.tmp.name, name), settings or self.settings)

    def test_splits_partition_clean_identities(self):
        manifests = self.build('splits')
        ids = {split: {record.clean_id for record in manifests[split].records} for split in SPLITS}
        self.assertEqual(sum(len(members) for members in ids.values()), 10)
        self.assertEqual(len(ids['train']), 6)
        self.assertFalse(ids['train'] & ids['val'] or ids['train'] & ids['test'] or ids['val'] & ids['test'])

    def test_assign_splits_validation(self):
        with self.assertRaises(ParameterError):
            assign_splits(['a', 'b'], (0.5, 0.6, 0.1), 0)
        self.assertEqual(assign_splits(['a', 'b'], (1.0, 0.0, 0.0), 0), {'a': 'train', 'b': 'train'})

    def test_records_reload_and_pass_verification(self):
        manifests = self.build('verified')
        for split in SPLITS:
            reloaded = load_manifest(manifests[split].root, split, preprocess_spec=self.settings.preprocess)
            self.assertEqual(reloaded.records, manifests[split].records)
            self.assertEqual(verify_manifest(reloaded), [])
        record = manifests['train'].records[0]
        clean, corrupted = manifests['train'].load_pair(record)
        self.assertEqual(ssim(to_unit(clean), to_unit(corrupted)), record.gate_ssim)

    def test_verification_catches_tampering(self):
        manifest = self.build('tampered')['train']
        first, second = manifest.records[:2]
        clean_path = manifest.path(first.clean_path)
        save_grid(manifest.path(first.corrupted_path), load_grid(clean_path))
        os.remove(manifest.path(second.corrupted_path))
        problems = verify_manifest(manifest)
        self.assertEqual(len(problems), 2)
        self.assertIn('outside the gate', problems[0])
        self.assertIn('missing', problems[1])

    def test_rebuild_is_identical(self):
        self.build('first')
        self.build('second')
        comparison = filecmp.dircmp(os.path.join(self.tmp.name, 'first'), os.path.join(self.tmp.name, 'second'))
        self.assertEqual(comparison.diff_files, [])
        for name, sub in comparison.subdirs.items():
            self.assertEqual(sub.diff_files, [], name)
            self.assertEqual(sub.left_only + sub.right_only, [], name)

    def test_gate_failures_abort_with_offenders(self):
        settings = BuildSettings(preprocess=PreprocessSpec(target_size=32), gate=GateSpec(0.01, 0.02, max_retries=2))
        with self.assertRaises(BuildError) as raised:
            self.build('failed', phantom_sources(2, 32), settings)
        self.assertEqual([name for name, _ in raised.exception.offenders], ['phantom-00000_0', 'phantom-00001_0'])

    def test_directory_corpus(self):
        source_dir = os.path.join(self.tmp.name, 'corpus')
        os.makedirs(source_dir)
        for seed in range(3):
            pixels = np.round(generate_phantom(seed, 96)[:80] * 255).astype(np.uint8)
            Image.fromarray(pixels).save(os.path.join(source_dir, f'scan{seed}.png'))
        sources = directory_sources(source_dir)
        self.assertEqual([source.identity for source in sources], ['scan0', 'scan1', 'scan2'])
        settings = BuildSettings(preprocess=PreprocessSpec(target_size=64), split_fractions=(1.0, 0.0, 0.0))
        manifests = self.build('corpus_dataset', sources, settings)
        self.assertEqual(len(manifests['train']), 3)
        self.assertEqual(manifests['train'].load_pair(manifests['train'].records[0])[0].shape, (64, 64))

    def test_source_problems(self):
        with self.assertRaises(ParameterError):
            build_dataset([], self.tmp.name)
        duplicated = phantom_sources(1, 64) * 2
        with self.assertRaises(ParameterError):
            build_dataset(duplicated, self.tmp.name, self.settings)


class SimulateCommandTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.config = os.path.join(self.tmp.name, 'small.cfg')
        with open(self.config, 'w', encoding='utf-8') as config_file:
            config_file.write('data.target_size = 64\n')

    def simulate(self, out, *args):
        stdout = io.StringIO()
        call_command('simulate', '--config', self.config, '--out', out, '--count', '6', *args, stdout=stdout)
        return stdout.getvalue()

    def records(self, out):
        return [record for split in SPLITS for record in load_manifest(out, split).records]

    def test_default_gate(self):
        out = os.path.join(self.tmp.name, 'default')
        output = self.simulate(out, '--verify')
        self.assertIn('passes the gate', output)
        records = self.records(out)
        self.assertEqual(len(records), 6)
        self.assertTrue(all(0.6 < record.gate_ssim < 0.9 for record in records))
        self.assertTrue(os.path.exists(os.path.join(out, 'config.txt')))
        self.assertTrue(os.path.exists(sidecar_path(os.path.join(out, records[0].corrupted_path))))

    def test_mild_gate(self):
        out = os.path.join(self.tmp.name, 'mild')
        self.simulate(out, '--gate', '0.95', '0.99', '--verify')
        self.assertTrue(all(0.95 < record.gate_ssim < 0.99 for record in self.records(out)))

    def test_rerun_is_identical(self):
        first, second = os.path.join(self.tmp.name, 'a'), os.path.join(self.tmp.name, 'b')
        self.simulate(first)
        self.simulate(second)
        for split in SPLITS:
            self.assertTrue(filecmp.cmp(os.path.join(first, f'{split}.jsonl'), os.path.join(second, f'{split}.jsonl'),
                                        shallow=False))
        self.assertTrue(filecmp.cmp(os.path.join(first, 'config.txt'), os.path.join(second, 'config.txt'),
                                    shallow=False))

    def test_inverted_gate_is_a_config_error(self):
        out = os.path.join(self.tmp.name, 'inverted')
        with self.assertRaises(CommandError) as raised:
            self.simulate(out, '--gate', '0.9', '0.6')
        self.assertEqual(raised.exception.returncode, EXIT_CONFIG_ERROR)
        self.assertFalse(os.path.exists(out))
