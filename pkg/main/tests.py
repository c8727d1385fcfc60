import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from .config import (
    CONFIG_FILE_NAME, RunConfig, coerce_value, dataclass_from_text, dataclass_to_text, parse_config_text,
    read_echoed_config,
)
from .exceptions import EXIT_CONFIG_ERROR, EXIT_RUNTIME_ERROR, ConfigError, ParameterError, ShapeError
from .imaging import list_images, load_directory, load_grid, map_range, save_grid, sidecar_path, tile_grids
from .runner import FlowRestoreTestRunner


class ConfigTextTests(SimpleTestCase):

    def test_comments_and_blank_lines_are_ignored(self):
        values = parse_config_text('# header\n\nsample.steps = 10  # inline\nmodel.variant=bis\n')
        self.assertEqual(values, {'sample.steps': '10', 'model.variant': 'bis'})

    def test_line_without_equals_sign_is_rejected(self):
        with self.assertRaises(ConfigError):
            parse_config_text('sample.steps 10')

    def test_duplicate_key_is_rejected(self):
        with self.assertRaises(ConfigError):
            parse_config_text('sample.steps = 1\nsample.steps = 2')

    def test_values_take_the_type_of_their_default(self):
        self.assertIs(coerce_value('k', 'yes', False), True)
        self.assertEqual(coerce_value('k', '3.0', 1), 3)
        self.assertEqual(coerce_value('k', '0.25', 1.0), 0.25)
        self.assertEqual(coerce_value('k', '2, 5 10', (1,)), (2, 5, 10))
        self.assertEqual(coerce_value('k', [1.5, 2], (1.0,)), (1.5, 2.0))

    def test_bad_values_are_config_errors(self):
        for value, default in (('maybe', True), ('2.5', 1), ('abc', 1.0), ('1, x', (1,))):
            with self.assertRaises(ConfigError):
                coerce_value('k', value, default)


class RunConfigTests(SimpleTestCase):

    def test_defaults_carry_the_documented_training_constants(self):
        config = RunConfig.resolve()
        self.assertEqual(config['train.lr'], 1e-4)
        self.assertEqual(config['train.warmup_steps'], 30)
        self.assertEqual(config['train.grad_clip_norm'], 0.1)
        self.assertEqual(config['train.seed'], 1)
        self.assertEqual(config['model.p_drop'], 0.1)
        self.assertEqual((config['gate.s0'], config['gate.s1']), (0.6, 0.9))
        self.assertEqual((config['sample.steps'], config['sample.guidance']), (5, 1.0))

    def test_flags_override_file_values(self):
        config = RunConfig.resolve(text='sample.steps = 10\nsample.seed = 3', overrides={'sample.steps': 20})
        self.assertEqual(config['sample.steps'], 20)
        self.assertEqual(config['sample.seed'], 3)

    def test_unset_flags_leave_file_values_alone(self):
        config = RunConfig.resolve(text='sample.steps = 10', overrides={'sample.steps': None})
        self.assertEqual(config['sample.steps'], 10)

    def test_unknown_keys_are_rejected(self):
        with self.assertRaisesMessage(ConfigError, 'sample.stepz'):
            RunConfig.resolve(text='sample.stepz = 10')

    def test_schema_version_must_match(self):
        with self.assertRaises(ConfigError):
            RunConfig.resolve(text='schema_version = 2')

    def test_missing_config_file_is_a_config_error(self):
        with self.assertRaises(ConfigError):
            RunConfig.resolve(path='/nonexistent/run.cfg')

    def test_section_and_replace(self):
        config = RunConfig.resolve().replace(gate__s0=0.95, gate__s1=0.99)
        self.assertEqual(config.section('gate')['s0'], 0.95)
        self.assertEqual(config['gate.s1'], 0.99)
        with self.assertRaises(ConfigError):
            config.replace(gate__s2=1.0)

    def test_echo_round_trips_and_fingerprint_is_stable(self):
        config = RunConfig.resolve(text='sample.steps = 7\nablate.guidance_list = 1.0, 1.5')
        with tempfile.TemporaryDirectory() as directory:
            path = config.echo(directory)
            self.assertEqual(os.path.basename(path), CONFIG_FILE_NAME)
            reloaded = read_echoed_config(directory)
        self.assertEqual(reloaded.to_text(), config.to_text())
        self.assertEqual(reloaded.fingerprint(), config.fingerprint())
        self.assertNotEqual(config.fingerprint(), RunConfig.resolve().fingerprint())

    def test_invalid_dataclass_values_become_config_errors(self):
        from motion.simulation import GateSpec

        config = RunConfig.resolve(text='gate.s0 = 0.95\ngate.s1 = 0.5')
        with self.assertRaises(ConfigError):
            config.build(GateSpec, 'gate')

    def test_dataclass_text_round_trip(self):
        from flow.networks import ModelConfig, Variant

        config = ModelConfig(latent_size=32, patch_size=4, variant=Variant.BIS)
        text = dataclass_to_text(config)
        self.assertIn('variant = bis', text)
        self.assertEqual(dataclass_from_text(ModelConfig, text), config)
        with self.assertRaises(ConfigError):
            dataclass_from_text(ModelConfig, text + 'colour = red\n')

    def test_exit_codes(self):
        self.assertEqual(ConfigError.exit_code, EXIT_CONFIG_ERROR)
        self.assertEqual(ParameterError.exit_code, EXIT_RUNTIME_ERROR)
        self.assertTrue(issubclass(ShapeError, ValueError))


class ImagingTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_sidecar_keeps_exact_values(self):
        grid = np.linspace(-1, 1, 64).reshape(8, 8) ** 3
        path = save_grid(os.path.join(self.tmp.name, 'a', 'grid.png'), grid)
        self.assertTrue(os.path.exists(path))
        self.assertTrue(os.path.exists(sidecar_path(path)))
        np.testing.assert_array_equal(load_grid(path), grid)

    def test_png_without_sidecar_is_mapped_to_signed_range(self):
        grid = np.linspace(-1, 1, 64).reshape(8, 8)
        path = save_grid(os.path.join(self.tmp.name, 'grid.png'), grid)
        os.remove(sidecar_path(path))
        np.testing.assert_allclose(load_grid(path), grid, atol=1e-4)

    def test_directory_listing_is_sorted_by_name(self):
        for name in ('b', 'a', 'c'):
            save_grid(os.path.join(self.tmp.name, f'{name}.png'), np.zeros((4, 4)))
        names, grids = load_directory(self.tmp.name)
        self.assertEqual(names, ['a', 'b', 'c'])
        self.assertEqual(len(grids), 3)
        self.assertEqual(len(list_images(self.tmp.name)), 3)

    def test_non_2d_grids_are_rejected(self):
        with self.assertRaises(ShapeError):
            save_grid(os.path.join(self.tmp.name, 'bad.png'), np.zeros((2, 4, 4)))

    def test_map_range(self):
        np.testing.assert_allclose(map_range(np.array([0.0, 0.5, 1.0]), (0, 1), (-1, 1)), [-1, 0, 1])
        with self.assertRaises(ParameterError):
            map_range(np.zeros(2), (1, 1), (0, 1))

    def test_tiles_are_laid_out_row_major_with_padding(self):
        rows = [[np.full((4, 4), -1.0), np.full((4, 4), 1.0)], [np.zeros((4, 4))]]
        image = np.asarray(tile_grids(rows, padding=1))
        self.assertEqual(image.shape, (2 * 4 + 3, 2 * 4 + 3))
        self.assertEqual(image[1, 1], 0)
        self.assertEqual(image[1, 6], 255)
        self.assertEqual(image[6, 1], 128)
        with self.assertRaises(ParameterError):
            tile_grids([])


class RunnerTests(SimpleTestCase):

    def test_slow_experiments_are_excluded_by_default(self):
        self.assertIn('slow', FlowRestoreTestRunner().exclude_tags)
        self.assertNotIn('slow', FlowRestoreTestRunner(tags=['slow']).exclude_tags)
