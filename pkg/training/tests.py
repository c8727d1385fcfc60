import io
import json
import os
import tempfile

import numpy as np
import torch
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase, tag

from main.exceptions import EXIT_CONFIG_ERROR, ParameterError, TrainingDivergedError
from main.imaging import save_grid, to_unit

from evaluation.features import build_extractor, extract_features
from evaluation.metrics import fit_stats, frechet_distance, ssim
from flow.checkpoints import load_checkpoint, read_archive
from flow.codecs import CodecSpec, IdentityCodec
from flow.networks import ModelConfig, Variant, build_model
from flow.sampling import SampleConfig, restore_batch
from motion.datasets import (
    BuildSettings, DatasetManifest, PairRecord, build_dataset, phantom_sources, write_manifest,
)
from motion.simulation import GateSpec, MotionTrajectory

from .trainer import (
    CHECKPOINT_NAME, OPTIMIZER_NOTE, TRAIN_LOG_NAME, PairDataset, TrainConfig, build_optimizer, fit,
    learning_rate_at, train_step,
)

TINY = dict(latent_size=16, patch_size=4, hidden_dim=32, depth=2, heads=2, control_depth=1)
TINY_CONFIG_TEXT = ''.join(f'model.{key} = {value}\n' for key, value in TINY.items())


def write_pairs(root, split, count, size=16, seed=0):
    """ smooth random clean grids with noisy counterparts, persisted like a built dataset """
    rng = np.random.default_rng(seed)
    records = []
    for index in range(count):
        clean = np.tanh(rng.standard_normal((size, size)))
        corrupted = np.clip(clean + 0.2 * rng.standard_normal((size, size)), -1.0, 1.0)
        clean_path = os.path.join('clean', f'{split}{index}.png')
        corrupted_path = os.path.join('corrupted', f'{split}{index}_0.png')
        save_grid(os.path.join(root, clean_path), clean)
        save_grid(os.path.join(root, corrupted_path), corrupted)
        records.append(PairRecord(f'{split}{index}', clean_path, corrupted_path, 0.75,
                                  MotionTrajectory.identity(size), index))
    manifest = DatasetManifest(records, split, root=root)
    write_manifest(manifest)
    return manifest


def read_log(out_dir):
    with open(os.path.join(out_dir, TRAIN_LOG_NAME), encoding='utf-8') as log_file:
        return [json.loads(line) for line in log_file]


class ScheduleTests(SimpleTestCase):

    def test_linear_warmup_then_constant(self):
        for step in range(1, 30):
            self.assertEqual(learning_rate_at(step, 1e-4, 30), 1e-4 * step / 30)
        for step in (30, 31, 500):
            self.assertEqual(learning_rate_at(step, 1e-4, 30), 1e-4)
        self.assertEqual(learning_rate_at(1, 1e-4, 0), 1e-4)
        with self.assertRaises(ParameterError):
            learning_rate_at(0, 1e-4, 30)

    def test_config_defaults_and_validation(self):
        config = TrainConfig()
        self.assertEqual((config.lr, config.warmup_steps, config.grad_clip_norm), (1e-4, 30, 0.1))
        self.assertEqual((config.p_drop, config.seed, config.variant), (0.1, 1, Variant.PRIMARY))
        self.assertEqual((config.beta1, config.beta2, config.weight_decay), (0.9, 0.999, 0.0))
        with self.assertRaises(ParameterError):
            TrainConfig(grad_clip_norm=0.0)
        with self.assertRaises(ParameterError):
            TrainConfig(p_drop=1.5)
        with self.assertRaises(ParameterError):
            TrainConfig(variant='both')


class TrainStepTests(SimpleTestCase):

    def setUp(self):
        generator = torch.Generator().manual_seed(0)
        clean = torch.tanh(torch.randn(4, 1, 16, 16, generator=generator))
        self.batch = (clean, (clean + 0.1 * torch.randn(4, 1, 16, 16, generator=generator)).clamp(-1, 1))
        self.codec = IdentityCodec(CodecSpec())

    def run_step(self, variant, step=1, p_drop=0.1, batch=None, drop_hook=None):
        model = build_model(ModelConfig(variant=variant, **TINY), seed=1)
        config = TrainConfig(variant=variant, p_drop=p_drop)
        optimizer = build_optimizer(model, config)
        result = train_step(model, batch or self.batch, optimizer, step, config, self.codec,
                            torch.Generator().manual_seed(1), drop_hook)
        return result, optimizer

    def test_gradient_norm_is_clipped_and_lr_scheduled(self):
        result, optimizer = self.run_step(Variant.PRIMARY, step=3)
        self.assertLessEqual(result.grad_norm, 0.1 + 1e-6)
        self.assertGreater(result.pre_clip_norm, 0.0)
        self.assertEqual(result.lr, 1e-4 * 3 / 30)
        self.assertEqual(optimizer.param_groups[0]['lr'], result.lr)
        self.assertTrue(np.isfinite(result.loss))

    def test_drop_rules_seen_by_the_model(self):
        seen = []
        self.run_step(Variant.PRIMARY, p_drop=1.0, drop_hook=seen.append)
        self.run_step(Variant.BIS, p_drop=1.0, drop_hook=seen.append)
        primary, bis = seen
        self.assertEqual(primary.y.abs().sum().item(), 0.0)
        self.assertIsNotNone(primary.control)
        self.assertIsNone(primary.control_keep)
        self.assertEqual(bis.y.abs().sum().item(), 0.0)
        self.assertFalse(bool(bis.control_keep.any()))

    def test_non_finite_loss_raises_with_a_snapshot(self):
        clean, corrupted = self.batch
        poisoned = (clean.clone().fill_(float('nan')), corrupted)
        with self.assertRaises(TrainingDivergedError) as raised:
            self.run_step(Variant.PRIMARY, step=7, batch=poisoned)
        self.assertEqual(raised.exception.diagnostics['step'], 7)
        self.assertIn('t_min', raised.exception.diagnostics)


class FitTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dataset = os.path.join(self.tmp.name, 'dataset')
        self.train = write_pairs(self.dataset, 'train', 8)
        self.val = write_pairs(self.dataset, 'val', 2, seed=1)
        self.model_config = ModelConfig(**TINY)
        self.codec = IdentityCodec(CodecSpec())

    def fit(self, name, **changes):
        options = dict(epochs=200, batch_size=4, max_steps=200, eval_every=0)
        options.update(changes)
        config = TrainConfig(**options)
        return fit(self.train, self.model_config, config, self.codec, os.path.join(self.tmp.name, name),
                   val_manifest=self.val, sample_config=SampleConfig(steps=2))

    def test_pair_dataset(self):
        dataset = PairDataset(self.train)
        self.assertEqual(len(dataset), 8)
        clean, corrupted = dataset[0]
        self.assertEqual(tuple(clean.shape), (1, 16, 16))
        self.assertEqual(clean.dtype, torch.float32)

    def test_smoke_run_clips_every_step_and_reruns_bit_exactly(self):
        first = self.fit('first')
        self.assertEqual(first.steps, 200)

        records = read_log(os.path.join(self.tmp.name, 'first'))
        self.assertEqual([record['step'] for record in records], list(range(1, 201)))
        for record in records:
            self.assertLessEqual(record['grad_norm'], 0.1 + 1e-6)
            expected = 1e-4 * record['step'] / 30 if record['step'] < 30 else 1e-4
            self.assertEqual(record['lr'], expected)
        self.assertEqual(records[-1]['epoch'], 100)

        # single-batch losses are noisy; compare the opening and closing windows
        self.assertLess(np.mean(first.losses[-20:]), np.mean(first.losses[:20]))

        second = self.fit('second')
        self.assertEqual(first.losses, second.losses)
        first_parameters = read_archive(first.checkpoint, 'backbone')['parameters']
        second_parameters = read_archive(second.checkpoint, 'backbone')['parameters']
        for name, tensor in first_parameters.items():
            self.assertTrue(torch.equal(tensor, second_parameters[name]), name)

        model, metadata = load_checkpoint(first.checkpoint)
        self.assertEqual(os.path.basename(first.checkpoint), CHECKPOINT_NAME)
        self.assertEqual(metadata['optimizer'], OPTIMIZER_NOTE)
        self.assertEqual(metadata['steps'], '200')
        self.assertEqual(model.config, self.model_config)

    def test_validation_runs_every_eval_every_steps(self):
        result = self.fit('validated', max_steps=4, eval_every=2, eval_count=2)
        self.assertEqual([evaluation['step'] for evaluation in result.evaluations], [2, 4])
        for evaluation in result.evaluations:
            self.assertTrue(-1.0 <= evaluation['val_ssim'] <= 1.0)
            self.assertGreaterEqual(evaluation['val_mae'], 0.0)
        validation_records = [record for record in read_log(os.path.join(self.tmp.name, 'validated'))
                              if 'val_ssim' in record]
        self.assertEqual(len(validation_records), 2)

    def test_variant_mismatch_and_empty_split(self):
        with self.assertRaises(ParameterError):
            self.fit('mismatch', variant=Variant.BIS)
        empty = DatasetManifest([], 'train', root=self.dataset)
        with self.assertRaises(ParameterError):
            fit(empty, self.model_config, TrainConfig(), self.codec, os.path.join(self.tmp.name, 'empty'))


class TrainCommandTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dataset = os.path.join(self.tmp.name, 'dataset')
        write_pairs(self.dataset, 'train', 4)
        write_pairs(self.dataset, 'val', 0)
        self.config = os.path.join(self.tmp.name, 'run.cfg')
        with open(self.config, 'w', encoding='utf-8') as config_file:
            config_file.write(TINY_CONFIG_TEXT + 'train.batch_size = 2\n')

    def train(self, out, *args):
        call_command('train', '--config', self.config, '--dataset', self.dataset, '--out', out,
                     '--max-steps', '3', *args, stdout=io.StringIO())

    def test_both_variants_train_to_completion(self):
        for variant in Variant:
            out = os.path.join(self.tmp.name, variant.value)
            self.train(out, '--variant', variant.value)
            model, metadata = load_checkpoint(os.path.join(out, CHECKPOINT_NAME))
            self.assertIs(model.config.variant, variant)
            self.assertEqual(metadata['seed'], '1')
            with open(os.path.join(out, 'config.txt'), encoding='utf-8') as echoed:
                self.assertIn(f'model.variant = {variant.value}', echoed.read())
            self.assertEqual(read_archive(os.path.join(out, CHECKPOINT_NAME), 'backbone')['kind'], 'backbone')

    def test_unknown_config_key_writes_nothing(self):
        with open(self.config, 'a', encoding='utf-8') as config_file:
            config_file.write('train.learning_rate = 0.1\n')
        out = os.path.join(self.tmp.name, 'rejected')
        with self.assertRaises(CommandError) as raised:
            self.train(out)
        self.assertEqual(raised.exception.returncode, EXIT_CONFIG_ERROR)
        self.assertFalse(os.path.exists(out))

    def test_model_that_does_not_fit_the_images(self):
        with open(self.config, 'w', encoding='utf-8') as config_file:
            config_file.write(TINY_CONFIG_TEXT.replace('model.latent_size = 16', 'model.latent_size = 32'))
        out = os.path.join(self.tmp.name, 'wrong_size')
        with self.assertRaises(CommandError) as raised:
            self.train(out)
        self.assertEqual(raised.exception.returncode, EXIT_CONFIG_ERROR)
        self.assertFalse(os.path.exists(out))


@tag('slow')
class DeskExperimentTests(SimpleTestCase):
    """
    End-to-end runs at 128 px on gated phantom pairs. Both variants are
    trained once for the class; run with `manage.py test --tag slow`.
    """
    size = 128
    steps = 3000
    model_options = dict(latent_size=128, patch_size=8, hidden_dim=128, depth=4, heads=4, control_depth=2)

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        settings = BuildSettings(gate=GateSpec(0.6, 0.9, max_retries=50), failure_tolerance=0.05, workers=4)
        manifests = build_dataset(phantom_sources(560, cls.size), os.path.join(cls.tmp.name, 'dataset'), settings)
        cls.train_split, cls.test_split = manifests['train'], manifests['test']
        cls.codec = IdentityCodec(CodecSpec())
        cls.models = {variant: cls.train_variant(variant) for variant in Variant}

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    @classmethod
    def train_variant(cls, variant):
        model_config = ModelConfig(variant=variant, **cls.model_options)
        train_config = TrainConfig(variant=variant, epochs=1000, max_steps=cls.steps, eval_every=0)
        result = fit(cls.train_split, model_config, train_config, cls.codec, os.path.join(cls.tmp.name, variant.value))
        model, _ = load_checkpoint(result.checkpoint)
        return model.eval()

    def restored_scores(self, steps):
        pairs = [self.test_split.load_pair(record) for record in self.test_split.records]
        restored = restore_batch(self.models[Variant.PRIMARY], [corrupted for _, corrupted in pairs],
                                 SampleConfig(steps=steps, guidance=1.0), codec=self.codec)
        before = np.array([ssim(to_unit(clean), to_unit(corrupted)) for clean, corrupted in pairs])
        after = np.array([ssim(to_unit(clean), to_unit(output.numpy())) for (clean, _), output in zip(pairs, restored)])
        return before, after

    def test_dataset_is_large_enough(self):
        self.assertGreaterEqual(len(self.train_split), 400)
        self.assertGreaterEqual(len(self.test_split), 50)

    def test_restoration_beats_the_corrupted_input(self):
        before, after = self.restored_scores(steps=5)
        self.assertGreaterEqual(np.mean(after > before), 0.9)
        self.assertGreaterEqual(np.median(after - before), 0.05)

    def test_quality_plateaus_after_five_steps(self):
        _, five = self.restored_scores(steps=5)
        _, forty = self.restored_scores(steps=40)
        self.assertLessEqual(abs(five.mean() - forty.mean()), 0.02)

    def test_unguided_samples_from_bis_are_closer_to_the_clean_set(self):
        cleans = [self.test_split.load_pair(record)[0] for record in self.test_split.records]
        count = len(cleans)
        config = SampleConfig(steps=5, guidance=0.0)
        bis = restore_batch(self.models[Variant.BIS], [None] * count, config, codec=self.codec)
        primary = restore_batch(self.models[Variant.PRIMARY], [np.zeros((self.size, self.size))] * count, config,
                                codec=self.codec)

        extractor = build_extractor()
        reference = fit_stats(extract_features(cleans, extractor))

        def fid(samples):
            features = extract_features([image[0].numpy() for image in samples], extractor)
            return frechet_distance(fit_stats(features), reference)

        self.assertLess(fid(bis), fid(primary))
