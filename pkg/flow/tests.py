import io
import os
import tempfile

import numpy as np
import torch
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase

from main.exceptions import EXIT_RUNTIME_ERROR, CheckpointError, ContractError, ParameterError, ShapeError
from main.imaging import load_directory, load_grid, save_grid

from .checkpoints import load_checkpoint, load_codec, read_archive, resolve_codec, save_checkpoint, save_codec
from .codecs import CodecKind, CodecSpec, IdentityCodec, StridedAutoencoder, build_codec, train_autoencoder
from .networks import (
    ConditioningBundle, ModelConfig, PatchEmbed, TimestepEmbedder, Variant, apply_condition_drop, build_model,
    patchify, unpatchify,
)
from .paths import (
    TIMESTEP_EPS, TimestepDistribution, fm_loss, interpolate, make_flow_sample, sample_timesteps, target_velocity,
)
from .sampling import SampleConfig, Solver, cfg_velocity, integrate, restore_batch, sample, time_grid

TINY = dict(latent_size=16, patch_size=4, hidden_dim=32, depth=2, heads=2, control_depth=1)


def tiny_model(variant=Variant.PRIMARY, seed=0):
    """
    A seeded backbone whose output is not identically zero: every parameter
    except the zero-initialised control projections gets a small perturbation.
    """
    model = build_model(ModelConfig(variant=variant, **TINY), seed=seed)
    with torch.no_grad():
        for name, parameter in model.named_parameters():
            if not name.startswith('control_projections'):
                parameter.add_(0.05 * torch.randn_like(parameter))
    return model.eval()


def phantom_like(seed, size=16):
    return np.tanh(np.random.default_rng(seed).standard_normal((size, size)))


class FlowPathTests(SimpleTestCase):

    def setUp(self):
        generator = torch.Generator().manual_seed(0)
        self.x = torch.randn(3, 1, 8, 8, generator=generator, dtype=torch.float64)
        self.noise = torch.randn(3, 1, 8, 8, generator=generator, dtype=torch.float64)

    def test_endpoints(self):
        self.assertTrue(torch.equal(interpolate(self.x, self.noise, 0.0), self.x))
        self.assertTrue(torch.equal(interpolate(self.x, self.noise, 1.0), self.noise))

    def test_velocity_is_the_time_derivative_of_the_path(self):
        h = 1e-6
        for t in (0.1, 0.5, 0.9):
            difference = (interpolate(self.x, self.noise, t + h) - interpolate(self.x, self.noise, t)) / h
            torch.testing.assert_close(difference, target_velocity(self.x, self.noise), atol=1e-6, rtol=0)

    def test_per_sample_times_broadcast(self):
        t = torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64)
        x_t = interpolate(self.x, self.noise, t)
        self.assertTrue(torch.equal(x_t[0], self.x[0]))
        self.assertTrue(torch.equal(x_t[2], self.noise[2]))
        torch.testing.assert_close(x_t[1], (self.x[1] + self.noise[1]) / 2)

    def test_loss_matches_the_mean_squared_oracle(self):
        predicted = torch.full((2, 1, 4, 4), 3.0)
        target = torch.full((2, 1, 4, 4), 1.0)
        self.assertEqual(fm_loss(predicted, target).item(), 4.0)
        sample = make_flow_sample(self.x, self.noise, torch.full((3,), 0.3, dtype=torch.float64))
        self.assertEqual(fm_loss(sample.target_v, sample.target_v).item(), 0.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            interpolate(self.x, self.noise[:2], 0.5)
        with self.assertRaises(ShapeError):
            fm_loss(self.x, self.noise[:, :, :4])

    def test_timesteps_are_logit_normal_and_inside_the_open_interval(self):
        generator = torch.Generator().manual_seed(1)
        t = sample_timesteps(20000, mean=0.5, std=1.0, generator=generator)
        self.assertEqual(t.dtype, torch.float32)
        self.assertTrue(bool(((t >= TIMESTEP_EPS) & (t <= 1 - TIMESTEP_EPS)).all()))
        z = torch.logit(t.double())
        self.assertAlmostEqual(z.mean().item(), 0.5, delta=0.05)
        self.assertAlmostEqual(z.std().item(), 1.0, delta=0.05)

    def test_extreme_logits_are_clamped(self):
        t = TimestepDistribution(mean=40.0, std=1.0).sample(10, generator=torch.Generator().manual_seed(0))
        self.assertTrue(bool((t < 1).all()))

    def test_timestep_parameters(self):
        with self.assertRaises(ParameterError):
            sample_timesteps(0)
        with self.assertRaises(ParameterError):
            sample_timesteps(4, std=0.0)
        with self.assertRaises(ParameterError):
            TimestepDistribution(std=-1.0)


class BackboneTests(SimpleTestCase):

    def setUp(self):
        generator = torch.Generator().manual_seed(3)
        self.x_t = torch.randn(2, 1, 16, 16, generator=generator)
        self.source = torch.randn(2, 1, 16, 16, generator=generator)
        self.other = torch.randn(2, 1, 16, 16, generator=generator)
        self.t = torch.tensor([0.3, 0.7])

    def test_config_validation(self):
        with self.assertRaises(ParameterError):
            ModelConfig(latent_size=16, patch_size=5)
        with self.assertRaises(ParameterError):
            ModelConfig(depth=2, control_depth=3)
        with self.assertRaises(ParameterError):
            ModelConfig(variant='tertiary')
        self.assertEqual(ModelConfig(**TINY).num_tokens, 16)

    def test_output_has_the_latent_shape(self):
        model = tiny_model()
        with torch.no_grad():
            v = model(self.x_t, self.t, ConditioningBundle.from_source(self.source))
        self.assertEqual(tuple(v.shape), (2, 1, 16, 16))
        self.assertTrue(bool(torch.isfinite(v).all()))

    def test_untrained_control_branch_is_neutral(self):
        model = tiny_model(Variant.BIS)
        with torch.no_grad():
            reference = model(self.x_t, self.t, ConditioningBundle(y=self.source, control=self.source))
            swapped = model(self.x_t, self.t, ConditioningBundle(y=self.source, control=self.other))
            absent = model(self.x_t, self.t, ConditioningBundle(y=self.source, control=None))
        self.assertTrue(torch.equal(reference, swapped))
        self.assertTrue(torch.equal(reference, absent))

    def test_y_changes_the_output(self):
        model = tiny_model()
        with torch.no_grad():
            a = model(self.x_t, self.t, ConditioningBundle(y=self.source, control=self.source))
            b = model(self.x_t, self.t, ConditioningBundle(y=torch.zeros_like(self.source), control=self.source))
        self.assertFalse(torch.equal(a, b))

    def test_primary_model_refuses_an_absent_control(self):
        with self.assertRaises(ContractError):
            tiny_model()(self.x_t, self.t, ConditioningBundle(y=self.source, control=None))

    def test_wrong_latent_shape(self):
        with self.assertRaises(ShapeError):
            tiny_model()(self.x_t[:, :, :8, :8], self.t, ConditioningBundle.from_source(self.source[:, :, :8, :8]))

    def test_timesteps_must_be_strictly_inside_the_unit_interval(self):
        embedder = TimestepEmbedder(8)
        with self.assertRaises(ParameterError):
            embedder(torch.tensor([0.0, 0.5]))
        with self.assertRaises(ParameterError):
            embedder(torch.tensor([1.0]))

    def test_patchify_inverse(self):
        grid = torch.arange(2 * 2 * 8 * 8, dtype=torch.float32).reshape(2, 2, 8, 8)
        tokens = patchify(grid, 4)
        self.assertEqual(tuple(tokens.shape), (2, 4, 2 * 16))
        self.assertTrue(torch.equal(tokens[0, 1, :4], grid[0, 0, 0, 4:8]))
        self.assertTrue(torch.equal(unpatchify(tokens, 4, 2, 8), grid))

    def test_control_blocks_start_as_copies(self):
        model = build_model(ModelConfig(**TINY), seed=0)
        for name, tensor in model.control_blocks[0].state_dict().items():
            self.assertTrue(torch.equal(tensor, model.blocks[0].state_dict()[name]))
        for projection in model.control_projections:
            self.assertEqual(projection.weight.abs().sum().item(), 0.0)


class ConditionDropTests(SimpleTestCase):

    def setUp(self):
        self.latent = torch.ones(64, 1, 4, 4)
        self.bundle = ConditioningBundle.from_source(self.latent)

    def test_nothing_is_dropped_at_zero_probability(self):
        dropped = apply_condition_drop(self.bundle, 0.0, Variant.BIS)
        self.assertTrue(torch.equal(dropped.y, self.latent))
        self.assertIsNone(dropped.control_keep)
        self.assertFalse(bool(dropped.y_dropped.any()))

    def test_primary_drops_y_and_keeps_control(self):
        dropped = apply_condition_drop(self.bundle, 1.0, Variant.PRIMARY)
        self.assertEqual(dropped.y.abs().sum().item(), 0.0)
        self.assertTrue(torch.equal(dropped.control, self.latent))
        self.assertIsNone(dropped.control_keep)

    def test_bis_drops_y_and_control_together(self):
        dropped = apply_condition_drop(self.bundle, 0.5, Variant.BIS, torch.Generator().manual_seed(0))
        y_zero = dropped.y.flatten(1).abs().sum(dim=1) == 0
        self.assertTrue(torch.equal(y_zero, dropped.y_dropped))
        self.assertTrue(torch.equal(dropped.control_keep, ~dropped.y_dropped))
        self.assertTrue(0 < int(dropped.y_dropped.sum()) < 64)

    def test_drop_rate_follows_the_probability(self):
        bundle = ConditioningBundle.from_source(torch.ones(20000, 1, 1, 1))
        dropped = apply_condition_drop(bundle, 0.1, Variant.PRIMARY, torch.Generator().manual_seed(1))
        self.assertAlmostEqual(dropped.y_dropped.float().mean().item(), 0.1, delta=0.01)

    def test_primary_needs_control(self):
        with self.assertRaises(ContractError):
            apply_condition_drop(ConditioningBundle(y=self.latent, control=None), 0.1, Variant.PRIMARY)
        with self.assertRaises(ParameterError):
            apply_condition_drop(self.bundle, 1.5, Variant.BIS)

    def test_unconditional_bundles(self):
        primary = ConditioningBundle.unconditional(self.latent, Variant.PRIMARY)
        bis = ConditioningBundle.unconditional(self.latent, Variant.BIS)
        self.assertEqual(primary.y.abs().sum().item(), 0.0)
        self.assertTrue(torch.equal(primary.control, self.latent))
        self.assertTrue(bis.control_absent)


class LinearField:
    """ dx/dt = rate * x, exact solution x(0) = x(1) * exp(-rate) """

    def __init__(self, rate=1.0):
        self.rate = rate

    def __call__(self, x, t):
        return self.rate * x


class GuidanceAndSolverTests(SimpleTestCase):

    def test_cfg_algebra(self):
        generator = torch.Generator().manual_seed(0)
        for _ in range(100):
            v = torch.randn(1, 1, 4, 4, generator=generator)
            guidance = float(torch.rand(1, generator=generator).item() * 5)
            self.assertTrue(torch.equal(cfg_velocity(v, v, guidance), v))

    def test_cfg_endpoints_and_extrapolation(self):
        v_cond, v_uncond = torch.full((1, 1, 2, 2), 2.0), torch.zeros(1, 1, 2, 2)
        self.assertIs(cfg_velocity(v_cond, v_uncond, 1), v_cond)
        self.assertIs(cfg_velocity(v_cond, v_uncond, 0), v_uncond)
        self.assertTrue(torch.equal(cfg_velocity(v_cond, v_uncond, 1.5), torch.full((1, 1, 2, 2), 3.0)))
        with self.assertRaises(ShapeError):
            cfg_velocity(v_cond, torch.zeros(1, 1, 3, 3), 1.5)

    def test_time_grid_runs_from_noise_to_data(self):
        grid = time_grid(5)
        self.assertEqual(grid[0].item(), 1.0)
        self.assertEqual(grid[-1].item(), 0.0)
        self.assertEqual(len(grid), 6)

    def test_solver_orders(self):
        x1 = torch.ones(1, dtype=torch.float64)
        exact = np.exp(-1.0)
        steps = np.array([4, 8, 16, 32, 64])
        for solver, order in ((Solver.EULER, 1), (Solver.HEUN2, 2)):
            errors = [abs(integrate(LinearField(), x1, int(n), solver).item() - exact) for n in steps]
            slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
            self.assertLess(abs(-slope - order), 0.3, f'{solver.value} slope {slope}')

    def test_sample_config_validation(self):
        with self.assertRaises(ParameterError):
            SampleConfig(steps=0)
        with self.assertRaises(ParameterError):
            SampleConfig(guidance=-0.5)
        with self.assertRaises(ParameterError):
            SampleConfig(solver='rk4')
        self.assertEqual(SampleConfig(), SampleConfig(5, 1.0, Solver.EULER, 0))


class SamplingTests(SimpleTestCase):

    def setUp(self):
        self.model = tiny_model()
        self.sources = [phantom_like(seed) for seed in range(4)]

    def test_guidance_one_fast_path_equals_two_branch_path(self):
        for solver in Solver:
            config = SampleConfig(steps=3, guidance=1.0, solver=solver, seed=5)
            fast = sample(self.model, self.sources[0], config)
            both = sample(self.model, self.sources[0], config, two_branch=True)
            self.assertTrue(torch.equal(fast, both))

    def test_guidance_changes_the_output(self):
        plain = sample(self.model, self.sources[0], SampleConfig(steps=3, guidance=1.0))
        guided = sample(self.model, self.sources[0], SampleConfig(steps=3, guidance=1.5))
        self.assertFalse(torch.equal(plain, guided))

    def test_sampling_is_deterministic_and_bounded(self):
        config = SampleConfig(steps=4, seed=11)
        first = sample(self.model, self.sources[1], config)
        second = sample(self.model, self.sources[1], config)
        self.assertTrue(torch.equal(first, second))
        self.assertEqual(tuple(first.shape), (1, 16, 16))
        self.assertLessEqual(first.abs().max().item(), 1.0)

    def test_restore_batch_derives_seeds_from_position(self):
        config = SampleConfig(steps=2, seed=7)
        single = restore_batch(self.model, self.sources[:1], config)
        self.assertTrue(torch.equal(single[0], sample(self.model, self.sources[0], config)))

        order = [2, 0, 3, 1]
        permuted = restore_batch(self.model, [self.sources[i] for i in order], config)
        for position, index in enumerate(order):
            expected = sample(self.model, self.sources[index], SampleConfig(steps=2, seed=7 + position))
            self.assertTrue(torch.equal(permuted[position], expected))

    def test_restore_batch_reruns_bit_exactly(self):
        config = SampleConfig(steps=2, seed=0)
        first = restore_batch(self.model, self.sources, config)
        second = restore_batch(self.model, self.sources, config)
        self.assertEqual(len(first), 4)
        for a, b in zip(first, second):
            self.assertTrue(torch.equal(a, b))

    def test_restore_batch_needs_sources(self):
        with self.assertRaises(ParameterError):
            restore_batch(self.model, [], SampleConfig())

    def test_absent_source(self):
        with self.assertRaises(ContractError):
            sample(self.model, None, SampleConfig(guidance=0.0))
        generated = sample(tiny_model(Variant.BIS), None, SampleConfig(steps=3, guidance=0.0))
        self.assertEqual(tuple(generated.shape), (1, 16, 16))

    def test_source_of_the_wrong_size(self):
        with self.assertRaises(ShapeError):
            sample(self.model, np.zeros((8, 8)), SampleConfig())


class CodecTests(SimpleTestCase):

    def test_identity_codec(self):
        codec = build_codec(CodecSpec())
        image = torch.linspace(-1, 1, 64).reshape(1, 1, 8, 8)
        self.assertIsInstance(codec, IdentityCodec)
        self.assertTrue(torch.equal(codec.decode(codec.encode(image)), image))
        self.assertEqual(codec.decode(torch.full((1, 1, 2, 2), 3.0)).max().item(), 1.0)

    def test_spec_validation(self):
        with self.assertRaises(ParameterError):
            CodecSpec(spatial_factor=2)
        with self.assertRaises(ParameterError):
            CodecSpec(kind=CodecKind.STRIDED_AE, spatial_factor=3)
        with self.assertRaises(ShapeError):
            CodecSpec(kind=CodecKind.STRIDED_AE, spatial_factor=4).latent_shape(18)

    def test_autoencoder_shapes(self):
        spec = CodecSpec(kind=CodecKind.STRIDED_AE, spatial_factor=4, latent_channels=2)
        codec = build_codec(spec)
        self.assertIsInstance(codec, StridedAutoencoder)
        latent = codec.encode(torch.zeros(3, 1, 16, 16))
        self.assertEqual(tuple(latent.shape), (3, *spec.latent_shape(16)))
        decoded = codec.decode(latent)
        self.assertEqual(tuple(decoded.shape), (3, 1, 16, 16))
        self.assertLessEqual(decoded.abs().max().item(), 1.0)
        with self.assertRaises(ShapeError):
            codec.encode(torch.zeros(1, 1, 18, 18))

    def test_autoencoder_needs_trained_weights(self):
        with self.assertRaises(ParameterError):
            resolve_codec(CodecSpec(kind=CodecKind.STRIDED_AE, spatial_factor=2))
        self.assertIsInstance(resolve_codec(CodecSpec()), IdentityCodec)

    def test_trained_codec_is_frozen_and_reloads(self):
        spec = CodecSpec(kind=CodecKind.STRIDED_AE, spatial_factor=2)
        images = torch.tanh(torch.randn(8, 1, 16, 16, generator=torch.Generator().manual_seed(0)))
        codec, loss = train_autoencoder(build_codec(spec), images, steps=5, batch_size=4)
        self.assertTrue(np.isfinite(loss))
        self.assertFalse(any(parameter.requires_grad for parameter in codec.parameters()))

        with tempfile.TemporaryDirectory() as directory:
            path = save_codec(os.path.join(directory, 'codec.pt'), codec)
            reloaded = resolve_codec(spec, path)
            with self.assertRaises(ParameterError):
                resolve_codec(CodecSpec(kind=CodecKind.STRIDED_AE, spatial_factor=4), path)
        with torch.no_grad():
            self.assertTrue(torch.equal(reloaded.encode(images), codec.encode(images)))


class CheckpointTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = os.path.join(self.tmp.name, 'model.pt')

    def test_round_trip_keeps_outputs_and_metadata(self):
        model = tiny_model(Variant.BIS)
        save_checkpoint(self.path, model, {'steps': 12, 'optimizer': 'adam'})
        reloaded, metadata = load_checkpoint(self.path)
        self.assertEqual(reloaded.config, model.config)
        self.assertEqual(metadata, {'optimizer': 'adam', 'steps': '12'})
        config = SampleConfig(steps=2, guidance=1.5)
        source = phantom_like(0)
        self.assertTrue(torch.equal(sample(model, source, config), sample(reloaded, source, config)))

    def test_archive_layout(self):
        save_checkpoint(self.path, tiny_model())
        archive = read_archive(self.path, 'backbone')
        self.assertEqual(set(archive), {'kind', 'config', 'metadata', 'parameters'})
        self.assertIn('variant = primary', archive['config'])
        with self.assertRaises(ParameterError):
            load_codec(self.path)

    def test_config_that_contradicts_the_weights(self):
        save_checkpoint(self.path, tiny_model())
        archive = torch.load(self.path, weights_only=True)
        archive['config'] = archive['config'].replace('hidden_dim = 32', 'hidden_dim = 64')
        torch.save(archive, self.path)
        with self.assertRaisesMessage(ShapeError, 'patch_embed.proj.weight'):
            load_checkpoint(self.path)

    def test_reloaded_parameters_are_bit_identical_and_resave_stably(self):
        model = tiny_model(Variant.BIS)
        save_checkpoint(self.path, model, {'steps': 3})
        reloaded, metadata = load_checkpoint(self.path)
        for (name, tensor), (other_name, other) in zip(model.state_dict().items(), reloaded.state_dict().items()):
            self.assertEqual(name, other_name)
            self.assertTrue(torch.equal(tensor, other), name)

        resaved = os.path.join(self.tmp.name, 'resaved.pt')
        save_checkpoint(resaved, reloaded, metadata)
        first, second = read_archive(self.path, 'backbone'), read_archive(resaved, 'backbone')
        self.assertEqual(first['config'], second['config'])
        self.assertEqual(first['metadata'], second['metadata'])
        self.assertEqual(list(first['parameters']), list(second['parameters']))
        for name, tensor in first['parameters'].items():
            self.assertEqual(tensor.numpy().tobytes(), second['parameters'][name].numpy().tobytes(), name)

    def test_unreadable_archives_are_checkpoint_errors(self):
        with open(self.path, 'wb') as garbage:
            garbage.write(b'not a checkpoint at all\x00\x01\x02')
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

        open(self.path, 'wb').close()
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

        torch.save({'kind': 'backbone', 'config': ''}, self.path)
        with self.assertRaisesMessage(CheckpointError, 'parameters'):
            load_checkpoint(self.path)


class EmbeddingTests(SimpleTestCase):

    def setUp(self):
        self.config = ModelConfig(**TINY)
        torch.manual_seed(0)
        self.grid = torch.randn(2, 1, 16, 16)

    def test_patch_embedding_matches_a_per_patch_matmul(self):
        embed = PatchEmbed(self.config)
        with torch.no_grad():
            tokens = embed(self.grid)
        weight, bias = embed.proj.weight, embed.proj.bias
        p, side = self.config.patch_size, self.config.grid_size
        for b in range(2):
            for row in range(side):
                for col in range(side):
                    patch = self.grid[b, :, row * p:(row + 1) * p, col * p:(col + 1) * p].reshape(-1)
                    expected = weight @ patch + bias
                    torch.testing.assert_close(tokens[b, row * side + col], expected, atol=1e-5, rtol=1e-5)

    def test_x_y_and_control_share_one_embedding(self):
        model = build_model(ModelConfig(variant=Variant.PRIMARY, **TINY), seed=0).eval()
        source = torch.randn(2, 1, 16, 16)
        bundle = ConditioningBundle(y=source, control=-source)
        t = torch.tensor([0.3, 0.6])

        def embedded_streams():
            seen = []
            handle = model.patch_embed.register_forward_hook(lambda module, args, output: seen.append(output))
            with torch.no_grad():
                model(self.grid, t, bundle)
            handle.remove()
            return seen

        before = embedded_streams()
        self.assertEqual(len(before), 3)
        with torch.no_grad():
            model.patch_embed.proj.weight.add_(0.1)
        after = embedded_streams()
        for old, new in zip(before, after):
            self.assertFalse(torch.equal(old, new))

    def test_timestep_embedding_is_deterministic_and_smooth(self):
        torch.manual_seed(4)
        first = TimestepEmbedder(32)
        torch.manual_seed(4)
        second = TimestepEmbedder(32)
        t = torch.tensor([0.1, 0.5, 0.9])
        with torch.no_grad():
            self.assertTrue(torch.equal(first(t), first(t)))
            self.assertTrue(torch.equal(first(t), second(t)))

            far = (first(torch.tensor([0.9])) - first(torch.tensor([0.1]))).norm()
            coarse = (first(torch.tensor([0.5 + 1e-4])) - first(torch.tensor([0.5]))).norm()
            fine = (first(torch.tensor([0.5 + 1e-6])) - first(torch.tensor([0.5]))).norm()
        self.assertLess(fine, coarse)
        self.assertLess(fine, 1e-2 * far)

    def test_gradients_reach_the_noisy_input(self):
        config = ModelConfig(latent_size=4, patch_size=2, hidden_dim=8, depth=2, heads=2, control_depth=1)
        model = build_model(config, seed=0).double().eval()
        with torch.no_grad():
            for parameter in model.parameters():
                parameter.add_(0.1 * torch.randn_like(parameter))
        generator = torch.Generator().manual_seed(2)
        x_t = torch.randn(1, 1, 4, 4, generator=generator, dtype=torch.float64, requires_grad=True)
        source = torch.randn(1, 1, 4, 4, generator=generator, dtype=torch.float64)
        bundle = ConditioningBundle.from_source(source)
        t = torch.tensor([0.4], dtype=torch.float64)
        self.assertTrue(torch.autograd.gradcheck(lambda x: model(x, t, bundle), (x_t,), eps=1e-6, atol=1e-5))


class ConstantVelocity(torch.nn.Module):
    """ backbone stand-in returning `value` everywhere """

    def __init__(self, value, variant=Variant.PRIMARY):
        super().__init__()
        self.value = value
        self.config = ModelConfig(variant=variant, **TINY)

    def forward(self, x_t, t, bundle):
        return torch.full_like(x_t, self.value)


class IdentityVelocity(ConstantVelocity):
    """ v(x, t) = x """

    def forward(self, x_t, t, bundle):
        return x_t.clone()


class SampleOracleTests(SimpleTestCase):

    def noise(self, seed):
        return torch.randn((1, 1, 16, 16), generator=torch.Generator().manual_seed(seed))[0]

    def test_constant_velocity_lands_at_noise_minus_the_constant(self):
        for solver in Solver:
            for steps in (1, 5, 17):
                result = sample(ConstantVelocity(0.25), phantom_like(0), SampleConfig(steps=steps, solver=solver, seed=3))
                torch.testing.assert_close(result, self.noise(3) - 0.25, atol=1e-5, rtol=0)

    def test_linear_field_converges_to_the_exponential_decay(self):
        config = SampleConfig(steps=512, seed=5)
        result = sample(IdentityVelocity(0.0, Variant.BIS), None, config)
        torch.testing.assert_close(result, self.noise(5) * np.exp(-1.0), atol=2e-3, rtol=2e-3)


class SamplingCommandTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.inputs = os.path.join(self.tmp.name, 'inputs')
        for index in range(3):
            save_grid(os.path.join(self.inputs, f'scan{index}.png'), phantom_like(index))

    def checkpoint(self, variant):
        path = os.path.join(self.tmp.name, f'{variant.value}.pt')
        save_checkpoint(path, tiny_model(variant), {'steps': 0})
        return path

    def out(self, name):
        return os.path.join(self.tmp.name, name)

    def test_restore_writes_one_image_per_input_and_reruns_identically(self):
        checkpoint = self.checkpoint(Variant.PRIMARY)
        for name in ('first', 'second'):
            call_command('restore', '--checkpoint', checkpoint, '--input', self.inputs, '--out', self.out(name),
                         '--steps', '3', '--guidance', '1.5', stdout=io.StringIO())
        names, first = load_directory(self.out('first'))
        _, second = load_directory(self.out('second'))
        self.assertEqual(names, ['scan0', 'scan1', 'scan2'])
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)
            self.assertEqual(a.shape, (16, 16))
        with open(os.path.join(self.out('first'), 'config.txt'), encoding='utf-8') as echoed:
            text = echoed.read()
        self.assertIn('sample.steps = 3', text)
        self.assertIn('sample.guidance = 1.5', text)

    def test_restore_matches_the_library_call(self):
        checkpoint = self.checkpoint(Variant.BIS)
        call_command('restore', '--checkpoint', checkpoint, '--input', self.inputs, '--out', self.out('restored'),
                     '--steps', '2', '--solver', 'heun2', stdout=io.StringIO())
        model, _ = load_checkpoint(checkpoint)
        _, sources = load_directory(self.inputs)
        expected = restore_batch(model, sources, SampleConfig(steps=2, solver=Solver.HEUN2))
        np.testing.assert_array_equal(load_grid(os.path.join(self.out('restored'), 'scan1.png')),
                                      expected[1][0].numpy())

    def test_generate_from_bis_needs_no_sources(self):
        call_command('generate', '--checkpoint', self.checkpoint(Variant.BIS), '--out', self.out('generated'),
                     '--count', '2', '--steps', '2', stdout=io.StringIO())
        names, grids = load_directory(self.out('generated'))
        self.assertEqual(names, ['sample_0000', 'sample_0001'])
        self.assertEqual(grids[0].shape, (16, 16))

    def test_generate_from_primary_warns(self):
        stderr = io.StringIO()
        call_command('generate', '--checkpoint', self.checkpoint(Variant.PRIMARY), '--out', self.out('generated'),
                     '--count', '1', '--steps', '2', stdout=io.StringIO(), stderr=stderr)
        self.assertIn('expected to fail qualitatively', stderr.getvalue())
        self.assertEqual(len(load_directory(self.out('generated'))[0]), 1)

    def test_generate_rejects_an_empty_count(self):
        out = self.out('nothing')
        with self.assertRaises(CommandError) as raised:
            call_command('generate', '--checkpoint', self.checkpoint(Variant.BIS), '--out', out, '--count', '0',
                         stdout=io.StringIO())
        self.assertEqual(raised.exception.returncode, EXIT_RUNTIME_ERROR)
        self.assertFalse(os.path.exists(out))

    def test_unreadable_checkpoint_exits_with_a_runtime_error(self):
        checkpoint = os.path.join(self.tmp.name, 'corrupt.pt')
        with open(checkpoint, 'wb') as garbage:
            garbage.write(os.urandom(64))
        out = self.out('never')
        with self.assertRaises(CommandError) as raised:
            call_command('restore', '--checkpoint', checkpoint, '--input', self.inputs, '--out', out,
                         stdout=io.StringIO())
        self.assertEqual(raised.exception.returncode, EXIT_RUNTIME_ERROR)
        self.assertFalse(os.path.exists(out))
