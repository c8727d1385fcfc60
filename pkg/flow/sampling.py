"""
Guided sampling.

Starts from seeded Gaussian noise at t = 1 and integrates the guided velocity
down to t = 0 on a uniform grid, then decodes. Classifier-free guidance mixes a
conditional branch (y = control = encoded source) with an unconditional one
(PRIMARY keeps control, BIS drops it).
"""
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
import torch

from main.exceptions import ContractError, ParameterError, ShapeError
from main.logs import flowrestore_logger

from .codecs import CodecSpec, IdentityCodec
from .networks import ConditioningBundle, Variant
from .paths import TIMESTEP_EPS, check_same_shape


class Solver(str, Enum):
    EULER = 'euler'
    HEUN2 = 'heun2'


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 5
    guidance: float = 1.0
    solver: Solver = Solver.EULER
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, 'solver', Solver(self.solver))
        except ValueError:
            raise ParameterError(f'unknown solver {self.solver!r}')
        if self.steps < 1:
            raise ParameterError(f'steps must be at least 1, got {self.steps}')
        if self.guidance < 0:
            raise ParameterError(f'guidance must be non-negative, got {self.guidance}')


def cfg_velocity(v_cond, v_uncond, guidance):
    check_same_shape(v_cond, v_uncond, 'conditional and unconditional velocity')
    # the two endpoints are returned as-is so guidance 1 is bit-exact
    if guidance == 1:
        return v_cond
    if guidance == 0:
        return v_uncond
    return v_uncond + guidance * (v_cond - v_uncond)


def time_grid(steps):
    """ uniform grid from t = 1 to t = 0, steps + 1 points """
    return torch.linspace(1.0, 0.0, steps + 1, dtype=torch.float64)


class GuidedVelocity:
    """
    Velocity field the integrator sees. With guidance 1 only the conditional
    branch is evaluated unless `two_branch` forces both.
    """

    def __init__(self, model, source_latent, variant, guidance, latent_shape=None, two_branch=False, device=None):
        self.model = model
        self.guidance = guidance
        self.two_branch = two_branch
        self.variant = Variant(variant)

        if source_latent is None:
            if self.variant is Variant.PRIMARY:
                raise ContractError('the primary variant cannot sample without a source image')
            self.cond_bundle = None
            zeros = torch.zeros(latent_shape, device=device)
            self.uncond_bundle = ConditioningBundle(y=zeros, control=None)
        else:
            self.cond_bundle = ConditioningBundle.from_source(source_latent)
            self.uncond_bundle = ConditioningBundle.unconditional(source_latent, self.variant)

    def evaluate(self, x, t, bundle):
        batch_t = torch.full((x.shape[0],), float(t), dtype=x.dtype, device=x.device)
        return self.model(x, batch_t.clamp(TIMESTEP_EPS, 1.0 - TIMESTEP_EPS), bundle)

    def __call__(self, x, t):
        if self.cond_bundle is None:
            # no source: only the unconditional branch exists
            return self.evaluate(x, t, self.uncond_bundle)

        if self.guidance == 1 and not self.two_branch:
            return self.evaluate(x, t, self.cond_bundle)
        if self.guidance == 0 and not self.two_branch:
            return self.evaluate(x, t, self.uncond_bundle)

        v_cond = self.evaluate(x, t, self.cond_bundle)
        v_uncond = self.evaluate(x, t, self.uncond_bundle)
        return cfg_velocity(v_cond, v_uncond, self.guidance)


def integrate(field, x, steps, solver=Solver.EULER):
    """ integrate dx/dt = field(x, t) from t = 1 to t = 0 """
    solver = Solver(solver)
    if steps < 1:
        raise ParameterError(f'steps must be at least 1, got {steps}')

    grid = time_grid(steps)
    for index in range(steps):
        t_now, t_next = grid[index].item(), grid[index + 1].item()
        h = t_next - t_now
        v_now = field(x, t_now)
        if solver is Solver.EULER:
            x = x + h * v_now
        else:
            x_pred = x + h * v_now
            v_next = field(x_pred, t_next)
            x = x + h * 0.5 * (v_now + v_next)
    return x


def model_device(model):
    try:
        return next(model.parameters()).device
    except (AttributeError, StopIteration):
        return torch.device('cpu')


def as_image_batch(source, channels):
    """ (H, W), (C, H, W) or (1, C, H, W), numpy or torch -> (1, C, H, W) float32 """
    image = torch.as_tensor(np.asarray(source) if not torch.is_tensor(source) else source)
    image = image.float()
    if image.ndim == 2:
        image = image[None]
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or image.shape[0] != 1 or image.shape[1] != channels:
        raise ShapeError(f'expected a single {channels}-channel image, got shape {tuple(image.shape)}')
    return image


def default_codec(model_config):
    channels = model_config.latent_channels
    return IdentityCodec(CodecSpec(latent_channels=channels, image_channels=channels))


def sample(model, source, config, model_config=None, codec=None, two_branch=False):
    """ one restored (or, for BIS without a source, generated) image, (C, H, W) in [-1, 1] """
    model_config = model_config or model.config
    codec = codec or default_codec(model_config)
    device = model_device(model)

    if source is None and model_config.variant is Variant.PRIMARY:
        raise ContractError('the primary variant cannot sample without a source image')

    with torch.no_grad():
        source_latent = None
        latent_shape = (1, *model_config.latent_shape)
        if source is not None:
            image = as_image_batch(source, codec.spec.image_channels).to(device)
            source_latent = codec.encode(image)
            if tuple(source_latent.shape) != latent_shape:
                raise ShapeError(
                    f'source encodes to {tuple(source_latent.shape)}, the model expects {latent_shape}'
                )

        generator = torch.Generator().manual_seed(config.seed)
        noise = torch.randn(latent_shape, generator=generator).to(device)

        field = GuidedVelocity(
            model, source_latent, model_config.variant, config.guidance,
            latent_shape=latent_shape, two_branch=two_branch, device=device,
        )
        if source_latent is None and config.guidance != 0:
            flowrestore_logger.info('no source image: guidance %.2f has nothing to guide', config.guidance)

        latent = integrate(field, noise, config.steps, config.solver)
        return codec.decode(latent)[0].cpu()


def restore_batch(model, sources, config, model_config=None, codec=None):
    """ sample each source with seed + index; output order follows input order """
    sources = list(sources)
    if not sources:
        raise ParameterError('nothing to restore')
    return [
        sample(model, source, replace(config, seed=config.seed + index), model_config, codec)
        for index, source in enumerate(sources)
    ]
