"""
Linear flow path.

t = 0 is data, t = 1 is noise:
    x_t = (1 - t) * x_data + t * noise
    u   = noise - x_data            (d x_t / dt, constant along the path)

Training regresses u; sampling integrates from t = 1 down to t = 0.
"""
from dataclasses import dataclass

import torch
from torch import Tensor

from main.exceptions import ParameterError, ShapeError

# sampled timesteps never reach the endpoints, which carry no training signal
TIMESTEP_EPS = 1e-5


@dataclass(frozen=True)
class TimestepDistribution:
    """ logit-normal: t = logistic(z), z ~ Normal(mean, std^2) """
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not self.std > 0:
            raise ParameterError(f'timestep std must be positive, got {self.std}')

    def sample(self, count, generator=None, device=None):
        return sample_timesteps(count, self.mean, self.std, generator=generator, device=device)


@dataclass
class FlowSample:
    x_t: Tensor
    t: Tensor
    target_v: Tensor


def check_same_shape(a, b, what='inputs'):
    if a.shape != b.shape:
        raise ShapeError(f'{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}')


def sample_timesteps(count, mean=0.0, std=1.0, generator=None, device=None):
    if count < 1:
        raise ParameterError(f'count must be at least 1, got {count}')
    if not std > 0:
        raise ParameterError(f'timestep std must be positive, got {std}')

    z = torch.randn(count, generator=generator, dtype=torch.float64) * std + mean
    t = torch.sigmoid(z).clamp(TIMESTEP_EPS, 1.0 - TIMESTEP_EPS)
    return t.to(device=device, dtype=torch.float32) if device is not None else t.float()


def expand_time(t, like):
    """ scalar or (B,) time -> broadcastable against a (B, C, H, W) grid """
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if t.ndim == 0:
        return t
    return t.view(-1, *([1] * (like.ndim - 1)))


def interpolate(x_data, noise, t):
    check_same_shape(x_data, noise, 'data and noise')
    t = expand_time(t, x_data)
    return (1 - t) * x_data + t * noise


def target_velocity(x_data, noise):
    check_same_shape(x_data, noise, 'data and noise')
    return noise - x_data


def fm_loss(predicted_v, target_v):
    check_same_shape(predicted_v, target_v, 'predicted and target velocity')
    return torch.mean((predicted_v - target_v) ** 2)


def make_flow_sample(x_data, noise, t):
    return FlowSample(
        x_t=interpolate(x_data, noise, t),
        t=torch.as_tensor(t),
        target_v=target_velocity(x_data, noise),
    )
