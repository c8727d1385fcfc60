"""
Feature extractors for the distribution metrics.

The default is a small convolutional encoder with fixed-seed random weights,
frozen for the life of a run. Its FID/KID values only compare runs made with
the same extractor; they are not on the Inception scale. Any class exposing
`dim` and `__call__(batch) -> (n, dim)` can be plugged in through the
`eval.feature_extractor` config key.
"""
import numpy as np
import torch
from django.utils.module_loading import import_string
from torch import nn

from main.exceptions import ConfigError, ParameterError, ShapeError


class RandomConvExtractor(nn.Module):
    dim = 64

    def __init__(self, seed=0, channels=1):
        super().__init__()
        generator_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, 16, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(32, self.dim, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1),
        )
        torch.random.set_rng_state(generator_state)
        self.eval()
        for parameter in self.parameters():
            parameter.requires_grad_(False)

    def forward(self, batch):
        return self.encoder(batch).flatten(1)


def build_extractor(path='evaluation.features.RandomConvExtractor', seed=0):
    try:
        extractor_class = import_string(path)
    except ImportError as exc:
        raise ConfigError(f'cannot import feature extractor {path!r}: {exc}')
    return extractor_class(seed=seed)


def extract_features(images, extractor, batch_size=32):
    """ one row of float64 features per image; images are [-1, 1] grids """
    images = [np.asarray(image, dtype=np.float32) for image in images]
    if not images:
        raise ParameterError('no images to extract features from')
    shape = images[0].shape
    if any(image.shape != shape for image in images):
        raise ShapeError('all images must share one shape for feature extraction')

    stack = torch.from_numpy(np.stack(images))
    if stack.ndim == 3:
        stack = stack[:, None]

    rows = []
    with torch.no_grad():
        for start in range(0, len(stack), batch_size):
            rows.append(extractor(stack[start:start + batch_size]).double().numpy())
    return np.concatenate(rows, axis=0)
