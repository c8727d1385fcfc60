"""
Image <-> latent codecs.

IDENTITY runs flow matching directly on pixels. STRIDED_AE is a small
convolutional autoencoder, trained once on its own and then frozen.
"""
from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn

from main.config import dataclass_from_text, dataclass_to_text
from main.exceptions import ParameterError, ShapeError
from main.logs import flowrestore_logger


class CodecKind(str, Enum):
    IDENTITY = 'identity'
    STRIDED_AE = 'strided_ae'


@dataclass(frozen=True)
class CodecSpec:
    kind: CodecKind = CodecKind.IDENTITY
    spatial_factor: int = 1
    latent_channels: int = 1
    image_channels: int = 1

    def __post_init__(self):
        try:
            object.__setattr__(self, 'kind', CodecKind(self.kind))
        except ValueError:
            raise ParameterError(f'unknown codec kind {self.kind!r}')
        if self.spatial_factor < 1 or self.latent_channels < 1 or self.image_channels < 1:
            raise ParameterError('codec factors and channel counts must be positive')
        if self.kind is CodecKind.IDENTITY:
            if self.spatial_factor != 1 or self.latent_channels != self.image_channels:
                raise ParameterError('the identity codec keeps resolution and channel count')
        elif self.spatial_factor & (self.spatial_factor - 1):
            raise ParameterError(f'spatial_factor must be a power of two, got {self.spatial_factor}')

    def latent_shape(self, image_size):
        if image_size % self.spatial_factor:
            raise ShapeError(f'image side {image_size} is not divisible by {self.spatial_factor}')
        side = image_size // self.spatial_factor
        return (self.latent_channels, side, side)

    def to_text(self):
        return dataclass_to_text(self)

    @classmethod
    def from_text(cls, text):
        return dataclass_from_text(cls, text)


class Codec(nn.Module):
    """ deterministic encode/decode pair; decode always lands in [-1, 1] """

    def __init__(self, spec):
        super().__init__()
        self.spec = spec

    def check_image(self, image):
        if image.ndim != 4 or image.shape[1] != self.spec.image_channels:
            raise ShapeError(f'expected (B, {self.spec.image_channels}, H, W) images, got {tuple(image.shape)}')
        height, width = image.shape[-2:]
        if height % self.spec.spatial_factor or width % self.spec.spatial_factor:
            raise ShapeError(
                f'image {height}x{width} is not divisible by spatial factor {self.spec.spatial_factor}'
            )

    def check_latent(self, latent):
        if latent.ndim != 4 or latent.shape[1] != self.spec.latent_channels:
            raise ShapeError(f'expected (B, {self.spec.latent_channels}, h, w) latents, got {tuple(latent.shape)}')

    def encode(self, image):
        self.check_image(image)
        return self.encode_checked(image)

    def decode(self, latent):
        self.check_latent(latent)
        return self.decode_checked(latent).clamp(-1.0, 1.0)

    def encode_checked(self, image):
        raise NotImplementedError

    def decode_checked(self, latent):
        raise NotImplementedError


class IdentityCodec(Codec):

    def encode_checked(self, image):
        return image

    def decode_checked(self, latent):
        return latent


class StridedAutoencoder(Codec):
    """ log2(spatial_factor) stride-2 convolutions down, as many transposed ones up """

    def __init__(self, spec, width=32):
        super().__init__(spec)
        levels = spec.spatial_factor.bit_length() - 1

        layers, channels = [], spec.image_channels
        for level in range(levels):
            out = width * 2 ** level
            layers += [nn.Conv2d(channels, out, 4, stride=2, padding=1), nn.SiLU()]
            channels = out
        layers += [nn.Conv2d(channels, spec.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*layers)

        layers = [nn.Conv2d(spec.latent_channels, channels, 3, padding=1), nn.SiLU()]
        for level in reversed(range(levels)):
            out = width * 2 ** max(level - 1, 0)
            layers += [nn.ConvTranspose2d(channels, out, 4, stride=2, padding=1), nn.SiLU()]
            channels = out
        layers += [nn.Conv2d(channels, spec.image_channels, 3, padding=1), nn.Tanh()]
        self.decoder = nn.Sequential(*layers)

    def encode_checked(self, image):
        return self.encoder(image)

    def decode_checked(self, latent):
        return self.decoder(latent)


def build_codec(spec):
    if spec.kind is CodecKind.IDENTITY:
        return IdentityCodec(spec)
    return StridedAutoencoder(spec)


def freeze(codec):
    codec.eval()
    for parameter in codec.parameters():
        parameter.requires_grad_(False)
    return codec


def train_autoencoder(codec, images, steps=2000, lr=1e-3, batch_size=16, seed=0):
    """
    Plain reconstruction training for a StridedAutoencoder on a (N, C, H, W)
    tensor of [-1, 1] images. Returns the frozen codec and the final loss.
    """
    if not isinstance(codec, StridedAutoencoder):
        raise ParameterError('only the strided autoencoder has parameters to train')
    if steps < 1:
        raise ParameterError(f'steps must be at least 1, got {steps}')

    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(codec.parameters(), lr=lr)
    codec.train()
    loss = torch.tensor(float('nan'))
    for step in range(1, steps + 1):
        index = torch.randint(len(images), (min(batch_size, len(images)),), generator=generator)
        batch = images[index]
        reconstruction = codec.decode_checked(codec.encode(batch))
        loss = torch.mean(torch.abs(reconstruction - batch))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % 200 == 0 or step == steps:
            flowrestore_logger.info('codec step %d: reconstruction l1 %.5f', step, loss.item())

    return freeze(codec), loss.item()
