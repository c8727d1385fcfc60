"""
Velocity network.

A diffusion transformer whose only conditioning is the source image latent.
The source enters twice, both times through the one shared patch embedding:
as `y`, read by cross-attention in every block where text tokens used to be,
and as `control`, run through a duplicate of the first `control_depth` blocks
whose outputs are added back through zero-initialised projections.
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import math
import numpy as np
import torch
from torch import nn, Tensor
from torch.utils.checkpoint import checkpoint

from main.config import dataclass_from_text, dataclass_to_text
from main.exceptions import ContractError, ParameterError, ShapeError


class Variant(str, Enum):
    # y dropped alone, control always active
    PRIMARY = 'primary'
    # y and control dropped together, allows unconditional generation
    BIS = 'bis'


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 1
    latent_size: int = 128
    patch_size: int = 8
    hidden_dim: int = 128
    depth: int = 6
    heads: int = 4
    control_depth: int = 3
    variant: Variant = Variant.PRIMARY
    p_drop: float = 0.1
    mlp_ratio: float = 4.0
    grad_checkpointing: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, 'variant', Variant(self.variant))
        except ValueError:
            raise ParameterError(f'unknown variant {self.variant!r}')

        for name in ('latent_channels', 'latent_size', 'patch_size', 'hidden_dim', 'depth', 'heads', 'control_depth'):
            if getattr(self, name) < 1:
                raise ParameterError(f'{name} must be a positive integer, got {getattr(self, name)}')
        if self.latent_size % self.patch_size:
            raise ParameterError(f'patch_size {self.patch_size} does not divide latent_size {self.latent_size}')
        if self.hidden_dim % self.heads:
            raise ParameterError(f'heads {self.heads} does not divide hidden_dim {self.hidden_dim}')
        if self.control_depth > self.depth:
            raise ParameterError(f'control_depth {self.control_depth} exceeds depth {self.depth}')
        if not 0.0 <= self.p_drop <= 1.0:
            raise ParameterError(f'p_drop must lie in [0, 1], got {self.p_drop}')

    @property
    def grid_size(self):
        return self.latent_size // self.patch_size

    @property
    def num_tokens(self):
        return self.grid_size ** 2

    @property
    def latent_shape(self):
        return (self.latent_channels, self.latent_size, self.latent_size)

    def to_text(self):
        return dataclass_to_text(self)

    @classmethod
    def from_text(cls, text):
        return dataclass_from_text(cls, text)


@dataclass
class ConditioningBundle:
    """
    y rows that are all zeros are the ZERO sentinel. `control is None` is the
    ABSENT sentinel for the whole batch; `control_keep` marks rows whose
    control stays active when only part of a batch was dropped.
    """
    y: Tensor
    control: Optional[Tensor]
    control_keep: Optional[Tensor] = None
    y_dropped: Optional[Tensor] = field(default=None, repr=False)

    @classmethod
    def from_source(cls, latent):
        # the same encoded source plays both roles
        return cls(y=latent, control=latent)

    @classmethod
    def unconditional(cls, latent, variant):
        control = latent if Variant(variant) is Variant.PRIMARY else None
        return cls(y=torch.zeros_like(latent), control=control)

    @property
    def batch_size(self):
        return self.y.shape[0]

    @property
    def control_absent(self):
        return self.control is None


def apply_condition_drop(bundle, p_drop, variant, generator=None):
    """ one Bernoulli(p_drop) draw per sample """
    variant = Variant(variant)
    if not 0.0 <= p_drop <= 1.0:
        raise ParameterError(f'p_drop must lie in [0, 1], got {p_drop}')
    if variant is Variant.PRIMARY and bundle.control is None:
        raise ContractError('the primary variant needs an active control signal')

    draws = torch.rand(bundle.batch_size, generator=generator)
    dropped = (draws < p_drop).to(bundle.y.device)
    if not dropped.any():
        return replace(bundle, y_dropped=dropped)

    mask = dropped.view(-1, *([1] * (bundle.y.ndim - 1)))
    y = torch.where(mask, torch.zeros_like(bundle.y), bundle.y)
    if variant is Variant.PRIMARY:
        return replace(bundle, y=y, y_dropped=dropped)

    keep = ~dropped
    if bundle.control_keep is not None:
        keep = keep & bundle.control_keep
    return replace(bundle, y=y, control_keep=keep, y_dropped=dropped)


def patchify(grid, patch_size):
    """ (B, C, H, W) -> (B, H/p * W/p, C * p * p), patches in row-major order """
    batch, channels, height, width = grid.shape
    p = patch_size
    patches = grid.reshape(batch, channels, height // p, p, width // p, p)
    patches = patches.permute(0, 2, 4, 1, 3, 5)
    return patches.reshape(batch, (height // p) * (width // p), channels * p * p)


def unpatchify(tokens, patch_size, channels, size):
    batch = tokens.shape[0]
    p = patch_size
    grid = size // p
    patches = tokens.reshape(batch, grid, grid, channels, p, p)
    patches = patches.permute(0, 3, 1, 4, 2, 5)
    return patches.reshape(batch, channels, size, size)


def sincos_positions(hidden_dim, grid_size):
    """ fixed 2-D sine-cosine positions, (grid_size**2, hidden_dim) """
    def axis_encoding(dim, positions):
        omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
        omega = 1.0 / 10000 ** omega
        angles = np.outer(positions, omega)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    half = hidden_dim // 2
    rows, cols = np.meshgrid(np.arange(grid_size), np.arange(grid_size), indexing='ij')
    encoding = np.concatenate([
        axis_encoding(half, rows.reshape(-1)),
        axis_encoding(hidden_dim - half, cols.reshape(-1)),
    ], axis=1)
    if encoding.shape[1] < hidden_dim:
        encoding = np.pad(encoding, ((0, 0), (0, hidden_dim - encoding.shape[1])))
    return torch.from_numpy(encoding).float()


def zero_linear(in_features, out_features):
    layer = nn.Linear(in_features, out_features)
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class PatchEmbed(nn.Module):
    """ flatten non-overlapping patches and project them to hidden_dim """

    def __init__(self, config):
        super().__init__()
        self.config = config
        patch_dim = config.latent_channels * config.patch_size ** 2
        self.proj = nn.Linear(patch_dim, config.hidden_dim)

    def forward(self, grid):
        expected = self.config.latent_shape
        if grid.ndim != 4 or tuple(grid.shape[1:]) != expected:
            raise ShapeError(f'expected a (B, {", ".join(map(str, expected))}) latent, got {tuple(grid.shape)}')
        return self.proj(patchify(grid, self.config.patch_size))


class TimestepEmbedder(nn.Module):

    def __init__(self, hidden_dim, frequency_dim=256, max_period=10000):
        super().__init__()
        self.frequency_dim = frequency_dim
        self.max_period = max_period
        self.mlp = nn.Sequential(
            nn.Linear(frequency_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim),
        )

    def frequencies(self, t):
        half = self.frequency_dim // 2
        exponents = torch.arange(half, dtype=torch.float32, device=t.device) / half
        freqs = torch.exp(-math.log(self.max_period) * exponents)
        # t lives in (0, 1); spread it over the usual integer timestep scale
        args = (t.float() * 1000.0)[:, None] * freqs[None]
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, t):
        if torch.any(t <= 0) or torch.any(t >= 1):
            raise ParameterError('timesteps must lie strictly inside (0, 1)')
        weight = self.mlp[0].weight
        return self.mlp(self.frequencies(t).to(weight.dtype))


class TransformerBlock(nn.Module):
    """ adaLN-modulated self-attention, cross-attention onto y, MLP """

    def __init__(self, hidden_dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden_dim, elementwise_affine=False, eps=1e-6)
        self.attn = nn.MultiheadAttention(hidden_dim, heads, batch_first=True)
        self.norm_cross = nn.LayerNorm(hidden_dim, eps=1e-6)
        self.cross_attn = nn.MultiheadAttention(hidden_dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(hidden_dim, elementwise_affine=False, eps=1e-6)
        mlp_dim = int(hidden_dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(hidden_dim, mlp_dim),
            nn.GELU(approximate='tanh'),
            nn.Linear(mlp_dim, hidden_dim),
        )
        self.modulation = nn.Sequential(nn.SiLU(), zero_linear(hidden_dim, 6 * hidden_dim))

    def forward(self, x, c, y_tokens):
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.modulation(c).chunk(6, dim=1)

        h = modulate(self.norm1(x), shift_msa, scale_msa)
        x = x + gate_msa.unsqueeze(1) * self.attn(h, h, h, need_weights=False)[0]

        q = self.norm_cross(x)
        x = x + self.cross_attn(q, y_tokens, y_tokens, need_weights=False)[0]

        h = modulate(self.norm2(x), shift_mlp, scale_mlp)
        return x + gate_mlp.unsqueeze(1) * self.mlp(h)


class FinalLayer(nn.Module):

    def __init__(self, hidden_dim, patch_dim):
        super().__init__()
        self.norm = nn.LayerNorm(hidden_dim, elementwise_affine=False, eps=1e-6)
        self.modulation = nn.Sequential(nn.SiLU(), zero_linear(hidden_dim, 2 * hidden_dim))
        self.linear = zero_linear(hidden_dim, patch_dim)

    def forward(self, x, c):
        shift, scale = self.modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm(x), shift, scale))


class I2IFlowTransformer(nn.Module):

    def __init__(self, config):
        super().__init__()
        self.config = config
        hidden = config.hidden_dim

        self.patch_embed = PatchEmbed(config)
        self.register_buffer('positions', sincos_positions(hidden, config.grid_size)[None], persistent=False)
        self.time_embed = TimestepEmbedder(hidden)

        self.blocks = nn.ModuleList([
            TransformerBlock(hidden, config.heads, config.mlp_ratio) for _ in range(config.depth)
        ])
        self.control_blocks = nn.ModuleList([
            TransformerBlock(hidden, config.heads, config.mlp_ratio) for _ in range(config.control_depth)
        ])
        self.control_projections = nn.ModuleList([
            zero_linear(hidden, hidden) for _ in range(config.control_depth)
        ])
        self.final_layer = FinalLayer(hidden, config.latent_channels * config.patch_size ** 2)

        # control blocks start as copies of the blocks they shadow
        for control_block, block in zip(self.control_blocks, self.blocks):
            control_block.load_state_dict(block.state_dict())

    def embed(self, grid):
        return self.patch_embed(grid) + self.positions.to(grid.dtype)

    def run_block(self, block, x, c, y_tokens):
        if self.config.grad_checkpointing and self.training:
            return checkpoint(block, x, c, y_tokens, use_reentrant=False)
        return block(x, c, y_tokens)

    def check_bundle(self, bundle, batch):
        if bundle.control is None and self.config.variant is Variant.PRIMARY:
            raise ContractError('the primary variant needs an active control signal')
        for name in ('y', 'control'):
            value = getattr(bundle, name)
            if value is not None and value.shape[0] != batch:
                raise ShapeError(f'{name} batch {value.shape[0]} does not match x_t batch {batch}')

    def forward(self, x_t, t, bundle):
        batch = x_t.shape[0]
        self.check_bundle(bundle, batch)

        t = torch.as_tensor(t, device=x_t.device)
        if t.ndim == 0:
            t = t.expand(batch)

        x = self.embed(x_t)
        y_tokens = self.embed(bundle.y)
        c = self.time_embed(t)

        control = None
        if bundle.control is not None:
            control = x + self.embed(bundle.control)
            keep = bundle.control_keep
            if keep is not None:
                keep = keep.view(-1, 1, 1).to(x.dtype)

        for index, block in enumerate(self.blocks):
            x = self.run_block(block, x, c, y_tokens)
            if control is not None and index < self.config.control_depth:
                control = self.run_block(self.control_blocks[index], control, c, y_tokens)
                residual = self.control_projections[index](control)
                if keep is not None:
                    residual = residual * keep
                x = x + residual

        tokens = self.final_layer(x, c)
        return unpatchify(tokens, self.config.patch_size, self.config.latent_channels, self.config.latent_size)


def build_model(config, seed=None):
    if seed is not None:
        torch.manual_seed(seed)
    return I2IFlowTransformer(config)
