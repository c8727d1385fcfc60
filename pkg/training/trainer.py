"""
Flow-matching trainer.

Each step encodes the clean target (x_data) and the corrupted source (the
conditioning latent), draws noise and logit-normal timesteps, drops y (and,
for BIS, control) per sample, regresses the path velocity, clips the global
gradient norm and takes one Adam step. The learning rate ramps linearly over
the warm-up steps and then stays constant.

Adam stands in for CAME; the substitution is recorded in checkpoint metadata.
"""
import json
import os
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from main.exceptions import ParameterError, TrainingDivergedError
from main.logs import flowrestore_logger

from evaluation.reports import paired_scores
from flow.checkpoints import save_checkpoint
from flow.networks import ConditioningBundle, Variant, apply_condition_drop, build_model
from flow.paths import fm_loss, make_flow_sample, sample_timesteps
from flow.sampling import SampleConfig, restore_batch

CHECKPOINT_NAME = 'model.pt'
TRAIN_LOG_NAME = 'train_log.jsonl'
OPTIMIZER_NOTE = 'adam (substitute for came)'


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    warmup_steps: int = 30
    grad_clip_norm: float = 0.1
    p_drop: float = 0.1
    seed: int = 1
    variant: Variant = Variant.PRIMARY
    eval_every: int = 500
    eval_count: int = 16
    max_steps: int = 0
    timestep_mean: float = 0.0
    timestep_std: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    mixed_precision: bool = False
    deterministic: bool = True
    device: str = 'cpu'

    def __post_init__(self):
        try:
            object.__setattr__(self, 'variant', Variant(self.variant))
        except ValueError:
            raise ParameterError(f'unknown variant {self.variant!r}')
        if not self.lr > 0:
            raise ParameterError(f'lr must be positive, got {self.lr}')
        if not self.grad_clip_norm > 0:
            raise ParameterError(f'grad_clip_norm must be positive, got {self.grad_clip_norm}')
        if not 0.0 <= self.p_drop <= 1.0:
            raise ParameterError(f'p_drop must lie in [0, 1], got {self.p_drop}')
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError('epochs and batch_size must be positive')
        if self.warmup_steps < 0 or self.max_steps < 0 or self.eval_every < 0:
            raise ParameterError('warmup_steps, max_steps and eval_every cannot be negative')
        if not self.timestep_std > 0:
            raise ParameterError('timestep_std must be positive')


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    pre_clip_norm: float
    lr: float
    dropped: int


@dataclass
class FitResult:
    checkpoint: str
    steps: int
    losses: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)


def learning_rate_at(step, lr, warmup_steps):
    """ 1-based update index -> lr; lr * step / warmup during warm-up, lr afterwards """
    if step < 1:
        raise ParameterError(f'steps are counted from 1, got {step}')
    if warmup_steps == 0 or step >= warmup_steps:
        return lr
    return lr * step / warmup_steps


def global_grad_norm(parameters):
    norms = [p.grad.detach().norm(2) for p in parameters if p.grad is not None]
    if not norms:
        return 0.0
    return torch.norm(torch.stack(norms), 2).item()


class PairDataset(Dataset):
    """ (clean, corrupted) tensors of shape (1, H, W) for one manifest split """

    def __init__(self, manifest):
        self.pairs = []
        for record in manifest.records:
            clean, corrupted = manifest.load_pair(record)
            self.pairs.append((
                torch.from_numpy(clean.astype(np.float32))[None],
                torch.from_numpy(corrupted.astype(np.float32))[None],
            ))

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, index):
        return self.pairs[index]


def autocast_context(config, device):
    if not config.mixed_precision:
        return nullcontext()
    return torch.autocast(device_type=device.type, dtype=torch.bfloat16)


def train_step(model, batch, optimizer, step, config, codec, generator, drop_hook=None):
    clean, corrupted = batch
    device = next(model.parameters()).device
    clean, corrupted = clean.to(device), corrupted.to(device)
    model.train()

    with torch.no_grad():
        x_data = codec.encode(clean)
        source = codec.encode(corrupted)

    noise = torch.randn(x_data.shape, generator=generator).to(device)
    t = sample_timesteps(x_data.shape[0], config.timestep_mean, config.timestep_std, generator=generator).to(device)
    flow = make_flow_sample(x_data, noise, t)

    bundle = apply_condition_drop(ConditioningBundle.from_source(source), config.p_drop, config.variant, generator)
    if drop_hook is not None:
        drop_hook(bundle)

    lr = learning_rate_at(step, config.lr, config.warmup_steps)
    for group in optimizer.param_groups:
        group['lr'] = lr

    optimizer.zero_grad(set_to_none=True)
    with autocast_context(config, device):
        predicted = model(flow.x_t, flow.t, bundle)
    loss = fm_loss(predicted.float(), flow.target_v)

    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f'non-finite loss at step {step}',
            diagnostics={
                'step': step,
                'lr': lr,
                'loss': loss.item(),
                't_min': t.min().item(),
                't_max': t.max().item(),
                'x_data_abs_max': x_data.abs().max().item(),
                'source_abs_max': source.abs().max().item(),
            },
        )

    loss.backward()
    parameters = [p for p in model.parameters() if p.requires_grad]
    pre_clip = torch.nn.utils.clip_grad_norm_(parameters, config.grad_clip_norm).item()
    grad_norm = global_grad_norm(parameters)
    optimizer.step()

    return StepResult(
        loss=loss.item(),
        grad_norm=grad_norm,
        pre_clip_norm=pre_clip,
        lr=lr,
        dropped=int(bundle.y_dropped.sum().item()),
    )


def build_optimizer(model, config):
    return torch.optim.Adam(
        model.parameters(),
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )


def validate(model, manifest, sample_config, codec, count):
    """ restore the first `count` pairs of a split; mean ssim/mae of outputs and inputs """
    records = manifest.records[:count]
    if not records:
        return {}
    pairs = [manifest.load_pair(record) for record in records]
    cleans = [clean for clean, _ in pairs]
    corrupted = [source for _, source in pairs]
    restored = [image[0].numpy() for image in restore_batch(model, corrupted, sample_config, codec=codec)]

    ssims, maes = paired_scores(restored, cleans)
    input_ssims, _ = paired_scores(corrupted, cleans)
    return {
        'val_ssim': float(ssims.mean()),
        'val_mae': float(maes.mean()),
        'val_input_ssim': float(input_ssims.mean()),
    }


class TrainingLog:
    """ one JSON object per line """

    def __init__(self, path):
        self.path = path
        self.handle = open(path, 'w', encoding='utf-8')

    def write(self, **record):
        self.handle.write(json.dumps(record, sort_keys=True) + '\n')
        self.handle.flush()

    def close(self):
        self.handle.close()


def checkpoint_metadata(model_config, train_config, codec, steps):
    return {
        'optimizer': OPTIMIZER_NOTE,
        'variant': model_config.variant.value,
        'p_drop': train_config.p_drop,
        'steps': steps,
        'seed': train_config.seed,
        'lr': train_config.lr,
        'warmup_steps': train_config.warmup_steps,
        'grad_clip_norm': train_config.grad_clip_norm,
        'codec_kind': codec.spec.kind.value,
        'codec_spatial_factor': codec.spec.spatial_factor,
        'ema': 'none',
    }


def fit(manifest, model_config, train_config, codec, out_dir, val_manifest=None, sample_config=None,
        drop_hook=None, extra_metadata=None):
    if not len(manifest):
        raise ParameterError('the train split is empty')
    if train_config.variant is not model_config.variant:
        raise ParameterError(
            f'train variant {train_config.variant.value} does not match model variant {model_config.variant.value}'
        )

    os.makedirs(out_dir, exist_ok=True)
    device = torch.device(train_config.device)
    torch.use_deterministic_algorithms(train_config.deterministic, warn_only=True)

    model = build_model(model_config, seed=train_config.seed).to(device)
    codec = codec.to(device)
    optimizer = build_optimizer(model, train_config)
    loader = DataLoader(
        PairDataset(manifest),
        batch_size=train_config.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(train_config.seed),
        num_workers=0,
    )
    generator = torch.Generator().manual_seed(train_config.seed)
    sample_config = sample_config or SampleConfig()

    log = TrainingLog(os.path.join(out_dir, TRAIN_LOG_NAME))
    result = FitResult(checkpoint=os.path.join(out_dir, CHECKPOINT_NAME), steps=0)
    flowrestore_logger.info(
        'training %s model on %d pairs: %d epochs, batch %d', model_config.variant.value,
        len(manifest), train_config.epochs, train_config.batch_size,
    )
    try:
        for epoch in range(1, train_config.epochs + 1):
            for batch in loader:
                result.steps += 1
                step = train_step(model, batch, optimizer, result.steps, train_config, codec, generator, drop_hook)
                result.losses.append(step.loss)
                log.write(step=result.steps, epoch=epoch, loss=step.loss, grad_norm=step.grad_norm,
                          pre_clip_norm=step.pre_clip_norm, lr=step.lr, dropped=step.dropped)

                if val_manifest is not None and train_config.eval_every and result.steps % train_config.eval_every == 0:
                    scores = validate(model, val_manifest, sample_config, codec, train_config.eval_count)
                    result.evaluations.append({'step': result.steps, **scores})
                    log.write(step=result.steps, epoch=epoch, **scores)
                    flowrestore_logger.info('step %d validation: %s', result.steps, scores)

                if train_config.max_steps and result.steps >= train_config.max_steps:
                    break
            else:
                continue
            break
    except TrainingDivergedError as exc:
        log.write(step=result.steps, diverged=True, **exc.diagnostics)
        flowrestore_logger.error('training diverged: %s', exc.diagnostics)
        raise
    finally:
        log.close()

    metadata = checkpoint_metadata(model_config, train_config, codec, result.steps)
    metadata.update(extra_metadata or {})
    save_checkpoint(result.checkpoint, model, metadata)
    flowrestore_logger.info('saved %s after %d steps', result.checkpoint, result.steps)
    return result
