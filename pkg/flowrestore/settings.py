"""
Django settings for flowrestore project.

The project has no web surface: Django supplies the settings layer, the
management commands every operator entry point runs through, and the test
runner. All run-time knobs of the pipeline live in FLOWRESTORE_DEFAULTS below;
a run config file may override any of them but may not add new keys.
"""

import os

# Build paths inside the project like this: os.path.join(BASE_DIR, ...)
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

SECRET_KEY = 'flowrestore-local-only-no-web-surface'

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'main.apps.MainConfig',
    'flow.apps.FlowConfig',
    'training.apps.TrainingConfig',
    'motion.apps.MotionConfig',
    'evaluation.apps.EvaluationConfig',
]

# No database: records are persisted as JSON lines next to the images they describe.
DATABASES = {}

TEST_RUNNER = 'main.runner.FlowRestoreTestRunner'


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Logging

LOG_FILE = os.path.join(BASE_DIR, 'logs.log')


# Pipeline defaults
# Every key here is a valid key of a run config file (flat `key = value` text).

FLOWRESTORE_SCHEMA_VERSION = 1

FLOWRESTORE_DEFAULTS = {
    'schema_version': FLOWRESTORE_SCHEMA_VERSION,

    # data pipeline
    'data.target_size': 128,
    'data.interpolation': 'bilinear',
    'data.crop': 'center',
    'data.source_dir': '',
    'data.phantom_count': 500,
    'data.split_fractions': (0.8, 0.1, 0.1),
    'data.pairs_per_image': 1,
    'data.failure_tolerance': 0.0,
    'data.workers': 1,
    'data.seed': 1,

    # ssim gate
    'gate.s0': 0.6,
    'gate.s1': 0.9,
    'gate.max_retries': 50,
    'gate.initial_severity': 0.5,

    # k-space motion
    'motion.max_shift': 8.0,
    'motion.max_rotation': 0.1,
    'motion.min_segments': 2,
    'motion.max_segments': 8,
    'motion.still_center_probability': 0.5,

    # ssim (shared by the gate and by evaluation)
    'ssim.window_size': 11,
    'ssim.window_sigma': 1.5,
    'ssim.k1': 0.01,
    'ssim.k2': 0.03,
    'ssim.data_range': 1.0,

    # codec
    'codec.kind': 'identity',
    'codec.spatial_factor': 1,
    'codec.latent_channels': 1,
    'codec.image_channels': 1,
    'codec.checkpoint': '',
    'codec.train_steps': 2000,
    'codec.lr': 1e-3,

    # backbone
    'model.latent_channels': 1,
    'model.latent_size': 128,
    'model.patch_size': 8,
    'model.hidden_dim': 128,
    'model.depth': 6,
    'model.heads': 4,
    'model.control_depth': 3,
    'model.mlp_ratio': 4.0,
    'model.variant': 'primary',
    'model.p_drop': 0.1,
    'model.grad_checkpointing': False,

    # trainer
    'train.epochs': 100,
    'train.batch_size': 16,
    'train.lr': 1e-4,
    'train.warmup_steps': 30,
    'train.grad_clip_norm': 0.1,
    'train.seed': 1,
    'train.eval_every': 500,
    'train.eval_count': 16,
    'train.max_steps': 0,
    'train.timestep_mean': 0.0,
    'train.timestep_std': 1.0,
    'train.beta1': 0.9,
    'train.beta2': 0.999,
    'train.weight_decay': 0.0,
    'train.mixed_precision': False,
    'train.deterministic': True,
    'train.device': 'cpu',

    # sampler
    'sample.steps': 5,
    'sample.guidance': 1.0,
    'sample.solver': 'euler',
    'sample.seed': 0,

    # evaluation
    'eval.mode': 'paired',
    'eval.feature_extractor': 'evaluation.features.RandomConvExtractor',
    'eval.feature_seed': 0,
    'eval.kid_subset_size': 100,
    'eval.kid_subsets': 100,
    'eval.kid_seed': 0,

    # ablation
    'ablate.steps_list': (2, 5, 10, 20, 40),
    'ablate.guidance_list': (1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9),
    'ablate.generation_steps_list': (2, 5, 10, 20, 40),
    'ablate.grid_rows': 4,

    # unconditional generation
    'generate.count': 16,
    'generate.guidance': 0.0,
}
