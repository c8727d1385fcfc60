"""
Paired dataset construction.

Each clean image is preprocessed deterministically (short side resized to
target_size, centre crop, linear map to [-1, 1]), corrupted through the SSIM
gate, and persisted with its provenance. Splits are assigned per clean image,
so no clean identity leaks across splits.

Layout of a dataset directory:
    config.txt                  resolved run config
    clean/<id>.png|.npy
    corrupted/<id>_<k>.png|.npy
    train.jsonl val.jsonl test.jsonl
"""
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from PIL import Image

from main.exceptions import BuildError, GateFailureError, ParameterError, ShapeError
from main.imaging import list_images, load_grid, map_range, read_source_image, save_grid, to_unit
from main.logs import flowrestore_logger

from evaluation.metrics import SsimSpec, ssim

from .phantoms import generate_phantom
from .simulation import GateSpec, MotionSpec, MotionTrajectory, generate_pair

SPLITS = ('train', 'val', 'test')


class Interpolation(str, Enum):
    NEAREST = 'nearest'
    BILINEAR = 'bilinear'

    @property
    def resample(self):
        return Image.Resampling.NEAREST if self is Interpolation.NEAREST else Image.Resampling.BILINEAR


@dataclass(frozen=True)
class PreprocessSpec:
    target_size: int = 128
    interpolation: Interpolation = Interpolation.BILINEAR
    crop: str = 'center'
    input_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        try:
            object.__setattr__(self, 'interpolation', Interpolation(self.interpolation))
        except ValueError:
            raise ParameterError(f'unknown interpolation {self.interpolation!r}')
        if self.crop != 'center':
            raise ParameterError(f'only center crop is supported, got {self.crop!r}')
        if self.target_size < 1:
            raise ParameterError(f'target_size must be positive, got {self.target_size}')
        lo, hi = self.input_range
        if hi <= lo:
            raise ParameterError(f'empty input range {self.input_range}')


@dataclass
class PairRecord:
    clean_id: str
    clean_path: str
    corrupted_path: str
    gate_ssim: float
    trajectory: MotionTrajectory
    seed: int
    attempts: int = 1

    def to_json(self):
        payload = {
            'clean_id': self.clean_id,
            'clean_path': self.clean_path,
            'corrupted_path': self.corrupted_path,
            'gate_ssim': self.gate_ssim,
            'trajectory': self.trajectory.to_dicts(),
            'seed': self.seed,
            'attempts': self.attempts,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        payload = json.loads(line)
        payload['trajectory'] = MotionTrajectory.from_dicts(payload['trajectory'])
        return cls(**payload)


@dataclass
class DatasetManifest:
    records: list
    split: str
    gate: GateSpec = field(default_factory=GateSpec)
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    root: str = ''

    def __len__(self):
        return len(self.records)

    def path(self, relative):
        return os.path.join(self.root, relative)

    def load_pair(self, record):
        """ (clean, corrupted) [-1, 1] grids """
        return load_grid(self.path(record.clean_path)), load_grid(self.path(record.corrupted_path))


def preprocess(image, spec):
    """ resize short side -> centre crop -> map input_range to [-1, 1]; never upsamples """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f'expected a 2-D grayscale image, got {image.shape}')
    height, width = image.shape
    size = spec.target_size
    if min(height, width) < size:
        raise ShapeError(f'image {height}x{width} is smaller than target size {size}')

    if min(height, width) != size:
        scale = size / min(height, width)
        new_size = (max(size, int(round(width * scale))), max(size, int(round(height * scale))))
        resized = Image.fromarray(image.astype(np.float32)).resize(new_size, resample=spec.interpolation.resample)
        image = np.asarray(resized, dtype=np.float64)
        height, width = image.shape

    top = (height - size) // 2
    left = (width - size) // 2
    image = image[top:top + size, left:left + size]
    return np.clip(map_range(image, spec.input_range, (-1.0, 1.0)), -1.0, 1.0)


def derive_seed(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass(frozen=True)
class CleanSource:
    """ a phantom seed or a grayscale file """
    identity: str
    phantom_seed: int = -1
    path: str = ''
    phantom_size: int = 128

    def load(self):
        if self.path:
            return read_source_image(self.path)
        return generate_phantom(self.phantom_seed, self.phantom_size)


def phantom_sources(count, size, first_seed=0):
    return [CleanSource(f'phantom-{seed:05d}', phantom_seed=seed, phantom_size=size)
            for seed in range(first_seed, first_seed + count)]


def directory_sources(directory):
    paths = list_images(directory)
    if not paths:
        raise ParameterError(f'no images found in {directory}')
    return [CleanSource(os.path.splitext(os.path.basename(path))[0], path=path) for path in paths]


def assign_splits(identities, fractions, seed):
    """ identity -> split, with split sizes rounded from the fractions """
    if len(fractions) != len(SPLITS) or any(f < 0 for f in fractions):
        raise ParameterError(f'need three non-negative split fractions, got {fractions}')
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f'split fractions must sum to 1, got {sum(fractions)}')

    order = list(identities)
    np.random.default_rng(seed).shuffle(order)
    n_train = int(round(fractions[0] * len(order)))
    n_val = int(round(fractions[1] * len(order)))
    n_val = min(n_val, len(order) - n_train)

    splits = {}
    for position, identity in enumerate(order):
        if position < n_train:
            splits[identity] = 'train'
        elif position < n_train + n_val:
            splits[identity] = 'val'
        else:
            splits[identity] = 'test'
    return splits


@dataclass
class BuildSettings:
    gate: GateSpec = field(default_factory=GateSpec)
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    motion: MotionSpec = field(default_factory=MotionSpec)
    ssim: SsimSpec = field(default_factory=SsimSpec)
    split_fractions: tuple = (0.8, 0.1, 0.1)
    pairs_per_image: int = 1
    failure_tolerance: float = 0.0
    seed: int = 1
    workers: int = 1


def process_source(index, source, settings):
    """ preprocess one clean image and gate its pairs; failures are returned, not raised """
    clean = preprocess(source.load(), settings.preprocess)
    pairs, failures = [], []
    for k in range(settings.pairs_per_image):
        pair_seed = derive_seed(settings.seed, index, k)
        try:
            pairs.append(generate_pair(clean, settings.gate, pair_seed, settings.motion, settings.ssim))
        except GateFailureError as exc:
            failures.append((f'{source.identity}_{k}', exc.closest_ssim))
    return clean, pairs, failures


def build_dataset(sources, out_dir, settings=None):
    """ persist images and per-split manifests, return {split: DatasetManifest} """
    settings = settings or BuildSettings()
    sources = list(sources)
    if not sources:
        raise ParameterError('no clean sources to build a dataset from')
    if settings.pairs_per_image < 1:
        raise ParameterError('pairs_per_image must be at least 1')
    identities = [source.identity for source in sources]
    if len(set(identities)) != len(identities):
        raise ParameterError('clean source identities must be unique')

    splits = assign_splits(identities, settings.split_fractions, settings.seed)

    with ThreadPoolExecutor(max_workers=max(1, settings.workers)) as pool:
        results = list(pool.map(lambda item: process_source(item[0], item[1], settings), enumerate(sources)))

    offenders = [failure for _, _, failures in results for failure in failures]
    total = len(sources) * settings.pairs_per_image
    if offenders:
        flowrestore_logger.warning('%d of %d pairs failed the gate', len(offenders), total)
    if len(offenders) > settings.failure_tolerance * total:
        raise BuildError(
            f'{len(offenders)} of {total} pairs failed the SSIM gate: '
            + ', '.join(f'{name} (closest {closest:.3f})' for name, closest in offenders),
            offenders=offenders,
        )

    manifests = {split: DatasetManifest([], split, settings.gate, settings.preprocess, out_dir) for split in SPLITS}
    for source, (clean, pairs, _) in zip(sources, results):
        if not pairs:
            continue
        clean_path = os.path.join('clean', f'{source.identity}.png')
        save_grid(os.path.join(out_dir, clean_path), clean)
        for k, pair in enumerate(pairs):
            corrupted_path = os.path.join('corrupted', f'{source.identity}_{k}.png')
            save_grid(os.path.join(out_dir, corrupted_path), pair.corrupted)
            manifests[splits[source.identity]].records.append(PairRecord(
                clean_id=source.identity,
                clean_path=clean_path,
                corrupted_path=corrupted_path,
                gate_ssim=pair.gate_ssim,
                trajectory=pair.trajectory,
                seed=pair.seed,
                attempts=pair.attempts,
            ))

    for manifest in manifests.values():
        write_manifest(manifest)
    return manifests


def manifest_path(root, split):
    return os.path.join(root, f'{split}.jsonl')


def write_manifest(manifest):
    with open(manifest_path(manifest.root, manifest.split), 'w', encoding='utf-8') as manifest_file:
        for record in manifest.records:
            manifest_file.write(record.to_json() + '\n')


def load_manifest(root, split, gate=None, preprocess_spec=None):
    if split not in SPLITS:
        raise ParameterError(f'unknown split {split!r}')
    path = manifest_path(root, split)
    if not os.path.exists(path):
        raise ParameterError(f'{root} has no {split} manifest')
    with open(path, encoding='utf-8') as manifest_file:
        records = [PairRecord.from_json(line) for line in manifest_file if line.strip()]
    return DatasetManifest(records, split, gate or GateSpec(), preprocess_spec or PreprocessSpec(), root)


def verify_manifest(manifest, ssim_spec=None):
    """ every file exists, reloads to the target shape and range, and still passes the gate """
    problems = []
    size = manifest.preprocess.target_size
    for record in manifest.records:
        missing = [relative for relative in (record.clean_path, record.corrupted_path)
                   if not os.path.exists(manifest.path(relative))]
        if missing:
            problems.extend(f'{relative}: missing' for relative in missing)
            continue
        clean, corrupted = manifest.load_pair(record)
        for relative, grid in ((record.clean_path, clean), (record.corrupted_path, corrupted)):
            if grid.shape != (size, size):
                problems.append(f'{relative}: shape {grid.shape}')
            if grid.min() < -1.0 or grid.max() > 1.0:
                problems.append(f'{relative}: values outside [-1, 1]')
        score = ssim(to_unit(clean), to_unit(corrupted), ssim_spec)
        if not manifest.gate.accepts(score):
            problems.append(f'{record.corrupted_path}: recomputed ssim {score:.4f} outside the gate')
    return problems
