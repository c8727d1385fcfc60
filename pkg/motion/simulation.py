"""
Retrospective k-space rigid-motion corruption.

Acquisition fills Cartesian k-space row by row. A trajectory splits the rows
into contiguous segments and gives each segment one rigid pose; every segment
takes its rows from the k-space of the image seen in that pose, and the
composite k-space is transformed back. Rows are indexed in centred k-space
order, so the middle segment holds the low frequencies.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from main.exceptions import GateFailureError, ParameterError, ShapeError, TrajectoryError
from main.imaging import map_range
from main.logs import flowrestore_logger

from evaluation.metrics import SsimSpec, ssim

MIN_SEVERITY = 0.05
SEVERITY_UP = 1.5
SEVERITY_DOWN = 0.67


@dataclass(frozen=True)
class MotionSegment:
    start: int
    stop: int
    dx: float = 0.0
    dy: float = 0.0
    theta: float = 0.0

    @property
    def still(self):
        return self.dx == 0 and self.dy == 0 and self.theta == 0

    def to_dict(self):
        return {'start': self.start, 'stop': self.stop, 'dx': self.dx, 'dy': self.dy, 'theta': self.theta}


@dataclass(frozen=True)
class MotionTrajectory:
    segments: tuple

    @classmethod
    def identity(cls, rows):
        return cls((MotionSegment(0, rows),))

    @classmethod
    def from_dicts(cls, items):
        return cls(tuple(MotionSegment(**item) for item in items))

    def to_dicts(self):
        return [segment.to_dict() for segment in self.segments]

    @property
    def is_identity(self):
        return all(segment.still for segment in self.segments)

    def validate(self, rows):
        """ segments must be disjoint and cover rows 0..rows-1 exactly """
        if not self.segments:
            raise TrajectoryError('trajectory has no segments')
        cursor = 0
        for segment in sorted(self.segments, key=lambda s: s.start):
            if segment.stop <= segment.start:
                raise TrajectoryError(f'empty segment [{segment.start}, {segment.stop})')
            if segment.start != cursor:
                raise TrajectoryError(f'k-space rows {cursor}..{segment.start - 1} are not covered'
                                      if segment.start > cursor else
                                      f'segment [{segment.start}, {segment.stop}) overlaps row {cursor - 1}')
            cursor = segment.stop
        if cursor != rows:
            raise TrajectoryError(f'trajectory covers {cursor} rows, image has {rows}')


@dataclass(frozen=True)
class MotionSpec:
    max_shift: float = 8.0
    max_rotation: float = 0.1
    min_segments: int = 2
    max_segments: int = 8
    still_center_probability: float = 0.5

    def __post_init__(self):
        if self.max_shift < 0 or self.max_rotation < 0:
            raise ParameterError('motion bounds must be non-negative')
        if not 1 <= self.min_segments <= self.max_segments:
            raise ParameterError(f'bad segment range {self.min_segments}..{self.max_segments}')
        if not 0.0 <= self.still_center_probability <= 1.0:
            raise ParameterError('still_center_probability must lie in [0, 1]')


@dataclass(frozen=True)
class GateSpec:
    s0: float = 0.6
    s1: float = 0.9
    max_retries: int = 50
    initial_severity: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.s0 < self.s1 < 1.0:
            raise ParameterError(f'gate needs 0 < s0 < s1 < 1, got ({self.s0}, {self.s1})')
        if self.max_retries < 1:
            raise ParameterError(f'max_retries must be positive, got {self.max_retries}')
        if not 0.0 <= self.initial_severity <= 1.0:
            raise ParameterError('initial_severity must lie in [0, 1]')

    def accepts(self, value):
        return self.s0 < value < self.s1


@dataclass
class GatedPair:
    clean: np.ndarray
    corrupted: np.ndarray
    gate_ssim: float
    trajectory: MotionTrajectory
    seed: int
    attempts: int = 1
    severity: float = field(default=0.0, repr=False)


def rotate(image, theta):
    """ bilinear rotation about the image centre, radians """
    if theta == 0:
        return image
    return ndimage.rotate(image, np.degrees(theta), reshape=False, order=1, mode='constant', cval=0.0)


def centered_kspace(image):
    return np.fft.fftshift(np.fft.fft2(image))


def phase_ramp(size, dx, dy):
    """ linear phase that translates by (dx, dy) pixels, in centred k-space layout """
    k = np.fft.fftshift(np.fft.fftfreq(size) * size)
    ky, kx = np.meshgrid(k, k, indexing='ij')
    return np.exp(-2j * np.pi * (kx * dx + ky * dy) / size)


def corrupt(image, trajectory, value_range=(-1.0, 1.0)):
    """ composite the segment k-spaces and return the magnitude image in `value_range` """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ShapeError(f'k-space simulation needs a square 2-D image, got {image.shape}')
    size = image.shape[0]
    trajectory.validate(size)

    # magnitude reconstruction needs non-negative intensities
    unit = map_range(image, value_range, (0.0, 1.0))
    if trajectory.is_identity:
        kspace = centered_kspace(unit)
    else:
        kspace = np.empty((size, size), dtype=np.complex128)
        for segment in trajectory.segments:
            moved = centered_kspace(rotate(unit, segment.theta))
            if segment.dx or segment.dy:
                moved = moved * phase_ramp(size, segment.dx, segment.dy)
            kspace[segment.start:segment.stop] = moved[segment.start:segment.stop]

    magnitude = np.abs(np.fft.ifft2(np.fft.ifftshift(kspace)))
    # clipped, not rescaled: ghosting above 1 is cut and the intensity scale of the clean image is kept
    return map_range(np.clip(magnitude, 0.0, 1.0), (0.0, 1.0), value_range)


def draw_trajectory(severity, rng, rows, spec=None):
    spec = spec or MotionSpec()
    if rows < 2:
        raise ParameterError(f'need at least 2 k-space rows, got {rows}')
    if not 0.0 <= severity <= 1.0:
        raise ParameterError(f'severity must lie in [0, 1], got {severity}')

    top = spec.min_segments + int(round(severity * (spec.max_segments - spec.min_segments)))
    count = int(rng.integers(spec.min_segments, top + 1))
    count = max(1, min(count, rows))
    cuts = np.sort(rng.choice(np.arange(1, rows), size=count - 1, replace=False)) if count > 1 else []
    bounds = [0, *[int(cut) for cut in cuts], rows]

    shift = severity * spec.max_shift
    angle = severity * spec.max_rotation
    centre = rows // 2
    keep_centre_still = rng.random() < spec.still_center_probability

    segments = []
    for start, stop in zip(bounds[:-1], bounds[1:]):
        dx, dy, theta = rng.uniform(-shift, shift), rng.uniform(-shift, shift), rng.uniform(-angle, angle)
        if keep_centre_still and start <= centre < stop:
            dx = dy = theta = 0.0
        segments.append(MotionSegment(start, stop, float(dx), float(dy), float(theta)))
    return MotionTrajectory(tuple(segments))


def generate_pair(clean, gate, seed, motion=None, ssim_spec=None, value_range=(-1.0, 1.0)):
    """
    Draw, corrupt and gate until s0 < SSIM(clean, corrupted) < s1. Severity
    goes up after a too-mild draw and down after a too-severe one.
    """
    motion = motion or MotionSpec()
    ssim_spec = ssim_spec or SsimSpec()
    clean = np.asarray(clean, dtype=np.float64)
    rng = np.random.default_rng(seed)
    reference = map_range(clean, value_range, (0.0, 1.0))

    severity = gate.initial_severity
    closest = None
    for attempt in range(1, gate.max_retries + 1):
        trajectory = draw_trajectory(severity, rng, clean.shape[0], motion)
        corrupted = corrupt(clean, trajectory, value_range)
        score = ssim(reference, map_range(corrupted, value_range, (0.0, 1.0)), ssim_spec)

        if gate.accepts(score):
            return GatedPair(clean, corrupted, float(score), trajectory, seed, attempt, severity)

        midpoint = (gate.s0 + gate.s1) / 2
        if closest is None or abs(score - midpoint) < abs(closest - midpoint):
            closest = score
        if score >= gate.s1:
            severity = min(1.0, max(severity * SEVERITY_UP, MIN_SEVERITY))
        else:
            severity = severity * SEVERITY_DOWN

    flowrestore_logger.warning(
        'gate (%.2f, %.2f) not met after %d draws (seed %d), closest ssim %.4f',
        gate.s0, gate.s1, gate.max_retries, seed, closest,
    )
    raise GateFailureError(
        f'no draw inside ({gate.s0}, {gate.s1}) after {gate.max_retries} attempts; closest ssim {closest:.4f}',
        closest_ssim=closest, attempts=gate.max_retries,
    )
