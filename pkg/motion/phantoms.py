"""
Synthetic anatomy-like phantoms: a soft-edged body ellipse, a few inner
ellipses of varying brightness and curved ribbons, on a dark background.
"""
import numpy as np

from main.exceptions import ParameterError

MIN_PHANTOM_SIZE = 32
BACKGROUND = 0.02


def soft_step(distance, edge):
    """ 1 inside (distance < 1), 0 outside, blended over `edge` """
    return 1.0 / (1.0 + np.exp(np.clip((distance - 1.0) / edge, -60, 60)))


def ellipse_mask(xx, yy, cx, cy, rx, ry, angle, edge):
    cos, sin = np.cos(angle), np.sin(angle)
    u = ((xx - cx) * cos + (yy - cy) * sin) / rx
    v = (-(xx - cx) * sin + (yy - cy) * cos) / ry
    return soft_step(np.sqrt(u * u + v * v), edge)


def ribbon_mask(xx, yy, rng, edge):
    """ band around a sinusoidal centre line, clipped to a disc """
    angle = rng.uniform(0, np.pi)
    cos, sin = np.cos(angle), np.sin(angle)
    along = xx * cos + yy * sin
    across = -xx * sin + yy * cos
    offset = rng.uniform(-0.3, 0.3)
    amplitude, frequency, phase = rng.uniform(0.05, 0.2), rng.uniform(1.0, 4.0), rng.uniform(0, 2 * np.pi)
    width = rng.uniform(0.03, 0.08)
    centre_line = offset + amplitude * np.sin(frequency * np.pi * along + phase)
    band = soft_step(np.abs(across - centre_line) / width, edge * 4)
    extent = soft_step(np.sqrt(xx * xx + yy * yy) / rng.uniform(0.4, 0.7), edge)
    return band * extent


def generate_phantom(seed, size=128):
    """ deterministic [0, 1] phantom of shape (size, size) """
    if size < MIN_PHANTOM_SIZE:
        raise ParameterError(f'phantoms need size >= {MIN_PHANTOM_SIZE}, got {size}')

    rng = np.random.default_rng(seed)
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing='ij')
    edge = 2.0 / size

    image = np.full((size, size), BACKGROUND)

    def paint(mask, intensity):
        image[:] = image * (1.0 - mask) + intensity * mask

    body_rx, body_ry = rng.uniform(0.5, 0.8), rng.uniform(0.5, 0.8)
    paint(ellipse_mask(xx, yy, rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1),
                       body_rx, body_ry, rng.uniform(0, np.pi), edge), rng.uniform(0.3, 0.5))

    # 3-7 structures in total, the body counts as the first
    for _ in range(int(rng.integers(2, 7))):
        if rng.random() < 0.6:
            mask = ellipse_mask(
                xx, yy,
                rng.uniform(-0.5, 0.5) * body_rx, rng.uniform(-0.5, 0.5) * body_ry,
                rng.uniform(0.06, 0.3), rng.uniform(0.06, 0.3), rng.uniform(0, np.pi), edge,
            )
        else:
            mask = ribbon_mask(xx, yy, rng, edge)
        paint(mask, rng.uniform(0.1, 1.0))

    return np.clip(image, 0.0, 1.0)
