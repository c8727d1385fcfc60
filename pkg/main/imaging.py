"""
Image files.

Grids live in [-1, 1] inside the pipeline. On disk every grid is a 16-bit
grayscale PNG of its [0, 1] mapping plus a float64 `.npy` sidecar holding the
exact values, so reloading never goes through quantisation.
"""
import os

import numpy as np
from PIL import Image

from .exceptions import ParameterError, ShapeError

IMAGE_SUFFIXES = ('.png', '.tif', '.tiff', '.jpg', '.jpeg', '.bmp')
UINT16_MAX = 65535


def to_unit(grid):
    """ [-1, 1] -> [0, 1] """
    return (np.asarray(grid, dtype=np.float64) + 1.0) / 2.0


def to_signed(grid):
    """ [0, 1] -> [-1, 1] """
    return np.asarray(grid, dtype=np.float64) * 2.0 - 1.0


def map_range(grid, source_range, target_range):
    lo, hi = source_range
    new_lo, new_hi = target_range
    if hi <= lo:
        raise ParameterError(f'empty value range {source_range}')
    scaled = (np.asarray(grid, dtype=np.float64) - lo) / (hi - lo)
    return scaled * (new_hi - new_lo) + new_lo


def sidecar_path(path):
    return os.path.splitext(path)[0] + '.npy'


def save_grid(path, grid):
    """ write a [-1, 1] grid as PNG + exact sidecar, return the PNG path """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 3 and grid.shape[0] == 1:
        grid = grid[0]
    if grid.ndim != 2:
        raise ShapeError(f'expected a 2-D grayscale grid, got shape {grid.shape}')

    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    unit = np.clip(to_unit(grid), 0.0, 1.0)
    pixels = np.round(unit * UINT16_MAX).astype(np.uint16)
    Image.fromarray(pixels).save(path, format='PNG')
    np.save(sidecar_path(path), grid)
    return path


def read_source_image(path):
    """ any grayscale file Pillow can read, as float64 in [0, 1] """
    with Image.open(path) as image:
        if image.mode in ('I;16', 'I;16B', 'I;16L', 'I'):
            pixels = np.asarray(image, dtype=np.float64)
            scale = UINT16_MAX if pixels.max(initial=0) <= UINT16_MAX else pixels.max()
        elif image.mode == 'F':
            pixels = np.asarray(image, dtype=np.float64)
            scale = 1.0
        else:
            pixels = np.asarray(image.convert('L'), dtype=np.float64)
            scale = 255.0
    return np.clip(pixels / scale, 0.0, 1.0)


def load_grid(path):
    """ reload a grid written by save_grid; plain image files are mapped to [-1, 1] """
    sidecar = sidecar_path(path)
    if os.path.exists(sidecar):
        return np.load(sidecar).astype(np.float64)
    return to_signed(read_source_image(path))


def list_images(directory):
    if not os.path.isdir(directory):
        raise ParameterError(f'{directory} is not a directory')
    names = sorted(
        name for name in os.listdir(directory)
        if name.lower().endswith(IMAGE_SUFFIXES)
    )
    return [os.path.join(directory, name) for name in names]


def load_directory(directory):
    """ (names, grids) for every image in `directory`, sorted by file name """
    paths = list_images(directory)
    names = [os.path.splitext(os.path.basename(path))[0] for path in paths]
    return names, [load_grid(path) for path in paths]


def tile_grids(rows, padding=2):
    """ lay out rows of equally sized [-1, 1] grids as one grayscale image """
    rows = [list(row) for row in rows if len(row)]
    if not rows:
        raise ParameterError('nothing to tile')
    height, width = np.asarray(rows[0][0]).shape[-2:]
    columns = max(len(row) for row in rows)

    canvas = np.ones((
        len(rows) * height + (len(rows) + 1) * padding,
        columns * width + (columns + 1) * padding,
    ))
    for r, row in enumerate(rows):
        for c, grid in enumerate(row):
            grid = np.asarray(grid, dtype=np.float64).reshape(height, width)
            top = padding + r * (height + padding)
            left = padding + c * (width + padding)
            canvas[top:top + height, left:left + width] = np.clip(to_unit(grid), 0.0, 1.0)

    return Image.fromarray(np.round(canvas * 255).astype(np.uint8))
