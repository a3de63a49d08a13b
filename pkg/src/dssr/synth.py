"""Procedural HR image synthesis for desk-scale experiments.

No photographic corpus ships with the package, so training and evaluation
use generated rasters: smooth gradient backgrounds layered with crisp
geometric shapes, oriented gratings up to near-Nyquist frequencies, strokes,
and a little filtered noise. The content is deliberately demanding — plenty
of high-frequency energy is lost under blur + downsampling, so restoring it
is a real task rather than a near-identity one.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import Image, save_image

EDGE_SOFTNESS = 0.45  # pixels over which shape edges ramp


def _grid(size):
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _coverage(sdf):
    """Map a signed distance field to [0,1] coverage with a soft edge."""
    return np.clip(0.5 - sdf / EDGE_SOFTNESS, 0.0, 1.0)


def _background(rng, size):
    yy, xx = _grid(size)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy) / size
    ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min() + 1e-12)
    c0, c1 = rng.uniform(0.05, 0.95, size=(2, 3))
    return ramp[:, :, None] * c1 + (1 - ramp[:, :, None]) * c0


def _shape_sdf(rng, size):
    yy, xx = _grid(size)
    cy, cx = rng.uniform(0.1 * size, 0.9 * size, size=2)
    kind = rng.integers(0, 3)
    if kind == 0:  # circle
        radius = rng.uniform(0.05, 0.25) * size
        return np.hypot(yy - cy, xx - cx) - radius
    if kind == 1:  # rotated box
        theta = rng.uniform(0, np.pi)
        a, b = rng.uniform(0.05, 0.3, size=2) * size
        dx = np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)
        dy = -np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy)
        return np.maximum(np.abs(dx) - a, np.abs(dy) - b)
    # stroke: distance to a random segment minus half-width
    ey, ex = rng.uniform(0.1 * size, 0.9 * size, size=2)
    px, py = xx - cx, yy - cy
    vx, vy = ex - cx, ey - cy
    t = np.clip((px * vx + py * vy) / (vx * vx + vy * vy + 1e-12), 0.0, 1.0)
    dist = np.hypot(px - t * vx, py - t * vy)
    return dist - rng.uniform(0.8, 3.0)


def _grating(rng, size):
    yy, xx = _grid(size)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.10, 0.45)  # cycles per pixel, up to near Nyquist
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    # confine the grating to a soft elliptical window
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
    ry, rx = rng.uniform(0.15 * size, 0.45 * size, size=2)
    window = np.clip(1.0 - ((yy - cy) / ry) ** 2 - ((xx - cx) / rx) ** 2, 0.0, 1.0)
    return wave, window


def synth_image(rng, size: int = 128) -> np.ndarray:
    """One synthetic HR raster in [0, 1], H x W x 3."""
    img = _background(rng, size)
    for _ in range(int(rng.integers(6, 12))):
        alpha = _coverage(_shape_sdf(rng, size))[:, :, None]
        color = rng.uniform(0.0, 1.0, size=3)
        img = alpha * color + (1 - alpha) * img
    for _ in range(int(rng.integers(2, 5))):
        wave, window = _grating(rng, size)
        color = rng.uniform(0.2, 1.0, size=3)
        blend = (rng.uniform(0.4, 0.9) * window * wave)[:, :, None]
        img = blend * color + (1 - blend) * img
    noise = rng.normal(0.0, 1.0, size=(size, size, 3))
    noise = ndimage.gaussian_filter(noise, sigma=(rng.uniform(0.4, 1.0),) * 2 + (0,))
    img = img + rng.uniform(0.02, 0.05) * noise
    return np.clip(img, 0.0, 1.0)


def make_corpus(out_dir, count: int, size: int = 128, seed: int = 0) -> list[Path]:
    """Write `count` synthetic PNGs; image i depends only on (seed, i)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        path = out_dir / f"synth_{i:04d}.png"
        save_image(Image(synth_image(rng, size)), path)
        paths.append(path)
    return paths
