"""Blur-kernel synthesis and the blur + downsample degradation pipeline.

Low-resolution inputs are produced by blurring a high-resolution image with
a Gaussian kernel and downsampling by the scale factor, either with the
anti-aliased bicubic resampler (the test protocol, and the training default)
or by keeping the upper-left pixel of each s x s block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .imaging import Image, bicubic_resize

KERNEL_SUM_TOL = 1e-8

# per-scale width range of the 8-kernel isotropic test protocol
GAUSSIAN8_RANGES = {2: (0.80, 1.60), 3: (1.35, 2.40), 4: (1.80, 3.20)}

# per-scale upper end of the isotropic training width range
ISOTROPIC_TRAIN_SIGMA = {2: (0.2, 2.0), 3: (0.2, 3.0), 4: (0.2, 4.0)}

ANISO_SIZE = 11
ANISO_SIGMA_RANGE = (0.6, 5.0)
ANISO_NOISE = 0.25
ISO_SIZE = 21


@dataclass
class BlurKernel:
    """A k x k non-negative kernel summing to one, plus its provenance."""

    weights: np.ndarray
    kind: str  # "isotropic" or "anisotropic"
    sigma_x: float
    sigma_y: float
    theta: float = 0.0
    noise_frac: float = 0.0

    def __post_init__(self):
        k = self.weights.shape[0]
        if self.weights.ndim != 2 or self.weights.shape[1] != k:
            raise ValueError("kernel must be square")
        if k % 2 == 0:
            raise ValueError("kernel size must be odd")
        if np.any(self.weights < 0):
            raise ValueError("kernel weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > KERNEL_SUM_TOL:
            raise ValueError("kernel weights must sum to one")
        if self.kind not in ("isotropic", "anisotropic"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")

    @property
    def size(self):
        return self.weights.shape[0]


@dataclass
class DegradationSpec:
    scale: int
    kernel: BlurKernel
    downsampler: str = "bicubic"  # "bicubic" or "direct"

    def __post_init__(self):
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.downsampler not in ("bicubic", "direct"):
            raise ValueError(f"unknown downsampler {self.downsampler!r}")


def make_isotropic_kernel(size: int, sigma: float) -> BlurKernel:
    """Normalized isotropic Gaussian on a size x size grid."""
    if size < 3 or size % 2 == 0:
        raise ValueError("size must be odd and >= 3")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r2 = (xx - c) ** 2 + (yy - c) ** 2
    w = np.exp(-r2 / (2.0 * sigma * sigma))
    w /= w.sum()
    return BlurKernel(w, "isotropic", sigma, sigma)


def make_anisotropic_kernel(size, sigma_x, sigma_y, theta, noise_frac, rng) -> BlurKernel:
    """Rotated anisotropic Gaussian with uniform multiplicative noise.

    The covariance is R(theta) diag(sigma_x^2, sigma_y^2) R(theta)^T; each
    cell is then scaled by an independent uniform factor in
    [1 - noise_frac, 1 + noise_frac] before normalization.
    """
    if size < 3 or size % 2 == 0:
        raise ValueError("size must be odd and >= 3")
    lo, hi = ANISO_SIGMA_RANGE
    if not (lo <= sigma_x <= hi and lo <= sigma_y <= hi):
        raise ValueError(f"sigma_x/sigma_y must lie in [{lo}, {hi}]")
    if not 0.0 <= noise_frac <= 0.25:
        raise ValueError("noise_frac must lie in [0, 0.25]")
    c = (size - 1) / 2.0
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    cov = rot @ np.diag([sigma_x**2, sigma_y**2]) @ rot.T
    inv = np.linalg.inv(cov)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xx - c
    dy = yy - c
    q = inv[0, 0] * dx * dx + 2.0 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
    w = np.exp(-0.5 * q)
    if noise_frac > 0:
        w = w * rng.uniform(1.0 - noise_frac, 1.0 + noise_frac, size=w.shape)
    w /= w.sum()
    return BlurKernel(w, "anisotropic", float(sigma_x), float(sigma_y),
                      float(theta), float(noise_frac))


def gaussian8_set(scale: int) -> list[BlurKernel]:
    """The 8 isotropic test kernels: a uniform inclusive width grid per scale."""
    if scale not in GAUSSIAN8_RANGES:
        raise ValueError(f"scale must be 2, 3 or 4, got {scale}")
    lo, hi = GAUSSIAN8_RANGES[scale]
    return [make_isotropic_kernel(ISO_SIZE, s) for s in np.linspace(lo, hi, 8)]


def blur(img: Image, kernel: BlurKernel) -> Image:
    """Per-channel 2-D correlation with mirror padding; dims unchanged.

    Implemented as FFT convolution with the doubly-flipped kernel on a
    symmetric-padded array, which is the same operation as direct
    correlation with edge-mirrored boundaries but much faster for the
    21 x 21 training kernels.
    """
    r = kernel.size // 2
    pad = np.pad(img.data, ((r, r), (r, r), (0, 0)), mode="symmetric")
    out = signal.fftconvolve(pad, kernel.weights[::-1, ::-1, None], mode="valid")
    return Image(out, img.colorspace, img.bitdepth_hint)


def direct_downsample(img: Image, s: int) -> Image:
    """Keep the upper-left pixel of every s x s block."""
    if s < 1:
        raise ValueError("downsample factor must be >= 1")
    return Image(np.ascontiguousarray(img.data[::s, ::s]), img.colorspace, img.bitdepth_hint)


def crop_to_multiple(img: Image, s: int) -> Image:
    """Crop bottom/right so both dims divide s."""
    h = (img.height // s) * s
    w = (img.width // s) * s
    if h == img.height and w == img.width:
        return img
    return Image(np.ascontiguousarray(img.data[:h, :w]), img.colorspace, img.bitdepth_hint)


def degrade(hr: Image, spec: DegradationSpec) -> Image:
    """Blur then downsample; HR is pre-cropped to a multiple of the scale."""
    s = spec.scale
    if hr.height < s or hr.width < s:
        raise ValueError("HR image smaller than the scale factor")
    hr = crop_to_multiple(hr, s)
    blurred = blur(hr, spec.kernel)
    if spec.downsampler == "direct":
        return direct_downsample(blurred, s)
    return bicubic_resize(blurred, hr.height // s, hr.width // s)


def sample_training_spec(scale: int, kind: str, rng) -> DegradationSpec:
    """Draw one random degradation for training.

    isotropic: width uniform in the per-scale training range, 21 x 21.
    anisotropic: axis widths uniform in [0.6, 5], angle uniform in [-pi, pi],
    25% multiplicative noise, 11 x 11.
    """
    if kind == "isotropic":
        lo, hi = ISOTROPIC_TRAIN_SIGMA[scale]
        kernel = make_isotropic_kernel(ISO_SIZE, float(rng.uniform(lo, hi)))
    elif kind == "anisotropic":
        sx = float(rng.uniform(*ANISO_SIGMA_RANGE))
        sy = float(rng.uniform(*ANISO_SIGMA_RANGE))
        theta = float(rng.uniform(-np.pi, np.pi))
        kernel = make_anisotropic_kernel(ANISO_SIZE, sx, sy, theta, ANISO_NOISE, rng)
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    return DegradationSpec(scale, kernel, "bicubic")


def save_kernel(kernel: BlurKernel, path) -> None:
    """Plain-text kernel: header line, then k rows of k weights."""
    with open(path, "w") as f:
        f.write(f"{kernel.size} {kernel.kind} {kernel.sigma_x:.17g} "
                f"{kernel.sigma_y:.17g} {kernel.theta:.17g} {kernel.noise_frac:.17g}\n")
        for row in kernel.weights:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_kernel(path) -> BlurKernel:
    with open(path) as f:
        head = f.readline().split()
        size = int(head[0])
        rows = [[float(v) for v in f.readline().split()] for _ in range(size)]
    weights = np.array(rows)
    return BlurKernel(weights, head[1], float(head[2]), float(head[3]),
                      float(head[4]), float(head[5]))
