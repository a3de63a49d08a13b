"""Image container, color conversion, and the shared bicubic resampler.

Images are H x W x C float64 arrays in [0, 1]. Values are never clamped
during computation; clamping happens only when writing PNGs or scoring
metrics.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

# BT.601 studio-swing luma weights on the 0-255 scale
_Y_WEIGHTS = np.array([65.481, 128.553, 24.966])
_Y_OFFSET = 16.0


@dataclass
class Image:
    """An H x W x C raster with values nominally in [0, 1]."""

    data: np.ndarray
    colorspace: str = "RGB"  # "RGB" or "Y"
    bitdepth_hint: int = 8

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"image data must be HxWxC, got shape {self.data.shape}")
        h, w, c = self.data.shape
        if h < 1 or w < 1 or c not in (1, 3):
            raise ValueError(f"bad image shape {self.data.shape}: need H,W >= 1 and C in {{1,3}}")
        if self.colorspace not in ("RGB", "Y"):
            raise ValueError(f"unknown colorspace {self.colorspace!r}")
        if self.colorspace == "Y" and c != 1:
            raise ValueError("Y colorspace requires a single channel")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


def load_image(path) -> Image:
    """Load an 8-bit PNG/JPEG as float64 in [0, 1].

    Single-channel files come back tagged Y, three-channel files RGB.
    Other channel counts (alpha, 16-bit, ...) are rejected.
    """
    with PILImage.open(path) as im:
        if im.mode == "P":
            im = im.convert("RGB")
        if im.mode not in ("L", "RGB"):
            raise ValueError(f"unsupported image mode {im.mode!r} in {path}")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    colorspace = "Y" if arr.shape[2] == 1 else "RGB"
    return Image(arr, colorspace)


def save_image(img: Image, path) -> None:
    """Write an image as 8-bit PNG, clamping to [0, 1] and rounding."""
    arr = np.clip(img.data, 0.0, 1.0)
    if not np.all(np.isfinite(img.data)):
        raise ValueError("refusing to save a non-finite image")
    arr8 = np.rint(arr * 255.0).astype(np.uint8)
    if arr8.shape[2] == 1:
        pil = PILImage.fromarray(arr8[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(arr8, mode="RGB")
    pil.save(path)


def rgb_to_y(img: Image) -> Image:
    """BT.601 studio-swing luma: Y in [16/255, 235/255] for RGB in [0, 1]."""
    if img.colorspace != "RGB":
        raise ValueError("rgb_to_y expects an RGB image")
    y = (img.data @ _Y_WEIGHTS + _Y_OFFSET) / 255.0
    return Image(y[:, :, None], "Y", img.bitdepth_hint)


def _keys_cubic(x):
    # piecewise cubic with a = -0.5
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = 1.5 * ax3 - 2.5 * ax2 + 1.0
    far = -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    return np.where(ax <= 1.0, near, np.where(ax <= 2.0, far, 0.0))


@functools.lru_cache(maxsize=256)
def resize_matrix(in_len: int, out_len: int) -> np.ndarray:
    """Dense out_len x in_len weight matrix for 1-D Keys-cubic resampling.

    When downscaling, the kernel support is stretched by the inverse scale
    (anti-aliasing). Out-of-range taps are folded onto the edge samples, and
    every row is normalized to sum to one, so constants are preserved and
    out_len == in_len yields the identity.
    """
    if in_len < 1 or out_len < 1:
        raise ValueError("resize_matrix needs positive lengths")
    scale = out_len / in_len
    kscale = min(scale, 1.0)
    support = 2.0 / kscale
    u = (np.arange(out_len) + 0.5) / scale - 0.5
    left = np.floor(u - support).astype(np.int64)
    taps = int(np.ceil(2.0 * support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = _keys_cubic((u[:, None] - idx) * kscale) * kscale
    w = w / w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_len - 1)
    m = np.zeros((out_len, in_len))
    np.add.at(m, (np.repeat(np.arange(out_len), taps), idx.ravel()), w.ravel())
    m.setflags(write=False)
    return m


def resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resize of an HxWxC array."""
    mh = resize_matrix(arr.shape[0], out_h)
    mw = resize_matrix(arr.shape[1], out_w)
    tmp = np.tensordot(mh, arr, (1, 0))            # (out_h, W, C)
    out = np.tensordot(tmp, mw, (1, 1))            # (out_h, C, out_w)
    return np.ascontiguousarray(out.transpose(0, 2, 1))


def bicubic_resize(img: Image, out_h: int, out_w: int) -> Image:
    """Resize with the Keys cubic (a = -0.5), anti-aliased when downscaling."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    return Image(resize_array(img.data, out_h, out_w), img.colorspace, img.bitdepth_hint)
