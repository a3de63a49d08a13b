"""Y-channel fidelity metrics, per-step curves, and protocol test sets.

PSNR and SSIM are computed on the BT.601 luma channel after clamping to
[0, 1] and shaving a border (scale pixels by convention, so benchmark
numbers are insensitive to resampler edge behavior).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import signal

from .degradation import (
    ANISO_NOISE,
    ANISO_SIGMA_RANGE,
    ANISO_SIZE,
    BlurKernel,
    DegradationSpec,
    crop_to_multiple,
    degrade,
    gaussian8_set,
    make_anisotropic_kernel,
)
from .imaging import Image, bicubic_resize, load_image, rgb_to_y
from .model import Dssr, resize_tensor
from .training import IMAGE_SUFFIXES

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _luma(img: Image, shave: int):
    if shave < 0:
        raise ValueError("shave must be >= 0")
    y = img if img.colorspace == "Y" else rgb_to_y(img)
    data = np.clip(y.data[:, :, 0], 0.0, 1.0)
    if shave:
        if data.shape[0] <= 2 * shave or data.shape[1] <= 2 * shave:
            raise ValueError(f"image too small to shave {shave} pixels")
        data = data[shave:-shave, shave:-shave]
    return data


def _check_dims(a: Image, b: Image):
    if a.data.shape != b.data.shape:
        raise ValueError(f"image dims differ: {a.data.shape} vs {b.data.shape}")


def psnr_y(a: Image, b: Image, shave: int = 0) -> float:
    """Peak signal-to-noise ratio on the luma channel; +inf for equality."""
    _check_dims(a, b)
    mse = np.mean((_luma(a, shave) - _luma(b, shave)) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _ssim_window():
    r = SSIM_WINDOW // 2
    g = np.exp(-0.5 * (np.arange(-r, r + 1) / SSIM_SIGMA) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def ssim_y(a: Image, b: Image, shave: int = 0) -> float:
    """Single-scale SSIM on luma: 11x11 Gaussian window, sigma 1.5,
    averaged over positions where the window fits entirely."""
    _check_dims(a, b)
    x = _luma(a, shave)
    y = _luma(b, shave)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}-pixel SSIM window")
    w = _ssim_window()

    def filt(z):
        return signal.fftconvolve(z, w, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass
class TestPair:
    name: str
    lr: Image
    hr: Image
    kernel: BlurKernel

    @property
    def kernel_label(self) -> str:
        k = self.kernel
        if k.kind == "isotropic":
            return f"iso_{k.sigma_x:.4g}"
        return f"aniso_{k.sigma_x:.3g}_{k.sigma_y:.3g}_{k.theta:.3g}"


def build_testset(hr_dir, scale: int, protocol: str, seed: int = 0) -> list[TestPair]:
    """Degrade every image in a directory under the chosen kernel protocol.

    gaussian8 pairs each image with all 8 isotropic test kernels;
    anisotropic draws one seeded random kernel per image.
    """
    paths = sorted(p for p in Path(hr_dir).iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ValueError(f"no images found in {hr_dir}")
    pairs = []
    if protocol == "gaussian8":
        kernels = gaussian8_set(scale)
        for path in paths:
            hr = crop_to_multiple(load_image(path), scale)
            for k in kernels:
                lr = degrade(hr, DegradationSpec(scale, k, "bicubic"))
                pairs.append(TestPair(path.stem, lr, hr, k))
    elif protocol == "anisotropic":
        rng = np.random.default_rng(seed)
        for path in paths:
            hr = crop_to_multiple(load_image(path), scale)
            sx = float(rng.uniform(*ANISO_SIGMA_RANGE))
            sy = float(rng.uniform(*ANISO_SIGMA_RANGE))
            theta = float(rng.uniform(-np.pi, np.pi))
            k = make_anisotropic_kernel(ANISO_SIZE, sx, sy, theta, ANISO_NOISE, rng)
            lr = degrade(hr, DegradationSpec(scale, k, "bicubic"))
            pairs.append(TestPair(path.stem, lr, hr, k))
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return pairs


def _to_tensor(img: Image, dtype) -> torch.Tensor:
    return torch.from_numpy(img.data.transpose(2, 0, 1)[None]).to(dtype)


def _to_image(t: torch.Tensor) -> Image:
    return Image(t.detach().numpy()[0].transpose(1, 2, 0).astype(np.float64))


def sr_outputs(model: Dssr, lr: Image, steps: int | None = None) -> list[Image]:
    """Super-resolve one image; returns the per-step SR estimates."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        outs = model(_to_tensor(lr, dtype), steps=steps)
    return [_to_image(o.sr) for o in outs]


def detail_l1_curve(model: Dssr, pairs: list[TestPair],
                    steps: int | None = None) -> list[float]:
    """Mean L1 between predicted detail maps and detail labels, per step."""
    steps = model.config.steps if steps is None else steps
    dtype = next(model.parameters()).dtype
    sums = np.zeros(steps)
    for pair in pairs:
        lr = _to_tensor(pair.lr, dtype)
        hr = _to_tensor(pair.hr, dtype)
        with torch.no_grad():
            ihat = resize_tensor(lr, hr.shape[-2], hr.shape[-1])
            outs = model(lr, steps=steps)
            label = hr - ihat
            for t, out in enumerate(outs):
                sums[t] += float((label - out.detail).abs().mean())
    return list(sums / len(pairs))


@dataclass
class MetricsReport:
    steps: int
    records: list[dict]
    aggregates: dict

    def write_csv(self, path) -> None:
        cols = ["name", "kernel"]
        for stem in ("psnr", "ssim", "detail_l1"):
            cols += [f"{stem}_t{t + 1}" for t in range(self.steps)]
        cols += ["bicubic_psnr", "bicubic_ssim"]
        with open(path, "w") as f:
            f.write(",".join(cols) + "\n")
            for rec in self.records:
                f.write(",".join(_fmt(rec[c]) for c in cols) + "\n")

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.aggregates, f, indent=2, sort_keys=True)
            f.write("\n")


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def evaluate(model: Dssr, pairs: list[TestPair], steps: int | None = None,
             shave: int | None = None) -> MetricsReport:
    """Score every test pair per unroll step, plus the bicubic baseline."""
    if not pairs:
        raise ValueError("empty test set")
    steps = model.config.steps if steps is None else steps
    if steps < 1:
        raise ValueError("steps must be >= 1")
    shave = model.config.scale if shave is None else shave
    dtype = next(model.parameters()).dtype

    records = []
    for pair in pairs:
        hr_h, hr_w = pair.hr.height, pair.hr.width
        ihat = bicubic_resize(pair.lr, hr_h, hr_w)
        label = pair.hr.data - ihat.data
        with torch.no_grad():
            outs = model(_to_tensor(pair.lr, dtype), steps=steps)
        rec = {"name": pair.name, "kernel": pair.kernel_label,
               "bicubic_psnr": psnr_y(ihat, pair.hr, shave),
               "bicubic_ssim": ssim_y(ihat, pair.hr, shave)}
        for t, out in enumerate(outs):
            sr = _to_image(out.sr)
            detail = _to_image(out.detail)
            rec[f"psnr_t{t + 1}"] = psnr_y(sr, pair.hr, shave)
            rec[f"ssim_t{t + 1}"] = ssim_y(sr, pair.hr, shave)
            rec[f"detail_l1_t{t + 1}"] = float(np.abs(label - detail.data).mean())
        records.append(rec)

    def mean_over(key):
        return float(np.mean([r[key] for r in records]))

    aggregates = {
        "count": len(records),
        "steps": steps,
        "psnr_per_step": [mean_over(f"psnr_t{t + 1}") for t in range(steps)],
        "ssim_per_step": [mean_over(f"ssim_t{t + 1}") for t in range(steps)],
        "detail_l1_per_step": [mean_over(f"detail_l1_t{t + 1}") for t in range(steps)],
        "bicubic_psnr": mean_over("bicubic_psnr"),
        "bicubic_ssim": mean_over("bicubic_ssim"),
    }
    aggregates["psnr_final"] = aggregates["psnr_per_step"][-1]
    aggregates["ssim_final"] = aggregates["ssim_per_step"][-1]
    return MetricsReport(steps, records, aggregates)
