"""Ablation factory: alternative structure-modulation stages.

Every variant keeps the skeleton of the full network and swaps only the
two modulation stages, so parameter counts stay close and outputs keep
identical shapes. Each stage maps (structure, detail_features) -> modulated
structure; adapters that need matching channel counts insert 1x1
projections. Gate/adapter depths are chosen for rough parameter parity
with the paired affine transforms.
"""

from __future__ import annotations

import torch
from torch import nn

from .model import (
    LEAKY_SLOPE,
    AffineTransform,
    Dssr,
    DssrConfig,
    _conv,
    init_weights,
    load_state,
)

VARIANTS = (
    "full_smu", "no_smu", "ea", "fc", "ca", "sa", "smu_lr_only", "smu_hr_only",
)


class PassThrough(nn.Module):
    """Modulation removed: the structure map is used directly."""

    uses_detail = False

    def forward(self, s, d):
        return s


class AdditiveStage(nn.Module):
    """Element-wise addition of projected detail features."""

    uses_detail = True

    def __init__(self, channels):
        super().__init__()
        self.proj = nn.Sequential(
            _conv(channels, channels), nn.LeakyReLU(LEAKY_SLOPE), _conv(channels, 3)
        )

    def forward(self, s, d):
        return s + self.proj(d)


class ConcatStage(nn.Module):
    """Concatenation of structure and detail features, fused by 1x1 conv."""

    uses_detail = True

    def __init__(self, channels):
        super().__init__()
        self.refine = nn.Sequential(_conv(channels, channels), nn.LeakyReLU(LEAKY_SLOPE))
        self.fuse = _conv(channels + 3, 3, ksize=1)

    def forward(self, s, d):
        return self.fuse(torch.cat([s, self.refine(d)], dim=1))


class ChannelAttentionStage(nn.Module):
    """Squeeze-and-excitation gate on the structure channels."""

    uses_detail = True

    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.gate = nn.Sequential(
            _conv(channels, channels), nn.LeakyReLU(LEAKY_SLOPE),
            nn.AdaptiveAvgPool2d(1),
            _conv(channels, hidden, ksize=1), nn.LeakyReLU(LEAKY_SLOPE),
            _conv(hidden, 3, ksize=1), nn.Sigmoid(),
        )

    def forward(self, s, d):
        return s * self.gate(d)


class SpatialAttentionStage(nn.Module):
    """Single-channel sigmoid mask multiplied onto the structure map."""

    uses_detail = True

    def __init__(self, channels):
        super().__init__()
        self.gate = nn.Sequential(
            _conv(channels, channels), nn.LeakyReLU(LEAKY_SLOPE),
            _conv(channels, 1), nn.Sigmoid(),
        )

    def forward(self, s, d):
        return s * self.gate(d)


def _stages(kind: str, channels: int):
    if kind == "full_smu":
        return None, None  # model defaults: paired affine transforms
    if kind == "no_smu":
        return PassThrough(), PassThrough()
    if kind == "ea":
        return AdditiveStage(channels), AdditiveStage(channels)
    if kind == "fc":
        return ConcatStage(channels), ConcatStage(channels)
    if kind == "ca":
        return ChannelAttentionStage(channels), ChannelAttentionStage(channels)
    if kind == "sa":
        return SpatialAttentionStage(channels), SpatialAttentionStage(channels)
    if kind == "smu_lr_only":
        return PassThrough(), AffineTransform(channels, residual=False)
    if kind == "smu_hr_only":
        return AffineTransform(channels, residual=True), PassThrough()
    raise ValueError(f"unknown variant {kind!r}; expected one of {VARIANTS}")


def build_model(config: DssrConfig, seed: int, variant: str = "full_smu") -> Dssr:
    """Construct and He-initialize a network with the given modulation variant."""
    hr_stage, lr_stage = _stages(variant, config.channels)
    model = Dssr(config, hr_stage, lr_stage)
    model.variant = variant
    return init_weights(model, seed)


def load_checkpoint(path, map_location="cpu") -> tuple[Dssr, dict]:
    """Rebuild a model from a checkpoint archive; returns (model, payload)."""
    try:
        payload = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    for key in ("config", "variant", "state"):
        if key not in payload:
            raise ValueError(f"checkpoint {path} lacks required entry {key!r}")
    config = DssrConfig(**payload["config"])
    hr_stage, lr_stage = _stages(payload["variant"], config.channels)
    model = Dssr(config, hr_stage, lr_stage)
    model.variant = payload["variant"]
    load_state(model, payload["state"])
    return model, payload
