"""The recurrent detail-structure network.

One time step runs: shallow conv -> hidden-state fusion -> detail
restoration (structure map minus the bicubic-upsampled input) -> structure
modulation (detail-conditioned affine transforms at HR then LR resolution)
-> feature reconstruction. The modulated LR feature is the hidden state
threaded through the unroll; parameters are shared across all steps.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn

from .imaging import resize_matrix

# transposed-convolution geometry (kernel, stride, padding) giving an
# output of exactly scale * input for every input size
_DECONV_GEOMETRY = {2: (4, 2, 1), 3: (9, 3, 3), 4: (8, 4, 2)}

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class DssrConfig:
    """Architecture hyper-parameters."""

    scale: int = 2
    channels: int = 128
    stru_fe_blocks: int = 15
    recon_blocks: int = 5
    detail_fe_convs: int = 4
    steps: int = 4

    def __post_init__(self):
        if self.scale not in _DECONV_GEOMETRY:
            raise ValueError(f"scale must be one of {sorted(_DECONV_GEOMETRY)}")
        for name in ("channels", "stru_fe_blocks", "recon_blocks",
                     "detail_fe_convs", "steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class StepOutput(NamedTuple):
    sr: torch.Tensor       # B x 3 x sH x sW
    detail: torch.Tensor   # B x 3 x sH x sW
    hidden: torch.Tensor   # B x C x H x W


_MATRIX_CACHE: dict = {}


def _torch_resize_matrix(in_len, out_len, dtype, device):
    key = (in_len, out_len, dtype, str(device))
    m = _MATRIX_CACHE.get(key)
    if m is None:
        m = torch.from_numpy(resize_matrix(in_len, out_len).copy())
        m = m.to(dtype=dtype, device=device)
        _MATRIX_CACHE[key] = m
    return m


def resize_tensor(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Differentiable bicubic resize of a B x C x H x W tensor.

    Uses the same precomputed weight matrices as the array resampler, so
    tensor and array paths agree to dtype precision.
    """
    if x.ndim != 4:
        raise ValueError(f"expected a 4-d tensor, got shape {tuple(x.shape)}")
    mh = _torch_resize_matrix(x.shape[-2], out_h, x.dtype, x.device)
    mw = _torch_resize_matrix(x.shape[-1], out_w, x.dtype, x.device)
    y = torch.einsum("oh,bchw->bcow", mh, x)
    return torch.einsum("pw,bcow->bcop", mw, y)


def _conv(in_ch, out_ch, ksize=3):
    return nn.Conv2d(in_ch, out_ch, ksize, padding=ksize // 2)


class ResidualBlock(nn.Module):
    """conv3x3 -> LeakyReLU -> conv3x3 with an identity skip, no norm."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = _conv(channels, channels)
        self.conv2 = _conv(channels, channels)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class DetailBranch(nn.Module):
    """Detail feature extractor: conv stack lifting the 3-channel map to C."""

    def __init__(self, channels, n_convs):
        super().__init__()
        layers = [_conv(3, channels)]
        for _ in range(n_convs - 1):
            layers += [nn.LeakyReLU(LEAKY_SLOPE), _conv(channels, channels)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class AffineTransform(nn.Module):
    """Detail-conditioned affine modulation of a 3-channel structure map.

    A two-conv head maps C-channel detail features to (gamma, beta); the
    output is gamma * s + beta, plus the structure itself when `residual`
    (the HR-side form; the LR side omits the extra skip).
    """

    uses_detail = True

    def __init__(self, channels, residual):
        super().__init__()
        self.head = nn.Sequential(
            _conv(channels, channels), nn.LeakyReLU(LEAKY_SLOPE), _conv(channels, 6)
        )
        self.residual = residual

    def forward(self, s, d):
        gamma, beta = self.head(d).chunk(2, dim=1)
        out = gamma * s + beta
        return out + s if self.residual else out


class Dssr(nn.Module):
    """The full network; `hr_stage`/`lr_stage` swap the modulation scheme.

    Both stage modules take (structure, detail_features) and return a
    modulated structure map of the same shape; the defaults are the paired
    affine transforms. Ablation factories inject alternatives.
    """

    def __init__(self, config: DssrConfig, hr_stage: nn.Module | None = None,
                 lr_stage: nn.Module | None = None):
        super().__init__()
        c = config.channels
        k, stride, pad = _DECONV_GEOMETRY[config.scale]

        self.shallow = _conv(3, c)
        self.fusion = _conv(2 * c, c, ksize=1)

        # detail restoration: residual blocks, deconv upscaler, image projection
        self.stru_fe = nn.Sequential(*[ResidualBlock(c) for _ in range(config.stru_fe_blocks)])
        self.upscaler = nn.ConvTranspose2d(c, c, k, stride=stride, padding=pad)
        self.to_image = _conv(c, 3)

        # structure modulation: two detail branches and the two stages
        self.detail_fe_hr = DetailBranch(c, config.detail_fe_convs)
        self.detail_fe_lr = DetailBranch(c, config.detail_fe_convs)
        self.hr_stage = AffineTransform(c, residual=True) if hr_stage is None else hr_stage
        self.lr_stage = AffineTransform(c, residual=False) if lr_stage is None else lr_stage
        self.lift = _conv(3, c, ksize=1)

        # feature reconstruction: residual blocks, sub-pixel upscaler
        self.recon = nn.Sequential(*[ResidualBlock(c) for _ in range(config.recon_blocks)])
        self.subpixel = nn.Sequential(
            _conv(c, c * config.scale**2), nn.PixelShuffle(config.scale)
        )
        self.out_conv = _conv(c, 3)

        self.config = config
        self.variant = "full_smu"

    def upsample_input(self, lr: torch.Tensor) -> torch.Tensor:
        """Bicubic upsampling of the LR input; constant across time steps."""
        s = self.config.scale
        return resize_tensor(lr, lr.shape[-2] * s, lr.shape[-1] * s)

    def fuse_hidden(self, f_in: torch.Tensor, hidden: torch.Tensor) -> torch.Tensor:
        """Concatenate [hidden, shallow features] and compress back to C."""
        if hidden.shape != f_in.shape:
            raise ValueError(
                f"hidden shape {tuple(hidden.shape)} != features {tuple(f_in.shape)}")
        return self.fusion(torch.cat([hidden, f_in], dim=1))

    def dru(self, fused, ihat):
        """Structure map via upscaled residual features; detail by subtraction."""
        s_hr = self.to_image(self.upscaler(self.stru_fe(fused)))
        if s_hr.shape != ihat.shape:
            raise ValueError(
                f"structure map {tuple(s_hr.shape)} vs upsampled input {tuple(ihat.shape)}")
        return s_hr, s_hr - ihat

    def smu(self, detail, s_hr, f_in):
        """Modulate the structure at HR then LR scale; add input features."""
        h, w = f_in.shape[-2:]
        d_hr = self.detail_fe_hr(detail) if self.hr_stage.uses_detail else None
        d_lr = (self.detail_fe_lr(resize_tensor(detail, h, w))
                if self.lr_stage.uses_detail else None)
        s_hr_mod = self.hr_stage(s_hr, d_hr)
        s_lr = resize_tensor(s_hr_mod, h, w)
        s_lr_mod = self.lr_stage(s_lr, d_lr)
        return self.lift(s_lr_mod) + f_in

    def reconstruct(self, hidden, ihat):
        """Residual reconstruction on top of the bicubic-upsampled input."""
        res = self.out_conv(self.subpixel(self.recon(hidden)))
        if res.shape != ihat.shape:
            raise ValueError(
                f"residual {tuple(res.shape)} vs upsampled input {tuple(ihat.shape)}")
        return res + ihat

    def step(self, lr, ihat, hidden) -> StepOutput:
        f_in = self.shallow(lr)
        fused = self.fuse_hidden(f_in, hidden)
        s_hr, detail = self.dru(fused, ihat)
        hidden_new = self.smu(detail, s_hr, f_in)
        sr = self.reconstruct(hidden_new, ihat)
        return StepOutput(sr, detail, hidden_new)

    def initial_hidden(self, lr: torch.Tensor) -> torch.Tensor:
        b, _, h, w = lr.shape
        return lr.new_zeros((b, self.config.channels, h, w))

    def forward(self, lr: torch.Tensor, steps: int | None = None) -> list[StepOutput]:
        """Unroll the recurrence; the step count may differ from training."""
        if steps is None:
            steps = self.config.steps
        if steps < 1:
            raise ValueError("steps must be >= 1")
        ihat = self.upsample_input(lr)
        hidden = self.initial_hidden(lr)
        outputs = []
        for _ in range(steps):
            out = self.step(lr, ihat, hidden)
            hidden = out.hidden
            outputs.append(out)
        return outputs


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Seeded uniform(+-1/sqrt(fan_in)) conv weights, zero biases.

    Gain-corrected He init is too hot here: every residual block would
    amplify activation variance ~3x, which compounds through 15 blocks
    and again through each recurrent step until float32 overflows. The
    sub-unit uniform magnitude keeps arbitrarily deep residual chains
    and long unrolls contractive.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, p in model.named_parameters():
        if p.ndim >= 2:
            fan_in = p.shape[1] * p[0][0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                p.uniform_(-bound, bound, generator=gen)
        else:
            with torch.no_grad():
                p.zero_()
    return model


def save_checkpoint(model: Dssr, path, extra: dict | None = None) -> None:
    """Single-archive checkpoint: config + variant tag + named tensors."""
    payload = {
        "format": 1,
        "config": asdict(model.config),
        "variant": model.variant,
        "state": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_state(model: Dssr, state: dict) -> Dssr:
    """Strict state load; failures name the offending parameters."""
    missing, unexpected = model.load_state_dict(state, strict=False)
    problems = []
    if missing:
        problems.append(f"missing parameters: {', '.join(missing)}")
    if unexpected:
        problems.append(f"unexpected parameters: {', '.join(unexpected)}")
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            problems.append(f"non-finite values in {name}")
    if problems:
        raise ValueError("checkpoint mismatch: " + "; ".join(problems))
    return model
