"""Networks: masked-modulation generator, discriminator, and recognizer.

The generator grows a learned 4x4 constant through upsample+conv stages.
Each latent dimension is wired into exactly one stage through a masked
modulation unit: the dimension re-styles the feature map via adaptive
instance normalization, but only inside a soft rectangular region produced
by band-pass gates (see :mod:`dismask.gating`). The discriminator and the
recognizer mirror the generator downward with separate weights.

Also provides a generic finite-difference gradient checker.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import gating

ADAIN_EPS = 1e-8

MASK_MODES = ("sc", "softmax", "none")


def adain(
    content: torch.Tensor, style_mean: torch.Tensor, style_std: torch.Tensor
) -> torch.Tensor:
    """Re-statistics ``content`` per channel to the given mean/std.

    ``content`` is (..., C, H, W); ``style_mean`` and ``style_std`` are
    (..., C). Content statistics use the population standard deviation over
    the spatial dimensions, guarded by a small epsilon for flat channels.
    """
    mu = content.mean(dim=(-2, -1), keepdim=True)
    var = ((content - mu) ** 2).mean(dim=(-2, -1), keepdim=True)
    sigma = torch.sqrt(var)
    normed = (content - mu) / (sigma + ADAIN_EPS)
    return style_std[..., None, None] * normed + style_mean[..., None, None]


class SCUnit(nn.Module):
    """Masked modulation of a feature map by a single latent scalar.

    Gate logits are affine maps of the spatially average-pooled input, one
    (rise, fall) pair per rectangle and axis. The style statistics come from
    an affine map of the code; the std half passes through softplus so the
    adain precondition (std >= 0) always holds.
    """

    def __init__(self, channels: int, height: int, width: int, num_rects: int,
                 mask_mode: str = "sc"):
        super().__init__()
        if mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask_mode {mask_mode!r}")
        self.channels = channels
        self.height = height
        self.width = width
        self.num_rects = num_rects
        self.mask_mode = mask_mode
        self.style = nn.Linear(1, 2 * channels)
        if mask_mode != "none":
            self.f_h1 = nn.Linear(channels, num_rects * height)
            self.f_h2 = nn.Linear(channels, num_rects * height)
            self.f_w1 = nn.Linear(channels, num_rects * width)
            self.f_w2 = nn.Linear(channels, num_rects * width)

    def mask(self, gamma: torch.Tensor) -> torch.Tensor:
        """Aggregate soft mask for the current input, shape (B, H, W)."""
        b = gamma.shape[0]
        if self.mask_mode == "none":
            return gamma.new_ones((b, self.height, self.width))
        pooled = gamma.mean(dim=(-2, -1))
        j, h, w = self.num_rects, self.height, self.width
        vh1 = self.f_h1(pooled).view(b, j, h)
        vw1 = self.f_w1(pooled).view(b, j, w)
        if self.mask_mode == "softmax":
            rects = [gating.softmax_mask(vh1[:, i], vw1[:, i]) for i in range(j)]
        else:
            vh2 = self.f_h2(pooled).view(b, j, h)
            vw2 = self.f_w2(pooled).view(b, j, w)
            gh = gating.band_pass_gate(vh1, vh2)
            gw = gating.band_pass_gate(vw1, vw2)
            pi = gating.rect_mask(gh, gw)
            rects = [pi[:, i] for i in range(j)]
        return gating.aggregate_masks(rects)

    def forward(
        self,
        gamma: torch.Tensor,
        code_scalar: torch.Tensor,
        mask_override: torch.Tensor | float | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Blend ``gamma`` with its restyled version inside the mask.

        Returns ``(output, mask)`` where output =
        gamma * (1 - mask) + adain(gamma, style(code)) * mask.
        """
        if gamma.shape[-2:] != (self.height, self.width):
            raise ValueError(
                f"feature map spatial dims {tuple(gamma.shape[-2:])} do not "
                f"match unit size ({self.height}, {self.width})"
            )
        if mask_override is None:
            pi = self.mask(gamma)
        elif isinstance(mask_override, (int, float)):
            pi = gamma.new_full((gamma.shape[0], self.height, self.width),
                                float(mask_override))
        else:
            if mask_override.shape[-2:] != (self.height, self.width):
                raise ValueError("mask override spatial dims do not match "
                                 "the feature map")
            pi = mask_override.expand(gamma.shape[0], self.height, self.width)
        stats = self.style(code_scalar.reshape(-1, 1))
        style_mean, style_raw = stats.chunk(2, dim=-1)
        restyled = adain(gamma, style_mean, F.softplus(style_raw))
        pi_b = pi.unsqueeze(-3)
        return gamma * (1.0 - pi_b) + restyled * pi_b, pi


def sc_block(
    gamma: torch.Tensor,
    code_scalar: torch.Tensor,
    block_params: SCUnit,
    mask_override: torch.Tensor | float | None = None,
) -> torch.Tensor:
    """Functional form of :class:`SCUnit`; returns the blended feature map."""
    out, _ = block_params(gamma, code_scalar, mask_override=mask_override)
    return out


@dataclass
class ArchConfig:
    """Dimensions and wiring of a model bundle."""

    d: int = 10
    num_rects: int = 6
    mask_mode: str = "sc"
    resolution: int = 64
    img_channels: int = 1
    base_channels: int = 64
    stage_channels: tuple[int, ...] = (24, 16, 8, 6)
    dim_to_block: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if not (1 <= self.num_rects <= 9):
            raise ValueError("num_rects must be in [1, 9]")
        n_stages = len(self.stage_channels)
        if self.resolution != 4 * 2 ** n_stages:
            raise ValueError("resolution must equal 4 * 2**len(stage_channels)")
        if self.dim_to_block is None:
            self.dim_to_block = tuple(i % n_stages for i in range(self.d))
        else:
            self.dim_to_block = tuple(self.dim_to_block)
            if len(self.dim_to_block) != self.d:
                raise ValueError("dim_to_block must list one block per dim")
            if any(not 0 <= b < n_stages for b in self.dim_to_block):
                raise ValueError("dim_to_block entries out of range")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "num_rects": self.num_rects,
            "mask_mode": self.mask_mode,
            "resolution": self.resolution,
            "img_channels": self.img_channels,
            "base_channels": self.base_channels,
            "stage_channels": list(self.stage_channels),
            "dim_to_block": list(self.dim_to_block),
        }

    @classmethod
    def from_dict(cls, cfg: dict) -> "ArchConfig":
        return cls(
            d=cfg["d"],
            num_rects=cfg["num_rects"],
            mask_mode=cfg["mask_mode"],
            resolution=cfg["resolution"],
            img_channels=cfg["img_channels"],
            base_channels=cfg["base_channels"],
            stage_channels=tuple(cfg["stage_channels"]),
            dim_to_block=tuple(cfg["dim_to_block"]),
        )


class Generator(nn.Module):
    """Grows a learned 4x4 constant to the target resolution.

    Each stage: nearest-neighbor upsample, 3x3 conv, leaky relu, then one
    masked modulation unit per latent dimension assigned to the stage.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.const = nn.Parameter(torch.zeros(arch.base_channels, 4, 4))
        convs = []
        units = []
        in_c = arch.base_channels
        res = 4
        for s, out_c in enumerate(arch.stage_channels):
            res *= 2
            convs.append(nn.Conv2d(in_c, out_c, 3, padding=1))
            stage_units = nn.ModuleDict()
            for dim, block in enumerate(arch.dim_to_block):
                if block == s:
                    stage_units[str(dim)] = SCUnit(
                        out_c, res, res, arch.num_rects, arch.mask_mode
                    )
            units.append(stage_units)
            in_c = out_c
        self.convs = nn.ModuleList(convs)
        self.units = nn.ModuleList(units)
        self.to_img = nn.Conv2d(in_c, arch.img_channels, 1)

    def forward(
        self,
        codes: torch.Tensor,
        mask_override: float | None = None,
        return_masks: bool = False,
    ):
        if codes.ndim != 2 or codes.shape[1] != self.arch.d:
            raise ValueError(
                f"codes must be (B, {self.arch.d}), got {tuple(codes.shape)}"
            )
        x = self.const.unsqueeze(0).expand(codes.shape[0], -1, -1, -1)
        masks: dict[int, torch.Tensor] = {}
        for conv, stage_units in zip(self.convs, self.units):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.leaky_relu(conv(x), 0.2)
            for dim_str, unit in stage_units.items():
                dim = int(dim_str)
                x, pi = unit(x, codes[:, dim], mask_override=mask_override)
                if return_masks:
                    masks[dim] = pi
        img = torch.tanh(self.to_img(x))
        if return_masks:
            return img, masks
        return img

    def dim_masks(self, codes: torch.Tensor) -> dict[int, torch.Tensor]:
        """Per-dimension masks upsampled to the output resolution."""
        with torch.no_grad():
            _, masks = self.forward(codes, return_masks=True)
        res = self.arch.resolution
        out = {}
        for dim, pi in masks.items():
            out[dim] = F.interpolate(
                pi.unsqueeze(1), size=(res, res), mode="nearest"
            ).squeeze(1)
        return out


class ConvTower(nn.Module):
    """Downsampling conv stack shared by discriminator and recognizer."""

    def __init__(self, arch: ArchConfig, out_dim: int):
        super().__init__()
        self.arch = arch
        chans = list(reversed(arch.stage_channels))
        self.from_img = nn.Conv2d(arch.img_channels, chans[0], 3, padding=1)
        convs = []
        in_c = chans[0]
        for out_c in chans[1:] + [arch.base_channels]:
            convs.append(nn.Conv2d(in_c, out_c, 3, padding=1))
            in_c = out_c
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(in_c * 4 * 4, out_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        res = self.arch.resolution
        if image.ndim != 4 or image.shape[1:] != (self.arch.img_channels, res, res):
            raise ValueError(
                f"image must be (B, {self.arch.img_channels}, {res}, {res}), "
                f"got {tuple(image.shape)}"
            )
        x = F.leaky_relu(self.from_img(image), 0.2)
        for conv in self.convs:
            x = F.avg_pool2d(F.leaky_relu(conv(x), 0.2), 2)
        return self.head(x.flatten(1))


@dataclass
class ModelBundle:
    """Generator, discriminator, recognizer, and their architecture config."""

    arch: ArchConfig
    generator: Generator
    discriminator: ConvTower
    recognizer: ConvTower

    @classmethod
    def build(cls, arch: ArchConfig, seed: int = 0) -> "ModelBundle":
        g = Generator(arch)
        d = ConvTower(arch, 1)
        q = ConvTower(arch, arch.d)
        gen = torch.Generator().manual_seed(seed)
        for module in (g, d, q):
            init_parameters(module, gen)
        return cls(arch=arch, generator=g, discriminator=d, recognizer=q)

    def modules_by_role(self) -> dict[str, nn.Module]:
        return {
            "generator": self.generator,
            "discriminator": self.discriminator,
            "recognizer": self.recognizer,
        }


def init_parameters(module: nn.Module, gen: torch.Generator) -> None:
    """He-style init drawn from an explicit generator for determinism."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
    for name, p in module.named_parameters(recurse=False):
        if name == "const":
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=gen))


def _to_codes(arch: ArchConfig, code: np.ndarray) -> torch.Tensor:
    code = np.asarray(code, dtype=np.float32)
    if code.ndim == 1:
        code = code[None]
    if code.shape[-1] != arch.d:
        raise ValueError(f"latent code length {code.shape[-1]} != d={arch.d}")
    return torch.from_numpy(code)


def generate(bundle: ModelBundle, code: np.ndarray,
             mask_override: float | None = None) -> np.ndarray:
    """Render images for latent codes; returns (B, C, H, W) in [-1, 1]."""
    codes = _to_codes(bundle.arch, code)
    bundle.generator.eval()
    with torch.no_grad():
        img = bundle.generator(codes, mask_override=mask_override)
    return img.numpy()


def discriminate(bundle: ModelBundle, image: np.ndarray) -> np.ndarray:
    """Realness logits for a batch of images, shape (B,)."""
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if x.ndim == 3:
        x = x.unsqueeze(0)
    bundle.discriminator.eval()
    with torch.no_grad():
        return bundle.discriminator(x).squeeze(-1).numpy()


def recognize(bundle: ModelBundle, image: np.ndarray) -> np.ndarray:
    """Reconstructed latent codes for a batch of images, shape (B, d)."""
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if x.ndim == 3:
        x = x.unsqueeze(0)
    bundle.recognizer.eval()
    with torch.no_grad():
        return bundle.recognizer(x).numpy()


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def grad_check(fn, params: dict[str, torch.Tensor], tol: float = 1e-4,
               step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of ``fn(params)`` to central differences.

    ``fn`` maps a dict of double-precision tensors to a scalar tensor.
    The relative error per parameter is the max-norm of the gradient gap
    over the sum of the two gradient max-norms.
    """
    leaves = {k: v.detach().double().requires_grad_(True) for k, v in params.items()}
    loss = fn(leaves)
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    report: dict[str, float] = {}
    for (name, p), g in zip(leaves.items(), grads):
        analytic = torch.zeros_like(p) if g is None else g
        numeric = torch.zeros_like(p)
        flat = p.detach().reshape(-1)
        num_flat = numeric.reshape(-1)
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + step
            hi = fn({k: v.detach() for k, v in leaves.items()}).item()
            flat[idx] = orig - step
            lo = fn({k: v.detach() for k, v in leaves.items()}).item()
            flat[idx] = orig
            num_flat[idx] = (hi - lo) / (2.0 * step)
        gap = (analytic - numeric).abs().max().item()
        scale = analytic.abs().max().item() + numeric.abs().max().item()
        report[name] = gap / scale if scale > 0 else gap
    max_err = max(report.values()) if report else 0.0
    return GradCheckReport(max_rel_err=max_err, per_param=report)
