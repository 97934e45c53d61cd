"""DCGAN3D, styleGAN3D and bigGAN3D patch generators (32x64x64 output in [-1, 1])."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LATENT_DIM, PATCH_SHAPE, GeneratorConfig, scale_channels
from .layers import AdaIN3d, GBlock3d, SelfAttention3d, sn, sn_conv3d


class ShapeError(ValueError):
    pass


class UnsupportedOperationError(TypeError):
    pass


def _dcgan_init(module):
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)


class DCGAN3DGenerator(nn.Module):
    family = "dcgan3d"

    def __init__(self, width_multiplier=1, latent_dim: int = LATENT_DIM):
        super().__init__()
        c1, c2, c3, c4 = (scale_channels(c, width_multiplier) for c in (512, 256, 128, 64))
        self.latent_dim = latent_dim
        self.net = nn.Sequential(
            nn.ConvTranspose3d(latent_dim, c1, 4, 1, 0, bias=False),
            nn.BatchNorm3d(c1),
            nn.ReLU(True),
            # depth 4 -> 4, height/width 4 -> 8
            nn.ConvTranspose3d(c1, c2, (2, 4, 4), 2, (2, 1, 1), bias=False),
            nn.BatchNorm3d(c2),
            nn.ReLU(True),
            nn.ConvTranspose3d(c2, c3, 4, 2, 1, bias=False),
            nn.BatchNorm3d(c3),
            nn.ReLU(True),
            nn.ConvTranspose3d(c3, c4, 4, 2, 1, bias=False),
            nn.BatchNorm3d(c4),
            nn.ReLU(True),
            nn.ConvTranspose3d(c4, 1, 4, 2, 1, bias=False),
            nn.Tanh(),
        )
        _dcgan_init(self)

    def forward(self, z):
        return self.net(z.reshape(z.shape[0], -1, 1, 1, 1)).squeeze(1)


# (in, out, upsample-before-conv, leaky relu after) for each AdaIN site; the
# 64->64 row carries no activation in the reference table and is kept that way.
STYLE_SYNTHESIS = (
    (512, 512, False, True),
    (512, 256, True, True),
    (256, 256, False, True),
    (256, 128, True, True),
    (128, 128, False, True),
    (128, 64, True, True),
    (64, 64, False, False),
    (64, 32, True, True),
    (32, 32, False, True),
    (32, 16, True, True),
    (16, 1, False, False),
)
MAPPING_LAYERS = 8


class StyleGAN3DGenerator(nn.Module):
    family = "stylegan3d"

    def __init__(self, width_multiplier=1, latent_dim: int = LATENT_DIM, style_dim: int = LATENT_DIM):
        super().__init__()
        self.latent_dim = latent_dim
        self.style_dim = style_dim
        layers = []
        for i in range(MAPPING_LAYERS):
            layers += [nn.Linear(latent_dim if i == 0 else style_dim, style_dim), nn.LeakyReLU(0.2)]
        self.mapping = nn.Sequential(*layers)

        def ch(c):
            return 1 if c == 1 else scale_channels(c, width_multiplier)

        self.const = nn.Parameter(torch.randn(1, ch(512), 1, 2, 2))
        self.adain = nn.ModuleList()
        self.convs = nn.ModuleList()
        self.upsample = []
        self.activate = []
        for cin, cout, up, act in STYLE_SYNTHESIS:
            self.adain.append(AdaIN3d(ch(cin), style_dim))
            self.convs.append(nn.Conv3d(ch(cin), ch(cout), 3, 1, 1, bias=False))
            self.upsample.append(up)
            self.activate.append(act)

    @property
    def num_style_sites(self) -> int:
        return len(self.adain)

    def synthesis(self, ws):
        """``ws``: (B, style_dim) for one style everywhere, or (B, sites, style_dim)."""
        if ws.dim() == 2:
            ws = ws.unsqueeze(1).expand(-1, self.num_style_sites, -1)
        x = self.const.expand(ws.shape[0], -1, -1, -1, -1)
        last = self.num_style_sites - 1
        for i, (adain, conv) in enumerate(zip(self.adain, self.convs)):
            x = adain(x, ws[:, i])
            if self.upsample[i]:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = conv(x)
            if self.activate[i]:
                x = F.leaky_relu(x, 0.2)
            elif i == last:
                x = torch.tanh(x)
        return x.squeeze(1)

    def forward(self, z):
        return self.synthesis(self.mapping(z))


class BigGAN3DGenerator(nn.Module):
    family = "biggan3d"

    def __init__(self, width_multiplier=1, latent_dim: int = LATENT_DIM):
        super().__init__()
        self.latent_dim = latent_dim
        c96, c48, c24, c12 = (scale_channels(c, width_multiplier) for c in (96, 48, 24, 12))
        self.base_channels = c96
        self.fc = sn(nn.Linear(latent_dim, c96 * 4 * 4 * 4))
        self.blocks = nn.ModuleList(
            [
                GBlock3d(c96, c96, (1, 2, 2)),
                GBlock3d(c96, c48),
                GBlock3d(c48, c24),
                GBlock3d(c24, c12),
            ]
        )
        self.attention = SelfAttention3d(c96)
        self.out_bn = nn.BatchNorm3d(c12)
        self.out_conv = sn_conv3d(c12, 1, 3, padding=1)

    def forward(self, z):
        x = self.fc(z).reshape(z.shape[0], self.base_channels, 4, 4, 4)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i == 0:
                x = self.attention(x)
        x = self.out_conv(F.relu(self.out_bn(x)))
        return torch.tanh(x).squeeze(1)


_FAMILIES = {
    "dcgan3d": DCGAN3DGenerator,
    "stylegan3d": StyleGAN3DGenerator,
    "biggan3d": BigGAN3DGenerator,
}


def build_generator(config: GeneratorConfig) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        gen = _FAMILIES[config.family](config.width_multiplier)
    gen.config = config
    return gen


def architecture(gen: nn.Module) -> list[str]:
    """Ordered leaf-layer descriptors, e.g. ``net.0: ConvTranspose3d(512, 512, ...)``."""
    out = []
    for name, m in gen.named_modules():
        if name and not list(m.children()) and not name.endswith(("original", "_u", "_v")):
            out.append(f"{name}: {m!r}")
    return out


def count_parameters(gen: nn.Module) -> int:
    return sum(p.numel() for p in gen.parameters() if p.requires_grad)


def _as_latents(gen, latents) -> torch.Tensor:
    z = torch.as_tensor(np.asarray(latents) if not torch.is_tensor(latents) else latents)
    if z.dim() == 1:
        z = z.unsqueeze(0)
    if z.dim() != 2 or z.shape[1] != gen.latent_dim:
        raise ShapeError(f"expected latents of shape (B, {gen.latent_dim}), got {tuple(z.shape)}")
    param = next(gen.parameters())
    return z.to(device=param.device, dtype=param.dtype)


class _eval_mode:
    def __init__(self, module):
        self.module = module

    def __enter__(self):
        self.was_training = self.module.training
        self.module.eval()

    def __exit__(self, *exc):
        self.module.train(self.was_training)


@torch.no_grad()
def generate(gen: nn.Module, latents) -> torch.Tensor:
    """Patches for a batch of latents, (B, 32, 64, 64), in inference mode."""
    z = _as_latents(gen, latents)
    with _eval_mode(gen):
        out = gen(z)
    assert out.shape[1:] == PATCH_SHAPE
    return out


def _require_style(gen):
    if not isinstance(gen, StyleGAN3DGenerator):
        raise UnsupportedOperationError(f"{getattr(gen, 'family', type(gen).__name__)} has no style space")


@torch.no_grad()
def map_latent(gen: nn.Module, z) -> torch.Tensor:
    _require_style(gen)
    return gen.mapping(_as_latents(gen, z))


def _as_style(gen, w) -> torch.Tensor:
    w = torch.as_tensor(np.asarray(w) if not torch.is_tensor(w) else w)
    if w.dim() == 1:
        w = w.unsqueeze(0)
    if w.dim() != 2 or w.shape[1] != gen.style_dim:
        raise ShapeError(f"expected styles of shape (B, {gen.style_dim}), got {tuple(w.shape)}")
    param = next(gen.parameters())
    return w.to(device=param.device, dtype=param.dtype)


def mixed_styles(w1, w2, crossover_depth: int, sites: int):
    """Stack per-site styles: sites below ``crossover_depth`` take ``w1``."""
    if not 0 <= crossover_depth <= sites:
        raise ValueError(f"crossover_depth must lie in [0, {sites}], got {crossover_depth}")
    use_first = torch.arange(sites, device=w1.device) < crossover_depth
    return torch.where(use_first[None, :, None], w1[:, None, :], w2[:, None, :])


@torch.no_grad()
def generate_from_styles(gen, w) -> torch.Tensor:
    _require_style(gen)
    with _eval_mode(gen):
        return gen.synthesis(_as_style(gen, w))


@torch.no_grad()
def generate_mixed(gen, w1, w2, crossover_depth: int) -> torch.Tensor:
    _require_style(gen)
    w1, w2 = _as_style(gen, w1), _as_style(gen, w2)
    ws = mixed_styles(w1, w2, crossover_depth, gen.num_style_sites)
    with _eval_mode(gen):
        return gen.synthesis(ws)


def native_latents(gen, z) -> torch.Tensor:
    """The latent space interpolation/embedding works in: w for styleGAN3D, z otherwise."""
    if isinstance(gen, StyleGAN3DGenerator):
        return map_latent(gen, z)
    return _as_latents(gen, z)


@torch.no_grad()
def generate_from_native(gen, codes) -> torch.Tensor:
    if isinstance(gen, StyleGAN3DGenerator):
        return generate_from_styles(gen, codes)
    return generate(gen, codes)
