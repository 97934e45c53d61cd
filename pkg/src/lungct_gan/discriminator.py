from __future__ import annotations

import torch
import torch.nn as nn

from .config import DiscriminatorConfig, scale_channels
from .minibatch import mdmin_scores, pairwise_l1

# (kernel, stride, padding) of the four feature convolutions
FEATURE_CONVS = (
    ((2, 4, 4), 2, (0, 1, 1)),
    (4, 2, 1),
    (4, 2, 1),
    (4, 2, 1),
)
FINAL_KERNEL = (2, 4, 4)
DEFAULT_TAP = 8


def conv_output_shape(shape, kernel, stride, padding):
    """Spatial output shape of a Conv3d; used to check tap shapes independently."""

    def triple(v):
        return tuple(v) if isinstance(v, (tuple, list)) else (v, v, v)

    k, s, p = triple(kernel), triple(stride), triple(padding)
    return tuple((n + 2 * pi - ki) // si + 1 for n, ki, si, pi in zip(shape, k, s, p))


class Discriminator(nn.Module):
    def __init__(self, use_mdmin: bool = False, width_multiplier=1):
        super().__init__()
        self.use_mdmin = use_mdmin
        widths = [1] + [scale_channels(c, width_multiplier) for c in (64, 128, 256, 512)]
        layers = []
        for (kernel, stride, pad), cin, cout in zip(FEATURE_CONVS, widths[:-1], widths[1:]):
            layers += [nn.Conv3d(cin, cout, kernel, stride, pad, bias=False), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.tap_channels = widths[-1]
        self.final = nn.Conv3d(widths[-1] + int(use_mdmin), 1, FINAL_KERNEL, 1, 0, bias=False)
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.normal_(m.weight, 0.0, 0.02)

    @property
    def tap_layers(self) -> int:
        return len(self.features)

    def tap(self, x, layer: int = DEFAULT_TAP):
        if not 1 <= layer <= len(self.features):
            raise ValueError(f"tap layer must lie in [1, {len(self.features)}], got {layer}")
        return self.features[:layer](x.unsqueeze(1))

    def forward(self, x):
        """Raw scores D(x), shape (B,), for patches of shape (B, 32, 64, 64)."""
        h = self.tap(x, len(self.features))
        if self.use_mdmin:
            if h.shape[0] < 2:
                raise ValueError("MDmin needs a batch of at least 2 samples")
            md = mdmin_scores(pairwise_l1(h))
            h = torch.cat([h, md.reshape(-1, 1, 1, 1, 1).expand(-1, 1, *h.shape[2:])], dim=1)
        return self.final(h).flatten()


def build_discriminator(config: DiscriminatorConfig) -> Discriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        disc = Discriminator(config.use_mdmin, config.width_multiplier)
    disc.config = config
    return disc


def _to_tensor(disc, batch):
    x = torch.as_tensor(batch)
    param = next(disc.parameters())
    return x.to(device=param.device, dtype=param.dtype)


@torch.no_grad()
def discriminate(disc: Discriminator, batch) -> torch.Tensor:
    return disc(_to_tensor(disc, batch))


@torch.no_grad()
def features_at_layer(disc: Discriminator, batch, layer: int = DEFAULT_TAP) -> torch.Tensor:
    return disc.tap(_to_tensor(disc, batch), layer)
