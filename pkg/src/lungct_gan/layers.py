import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm


def sn(module: nn.Module) -> nn.Module:
    # one power iteration per forward pass, persistent u/v estimates
    return spectral_norm(module, n_power_iterations=1)


def sn_conv3d(cin, cout, kernel_size, padding=0, bias=True):
    return sn(nn.Conv3d(cin, cout, kernel_size, stride=1, padding=padding, bias=bias))


class AdaIN3d(nn.Module):
    """Adaptive instance norm: per-sample, per-channel scale and shift from a style vector."""

    def __init__(self, channels: int, style_dim: int = 512, eps: float = 1e-8):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.affine = nn.Linear(style_dim, 2 * channels)
        with torch.no_grad():
            self.affine.bias[:channels].fill_(1.0)
            self.affine.bias[channels:].zero_()

    def style_params(self, w):
        scale, shift = self.affine(w).chunk(2, dim=1)
        return scale, shift

    def forward(self, x, w):
        b, c = x.shape[:2]
        flat = x.reshape(b, c, -1)
        mean = flat.mean(dim=2, keepdim=True)
        var = flat.var(dim=2, unbiased=False, keepdim=True)
        normed = ((flat - mean) / torch.sqrt(var + self.eps)).reshape_as(x)
        scale, shift = self.style_params(w)
        shape = (b, c) + (1,) * (x.dim() - 2)
        return normed * scale.reshape(shape) + shift.reshape(shape)


class SelfAttention3d(nn.Module):
    """Non-local attention over all voxels of a 3D feature map, gated by ``gamma``.

    With ``gamma == 0`` (its initial value) the block is an exact identity.
    """

    def __init__(self, channels: int):
        super().__init__()
        inner = max(1, channels // 8)
        value = max(1, channels // 2)
        self.theta = sn_conv3d(channels, inner, 1, bias=False)
        self.phi = sn_conv3d(channels, inner, 1, bias=False)
        self.g = sn_conv3d(channels, value, 1, bias=False)
        self.o = sn_conv3d(value, channels, 1, bias=False)
        self.gamma = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        b, c = x.shape[:2]
        theta = self.theta(x).flatten(2)
        phi = self.phi(x).flatten(2)
        g = self.g(x).flatten(2)
        attn = F.softmax(torch.bmm(theta.transpose(1, 2), phi), dim=-1)
        out = torch.bmm(g, attn.transpose(1, 2)).reshape(b, -1, *x.shape[2:])
        return x + self.gamma * self.o(out)


class GBlock3d(nn.Module):
    """bigGAN residual up-block: BN-ReLU-up-conv3-BN-ReLU-conv3, plus an upsampled 1x1 shortcut."""

    def __init__(self, cin: int, cout: int, scale_factor=(2, 2, 2)):
        super().__init__()
        self.scale_factor = tuple(scale_factor)
        self.bn1 = nn.BatchNorm3d(cin)
        self.conv1 = sn_conv3d(cin, cout, 3, padding=1)
        self.bn2 = nn.BatchNorm3d(cout)
        self.conv2 = sn_conv3d(cout, cout, 3, padding=1)
        self.shortcut = sn_conv3d(cin, cout, 1)

    def _up(self, x):
        return F.interpolate(x, scale_factor=self.scale_factor, mode="nearest")

    def forward(self, x):
        h = self._up(F.relu(self.bn1(x)))
        h = self.conv2(F.relu(self.bn2(self.conv1(h))))
        return h + self.shortcut(self._up(x))


def spectral_norm_weights(module: nn.Module):
    """Yield (name, normalized weight) for every spectrally normalized submodule."""
    for name, sub in module.named_modules():
        if hasattr(sub, "parametrizations") and "weight" in sub.parametrizations:
            yield name, sub.weight
