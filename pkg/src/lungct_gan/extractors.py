"""Pluggable feature extractors for 2D (central slice) and 3D Frechet distances.

Pretrained weights are external artifacts: pass a path, nothing is downloaded
or trained here. ``random2d``/``random3d`` are seeded untrained networks meant
for desk-scale runs and self-tests only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class FeatureExtractor:
    name: str
    rank: int
    dim: int
    fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    info: dict = field(default_factory=dict)

    def __call__(self, batch) -> np.ndarray:
        feats = np.asarray(self.fn(np.asarray(batch, dtype=np.float32)), dtype=np.float64)
        return feats.reshape(len(feats), -1)

    def descriptor(self) -> dict:
        return {"name": self.name, "rank": self.rank, "dim": self.dim, **self.info}


def _torch_fn(module: nn.Module, prepare, batch_size: int = 32):
    module.eval()

    @torch.no_grad()
    def fn(batch: np.ndarray) -> np.ndarray:
        out = []
        for i in range(0, len(batch), batch_size):
            x = prepare(torch.from_numpy(np.ascontiguousarray(batch[i : i + batch_size])))
            out.append(module(x).flatten(1).double().numpy())
        return np.concatenate(out) if out else np.zeros((0, 0))

    return fn


class _RandomConv(nn.Module):
    def __init__(self, rank: int, dim: int):
        super().__init__()
        conv = nn.Conv2d if rank == 2 else nn.Conv3d
        widths = [1, 32, 64, 128, dim]
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers += [conv(cin, cout, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        h = self.net(x.unsqueeze(1))
        return h.mean(dim=tuple(range(2, h.dim())))


def random_conv_extractor(rank: int = 2, dim: int = 256, seed: int = 0) -> FeatureExtractor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _RandomConv(rank, dim)
    return FeatureExtractor(f"random{rank}d", rank, dim, _torch_fn(net, lambda x: x),
                            {"seed": seed, "pretrained": False})


# --- 3D ResNet-10 (segmentation-pretrained layout, 512-d after spatial averaging) ---

class _BasicBlock3d(nn.Module):
    def __init__(self, cin, cout, stride=1, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride, dilation, dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm3d(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, 1, dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm3d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(nn.Conv3d(cin, cout, 1, stride, bias=False), nn.BatchNorm3d(cout))

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.downsample is None else self.downsample(x)
        return self.relu(out + skip)


class ResNet10_3d(nn.Module):
    """ResNet-10 trunk; a 1x32x64x64 input gives a 512x4x8x8 map."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv3d(1, 64, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm3d(64)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool3d(3, stride=2, padding=1)
        self.layer1 = nn.Sequential(_BasicBlock3d(64, 64))
        self.layer2 = nn.Sequential(_BasicBlock3d(64, 128, stride=2))
        self.layer3 = nn.Sequential(_BasicBlock3d(128, 256, dilation=2))
        self.layer4 = nn.Sequential(_BasicBlock3d(256, 512, dilation=4))

    def feature_map(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))

    def forward(self, x):
        return self.feature_map(x.unsqueeze(1)).mean(dim=(2, 3, 4))


def load_state(module: nn.Module, path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    state = ckpt.get("state_dict", ckpt) if isinstance(ckpt, dict) else ckpt
    state = {k.removeprefix("module."): v for k, v in state.items()}
    missing, unexpected = module.load_state_dict(state, strict=False)
    return {"missing": list(missing), "unexpected": list(unexpected)}


def resnet10_3d_extractor(weights=None, seed: int = 0) -> FeatureExtractor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ResNet10_3d()
    info = {"pretrained": weights is not None}
    if weights is not None:
        report = load_state(net, weights)
        info.update(weights=str(weights), missing_keys=len(report["missing"]))
    with torch.no_grad():
        shape = tuple(net.feature_map(torch.zeros(1, 1, 32, 64, 64)).shape[1:])
    info["map_shape"] = list(shape)
    return FeatureExtractor("resnet10_3d", 3, 512, _torch_fn(net, lambda x: x), info)


def inception_v3_extractor(weights) -> FeatureExtractor:
    """2048-d pooled Inception-v3 features from a local torchvision state dict."""
    from torchvision.models import inception_v3

    net = inception_v3(weights=None, aux_logits=False, init_weights=False)
    report = load_state(net, weights)
    net.fc = nn.Identity()
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    def prepare(x):
        # grayscale [-1, 1] -> 3-channel ImageNet-normalized 299x299
        x = ((x + 1.0) / 2.0).unsqueeze(1).expand(-1, 3, -1, -1)
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        return (x - mean) / std

    return FeatureExtractor("inception_v3", 2, 2048, _torch_fn(net, prepare),
                            {"weights": str(weights), "missing_keys": len(report["missing"])})


def torchscript_extractor(path, rank: int, dim: int) -> FeatureExtractor:
    net = torch.jit.load(str(path), map_location="cpu")

    def prepare(x):
        return x.unsqueeze(1)

    inner = _torch_fn(net, prepare)

    def fn(batch):
        feats = inner(batch)
        return feats.reshape(len(feats), dim, -1).mean(axis=2)

    return FeatureExtractor(f"torchscript:{path}", rank, dim, fn, {"weights": str(path)})


def get_extractor(name: str, weights=None, dim: int | None = None) -> FeatureExtractor:
    if name == "random2d":
        return random_conv_extractor(2, dim or 256)
    if name == "random3d":
        return random_conv_extractor(3, dim or 512)
    if name == "inception":
        if weights is None:
            raise ValueError("the inception extractor needs a weights file")
        return inception_v3_extractor(weights)
    if name == "resnet10_3d":
        return resnet10_3d_extractor(weights)
    if name.startswith("torchscript"):
        if weights is None or dim is None:
            raise ValueError("torchscript extractors need weights and dim")
        rank = 3 if name.endswith("3d") else 2
        return torchscript_extractor(weights, rank, dim)
    raise ValueError(f"unknown extractor {name!r}")
