"""MDmin distances and largeEBS most-collapsed-sample selection."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import LATENT_DIM, LargeEbsConfig


def pairwise_l1(features: torch.Tensor, chunk: int = 16) -> torch.Tensor:
    """(B, B) matrix of summed absolute differences between flattened samples."""
    features = torch.as_tensor(features)
    b = features.shape[0]
    if b < 2:
        raise ValueError(f"pairwise distances need at least 2 samples, got {b}")
    flat = features.reshape(b, -1)
    rows = [
        (flat[i : i + chunk, None, :] - flat[None, :, :]).abs().sum(dim=-1)
        for i in range(0, b, chunk)
    ]
    return torch.cat(rows, dim=0)


def mdmin_scores(d: torch.Tensor) -> torch.Tensor:
    """Minimum distance from each sample to any *other* sample in the batch."""
    d = torch.as_tensor(d)
    b = d.shape[0]
    if b < 2:
        raise ValueError(f"MDmin needs at least 2 samples, got {b}")
    eye = torch.eye(b, dtype=torch.bool, device=d.device)
    return d.masked_fill(eye, float("inf")).min(dim=1).values


@contextmanager
def frozen_buffers(*modules: nn.Module):
    """Restore every buffer (BN running stats, spectral-norm vectors) on exit."""
    saved = [{k: v.clone() for k, v in m.named_buffers()} for m in modules]
    try:
        yield
    finally:
        with torch.no_grad():
            for m, snap in zip(modules, saved):
                for k, v in m.named_buffers():
                    v.copy_(snap[k])


@dataclass
class Selection:
    latents: torch.Tensor
    patches: torch.Tensor
    scores: torch.Tensor
    indices: torch.Tensor


def rank_most_collapsed(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k smallest scores, ties broken by ascending index."""
    order = torch.sort(scores, stable=True).indices
    return order[:k]


def largeebs_select(gen: nn.Module, disc: nn.Module, cfg: LargeEbsConfig,
                    generator: torch.Generator | None = None, latents: torch.Tensor | None = None,
                    chunk: int | None = None) -> Selection:
    """Sample N latents, keep the k whose outputs have the smallest MDmin at the tap.

    Runs without gradient tracking and leaves parameters and buffers untouched.
    Pass ``latents`` to score a fixed candidate set instead of sampling one.
    """
    n, k = cfg.candidate_count, cfg.keep_count
    if k > n:
        raise ValueError(f"keep_count {k} exceeds candidate_count {n}")
    param = next(gen.parameters())
    if latents is None:
        latents = torch.randn(n, getattr(gen, "latent_dim", LATENT_DIM), generator=generator,
                              dtype=param.dtype, device="cpu").to(param.device)
    elif latents.shape[0] != n:
        raise ValueError(f"expected {n} candidate latents, got {latents.shape[0]}")
    chunk = chunk or n
    with torch.no_grad(), frozen_buffers(gen, disc):
        patches = torch.cat([gen(latents[i : i + chunk]) for i in range(0, n, chunk)])
        feats = torch.cat([disc.tap(patches[i : i + chunk], cfg.tap_layer) for i in range(0, n, chunk)])
        scores = mdmin_scores(pairwise_l1(feats))
    idx = rank_most_collapsed(scores, k)
    return Selection(latents[idx], patches[idx], scores[idx], idx)
