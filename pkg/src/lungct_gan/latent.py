"""2D embeddings of generator latent spaces, labelled with vessel branch counts."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np
import torch

from .generators import generate_from_native, native_latents
from .structure import DEFAULT_THRESHOLD, patch_branch_count

COLOUR_SATURATION = 120


class Reducer(Protocol):
    name: str

    def fit_transform(self, x: np.ndarray) -> np.ndarray: ...


class ReducerError(RuntimeError):
    pass


class PCAReducer:
    """Projection onto the top-2 principal axes; each axis is signed so its largest loading is positive."""

    name = "pca"

    def __init__(self, n_components: int = 2):
        self.n_components = n_components

    def fit_transform(self, x):
        x = np.asarray(x, dtype=np.float64)
        centered = x - x.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        axes = vt[: self.n_components]
        signs = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(axis=1)])
        self.components_ = axes * signs[:, None]
        return centered @ self.components_.T


class UmapReducer:
    """Thin wrapper over umap-learn, imported lazily (optional dependency)."""

    name = "umap"

    def __init__(self, seed: int = 0, **kwargs):
        self.seed = seed
        self.kwargs = kwargs

    def fit_transform(self, x):
        try:
            import umap
        except ImportError as exc:
            raise ReducerError("the umap reducer needs the umap-learn package") from exc
        return umap.UMAP(n_components=2, random_state=self.seed, **self.kwargs).fit_transform(x)


def get_reducer(name: str, seed: int = 0) -> Reducer:
    if name == "pca":
        return PCAReducer()
    if name == "umap":
        return UmapReducer(seed)
    raise ValueError(f"unknown reducer {name!r}")


@dataclass
class EmbeddingPoint:
    latent_id: int
    x: float
    y: float
    branch_count: int | None = None
    latent: np.ndarray | None = field(default=None, repr=False, compare=False)


def embed_latents(gen, n_embed: int = 50_000, reducer: Reducer | None = None,
                  rng: np.random.Generator | None = None, batch: int = 4096) -> list[EmbeddingPoint]:
    """Sample z, move to the generator's native space (w for styleGAN3D) and reduce to 2D.

    Each point keeps its source z so its patch can be regenerated.
    """
    if n_embed < 10:
        raise ValueError("n_embed must be >= 10")
    reducer = reducer or PCAReducer()
    rng = rng or np.random.default_rng()
    z = rng.standard_normal((n_embed, gen.latent_dim)).astype(np.float32)
    codes = np.concatenate([native_latents(gen, torch.from_numpy(z[i : i + batch])).cpu().numpy()
                            for i in range(0, n_embed, batch)])
    try:
        xy = np.asarray(reducer.fit_transform(codes), dtype=np.float64)
    except Exception as exc:
        raise ReducerError(f"reducer {getattr(reducer, 'name', type(reducer).__name__)!r} failed "
                           f"on {codes.shape[0]}x{codes.shape[1]} latents: {exc}") from exc
    if xy.shape != (n_embed, 2):
        raise ReducerError(f"reducer returned shape {xy.shape}, expected ({n_embed}, 2)")
    return [EmbeddingPoint(i, float(a), float(b), None, z[i]) for i, (a, b) in enumerate(xy)]


def label_with_branch_counts(gen, points, threshold: float = DEFAULT_THRESHOLD, subset: int | None = 1000,
                             batch: int = 8) -> list[EmbeddingPoint]:
    """Branch counts for the first ``subset`` points (all points if None)."""
    chosen = list(points)[:subset] if subset is not None else list(points)
    for p in chosen:
        if p.latent is None:
            raise ValueError(f"point {p.latent_id} has no stored latent")
    out = []
    for i in range(0, len(chosen), batch):
        group = chosen[i : i + batch]
        z = torch.from_numpy(np.stack([p.latent for p in group]).astype(np.float32))
        patches = generate_from_native(gen, native_latents(gen, z)).cpu().numpy()
        out += [replace(p, branch_count=patch_branch_count(patch, threshold)) for p, patch in zip(group, patches)]
    return out


def write_embedding_csv(path, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["latent_id", "x", "y", "branch_count"])
        for p in points:
            w.writerow([p.latent_id, repr(p.x), repr(p.y), "" if p.branch_count is None else p.branch_count])


def read_embedding_csv(path) -> list[EmbeddingPoint]:
    with open(path, newline="") as fh:
        return [EmbeddingPoint(int(r["latent_id"]), float(r["x"]), float(r["y"]),
                               int(r["branch_count"]) if r["branch_count"] else None)
                for r in csv.DictReader(fh)]


def save_latents(path, points):
    np.save(path, np.stack([p.latent for p in points]))


def plot_embedding(points, path, saturate: int = COLOUR_SATURATION):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4.5))
    xy = np.array([(p.x, p.y) for p in points])
    ax.scatter(xy[:, 0], xy[:, 1], s=1, c="lightgrey")
    labelled = [p for p in points if p.branch_count is not None]
    if labelled:
        lab = np.array([(p.x, p.y, p.branch_count) for p in labelled])
        sc = ax.scatter(lab[:, 0], lab[:, 1], s=4, c=np.minimum(lab[:, 2], saturate), vmin=0, vmax=saturate,
                        cmap="viridis")
        fig.colorbar(sc, ax=ax, label=f"branch points (saturated at {saturate})")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
