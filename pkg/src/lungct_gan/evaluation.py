"""Frechet distances, latent interpolation and observer-study stimulus export."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .extractors import FeatureExtractor


class FrechetError(ArithmeticError):
    pass


class SourceExhaustedError(RuntimeError):
    pass


class ExtractorRankError(ValueError):
    pass


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


@dataclass
class FidResult:
    value: float
    n_real: int
    n_fake: int
    extractor: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def central_slice(patch) -> np.ndarray:
    """Depth slice ``D // 2`` of a (D, H, W) patch or a (B, D, H, W) batch."""
    arr = np.asarray(patch)
    if arr.ndim == 3:
        return arr[arr.shape[0] // 2]
    if arr.ndim == 4:
        return arr[:, arr.shape[1] // 2]
    raise ValueError(f"expected a 3D patch or 4D batch, got shape {arr.shape}")


def gaussian_stats(features) -> FeatureStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need an (N >= 2, d) feature matrix, got shape {x.shape}")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (x.shape[0] - 1)
    return FeatureStats(mu, (sigma + sigma.T) / 2.0, x.shape[0])


def _sym(m):
    return (m + m.T) / 2.0


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _trace_sqrt_product(sa, sb) -> float:
    """tr((sa sb)^{1/2}) via the symmetric form sa^{1/2} sb sa^{1/2}."""
    root = _psd_sqrt(sa)
    vals = np.linalg.eigvalsh(_sym(root @ sb @ root))
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def frechet_distance(a: FeatureStats, b: FeatureStats, jitter: float = 1e-6) -> float:
    mu_a, mu_b = np.asarray(a.mu, np.float64), np.asarray(b.mu, np.float64)
    sa, sb = _sym(np.atleast_2d(a.sigma).astype(np.float64)), _sym(np.atleast_2d(b.sigma).astype(np.float64))
    if mu_a.shape != mu_b.shape or sa.shape != sb.shape or sa.shape[0] != mu_a.shape[0]:
        raise ValueError(f"dimension mismatch: mu {mu_a.shape} vs {mu_b.shape}, sigma {sa.shape} vs {sb.shape}")
    try:
        tr = _trace_sqrt_product(sa, sb)
        if not np.isfinite(tr):
            raise np.linalg.LinAlgError("non-finite trace")
    except np.linalg.LinAlgError:
        eye = jitter * np.eye(sa.shape[0])
        try:
            tr = _trace_sqrt_product(sa + eye, sb + eye)
        except np.linalg.LinAlgError as exc:
            raise FrechetError(
                f"matrix square root failed after {jitter:g} jitter; "
                f"trace(sa)={np.trace(sa):.4g}, trace(sb)={np.trace(sb):.4g}"
            ) from exc
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr)
    return max(value, 0.0)


def _take(source, n: int) -> np.ndarray:
    """First ``n`` items from an array or an iterable of batches."""
    if isinstance(source, np.ndarray):
        if len(source) < n:
            raise SourceExhaustedError(f"source holds {len(source)} images, {n} requested")
        return source[:n]
    parts, have = [], 0
    for batch in source:
        batch = np.asarray(batch)
        parts.append(batch[: n - have])
        have += len(parts[-1])
        if have >= n:
            return np.concatenate(parts)
    raise SourceExhaustedError(f"source ran out after {have} images, {n} requested")


def extract_features(images: np.ndarray, extractor: FeatureExtractor, batch_size: int = 50) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if extractor.rank == 2:
        if images.ndim == 4:
            images = central_slice(images)
        elif images.ndim != 3:
            raise ExtractorRankError(f"2D extractor cannot read inputs of shape {images.shape}")
    elif images.ndim != 4:
        raise ExtractorRankError(f"3D extractor needs (B, D, H, W) patches, got {images.shape}")
    return np.concatenate([extractor(images[i : i + batch_size]) for i in range(0, len(images), batch_size)])


def compute_fid(real_source, fake_source, extractor: FeatureExtractor, n: int,
                batch_size: int = 50) -> FidResult:
    real = extract_features(_take(real_source, n), extractor, batch_size)
    fake = extract_features(_take(fake_source, n), extractor, batch_size)
    value = frechet_distance(gaussian_stats(real), gaussian_stats(fake))
    return FidResult(value, len(real), len(fake), extractor.descriptor())


def save_features(path, features):
    np.save(path, np.asarray(features, dtype=np.float64))


def load_features(path) -> np.ndarray:
    return np.load(path)


def slerp(z1, z2, t: float, eps: float = 1e-6) -> np.ndarray:
    z1, z2 = np.asarray(z1, np.float64), np.asarray(z2, np.float64)
    n1, n2 = np.linalg.norm(z1), np.linalg.norm(z2)
    if n1 == 0 or n2 == 0:
        raise ValueError("slerp is undefined for zero vectors")
    omega = np.arccos(np.clip(z1 @ z2 / (n1 * n2), -1.0, 1.0))
    if omega < eps:
        return lerp(z1, z2, t)
    so = np.sin(omega)
    return np.sin((1.0 - t) * omega) / so * z1 + np.sin(t * omega) / so * z2


def lerp(w1, w2, t: float) -> np.ndarray:
    w1, w2 = np.asarray(w1, np.float64), np.asarray(w2, np.float64)
    if w1.shape != w2.shape:
        raise ValueError(f"shape mismatch {w1.shape} vs {w2.shape}")
    return (1.0 - t) * w1 + t * w2


def interpolation_path(a, b, steps: int, spherical: bool) -> np.ndarray:
    fn = slerp if spherical else lerp
    return np.stack([fn(a, b, t) for t in np.linspace(0.0, 1.0, steps)])


def to_uint8(image) -> np.ndarray:
    return np.round((np.clip(np.asarray(image, np.float64), -1, 1) + 1.0) * 127.5).astype(np.uint8)


def export_observer_study(real, fake, rng: np.random.Generator, out_dir,
                          per_class: int = 100, repeats: int = 3) -> dict:
    """Write anonymised central-slice PNGs, a key file and shuffled reading orders."""
    from PIL import Image

    real, fake = np.asarray(real), np.asarray(fake)
    if len(real) < per_class or len(fake) < per_class:
        raise ValueError(f"need at least {per_class} real and fake patches, got {len(real)}/{len(fake)}")
    out = Path(out_dir)
    (out / "stimuli").mkdir(parents=True, exist_ok=True)
    picks = [("real", i, real[i]) for i in rng.choice(len(real), per_class, replace=False)]
    picks += [("fake", i, fake[i]) for i in rng.choice(len(fake), per_class, replace=False)]
    names: set[str] = set()
    rows = []
    for label, idx, patch in picks:
        name = f"{int(rng.integers(0, 2**62)):016x}.png"
        while name in names:
            name = f"{int(rng.integers(0, 2**62)):016x}.png"
        names.add(name)
        img = central_slice(patch) if np.ndim(patch) == 3 else patch
        Image.fromarray(to_uint8(img), mode="L").save(out / "stimuli" / name)
        rows.append((name, label, int(idx)))
    rows.sort()
    with open(out / "key.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "label", "source_index"])
        w.writerows(rows)
    filenames = [r[0] for r in rows]
    orders = []
    for r in range(repeats):
        order = [filenames[i] for i in rng.permutation(len(filenames))]
        (out / f"reading_order_{r + 1}.txt").write_text("\n".join(order) + "\n")
        orders.append(order)
    manifest = {"stimuli": filenames, "orders": orders, "per_class": per_class, "key": "key.csv"}
    (out / "stimuli_manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
