"""Vessel-structure statistics: skeletons, branch points and branch-count ROC analysis."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

DEFAULT_THRESHOLD = 0.0
NEIGHBOURS_26 = np.ones((3, 3, 3), dtype=np.int32)
NEIGHBOURS_26[1, 1, 1] = 0


@dataclass
class Skeleton:
    mask: np.ndarray
    threshold: float | None = None


@dataclass
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float
    auc_ci: tuple
    n_boot: int
    auc_sd: float = float("nan")
    tpr_band: np.ndarray | None = None
    fpr_band: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        out["auc_ci"] = list(self.auc_ci)
        return out


def binarize(patch, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    return np.asarray(patch) > threshold


# 3x3x3 neighbourhoods are packed into 27-bit integers, bit i <-> _OFFSETS[i]
_OFFSETS = np.array([(i, j, k) for i in range(3) for j in range(3) for k in range(3)])
_BITS = 1 << np.arange(27, dtype=np.int64)
_CENTRE = 1 << 13
_DIRECTIONS = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


def _adjacency(max_l1: int) -> list[int]:
    d = np.abs(_OFFSETS[:, None, :] - _OFFSETS[None, :, :])
    adj = (d.max(axis=2) <= 1) & (d.sum(axis=2) >= 1) & (d.sum(axis=2) <= max_l1)
    return [int((row * _BITS).sum()) for row in adj]


_ADJ26 = _adjacency(3)
_ADJ6 = _adjacency(1)
_l1 = np.abs(_OFFSETS - 1).sum(axis=1)
_N18 = int(((_l1 <= 2) * _BITS).sum()) & ~_CENTRE
_N6 = int(((_l1 == 1) * _BITS).sum())


def _flood(seed: int, allowed: int, adj: list[int]) -> int:
    comp, frontier = 0, seed
    while frontier:
        comp |= frontier
        reach = 0
        while frontier:
            low = frontier & -frontier
            reach |= adj[low.bit_length() - 1]
            frontier ^= low
        frontier = reach & allowed & ~comp
    return comp


@lru_cache(maxsize=None)
def is_simple(key: int) -> bool:
    """Whether deleting the centre voxel of a packed neighbourhood keeps topology.

    Needs one 26-connected foreground component in N26 and one 6-connected
    background component in N18 touching the centre's faces.
    """
    fg = key & ~_CENTRE
    if not fg or _flood(fg & -fg, fg, _ADJ26) != fg:
        return False
    bg = ~key & _N18
    faces = bg & _N6
    if not faces:
        return False
    return faces & ~_flood(faces & -faces, bg, _ADJ6) == 0


def _neighbourhood_keys(img: np.ndarray, idx: np.ndarray) -> np.ndarray:
    keys = np.zeros(len(idx), dtype=np.int64)
    for bit, (a, b, c) in enumerate(_OFFSETS - 1):
        keys |= img[idx[:, 0] + a, idx[:, 1] + b, idx[:, 2] + c].astype(np.int64) << bit
    return keys


def _deletable(key: int) -> bool:
    # endpoints (exactly one neighbour) are kept so curves do not shrink
    return key.bit_count() != 2 and is_simple(key)


def _as_volume(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    while mask.ndim > 3 and mask.shape[0] == 1:
        mask = mask[0]
    if mask.ndim != 3:
        raise ValueError(f"expected a 3D mask, got shape {mask.shape}")
    return mask


def skeletonize(mask, threshold: float | None = None) -> Skeleton:
    """Topology-preserving 3D thinning to one-voxel-wide curves.

    Border voxels are peeled one face direction at a time; a voxel goes only
    if it is simple and not a curve endpoint, re-checked in raster order so
    parallel deletions cannot split an object. Components and tunnels are
    preserved, and isolated voxels are never removed.
    """
    img = np.pad(_as_volume(mask), 1)
    weights = _BITS.reshape(3, 3, 3)
    changed = True
    while changed:
        changed = False
        for d in _DIRECTIONS:
            behind = np.roll(img, tuple(-x for x in d), axis=(0, 1, 2))
            idx = np.argwhere(img & ~behind)
            if not len(idx):
                continue
            keys = _neighbourhood_keys(img, idx)
            for i in np.flatnonzero([_deletable(int(k)) for k in keys]):
                x, y, z = idx[i]
                if _deletable(int((img[x - 1 : x + 2, y - 1 : y + 2, z - 1 : z + 2] * weights).sum())):
                    img[x, y, z] = False
                    changed = True
    return Skeleton(img[1:-1, 1:-1, 1:-1].copy(), threshold)


def neighbour_counts(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=np.int32)
    return ndimage.convolve(m, NEIGHBOURS_26, mode="constant", cval=0) * m


def count_branch_points(skel) -> tuple[int, np.ndarray]:
    """Junctions of a skeleton: voxels with >= 3 skeleton neighbours (26-connectivity).

    Touching junction voxels form one branch point; its coordinate is the
    member with the most neighbours, nearest the cluster centroid on ties.
    """
    mask = skel.mask if isinstance(skel, Skeleton) else np.asarray(skel, dtype=bool)
    counts = neighbour_counts(mask)
    junction = counts >= 3
    labels, n = ndimage.label(junction, structure=np.ones((3, 3, 3)))
    if n == 0:
        return 0, np.zeros((0, mask.ndim), dtype=np.int64)
    coords = np.argwhere(junction)
    lab = labels[junction]
    nb = counts[junction]
    centroids = np.stack([np.bincount(lab, weights=coords[:, i])[1:] / np.bincount(lab)[1:]
                          for i in range(coords.shape[1])], axis=1)
    dist = ((coords - centroids[lab - 1]) ** 2).sum(axis=1)
    order = np.lexsort((dist, -nb, lab))
    first = np.unique(lab[order], return_index=True)[1]
    return n, coords[order[first]]


def patch_branch_count(patch, threshold: float = DEFAULT_THRESHOLD) -> int:
    return count_branch_points(skeletonize(binarize(patch, threshold), threshold))[0]


# --- ROC over branch counts -------------------------------------------------

def _roc_from_hist(real_hist: np.ndarray, fake_hist: np.ndarray):
    """TPR/FPR for thresholds 'count >= t' from count histograms (last axis = count bins).

    The output has one more column than the input: the last threshold is above
    every count, so both rates end at 0.
    """
    def survival(h):
        total = h.sum(axis=-1, keepdims=True)
        tail = np.cumsum(h[..., ::-1], axis=-1)[..., ::-1]
        zero = np.zeros(h.shape[:-1] + (1,))
        return np.concatenate([tail, zero], axis=-1) / total

    tpr, fpr = survival(real_hist), survival(fake_hist)
    auc = 0.5 * ((fpr[..., :-1] - fpr[..., 1:]) * (tpr[..., :-1] + tpr[..., 1:])).sum(axis=-1)
    return tpr, fpr, auc


def _histograms(samples: np.ndarray, lo: int, k: int) -> np.ndarray:
    """Row-wise bincount of (R, n) integer samples into k bins starting at lo."""
    r = samples.shape[0]
    flat = (samples - lo) + (np.arange(r)[:, None] * k)
    return np.bincount(flat.ravel(), minlength=r * k).reshape(r, k).astype(np.float64)


def branch_count_roc(real_counts, fake_counts, n_boot: int = 1000,
                     rng: np.random.Generator | None = None, level: float = 0.95) -> RocCurve:
    """ROC of 'count >= t' as a real-vs-fake test, with percentile bootstrap bands.

    Real samples are the positive class, so AUC = P(real > fake) + P(tie) / 2.
    """
    real = np.asarray(real_counts, dtype=np.int64)
    fake = np.asarray(fake_counts, dtype=np.int64)
    if real.size == 0 or fake.size == 0:
        raise ValueError("branch_count_roc needs non-empty real and fake count lists")
    rng = rng or np.random.default_rng()
    lo = int(min(real.min(), fake.min()))
    hi = int(max(real.max(), fake.max()))
    k = hi - lo + 1
    thresholds = np.arange(lo, hi + 2)
    tpr, fpr, auc = _roc_from_hist(_histograms(real[None], lo, k)[0], _histograms(fake[None], lo, k)[0])

    alpha = (1.0 - level) / 2.0
    ci, sd, tpr_band, fpr_band = (float("nan"), float("nan")), float("nan"), None, None
    if n_boot > 0:
        boot_real = real[rng.integers(0, real.size, size=(n_boot, real.size))]
        boot_fake = fake[rng.integers(0, fake.size, size=(n_boot, fake.size))]
        bt, bf, bauc = _roc_from_hist(_histograms(boot_real, lo, k), _histograms(boot_fake, lo, k))
        ci = tuple(float(v) for v in np.quantile(bauc, [alpha, 1.0 - alpha]))
        sd = float(bauc.std(ddof=1)) if n_boot > 1 else 0.0
        tpr_band = np.quantile(bt, [alpha, 1.0 - alpha], axis=0)
        fpr_band = np.quantile(bf, [alpha, 1.0 - alpha], axis=0)
    return RocCurve(thresholds, tpr, fpr, float(auc), ci, n_boot, sd, tpr_band, fpr_band)


# --- visualisation -----------------------------------------------------------

def render_mip(skel, angles, branch_points: np.ndarray | None = None) -> list[np.ndarray]:
    """Maximum-intensity projections after rotating about the depth axis.

    Each image is (depth, canvas, 3) RGB in [0, 1]: skeleton white, branch
    points red. Angles are in degrees; the view at 0 looks along the width axis.
    """
    mask = skel.mask if isinstance(skel, Skeleton) else np.asarray(skel, dtype=bool)
    angles = list(angles)
    if not angles:
        raise ValueError("render_mip needs at least one angle")
    d, h, w = mask.shape
    canvas = int(np.ceil(np.hypot(h, w)))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    pts = np.argwhere(mask)
    if branch_points is None:
        branch_points = count_branch_points(mask)[1]
    branch_points = np.asarray(branch_points).reshape(-1, 3)
    images = []
    for angle in angles:
        theta = np.deg2rad(angle)
        img = np.zeros((d, canvas, 3))

        def project(p):
            y = (p[:, 1] - cy) * np.cos(theta) - (p[:, 2] - cx) * np.sin(theta)
            col = np.clip(np.rint(y + (canvas - 1) / 2.0).astype(int), 0, canvas - 1)
            return p[:, 0], col

        if len(pts):
            rows, cols = project(pts)
            img[rows, cols] = 1.0
        if len(branch_points):
            rows, cols = project(branch_points)
            img[rows, cols] = (1.0, 0.0, 0.0)
        images.append(img)
    return images


def save_mip_strip(images, path):
    from PIL import Image

    strip = np.concatenate([np.pad(im, ((1, 1), (1, 1), (0, 0)), constant_values=0.3) for im in images], axis=1)
    Image.fromarray(np.round(strip * 255).astype(np.uint8), mode="RGB").save(path)


def write_branch_table(path, rows):
    """rows: iterable of (patch_id, source, count)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", "source", "count"])
        w.writerows(rows)


def read_branch_table(path) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {"real": [], "fake": []}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["source"], []).append(int(row["count"]))
    return out


def write_roc_report(curve: RocCurve, out_dir, title: str = "branch-count ROC"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "roc.json").write_text(json.dumps(curve.to_dict(), indent=2))
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(curve.fpr, curve.tpr, label=f"AUC {curve.auc:.3f} ± {curve.auc_sd:.3f}")
    if curve.tpr_band is not None:
        for lo_hi in range(2):
            ax.plot(curve.fpr_band[lo_hi], curve.tpr_band[1 - lo_hi], "--", color="C0", lw=0.8)
    ax.plot([0, 1], [0, 1], ":", color="grey")
    ax.set_xlabel("FPR")
    ax.set_ylabel("TPR")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out / "roc.png", dpi=120)
    plt.close(fig)
