"""CT volume ingestion, malignancy filtering, HU windowing and nodule-free patch sampling."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import MINIBATCHES_PER_SCAN, PATCH_SHAPE

HU_WINDOW = (-1000.0, 400.0)
MALIGNANT_MEDIAN = 4
RETRY_FACTOR = 100


class VolumeLoadError(OSError):
    pass


class IntegrityError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


class PartialYieldError(SamplingError):
    def __init__(self, accepted: int, requested: int, patches=None, centers=None):
        super().__init__(f"retry budget exhausted after accepting {accepted} of {requested} patches")
        self.accepted = accepted
        self.requested = requested
        self.patches = patches
        self.centers = centers


@dataclass
class CtVolume:
    voxels: np.ndarray
    lung_mask: np.ndarray
    nodule_mask: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    scan_id: str = ""
    _nodule_integral: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.lung_mask = np.asarray(self.lung_mask, dtype=bool)
        self.nodule_mask = np.asarray(self.nodule_mask, dtype=bool)
        if not (self.voxels.shape == self.lung_mask.shape == self.nodule_mask.shape):
            raise IntegrityError(
                f"{self.scan_id}: shape mismatch voxels={self.voxels.shape} "
                f"lung={self.lung_mask.shape} nodule={self.nodule_mask.shape}"
            )

    @property
    def shape(self):
        return self.voxels.shape

    def nodule_counts(self, corners: np.ndarray, size=PATCH_SHAPE) -> np.ndarray:
        """Nodule voxel count inside each box ``[corner, corner + size)``, via a summed-volume table."""
        if self._nodule_integral is None:
            s = np.zeros(tuple(n + 1 for n in self.shape), dtype=np.int32)
            s[1:, 1:, 1:] = self.nodule_mask.cumsum(0, dtype=np.int32).cumsum(1).cumsum(2)
            self._nodule_integral = s
        s = self._nodule_integral
        z0, y0, x0 = corners.T
        z1, y1, x1 = z0 + size[0], y0 + size[1], x0 + size[2]
        return (s[z1, y1, x1] - s[z0, y1, x1] - s[z1, y0, x1] - s[z1, y1, x0]
                + s[z0, y0, x1] + s[z0, y1, x0] + s[z1, y0, x0] - s[z0, y0, x0])


@dataclass
class NoduleAnnotation:
    scan_id: str
    nodule_id: str
    voxels: list = field(default_factory=list)
    malignancy_scores: list = field(default_factory=list)

    @property
    def median_score(self) -> float:
        if not self.malignancy_scores:
            raise ValueError(f"nodule {self.scan_id}/{self.nodule_id} has no malignancy scores")
        return float(np.median(self.malignancy_scores))


# --- file formats ---------------------------------------------------------

def read_metaimage(path) -> tuple[np.ndarray, tuple]:
    """Array in (z, y, x) order and spacing in the same order."""
    import SimpleITK as sitk

    path = Path(path)
    if not path.exists():
        raise VolumeLoadError(f"missing file {path}")
    try:
        img = sitk.ReadImage(str(path))
    except RuntimeError as exc:
        raise VolumeLoadError(f"cannot read {path}: {exc}") from exc
    return sitk.GetArrayFromImage(img), tuple(reversed(img.GetSpacing()))


def write_metaimage(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0)):
    import SimpleITK as sitk

    arr = np.asarray(array)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    img = sitk.GetImageFromArray(arr)
    img.SetSpacing(tuple(float(s) for s in reversed(spacing)))
    sitk.WriteImage(img, str(path))


def write_rle_mask(path, mask: np.ndarray):
    """Text run-length mask: a shape line, then alternating run lengths starting with zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    Path(path).write_text(" ".join(map(str, mask.shape)) + "\n" + " ".join(map(str, runs)) + "\n")


def read_rle_mask(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise VolumeLoadError(f"missing file {path}")
    lines = path.read_text().split("\n")
    shape = tuple(int(v) for v in lines[0].split())
    runs = [int(v) for v in lines[1].split()] if len(lines) > 1 else []
    values = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(values, runs)
    if flat.size != int(np.prod(shape)):
        raise IntegrityError(f"{path}: runs cover {flat.size} voxels, shape needs {np.prod(shape)}")
    return flat.reshape(shape)


def _read_mask(stem: Path, suffix: str, required: bool):
    for ext, reader in ((".mhd", lambda p: read_metaimage(p)[0].astype(bool)), (".rle", read_rle_mask)):
        candidate = stem.with_name(stem.name + suffix + ext)
        if candidate.exists():
            return reader(candidate)
    if required:
        raise VolumeLoadError(f"missing companion mask {stem.name}{suffix}.mhd/.rle next to {stem}")
    return None


def read_annotations(path) -> dict[str, list[NoduleAnnotation]]:
    """CSV rows ``scan_id, nodule_id, z, y, x, scores`` (scores ';'-separated, one per reader)."""
    nodules: dict[tuple, NoduleAnnotation] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["scan_id"], row["nodule_id"])
            scores = [int(s) for s in row.get("scores", "").replace(",", ";").split(";") if s.strip()]
            ann = nodules.setdefault(key, NoduleAnnotation(row["scan_id"], row["nodule_id"], [], scores))
            if row.get("z", "") != "":
                ann.voxels.append((int(row["z"]), int(row["y"]), int(row["x"])))
    out: dict[str, list[NoduleAnnotation]] = defaultdict(list)
    for ann in nodules.values():
        out[ann.scan_id].append(ann)
    return dict(out)


def write_annotations(path, annotations):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scan_id", "nodule_id", "z", "y", "x", "scores"])
        for ann in annotations:
            scores = ";".join(map(str, ann.malignancy_scores))
            for z, y, x in ann.voxels or [("", "", "")]:
                w.writerow([ann.scan_id, ann.nodule_id, z, y, x, scores])


def load_ct_volume(path, annotations: list[NoduleAnnotation] | None = None) -> CtVolume:
    """Load ``<scan>.mhd`` plus ``<scan>_lung`` and optional ``<scan>_nodules`` masks.

    Annotation voxels, when given, are added to the nodule mask.
    """
    path = Path(path)
    voxels, spacing = read_metaimage(path)
    stem = path.with_suffix("")
    lung = _read_mask(stem, "_lung", required=True)
    nodule = _read_mask(stem, "_nodules", required=False)
    if nodule is None:
        nodule = np.zeros(voxels.shape, dtype=bool)
    for ann in annotations or []:
        for z, y, x in ann.voxels:
            if not all(0 <= c < n for c, n in zip((z, y, x), nodule.shape)):
                raise IntegrityError(f"{stem.name}: annotation voxel {(z, y, x)} outside volume")
            nodule[z, y, x] = True
    return CtVolume(voxels.astype(np.float32), lung, nodule, spacing, stem.name)


def save_ct_volume(path, volume: CtVolume, rle_masks: bool = False):
    path = Path(path)
    stem = path.with_suffix("")
    write_metaimage(path, volume.voxels, volume.spacing)
    for suffix, mask in (("_lung", volume.lung_mask), ("_nodules", volume.nodule_mask)):
        target = stem.with_name(stem.name + suffix)
        if rle_masks:
            write_rle_mask(target.with_suffix(".rle"), mask)
        else:
            write_metaimage(target.with_suffix(".mhd"), mask, volume.spacing)


def read_split_manifest(path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]


# --- filtering, windowing, sampling ---------------------------------------

def filter_malignant_scans(scans) -> list[str]:
    """Keep scans where no nodule has a median reader score >= 4.

    ``scans``: iterable of (scan_id, annotations), annotations being
    NoduleAnnotation objects or plain lists of reader scores.
    """
    kept = []
    for scan_id, annotations in scans:
        malignant = False
        for ann in annotations:
            scores = ann.malignancy_scores if isinstance(ann, NoduleAnnotation) else list(ann)
            if not scores:
                raise ValueError(f"scan {scan_id}: nodule without malignancy scores")
            if np.median(scores) >= MALIGNANT_MEDIAN:
                malignant = True
        if not malignant:
            kept.append(scan_id)
    return kept


def window_and_scale(hu, window=HU_WINDOW):
    """Clamp HU to the window and map it linearly onto [-1, 1].

    Float32 input stays float32; everything else is computed in float64.
    """
    lo, hi = window
    dtype = np.float32 if np.asarray(hu).dtype == np.float32 else np.float64
    out = np.array(hu, dtype=dtype)
    np.clip(out, lo, hi, out=out)
    out -= lo
    out *= 2.0 / (hi - lo)
    out -= 1.0
    # the affine map can round a hair past the window ends
    np.clip(out, -1.0, 1.0, out=out)
    return out if out.ndim else float(out)


def valid_centers(volume: CtVolume, size=PATCH_SHAPE) -> np.ndarray:
    """Lung voxels whose patch extent ``[c - s//2, c - s//2 + s)`` fits in the volume."""
    idx = np.argwhere(volume.lung_mask)
    half = np.array(size) // 2
    lo = half
    hi = np.array(volume.shape) - (np.array(size) - half)
    ok = np.all((idx >= lo) & (idx <= hi), axis=1)
    return idx[ok]


def _extract(volume: CtVolume, corners: np.ndarray, size=PATCH_SHAPE) -> np.ndarray:
    out = np.empty((len(corners),) + tuple(size), dtype=np.float32)
    for i, (z, y, x) in enumerate(corners):
        out[i] = window_and_scale(volume.voxels[z : z + size[0], y : y + size[1], x : x + size[2]])
    return out


def sample_patch_batch(volume: CtVolume, count: int, rng: np.random.Generator,
                       size=PATCH_SHAPE, return_centers: bool = False):
    """Rejection-sample ``count`` windowed patches centred in the lung and free of nodule voxels.

    Returns an array (count, 32, 64, 64) in [-1, 1], plus (count, 3) centers if asked.
    """
    centers = valid_centers(volume, size)
    if len(centers) == 0:
        raise SamplingError(f"{volume.scan_id}: no lung voxel admits a full {size} patch")
    half = np.array(size) // 2
    budget = RETRY_FACTOR * count
    accepted: list[np.ndarray] = []
    n_accepted = tried = 0
    while n_accepted < count and tried < budget:
        draw = min(budget - tried, max(2 * (count - n_accepted), 16))
        picks = centers[rng.integers(0, len(centers), size=draw)]
        tried += draw
        clean = picks[volume.nodule_counts(picks - half, size) == 0][: count - n_accepted]
        accepted.append(clean)
        n_accepted += len(clean)
    chosen = np.concatenate(accepted) if accepted else np.zeros((0, 3), dtype=np.int64)
    patches = _extract(volume, chosen - half, size)
    if n_accepted < count:
        raise PartialYieldError(n_accepted, count, patches, chosen)
    return (patches, chosen) if return_centers else patches


def epoch_plan(scan_ids, rng: np.random.Generator, minibatches_per_scan: int = MINIBATCHES_PER_SCAN):
    """Shuffled scan order, each scan contributing consecutive minibatch indices."""
    scan_ids = list(scan_ids)
    if not scan_ids:
        raise ValueError("epoch plan needs at least one scan")
    order = rng.permutation(len(scan_ids))
    return [(scan_ids[i], mb) for i in order for mb in range(minibatches_per_scan)]


class PatchDataset:
    """In-memory set of scans that serves windowed patch pools per scan."""

    def __init__(self, volumes: list[CtVolume]):
        if not volumes:
            raise ValueError("dataset needs at least one scan")
        self.volumes = {v.scan_id: v for v in volumes}

    @property
    def scan_ids(self) -> list[str]:
        return list(self.volumes)

    def __len__(self):
        return len(self.volumes)

    def sample(self, scan_id: str, count: int, rng: np.random.Generator) -> np.ndarray:
        return sample_patch_batch(self.volumes[scan_id], count, rng)

    def sample_any(self, count: int, rng: np.random.Generator, per_scan: int = 64) -> np.ndarray:
        """Patches spread over randomly chosen scans, e.g. for FID reference sets."""
        out = []
        while sum(len(o) for o in out) < count:
            sid = self.scan_ids[rng.integers(len(self))]
            out.append(self.sample(sid, min(per_scan, count - sum(len(o) for o in out)), rng))
        return np.concatenate(out)

    @classmethod
    def from_directory(cls, root, manifest=None, annotations_csv=None):
        root = Path(root)
        annotations = read_annotations(annotations_csv) if annotations_csv else {}
        if manifest:
            ids = read_split_manifest(manifest)
        else:
            ids = sorted(p.stem for p in root.glob("*.mhd") if not p.stem.endswith(("_lung", "_nodules")))
        keep = set(filter_malignant_scans((sid, annotations.get(sid, [])) for sid in ids))
        return cls([load_ct_volume(root / f"{sid}.mhd", annotations.get(sid)) for sid in ids if sid in keep])
