"""Synthetic ellipsoid-lung + vessel-tube CT phantoms for tests and desk-scale runs."""
import numpy as np

from .patches import CtVolume, NoduleAnnotation

PARENCHYMA_HU = -850.0
VESSEL_HU = 40.0
WALL_HU = 60.0
NODULE_HU = 10.0


def segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((points - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def make_phantom(rng: np.random.Generator, shape=(64, 128, 128), n_tubes: int = 12,
                 n_nodules: int = 1, noise_hu: float = 20.0, scan_id: str = "phantom"):
    """Return (CtVolume, list of NoduleAnnotation) for one pseudo-scan."""
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"), -1)
    pts = grid.reshape(-1, 3)
    center = (np.array(shape) - 1) / 2.0
    radii = np.array(shape) * np.array([0.5, 0.46, 0.46])
    lung = (((pts - center) / radii) ** 2).sum(1) <= 1.0

    hu = np.where(lung, PARENCHYMA_HU, WALL_HU).astype(np.float64)
    for _ in range(n_tubes):
        a = center + rng.uniform(-1, 1, 3) * radii * 0.9
        b = center + rng.uniform(-1, 1, 3) * radii * 0.9
        r = rng.uniform(1.0, 2.5)
        hu[segment_distance(pts, a, b) <= r] = VESSEL_HU

    nodule = np.zeros(len(pts), dtype=bool)
    annotations = []
    for k in range(n_nodules):
        c = center + rng.uniform(-0.7, 0.7, 3) * radii
        inside = np.linalg.norm(pts - c, axis=1) <= rng.uniform(2.5, 4.0)
        nodule |= inside
        hu[inside] = NODULE_HU
        coords = [tuple(int(v) for v in p) for p in grid.reshape(-1, 3)[inside].astype(int)]
        scores = rng.integers(1, 4, size=4).tolist()
        annotations.append(NoduleAnnotation(scan_id, str(k), coords, scores))

    hu = hu + rng.normal(0.0, noise_hu, size=hu.shape)
    vol = CtVolume(
        hu.reshape(shape).astype(np.float32),
        lung.reshape(shape),
        nodule.reshape(shape),
        (1.0, 0.7, 0.7),
        scan_id,
    )
    return vol, annotations


def phantom_dataset(n_scans: int, seed: int = 0, **kwargs) -> list:
    rng = np.random.default_rng(seed)
    return [make_phantom(rng, scan_id=f"phantom{i:03d}", **kwargs)[0] for i in range(n_scans)]
