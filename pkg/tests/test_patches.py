import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lungct_gan.config import PATCH_SHAPE
from lungct_gan.patches import (CtVolume, IntegrityError, NoduleAnnotation, PartialYieldError, SamplingError,
                                VolumeLoadError, epoch_plan, filter_malignant_scans, load_ct_volume,
                                read_annotations, read_rle_mask, read_split_manifest, sample_patch_batch,
                                save_ct_volume, valid_centers, window_and_scale, write_annotations,
                                write_metaimage, write_rle_mask)


def _volume(shape=(40, 72, 72), lung=True, nodule=False, value=-500.0):
    return CtVolume(np.full(shape, value, np.float32), np.full(shape, lung), np.full(shape, nodule), scan_id="v")


# --- windowing -----------------------------------------------------------------

@pytest.mark.parametrize("hu,expected", [(-1000, -1.0), (400, 1.0), (2000, 1.0), (-3000, -1.0), (-300, 0.0)])
def test_window_points(hu, expected):
    assert window_and_scale(hu) == expected


def test_window_endpoints_exact_in_float32():
    out = window_and_scale(np.array([-1000.0, 400.0], np.float32))
    assert out.dtype == np.float32
    assert out.tolist() == [-1.0, 1.0]


@given(st.floats(-5000, 5000), st.floats(-5000, 5000))
def test_window_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    wa, wb = window_and_scale(lo), window_and_scale(hi)
    assert -1.0 <= wa <= wb <= 1.0


# --- malignancy filter ---------------------------------------------------------

@pytest.mark.parametrize("nodules,kept", [
    ([[3, 4, 4, 5]], False),
    ([[1, 2, 2, 3]], True),
    ([[1, 2, 3], [5, 5, 5]], False),
    ([[3, 4]], True),  # median 3.5
    ([], True),
])
def test_filter_rule(nodules, kept):
    assert filter_malignant_scans([("s", nodules)]) == (["s"] if kept else [])


def test_filter_empty_scores():
    with pytest.raises(ValueError):
        filter_malignant_scans([("s", [[]])])


def test_filter_accepts_annotations():
    ann = NoduleAnnotation("s", "0", [(0, 0, 0)], [4, 4, 2, 5])
    assert filter_malignant_scans([("s", [ann])]) == []


@settings(max_examples=50)
@given(st.lists(st.lists(st.lists(st.integers(1, 5), min_size=1, max_size=4), max_size=3), min_size=1, max_size=6),
       st.randoms())
def test_filter_permutation_invariant(scans, rnd):
    named = [(f"s{i}", nods) for i, nods in enumerate(scans)]
    kept = set(filter_malignant_scans(named))
    shuffled = [(sid, [rnd.sample(n, len(n)) for n in nods]) for sid, nods in rnd.sample(named, len(named))]
    assert set(filter_malignant_scans(shuffled)) == kept


# --- file formats --------------------------------------------------------------

def test_zero_volume_roundtrip(tmp_path):
    vol = _volume((8, 8, 8), value=0.0)
    save_ct_volume(tmp_path / "a.mhd", vol)
    back = load_ct_volume(tmp_path / "a.mhd")
    assert back.shape == (8, 8, 8)
    assert not back.voxels.any()


@pytest.mark.parametrize("rle", [False, True])
def test_random_roundtrip_bitwise(tmp_path, rng, rle):
    shape = (6, 9, 7)
    vol = CtVolume(rng.normal(-500, 300, shape).astype(np.float32), rng.random(shape) > 0.3,
                   rng.random(shape) > 0.9, (2.5, 0.7, 0.6), "r")
    save_ct_volume(tmp_path / "r.mhd", vol, rle_masks=rle)
    back = load_ct_volume(tmp_path / "r.mhd")
    assert np.array_equal(back.voxels, vol.voxels)
    assert np.array_equal(back.lung_mask, vol.lung_mask)
    assert np.array_equal(back.nodule_mask, vol.nodule_mask)
    assert np.allclose(back.spacing, vol.spacing)


def test_mask_shape_mismatch(tmp_path):
    write_metaimage(tmp_path / "m.mhd", np.zeros((8, 8, 8), np.int16))
    write_metaimage(tmp_path / "m_lung.mhd", np.ones((8, 8, 9), bool))
    with pytest.raises(IntegrityError):
        load_ct_volume(tmp_path / "m.mhd")


def test_missing_companion(tmp_path):
    write_metaimage(tmp_path / "m.mhd", np.zeros((8, 8, 8), np.int16))
    with pytest.raises(VolumeLoadError):
        load_ct_volume(tmp_path / "m.mhd")
    with pytest.raises(VolumeLoadError):
        load_ct_volume(tmp_path / "absent.mhd")


@given(st.lists(st.booleans(), min_size=1, max_size=60))
def test_rle_roundtrip(tmp_path_factory, bits):
    path = tmp_path_factory.mktemp("rle") / "m.rle"
    mask = np.array(bits).reshape(len(bits), 1, 1)
    write_rle_mask(path, mask)
    assert np.array_equal(read_rle_mask(path), mask)


def test_annotations_roundtrip_and_load(tmp_path):
    anns = [NoduleAnnotation("a", "0", [(1, 2, 3), (1, 2, 4)], [2, 3, 3, 1]),
            NoduleAnnotation("a", "1", [(5, 5, 5)], [5, 4, 4, 4])]
    write_annotations(tmp_path / "ann.csv", anns)
    back = read_annotations(tmp_path / "ann.csv")["a"]
    assert [(b.voxels, b.malignancy_scores) for b in back] == [(a.voxels, a.malignancy_scores) for a in anns]
    save_ct_volume(tmp_path / "a.mhd", _volume((8, 8, 8)))
    vol = load_ct_volume(tmp_path / "a.mhd", back)
    assert vol.nodule_mask.sum() == 3 and vol.nodule_mask[5, 5, 5]


def test_split_manifest(tmp_path):
    (tmp_path / "train.txt").write_text("# header\nscan1\n\nscan2\n")
    assert read_split_manifest(tmp_path / "train.txt") == ["scan1", "scan2"]


# --- sampling ------------------------------------------------------------------

def test_empty_lung_raises(rng):
    with pytest.raises(SamplingError):
        sample_patch_batch(_volume(lung=False), 3, rng)


def test_clean_volume_yields(rng):
    out = sample_patch_batch(_volume(), 5, rng)
    assert out.shape == (5,) + PATCH_SHAPE
    assert out.min() >= -1 and out.max() <= 1


def test_total_rejection(rng):
    with pytest.raises(PartialYieldError) as info:
        sample_patch_batch(_volume(nodule=True), 4, rng)
    assert info.value.accepted == 0 and info.value.requested == 4


def test_too_small_volume(rng):
    with pytest.raises(SamplingError):
        sample_patch_batch(_volume((20, 72, 72)), 1, rng)


def test_patch_contract_on_phantom(phantom_volumes, rng):
    vol = phantom_volumes[0]
    patches, centers = sample_patch_batch(vol, 300, rng, return_centers=True)
    half = np.array(PATCH_SHAPE) // 2
    assert vol.lung_mask[tuple(centers.T)].all()
    for p, c in zip(patches[:50], centers[:50]):
        z, y, x = c - half
        assert not vol.nodule_mask[z : z + 32, y : y + 64, x : x + 64].any()
        assert np.array_equal(p, window_and_scale(vol.voxels[z : z + 32, y : y + 64, x : x + 64]))


def test_valid_centers_fit(phantom_volumes):
    vol = phantom_volumes[1]
    c = valid_centers(vol)
    half = np.array(PATCH_SHAPE) // 2
    assert (c - half >= 0).all() and (c - half + np.array(PATCH_SHAPE) <= np.array(vol.shape)).all()


# --- epoch plan ----------------------------------------------------------------

@pytest.mark.parametrize("n,iters", [(509, 7126), (1, 14), (8, 112)])
def test_epoch_plan_length(rng, n, iters):
    plan = epoch_plan([f"s{i}" for i in range(n)], rng)
    assert len(plan) == iters
    assert all(sum(1 for s, _ in plan if s == sid) == 14 for sid in ("s0",))


def test_epoch_plan_empty(rng):
    with pytest.raises(ValueError):
        epoch_plan([], rng)


def test_epochs_resample_fresh_centers(phantom_volumes):
    vol = phantom_volumes[2]
    _, c1 = sample_patch_batch(vol, 672, np.random.default_rng(1), return_centers=True)
    _, c2 = sample_patch_batch(vol, 672, np.random.default_rng(2), return_centers=True)
    overlap = len({tuple(c) for c in c1} & {tuple(c) for c in c2}) / 672
    assert overlap < 0.05
