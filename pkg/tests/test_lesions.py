import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laspet.lesions import (
    LesionError,
    connected_components,
    dice,
    extract_lesions,
    fnv,
    fpv,
    remove_small,
    threshold_union,
)
from laspet.volgrid import Kind, Volume3D

import oracles

SP = (3.0, 3.0, 3.0)
VOX_ML = 27.0 / 1000.0


def pet(values):
    return Volume3D(np.asarray(values, dtype=np.float64), SP, (0, 0, 0), Kind.SUV)


def random_mask(seed, shape=(7, 7, 7), p=0.25):
    return np.random.default_rng(seed).random(shape) < p


def test_threshold_union_high_peak_uses_absolute_cutoff():
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 10, (3, 3, 3))
    a[1, 1, 1] = 10.0
    roi = np.ones((3, 3, 3), dtype=bool)
    out = threshold_union(pet(a), roi)
    np.testing.assert_array_equal(out, a > 2.5)


def test_threshold_union_low_peak_uses_relative_cutoff():
    a = np.zeros((3, 3, 3))
    a[0, 0, 0], a[1, 1, 1], a[2, 2, 2] = 5.0, 2.2, 1.9
    out = threshold_union(pet(a), np.ones((3, 3, 3), dtype=bool))
    assert out[1, 1, 1] and out[0, 0, 0] and not out[2, 2, 2]


def test_threshold_union_outside_roi_and_empty():
    a = np.full((3, 3, 3), 8.0)
    roi = np.zeros((3, 3, 3), dtype=bool)
    roi[0] = True
    np.testing.assert_array_equal(threshold_union(pet(a), roi), roi)
    # the hottest voxel always exceeds 40% of itself, so only a zero ROI yields nothing
    b = np.zeros((3, 3, 3))
    assert not threshold_union(pet(b), np.ones((3, 3, 3), dtype=bool)).any()
    with pytest.raises(LesionError):
        threshold_union(pet(a), roi & False)


def test_components_examples():
    m = np.zeros((8, 8, 8), dtype=bool)
    m[0:2, 0:2, 0:2] = True
    m[5:7, 5:7, 5:7] = True
    for c in (6, 26):
        assert connected_components(m, c).max() == 2
    m = np.zeros((3, 3, 3), dtype=bool)
    m[0, 0, 0] = m[1, 1, 1] = True
    assert connected_components(m, 26).max() == 1
    assert connected_components(m, 6).max() == 2
    assert connected_components(np.zeros((3, 3, 3), dtype=bool)).max() == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([6, 26]))
def test_components_match_bfs_oracle(seed, conn):
    m = random_mask(seed)
    lab = connected_components(m, conn)
    comps = oracles.bfs_components(m, conn)
    assert lab.max() == len(comps)
    for k, comp in enumerate(comps, start=1):
        got = {tuple(map(int, p)) for p in np.argwhere(lab == k)}
        assert got == comp


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_six_connectivity_never_fewer_components(seed):
    m = random_mask(seed, p=0.35)
    assert connected_components(m, 6).max() >= connected_components(m, 26).max()


def test_components_ignore_mask_representation():
    m = random_mask(5)
    np.testing.assert_array_equal(connected_components(m), connected_components(m.astype(np.float32) * 7))


def test_remove_small_voxel_volume_threshold():
    lab = np.zeros((20, 20, 20), dtype=np.int64)
    lab[0, 0, 0:7] = 1  # 7 voxels = 0.189 ml
    lab[5, 5, 0:8] = 2  # 8 voxels = 0.216 ml
    out = remove_small(lab, SP, 0.2)
    assert out.max() == 1
    assert (out > 0).sum() == 8 and out[5, 5, 0] == 1
    np.testing.assert_array_equal(remove_small(lab, SP, 0.0), lab)
    assert remove_small(lab, SP, 1.0).max() == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 0.3))
def test_remove_small_idempotent(seed, min_ml):
    lab = connected_components(random_mask(seed))
    once = remove_small(lab, SP, min_ml)
    np.testing.assert_array_equal(remove_small(once, SP, min_ml), once)


def test_extract_lesions_statistics():
    lab = np.zeros((4, 4, 4), dtype=np.int64)
    lab[0, 0, 0:2] = 1
    lab[3, 3, 3] = 2
    a = np.zeros((4, 4, 4))
    a[0, 0, 0], a[0, 0, 1], a[3, 3, 3] = 4.0, 6.0, 5.0
    ls = extract_lesions(lab, pet(a))
    l1, l2 = ls.by_id()[1], ls.by_id()[2]
    assert (l1.suvmax, l1.suvmean) == (6.0, 5.0)
    assert (l2.suvmax, l2.suvmean) == (5.0, 5.0)
    assert l1.volume_ml == pytest.approx(2 * VOX_ML)
    assert l1.centroid_mm == (0.0, 0.0, 1.5)
    np.testing.assert_array_equal(ls.label_array(), lab)


def test_dice_fpv_fnv_examples():
    a = np.zeros((6, 6, 6), dtype=bool)
    a[0:2, 0:2, 0:2] = True
    assert (dice(a, a), fpv(a, a, SP), fnv(a, a, SP)) == (1.0, 0.0, 0.0)
    b = np.zeros_like(a)
    b[4:6, 4:6, 4:6] = True
    assert dice(a, b) == 0.0
    assert fpv(a, b, SP) == pytest.approx(8 * VOX_ML)
    assert fnv(a, b, SP) == pytest.approx(8 * VOX_ML)
    gt = np.zeros((6, 6, 6), dtype=bool)
    gt[0:4, 0:2, 0:2] = True  # 16 voxels
    half = np.zeros_like(gt)
    half[0:2, 0:2, 0:2] = True
    assert dice(half, gt) == pytest.approx(2 / 3)
    assert fpv(half, gt, SP) == 0.0 and fnv(half, gt, SP) == 0.0
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_overlap_metrics_match_oracles(seed):
    a, b = random_mask(seed, p=0.15), random_mask(seed + 1, p=0.15)
    assert dice(a, b) == pytest.approx(oracles.dice(a, b), rel=1e-12)
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0
    assert fpv(a, b, SP) == pytest.approx(oracles.unmatched_volume(a, b, VOX_ML), rel=1e-12, abs=0)
    assert fnv(a, b, SP) == pytest.approx(oracles.unmatched_volume(b, a, VOX_ML), rel=1e-12, abs=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_adding_pred_voxel_inside_matched_gt_never_raises_fnv(seed):
    rng = np.random.default_rng(seed)
    gt, pred = random_mask(seed, p=0.2), random_mask(seed + 7, p=0.1)
    lab = connected_components(gt)
    matched = np.unique(lab[pred & gt])
    matched = matched[matched > 0]
    if len(matched) == 0:
        return
    cand = np.argwhere(np.isin(lab, matched) & ~pred)
    if len(cand) == 0:
        return
    grown = pred.copy()
    grown[tuple(cand[rng.integers(len(cand))])] = True
    assert fnv(grown, gt, SP) <= fnv(pred, gt, SP)
