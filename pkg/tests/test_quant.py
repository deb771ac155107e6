import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laspet import quant
from laspet.lesions import Lesion, LesionSet, connected_components, extract_lesions
from laspet.quant import MetricError
from laspet.volgrid import Kind, Volume3D

import oracles

SP = (3.0, 3.0, 3.0)


def suv(a):
    return Volume3D(np.asarray(a, dtype=np.float64), SP, (0, 0, 0), Kind.SUV)


def label_vol(a):
    return Volume3D(np.asarray(a), SP, (0, 0, 0), Kind.LABEL)


def single_voxel_lesions(points_mm, shape=(40, 40, 40)):
    lab = np.zeros(shape, dtype=np.int64)
    for k, p in enumerate(points_mm, start=1):
        lab[tuple(int(round(c / 3.0)) for c in p)] = k
    return extract_lesions(label_vol(lab), suv(np.ones(shape)))


def random_case(seed, shape=(8, 8, 8)):
    rng = np.random.default_rng(seed)
    lab = connected_components(rng.random(shape) < 0.2)
    values = rng.uniform(0.5, 12.0, shape)
    return lab, values, extract_lesions(label_vol(lab), suv(values))


def test_mtv_and_tlg_examples():
    lab = np.zeros((5, 5, 5), dtype=np.int64)
    lab[0, 0, :5] = 1
    lab[4, 4, :5] = 1
    lab[2, 2, 2] = 0
    ls = extract_lesions(label_vol(connected_components(lab > 0)), suv(np.full((5, 5, 5), 5.0)))
    assert quant.mtv(ls) == pytest.approx(0.27)
    one = extract_lesions(label_vol((lab > 0) & (np.arange(5)[:, None, None] == 0)), suv(np.full((5, 5, 5), 5.0)))
    assert quant.tlg(one) == pytest.approx(0.135 * 5.0)
    empty = extract_lesions(label_vol(np.zeros((3, 3, 3))), suv(np.zeros((3, 3, 3))))
    assert quant.mtv(empty) == 0 and quant.tlg(empty) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_mtv_tlg_match_voxelwise_oracle(seed):
    lab, values, ls = random_case(seed)
    vml = 27.0 / 1000.0
    assert quant.mtv(ls) == pytest.approx(oracles.mtv(lab, vml), rel=1e-9)
    assert quant.tlg(ls) == pytest.approx(oracles.tlg(lab, values.astype(np.float32), vml), rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_mtv_tlg_additive_over_disjoint_subsets(seed):
    _, _, ls = random_case(seed)
    a = ls.subset(lambda les: les.id % 2 == 0)
    b = ls.subset(lambda les: les.id % 2 == 1)
    assert quant.mtv(ls) == pytest.approx(quant.mtv(a) + quant.mtv(b), rel=1e-12)
    assert quant.tlg(ls) == pytest.approx(quant.tlg(a) + quant.tlg(b), rel=1e-12)


def test_dmax_examples():
    assert quant.dmax(single_voxel_lesions([(0, 0, 0), (30, 42, 0)])) == pytest.approx(math.hypot(30, 42))
    assert quant.dmax(single_voxel_lesions([(0, 0, 0)])) is None
    assert quant.dmax(single_voxel_lesions([(0, 0, 0), (9, 0, 0), (24, 0, 0)])) == pytest.approx(24.0)


def centroid_set(points):
    lesions = tuple(Lesion(k, np.zeros((1, 3), dtype=np.int64), 0.027, tuple(map(float, p)))
                    for k, p in enumerate(points, start=1))
    return LesionSet((1, 1, 1), SP, (0, 0, 0), lesions)


def test_dmax_3_4_5_triangle_from_centroids():
    assert quant.dmax(centroid_set([(0, 0, 0), (30, 40, 0)])) == pytest.approx(50.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_dmax_matches_oracle_both_modes(seed):
    _, _, ls = random_case(seed)
    if len(ls) < 2:
        return
    assert quant.dmax(ls, "centroid") == pytest.approx(
        oracles.dmax_centroid([les.centroid_mm for les in ls]), rel=1e-9)
    pts = np.concatenate([les.voxels for les in ls]) * 3.0
    assert quant.dmax(ls, "voxel") == pytest.approx(oracles.dmax_voxel(pts), rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_dmax_invariant_under_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-50, 50, (5, 3))
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    moved = pts @ q.T + rng.normal(size=3) * 20
    assert quant.dmax(centroid_set(moved)) == pytest.approx(quant.dmax(centroid_set(pts)), rel=1e-9)
    assert quant.dmax(centroid_set(pts)) == pytest.approx(oracles.dmax_centroid(pts), rel=1e-9)


def test_dspleen():
    spleen = np.zeros((40, 40, 40))
    spleen[10, 10, 10] = 1
    ls = single_voxel_lesions([(30, 30, 30)])
    assert quant.dspleen(ls, label_vol(spleen)) == pytest.approx(0.0)
    ls = single_voxel_lesions([(30, 30, 30), (30 + 36, 30 + 48, 30)])
    assert quant.dspleen(ls, label_vol(spleen)) == pytest.approx(60.0)
    with pytest.raises(MetricError):
        quant.dspleen(ls, label_vol(np.zeros((40, 40, 40))))


def test_delta_suvmax():
    assert quant.delta_suvmax(10, 4) == pytest.approx(60.0)
    assert quant.delta_suvmax(7, 7) == 0.0
    assert quant.delta_suvmax(7, 0) == 100.0
    with pytest.raises(MetricError):
        quant.delta_suvmax(0, 1)


@given(st.floats(0.1, 100), st.floats(0, 100), st.floats(0.01, 100))
def test_delta_suvmax_scale_invariant(s1, s2, k):
    assert quant.delta_suvmax(s1 * k, s2 * k) == pytest.approx(quant.delta_suvmax(s1, s2), abs=1e-9)


def test_suvpeak_uniform_and_truncated():
    lab = np.zeros((9, 9, 9), dtype=np.int64)
    lab[3:6, 3:6, 3:6] = 1
    ls = extract_lesions(label_vol(lab), suv(np.full((9, 9, 9), 5.0)))
    assert quant.suvpeak(ls.lesions[0], suv(np.full((9, 9, 9), 5.0))) == pytest.approx(5.0)
    lab = np.zeros((9, 9, 9), dtype=np.int64)
    lab[4, 4, 4] = lab[4, 4, 5] = 1
    vals = np.zeros((9, 9, 9))
    vals[4, 4, 4], vals[4, 4, 5] = 6.0, 2.0
    les = extract_lesions(label_vol(lab), suv(vals)).lesions[0]
    assert quant.suvpeak(les, suv(vals)) == pytest.approx(4.0)


def test_suvpeak_matches_sphere_oracle():
    rng = np.random.default_rng(4)
    shape = (15, 15, 15)
    g = np.indices(shape) - 7
    vals = 10 * np.exp(-(g**2).sum(0) / 8.0) + rng.random(shape) * 0.01
    lab = ((g**2).sum(0) <= 25).astype(np.int64)
    les = extract_lesions(label_vol(lab), suv(vals)).lesions[0]
    vals32 = vals.astype(np.float32).astype(np.float64)
    hot = np.unravel_index(np.argmax(np.where(lab > 0, vals32, -1)), shape)
    r = (3000.0 / (4 * math.pi)) ** (1 / 3)
    inside = [vals32[p] for p in zip(*np.nonzero(lab))
              if math.dist([3 * c for c in p], [3 * c for c in hot]) <= r]
    assert quant.suvpeak(les, suv(vals)) == pytest.approx(sum(inside) / len(inside), rel=1e-12)


def test_qpet_examples():
    shape = (12, 12, 12)
    liver = np.zeros(shape)
    liver[8:12, 8:12, 8:12] = 1
    vals = np.where(liver > 0, 2.0, 1.0)
    lab = np.zeros(shape, dtype=np.int64)
    lab[1, 1, 1] = 1
    lab[5, 5, 5] = 2
    vals[1, 1, 1], vals[5, 5, 5] = 1.8, 2.4
    ls = extract_lesions(label_vol(lab), suv(vals))
    assert quant.qpet(ls, label_vol(liver), suv(vals)) == pytest.approx(1.2)
    vals[5, 5, 5] = 2.6
    ls = extract_lesions(label_vol(lab), suv(vals))
    assert quant.qpet(ls, label_vol(liver), suv(vals)) == pytest.approx(1.3)
    vals[5, 5, 5] = 2.0
    ls = extract_lesions(label_vol(lab), suv(vals))
    assert quant.qpet(ls, label_vol(liver), suv(vals)) == pytest.approx(1.0)
    empty = ls.subset(lambda les: False)
    assert quant.qpet(empty, label_vol(liver), suv(vals)) is None
    with pytest.raises(MetricError):
        quant.qpet(ls, label_vol(np.zeros(shape)), suv(vals))


def test_qpet_inverse_in_liver_scaling():
    shape = (10, 10, 10)
    liver = np.zeros(shape)
    liver[6:, 6:, 6:] = 1
    lab = np.zeros(shape, dtype=np.int64)
    lab[1:3, 1:3, 1:3] = 1
    base = np.where(liver > 0, 2.0, 1.0)
    base[lab > 0] = 5.0
    scaled = np.where(liver > 0, base * 2.5, base)
    ls = extract_lesions(label_vol(lab), suv(base))
    q1 = quant.qpet(ls, label_vol(liver), suv(base))
    q2 = quant.qpet(ls, label_vol(liver), suv(scaled))
    assert q2 == pytest.approx(q1 / 2.5)


def test_baseline_metrics_empty_set():
    m = quant.baseline_metrics(extract_lesions(label_vol(np.zeros((4, 4, 4))), suv(np.ones((4, 4, 4)))),
                               label_vol(np.ones((4, 4, 4))))
    assert (m.mtv_ml, m.tlg_ml_suv, m.n_lesions, m.dmax_mm, m.dspleen_mm) == (0, 0, 0, None, None)
