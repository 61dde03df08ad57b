import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import bfs_components, untouched_voxels
from volwindow.errors import ShapeError, ValidationError
from volwindow.metrics import (
    aggregate,
    connected_components,
    dice_score,
    evaluate_case,
    false_negative_volume,
    false_positive_volume,
)
from volwindow.volgrid import MaskVolume

masks = st.tuples(*[st.integers(1, 5)] * 3).flatmap(lambda s: arrays(np.uint8, s, elements=st.integers(0, 1)))


def test_dice_examples():
    a = np.zeros((4, 1, 1), np.uint8)
    a[:2] = 1
    b = np.ones((4, 1, 1), np.uint8)
    assert dice_score(a, b) == pytest.approx(2 * 2 / 6, abs=1e-9)
    assert dice_score(b, b) == 1.0
    assert dice_score(a, 1 - a) == 0.0
    z = np.zeros((2, 2, 2))
    assert dice_score(z, z) == 1.0


def test_dice_errors():
    with pytest.raises(ShapeError):
        dice_score(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(ValidationError):
        dice_score(np.full((2, 2, 2), 2), np.zeros((2, 2, 2)))


def test_diagonal_connectivity():
    m = np.array([[1, 0], [0, 1]], np.uint8)[:, :, None]
    assert connected_components(m, 6)[1] == 2
    assert connected_components(m, 18)[1] == 1
    assert connected_components(m, 26)[1] == 1
    corner = np.zeros((2, 2, 2), np.uint8)
    corner[0, 0, 0] = corner[1, 1, 1] = 1
    assert connected_components(corner, 18)[1] == 2
    assert connected_components(corner, 26)[1] == 1
    with pytest.raises(ValidationError):
        connected_components(m, 8)


def test_trivial_counts():
    assert connected_components(np.zeros((3, 3, 3)))[1] == 0
    labels, n = connected_components(np.ones((3, 3, 3)))
    assert n == 1 and np.all(labels == 1)


def test_fpv_fnv_examples():
    spacing = (2.0, 2.0, 3.0)
    pred = np.zeros((10, 10, 10), np.uint8)
    gt = np.zeros_like(pred)
    gt[0:2, 0:2, 0:2] = 1
    pred[0, 0, 0] = 1
    pred[5:10, 5, 5] = 1
    assert false_positive_volume(pred, gt, spacing) == pytest.approx(5 * 0.012, abs=1e-12)

    gt2 = np.zeros_like(pred)
    gt2[7, 7, 7:10] = 1
    assert false_negative_volume(np.zeros_like(pred), gt2, (1, 1, 1)) == pytest.approx(0.003, abs=1e-15)
    assert false_negative_volume(pred, np.zeros_like(pred), (1, 1, 1)) == 0.0


def test_single_voxel_overlap_contributes_nothing():
    pred = np.zeros((6, 6, 6), np.uint8)
    pred[0:4, 0, 0] = 1
    gt = np.zeros_like(pred)
    gt[3, 0, 0] = 1
    assert false_positive_volume(pred, gt, (1, 1, 1)) == 0.0
    assert false_negative_volume(pred, gt, (1, 1, 1)) == 0.0


def test_subset_gives_zero():
    gt = np.zeros((5, 5, 5), np.uint8)
    gt[1:4, 1:4, 1:4] = 1
    pred = np.zeros_like(gt)
    pred[2, 2, 2] = 1
    assert false_positive_volume(pred, gt, (1, 1, 1)) == 0.0
    assert false_negative_volume(gt, pred, (1, 1, 1)) == 0.0


def test_spacing_from_mask_volume():
    pred = MaskVolume(np.array([1, 0, 0]).reshape(3, 1, 1), np.diag([2.0, 2.0, 3.0, 1.0]))
    gt = MaskVolume(np.array([0, 0, 1]).reshape(3, 1, 1), np.diag([2.0, 2.0, 3.0, 1.0]))
    report = evaluate_case(pred, gt)
    assert report.fpv_ml == pytest.approx(0.012) and report.fnv_ml == pytest.approx(0.012)
    assert report.dice == 0.0
    assert report.n_pred_components == 1 and report.n_gt_components == 1
    with pytest.raises(ValidationError):
        false_positive_volume(pred.data, gt.data)


def test_aggregate_means():
    a = evaluate_case(np.ones((2, 1, 1)), np.ones((2, 1, 1)), (1, 1, 1))
    b = evaluate_case(np.array([1, 0]).reshape(2, 1, 1), np.array([0, 1]).reshape(2, 1, 1), (1, 1, 1))
    agg = aggregate([a, b])
    assert agg == {"n_cases": 2, "dice": 0.5, "fnv_ml": 0.0005, "fpv_ml": 0.0005}
    assert aggregate([])["n_cases"] == 0


def test_label_order_is_x_fastest():
    m = np.zeros((4, 4, 1), np.uint8)
    m[3, 0, 0] = 1  # first in x-fastest scan
    m[0, 2, 0] = 1
    labels, n = connected_components(m, 6)
    assert n == 2 and labels[3, 0, 0] == 1 and labels[0, 2, 0] == 2


@settings(max_examples=80, deadline=None)
@given(m=masks, conn=st.sampled_from([6, 18, 26]))
def test_components_match_bfs_oracle(m, conn):
    labels, n = connected_components(m, conn)
    ref, rn = bfs_components(m, conn)
    assert n == rn
    np.testing.assert_array_equal(labels, ref)


@settings(max_examples=80, deadline=None)
@given(data=st.data(), shape=st.tuples(*[st.integers(1, 5)] * 3))
def test_volumes_match_oracle_and_symmetry(data, shape):
    p = data.draw(arrays(np.uint8, shape, elements=st.integers(0, 1)))
    g = data.draw(arrays(np.uint8, shape, elements=st.integers(0, 1)))
    sp = (1.0, 1.0, 1.0)
    assert false_positive_volume(p, g, sp) == pytest.approx(untouched_voxels(p, g) * 0.001, abs=1e-15)
    assert false_negative_volume(p, g, sp) == pytest.approx(untouched_voxels(g, p) * 0.001, abs=1e-15)
    assert false_positive_volume(p, g, sp) == false_negative_volume(g, p, sp)
    assert dice_score(p, g) == dice_score(g, p)
    assert 0.0 <= dice_score(p, g) <= 1.0


@settings(max_examples=50, deadline=None)
@given(data=st.data(), shape=st.tuples(*[st.integers(1, 4)] * 3))
def test_disjoint_component_never_decreases_fpv(data, shape):
    p = data.draw(arrays(np.uint8, shape, elements=st.integers(0, 1)))
    g = data.draw(arrays(np.uint8, shape, elements=st.integers(0, 1)))
    # append a padded slab holding a new component far from everything else
    big = tuple(s + 2 for s in shape)
    p2 = np.zeros((big[0] + 2, big[1], big[2]), np.uint8)
    g2 = np.zeros_like(p2)
    p2[: shape[0], : shape[1], : shape[2]] = p
    g2[: shape[0], : shape[1], : shape[2]] = g
    base = false_positive_volume(p2, g2, (1, 1, 1))
    p2[-1, 0, 0] = 1
    assert false_positive_volume(p2, g2, (1, 1, 1)) >= base + 0.001 - 1e-15
