import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from asbunet import segeval
from asbunet.segeval import IgnoreBandParams, ignore_band, masked_jaccard, score_details

PAIRS = [oracles.random_mask_pair(np.random.default_rng(s)) for s in range(200)]


def masks(max_side=12):
    shapes = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shapes.flatmap(lambda s: arrays(bool, s))


def test_disk_radius_one_is_plus():
    single = np.zeros((5, 5), dtype=bool)
    single[2, 2] = True
    expected = np.zeros((5, 5), dtype=bool)
    expected[2, 1:4] = expected[1:4, 2] = True
    np.testing.assert_array_equal(segeval.dilate(single, 1), expected)


def test_disk_radius_two_has_13_pixels():
    assert segeval.disk(2).sum() == 13


@pytest.mark.parametrize("r", [1, 2, 3])
def test_morphology_identities(r):
    assert not segeval.dilate(np.zeros((6, 7), bool), r).any()
    assert segeval.erode(np.ones((6, 7), bool), r).all()


def test_centered_square_band():
    label = np.zeros((8, 8), dtype=bool)
    label[2:6, 2:6] = True
    band = ignore_band(label, IgnoreBandParams(osf_beta=0.0, min_radius=1))
    ring = oracles.dilate(label, 1) ^ oracles.erode(label, 1)
    np.testing.assert_array_equal(band, ~ring)
    # dilation adds 16 pixels around the square, erosion keeps its 2x2 core
    assert ring.sum() == 32 - 4


@pytest.mark.parametrize("i", range(0, 200, 10))
def test_morphology_matches_oracle(i):
    label, _ = PAIRS[i]
    for r in (1, 2, 3):
        np.testing.assert_array_equal(segeval.dilate(label, r), oracles.dilate(label, r))
        np.testing.assert_array_equal(segeval.erode(label, r), oracles.erode(label, r))


def test_components_match_oracle():
    for label, pred in PAIRS:
        for m in (label, pred):
            lab, n = segeval.components(m)
            ref = oracles.components(m)
            assert n == len(ref)
            got = sorted(sorted(zip(*np.nonzero(lab == k))) for k in range(1, n + 1))
            assert got == sorted(sorted(c) for c in ref)


@pytest.mark.parametrize("drop", [False, True])
@pytest.mark.parametrize("beta,min_radius", [(0.05, 1), (0.3, 1), (0.5, 2)])
def test_band_and_scores_match_oracle(beta, min_radius, drop):
    params = IgnoreBandParams(beta, min_radius, drop)
    for label, pred in PAIRS:
        np.testing.assert_array_equal(ignore_band(label, params), oracles.ignore_band(label, beta, min_radius))
        d = score_details(label, pred, params)
        j, n, s = oracles.score(label, pred, beta, min_radius, drop)
        assert (d["jaccard"], d["misdetections"], d["score"]) == (j, n, s)


def test_identical_masks_score_one():
    label, _ = PAIRS[0]
    assert segeval.score_with_penalty(label, label) == 1.0


def test_band_only_disagreement_scores_one():
    label = np.zeros((16, 16), dtype=bool)
    label[4:12, 4:12] = True
    band = ignore_band(label)
    pred = label.copy()
    # flip ring pixels only
    ring = np.argwhere(~band)
    for y, x in ring[::3]:
        pred[y, x] = ~pred[y, x]
    assert (pred != label).any()
    assert masked_jaccard(label, pred) == 1.0
    assert segeval.score_with_penalty(label, pred) == 1.0


def test_spurious_blob_costs_exactly_one():
    label = np.zeros((32, 32), dtype=bool)
    label[4:12, 4:12] = True
    pred = label.copy()
    pred[24:28, 24:28] = True
    d = score_details(label, pred)
    assert d == {"jaccard": 1.0, "misdetections": 1, "score": 0.0}


def test_fringe_attached_to_object_is_not_a_misdetection():
    label = np.zeros((32, 32), dtype=bool)
    label[8:20, 8:20] = True
    pred = label.copy()
    pred[6:22, 7] = True  # one column beyond the ring, still touching the object
    assert score_details(label, pred)["misdetections"] == 0


def test_component_wholly_inside_ring_is_forgiven():
    label = np.zeros((32, 32), dtype=bool)
    label[8:24, 8:24] = True  # area 256, radius 1 by default
    pred = label.copy()
    pred[8] = False  # drop the top row (itself inside the ring)
    inside, outside = pred.copy(), pred.copy()
    inside[7, 15] = True  # isolated, in the dilation ring
    outside[5, 15] = True  # isolated, beyond the ring
    assert score_details(label, inside) == {"jaccard": 1.0, "misdetections": 0, "score": 1.0}
    assert score_details(label, outside) == {"jaccard": 1.0, "misdetections": 1, "score": 0.0}


def test_empty_prediction_scores_zero():
    label = np.zeros((8, 8), dtype=bool)
    label[2:6, 2:6] = True
    assert segeval.score_with_penalty(label, np.zeros_like(label)) == 0.0


def test_disjoint_prediction_outside_band():
    label = np.zeros((16, 16), dtype=bool)
    label[2:8, 2:8] = True
    pred = np.zeros_like(label)
    pred[12:15, 12:15] = True
    assert masked_jaccard(label, pred) == 0.0


def test_ring_agreement_handling():
    # a radius-4 ring swallows the whole 8x8 object; the stray pixel lies
    # beyond both rings
    label = np.zeros((16, 16), dtype=bool)
    label[3:11, 3:11] = True
    pred = label.copy()
    pred[14, 14] = True
    kept = [masked_jaccard(label, pred, IgnoreBandParams(b)) for b in (0.05, 0.5)]
    assert kept == [64 / 65, 64 / 65]
    # dropping agreeing ring pixels as well leaves only the stray pixel when wide
    dropped = [masked_jaccard(label, pred, IgnoreBandParams(b, drop_ring_agreement=True)) for b in (0.05, 0.5)]
    assert dropped == [36 / 37, 0.0]


BETAS = [0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.8]


def test_wider_band_never_lowers_jaccard():
    for label, pred in PAIRS:
        js = [masked_jaccard(label, pred, IgnoreBandParams(b, 0)) for b in BETAS]
        assert all(b >= a for a, b in zip(js, js[1:])), js


def test_soft_predictions_thresholded():
    label = np.array([[0, 1], [1, 1]], dtype=np.uint8) * 255
    probs = np.array([[0.2, 0.7], [0.51, 0.9]])
    assert masked_jaccard(label, probs, IgnoreBandParams(0.0, 0)) == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        masked_jaccard(np.zeros((4, 4)), np.zeros((4, 5)))


def test_evaluate_dataset_aggregates():
    report = segeval.evaluate_dataset([p[0] for p in PAIRS[:7]], [p[1] for p in PAIRS[:7]])
    assert report.count == 7
    assert abs(report.mean_score - np.mean(report.scores)) < 1e-12
    one = segeval.evaluate_dataset([PAIRS[3][0]], [PAIRS[3][1]])
    assert one.mean_score == score_details(*PAIRS[3])["score"]
    dup = segeval.evaluate_dataset([PAIRS[3][0]] * 2, [PAIRS[3][1]] * 2)
    assert dup.scores[0] == dup.scores[1]
    with pytest.raises(ValueError):
        segeval.evaluate_dataset([PAIRS[0][0]], [])


@settings(max_examples=60, deadline=None)
@given(masks(), st.integers(1, 3))
def test_closing_is_extensive(m, r):
    assert not (m & ~segeval.erode(segeval.dilate(m, r), r)).any()


@settings(max_examples=60, deadline=None)
@given(masks())
def test_zero_radius_band_is_plain_jaccard(m):
    pred = np.roll(m, 1, axis=-1)
    params = IgnoreBandParams(0.0, 0)
    assert ignore_band(m, params).all()
    assert masked_jaccard(m, pred, params) == segeval.jaccard(m, pred)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 400), st.integers(1, 400))
def test_radius_monotone_in_area(a, b):
    p = IgnoreBandParams()
    lo, hi = sorted((a, b))
    assert 1 <= p.radius(lo) <= p.radius(hi)


@settings(max_examples=60, deadline=None)
@given(masks(12), st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_band_monotone_property(label, seed, b1, b2):
    rng = np.random.default_rng(seed)
    pred = label ^ (rng.random(label.shape) < 0.2)
    lo, hi = sorted((b1, b2))
    assert masked_jaccard(label, pred, IgnoreBandParams(hi)) >= masked_jaccard(label, pred, IgnoreBandParams(lo))


@settings(max_examples=40, deadline=None)
@given(masks(10), masks(10))
def test_score_bounds(a, b):
    if a.shape != b.shape:
        return
    d = score_details(a, b)
    assert 0.0 <= d["jaccard"] <= 1.0
    assert d["score"] == d["jaccard"] - d["misdetections"]
