import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tfpdet import anchorkit as ak
from tfpdet.errors import ConfigError, ContractError

from oracles import match_anchors_ref, match_proposals_ref, tiou_ref


def seg(s, e):
    return ak.Segment(s, e)


# ---------------------------------------------------------------------------
# grid construction


def test_grid_level_lengths_match_scale_ranges():
    grid = ak.build_anchor_grid(768)
    lengths = [sorted({a.segment.length for a in lv}) for lv in grid.levels]
    assert lengths[0] == [8, 16, 24, 32, 40, 48, 56]
    assert lengths[1] == [64, 80, 96, 112, 128, 144, 160]
    assert lengths[2] == list(range(192, 513, 32))


def test_grid_counts():
    grid = ak.build_anchor_grid(768)
    assert [len(lv) for lv in grid.levels] == [96 * 7, 48 * 7, 24 * 11]
    assert len(grid) == 1272


def test_first_cell_anchor_placement():
    grid = ak.build_anchor_grid(768)
    a = grid.levels[0][0]
    assert (a.level, a.position, a.scale_index) == (0, 0, 0)
    assert a.segment.center == 4.0
    assert (a.segment.start, a.segment.end) == (0.0, 8.0)


def test_grid_rejects_indivisible_buffer():
    with pytest.raises(ConfigError, match="divisible"):
        ak.build_anchor_grid(100)


def test_single_scale_layout_covers_same_lengths():
    grid = ak.build_anchor_grid(768, strides=(8,), scales=ak.SINGLE_SCALE_SCALES)
    multi = ak.build_anchor_grid(768)
    assert sorted({a.segment.length for lv in grid.levels for a in lv}) == sorted(
        {a.segment.length for lv in multi.levels for a in lv}
    )
    assert len(ak.SINGLE_SCALE_SCALES[0]) == 25


# ---------------------------------------------------------------------------
# tiou


def test_tiou_identity():
    assert ak.tiou(seg(0, 10), seg(0, 10)) == 1.0


def test_tiou_disjoint():
    assert ak.tiou(seg(0, 10), seg(20, 30)) == 0.0


def test_tiou_partial_overlap():
    assert ak.tiou(seg(0, 10), seg(5, 15)) == pytest.approx(5 / 15, abs=1e-12)


@given(
    st.floats(-1000, 1000), st.floats(0.1, 500),
    st.floats(-1000, 1000), st.floats(0.1, 500),
)
@settings(max_examples=200, deadline=None)
def test_tiou_symmetric_and_bounded(s1, l1, s2, l2):
    a, b = seg(s1, s1 + l1), seg(s2, s2 + l2)
    v = ak.tiou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == ak.tiou(b, a)
    assert ak.tiou(a, a) == 1.0


# ---------------------------------------------------------------------------
# encode / decode


def test_encode_identity_transform():
    assert ak.encode(seg(10, 20), seg(10, 20)) == (0.0, 0.0)


def test_encode_quarter_shift():
    anchor = seg(100 - 28, 100 + 28)  # center 100, length 56
    assert ak.encode(anchor, seg(86, 142)) == pytest.approx((0.25, 0.0), abs=1e-12)


def test_encode_double_length():
    tc, tl = ak.encode(seg(0, 10), seg(-5, 15))
    assert (tc, tl) == pytest.approx((0.0, math.log(2)), abs=1e-12)


def test_decode_zero_offsets_is_anchor():
    a = seg(12, 44)
    d = ak.decode(a, 0.0, 0.0)
    assert (d.start, d.end) == pytest.approx((12.0, 44.0), abs=1e-12)


def test_decode_clips_to_buffer():
    d = ak.decode(seg(-4, 12), 0.0, 0.0, clip_to=(0.0, 768.0))
    assert (d.start, d.end) == (0.0, 12.0)


def test_decode_degenerate_returns_none():
    assert ak.decode(seg(-10, -2), 0.0, 0.0, clip_to=(0.0, 768.0)) is None


def test_encode_decode_roundtrip_sample():
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(2000):
        ac = rng.uniform(0, 768)
        al = rng.uniform(1, 512)
        gc = rng.uniform(0, 768)
        gl = rng.uniform(1, 512)
        a, g = seg(ac, ac + al), seg(gc, gc + gl)
        d = ak.decode(a, *ak.encode(a, g))
        worst = max(worst, abs(d.start - g.start), abs(d.end - g.end))
    assert worst < 1e-9


# ---------------------------------------------------------------------------
# segment invariants


def test_segment_rejects_empty():
    with pytest.raises(ContractError):
        seg(5, 5)


# ---------------------------------------------------------------------------
# anchor matching


def test_match_perfect_anchor_is_positive():
    grid = ak.build_anchor_grid(768)
    m = ak.match_anchors_apn(grid, [seg(0.0, 56.0)])
    # the length-56 anchor centered at 28 is an exact hit
    exact = [i for i, a in enumerate(grid.anchors) if a.segment.start == 0.0 and a.segment.end == 56.0]
    assert len(exact) == 1
    assert m.labels[exact[0]] == 1
    assert np.allclose(m.reg_targets[exact[0]], [0.0, 0.0])


def test_match_empty_gts_all_negative():
    grid = ak.build_anchor_grid(768)
    m = ak.match_anchors_apn(grid, [])
    assert np.all(m.labels == -1)
    assert int(np.sum(m.labels == -1)) == 1272


def test_match_midrange_best_anchor_still_positive():
    # a 4-frame ground truth has best tIoU 4/8 = 0.5: only the best-match
    # clause can make it positive, and exactly one anchor wins
    grid = ak.build_anchor_grid(768)
    m = ak.match_anchors_apn(grid, [seg(0.0, 4.0)])
    best = max(ak.tiou(a.segment, seg(0.0, 4.0)) for a in grid.anchors)
    assert best == pytest.approx(0.5, abs=1e-12)
    assert int(np.sum(m.labels == 1)) == 1
    ref_labels, _ = match_anchors_ref([a.segment for a in grid.anchors], [seg(0.0, 4.0)])
    assert np.array_equal(m.labels, ref_labels)


def test_match_every_gt_gets_a_positive():
    rng = np.random.default_rng(5)
    grid = ak.build_anchor_grid(256, strides=(8, 16), scales=((1, 2, 3), (4, 6)))
    for _ in range(50):
        gts = [
            seg(s, s + l)
            for s, l in zip(rng.uniform(0, 200, 3), rng.uniform(2, 60, 3))
        ]
        m = ak.match_anchors_apn(grid, gts)
        for j in range(len(gts)):
            assert np.any((m.labels == 1) & (m.matched_gt >= 0)), "some positive exists"
            # the best anchor for gt j is positive
            ti = np.array([ak.tiou(a.segment, gts[j]) for a in grid.anchors])
            assert m.labels[int(ti.argmax())] == 1


def test_match_equals_exhaustive_oracle_on_random_scenes():
    rng = np.random.default_rng(99)
    grid = ak.build_anchor_grid(128, strides=(8, 16), scales=((1, 2, 4), (3, 5)))
    segs = [a.segment for a in grid.anchors]
    for _ in range(60):
        n = int(rng.integers(0, 4))
        gts = []
        for _ in range(n):
            s = rng.uniform(0, 100)
            gts.append(seg(s, s + rng.uniform(1, 80)))
        m = ak.match_anchors_apn(grid, gts)
        ref_labels, ref_match = match_anchors_ref(segs, gts)
        assert np.array_equal(m.labels, ref_labels)
        assert np.array_equal(m.matched_gt, ref_match)


# ---------------------------------------------------------------------------
# proposal matching


def test_proposal_match_perfect():
    m = ak.match_proposals_acn([seg(10, 50)], [seg(10, 50)], [3])
    assert m.class_labels[0] == 3
    assert np.allclose(m.reg_targets[0], [0.0, 0.0])


def test_proposal_match_below_threshold_is_background():
    m = ak.match_proposals_acn([seg(0, 4)], [seg(0, 10)], [2])
    assert m.class_labels[0] == 0
    assert m.matched_gt[0] == -1


def test_proposal_match_exactly_half_is_background():
    # tIoU exactly 0.5: strict "greater than" sends it to background
    m = ak.match_proposals_acn([seg(0, 5)], [seg(0, 10)], [1])
    assert ak.tiou(seg(0, 5), seg(0, 10)) == 0.5
    assert m.class_labels[0] == 0


def test_proposal_match_equals_oracle():
    rng = np.random.default_rng(7)
    for _ in range(60):
        props = [seg(s, s + l) for s, l in zip(rng.uniform(0, 200, 8), rng.uniform(1, 80, 8))]
        gts = [seg(s, s + l) for s, l in zip(rng.uniform(0, 200, 3), rng.uniform(1, 80, 3))]
        labels = rng.integers(1, 4, 3).tolist()
        m = ak.match_proposals_acn(props, gts, labels)
        ref = match_proposals_ref(props, gts, labels)
        assert m.class_labels.tolist() == [r[0] for r in ref]
        assert m.matched_gt.tolist() == [r[1] for r in ref]


# ---------------------------------------------------------------------------
# minibatch sampling


def _match_with(pos, neg, total):
    labels = np.zeros(total, dtype=np.int8)
    labels[:pos] = 1
    labels[pos : pos + neg] = -1
    return ak.MatchResult(labels, np.full(total, -1), np.zeros((total, 2)))


def test_sample_balanced_one_to_one():
    m = _match_with(100, 100, 220)
    sel = ak.sample_minibatch(m, 64, 0.5, np.random.default_rng(0))
    assert len(sel) == 64
    assert int(np.sum(m.labels[sel] == 1)) == 32
    assert int(np.sum(m.labels[sel] == -1)) == 32


def test_sample_fills_with_negatives():
    m = _match_with(5, 1000, 1010)
    sel = ak.sample_minibatch(m, 64, 0.25, np.random.default_rng(0))
    assert int(np.sum(m.labels[sel] == 1)) == 5
    assert int(np.sum(m.labels[sel] == -1)) == 59


def test_sample_zero_positives():
    m = _match_with(0, 1000, 1000)
    sel = ak.sample_minibatch(m, 64, 0.5, np.random.default_rng(0))
    assert len(sel) == 64
    assert np.all(m.labels[sel] == -1)


def test_sample_never_takes_ignores():
    m = _match_with(3, 4, 50)  # 43 ignored anchors
    sel = ak.sample_minibatch(m, 64, 0.5, np.random.default_rng(1))
    assert np.all(m.labels[sel] != 0)
    assert len(sel) == 7


def test_sample_empty_pools_raise():
    m = _match_with(0, 0, 10)
    with pytest.raises(ContractError, match="no positives and no negatives"):
        ak.sample_minibatch(m, 64, 0.5, np.random.default_rng(0))


def test_sample_without_replacement_and_seeded():
    m = _match_with(40, 40, 80)
    a = ak.sample_minibatch(m, 64, 0.5, np.random.default_rng(42))
    b = ak.sample_minibatch(m, 64, 0.5, np.random.default_rng(42))
    assert np.array_equal(a, b)
    assert len(set(a.tolist())) == len(a)


def test_sample_respects_candidate_restriction():
    m = _match_with(10, 10, 40)
    cand = np.arange(5, 25)
    sel = ak.sample_minibatch(m, 8, 0.5, np.random.default_rng(3), candidate_idx=cand)
    assert np.all(np.isin(sel, cand))


# ---------------------------------------------------------------------------
# coverage property


def test_anchor_coverage_at_least_point_six():
    lengths = sorted(
        sc * s for s, scales in zip(ak.DEFAULT_STRIDES, ak.DEFAULT_SCALES) for sc in scales
    )
    for l in range(8, 513):
        best = max(min(a, l) / max(a, l) for a in lengths)
        assert best >= 0.6, f"length {l} has best co-centered tIoU {best}"
