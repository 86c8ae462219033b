import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stmil.bagging import GridGeometry
from stmil.errors import AnnotationError, FormatError
from stmil.evalkit import (
    AnnotationTrack,
    ScoreMap,
    evaluate,
    export_curves,
    format_annotations,
    frame_ground_truth,
    frame_scores,
    localization_hit_rate,
    parse_annotations,
    read_curves,
    read_scores,
    roc_auc,
    write_annotations,
    write_scores,
)


def pairwise_auc(scores, labels):
    """O(P*N) Mann-Whitney count with half credit for ties."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------- annotations


def _ann(tmp_path, text):
    p = tmp_path / "ann.txt"
    p.write_text(text)
    return p


def test_single_interval(tmp_path):
    (t,) = parse_annotations(_ann(tmp_path, "T Arrest001 120 300\n"))
    assert t.video_id == "Arrest001" and t.intervals == [(120, 300)] and t.boxes == []


def test_overlapping_intervals_merge(tmp_path):
    (t,) = parse_annotations(_ann(tmp_path, "T v 10 20\nT v 15 30\nT v 40 50\n"))
    assert t.intervals == [(10, 30), (40, 50)]


@pytest.mark.parametrize("text", [
    "T v 30 20\n", "T v 20 20\n", "T v 1\n", "X v 1 2\n", "T v a 2\n",
    "B v 0 10 10 5 20\n", "B v 0 0 0 10\n", "B v 0 -1 0 10 10\n",
])
def test_malformed_annotations(tmp_path, text):
    with pytest.raises(AnnotationError, match=":1:"):
        parse_annotations(_ann(tmp_path, text))


def test_box_beyond_frame(tmp_path):
    with pytest.raises(AnnotationError):
        parse_annotations(_ann(tmp_path, "B v 0 0 0 300 10\n"), frame_size=224)


def test_annotation_round_trip(tmp_path):
    tracks = [AnnotationTrack("a", [(0, 64), (128, 192)], [(3, 0, 0, 32, 32), (3, 32, 0, 64, 32)]),
              AnnotationTrack("b", [(5, 9)], [])]
    p = tmp_path / "a.txt"
    write_annotations(tracks, p)
    back = parse_annotations(p)
    assert back == tracks
    assert format_annotations(back) == p.read_text()


# ---------------------------------------------------------------- frame expansion


def test_frame_scores_single_segment():
    fs = frame_scores(ScoreMap("v", {0: np.full(49, 0.7, np.float32)}))
    assert fs.shape == (64,) and np.all(fs == np.float32(0.7))


def test_frame_scores_step():
    sm = ScoreMap("v", {0: np.full(49, 0.1, np.float32), 1: np.full(49, 0.9, np.float32)})
    fs = frame_scores(sm)
    assert np.all(fs[:64] == np.float32(0.1)) and np.all(fs[64:] == np.float32(0.9))


def test_frame_scores_match_loop_and_segment_recovery():
    rng = np.random.default_rng(0)
    segs = {i: rng.random(49).astype(np.float32) for i in range(7)}
    fs = frame_scores(ScoreMap("v", segs))
    assert fs.size == 7 * 64
    for f in range(fs.size):
        assert fs[f] == segs[f // 64].max()


def test_frame_scores_trailing_frames():
    sm = ScoreMap("v", {0: np.full(4, 0.2), 1: np.full(4, 0.6)})
    fs = frame_scores(sm, 64, n_frames=150)
    assert fs.size == 150 and np.all(fs[128:] == 0.6)


def test_frame_scores_missing_segment():
    with pytest.raises(FormatError, match="missing segment"):
        frame_scores(ScoreMap("v", {0: np.zeros(4), 2: np.zeros(4)}))


def test_ground_truth_cases():
    assert not frame_ground_truth(AnnotationTrack("v"), 30).any()
    assert not frame_ground_truth(None, 30).any()
    assert frame_ground_truth(AnnotationTrack("v", [(0, 30)]), 30).all()
    gt = frame_ground_truth(AnnotationTrack("v", [(10, 20), (30, 40)]), 50)
    assert gt.sum() == 20
    for f in range(50):
        assert gt[f] == int(10 <= f < 20 or 30 <= f < 40)


def test_ground_truth_clips_with_warning():
    with pytest.warns(UserWarning, match="clipped"):
        gt = frame_ground_truth(AnnotationTrack("v", [(40, 80)]), 64)
    assert gt.sum() == 24


# ---------------------------------------------------------------- ROC / AUC


def test_auc_perfect_and_constant():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).auc == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]).auc == 0.0
    assert roc_auc(np.full(10, 0.3), [0, 1] * 5).auc == 0.5


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(1)
    s = rng.random(200)
    y = rng.integers(0, 2, 200)
    assert abs(roc_auc(s, y).auc - pairwise_auc(s, y)) < 1e-12


def test_auc_single_class_rejected():
    with pytest.raises(ValueError, match="both classes"):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2, 0.3], [0, 1])


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.booleans()), min_size=2, max_size=120))
def test_roc_properties(rows):
    s = np.array([r[0] / 8 for r in rows])
    y = np.array([r[1] for r in rows], dtype=int)
    if y.all() or not y.any():
        return
    c = roc_auc(s, y)
    assert abs(c.auc - pairwise_auc(s, y)) < 1e-12
    assert (c.fpr[0], c.tpr[0]) == (0, 0) and (c.fpr[-1], c.tpr[-1]) == (1, 1)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    # Strictly increasing transforms leave the AUC unchanged.
    assert roc_auc(np.exp(3 * s) - 7, y).auc == c.auc
    # Reversing the ranking complements it (ties stay ties).
    assert abs(roc_auc(-s, y).auc - (1 - c.auc)) < 1e-12


# ---------------------------------------------------------------- localization


def test_hit_when_region_equals_box():
    sm = ScoreMap("v", {0: np.eye(49)[10]})  # argmax cell 10 = (1, 3)
    tr = AnnotationTrack("v", [(0, 64)], [(5, 96, 32, 128, 64)])
    assert localization_hit_rate([sm], [tr]) == 1.0


def test_far_box_misses():
    sm = ScoreMap("v", {0: np.eye(49)[48]})  # cell (6, 6): (192, 192, 224, 224)
    tr = AnnotationTrack("v", [(0, 64)], [(0, 0, 0, 10, 10)])
    assert localization_hit_rate([sm], [tr]) == 0.0


def test_touching_edges_do_not_intersect():
    sm = ScoreMap("v", {0: np.eye(49)[1]})  # (32, 0, 64, 32)
    tr = AnnotationTrack("v", [(0, 64)], [(0, 0, 0, 32, 32)])
    assert localization_hit_rate([sm], [tr]) == 0.0


def test_hit_rate_counts_frames():
    sm = ScoreMap("v", {0: np.eye(49)[0], 1: np.eye(49)[48]})
    boxes = [(f, 0, 0, 32, 32) for f in range(0, 128, 16)]
    assert localization_hit_rate({"v": sm}, {"v": AnnotationTrack("v", [(0, 128)], boxes)}) == 0.5


def test_hit_rate_without_boxes():
    with pytest.raises(ValueError):
        localization_hit_rate([ScoreMap("v", {0: np.zeros(49)})], [AnnotationTrack("v", [(0, 64)])])


# ---------------------------------------------------------------- files


def test_score_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    sm = ScoreMap("vid", {i: rng.random(49).astype(np.float32) for i in range(3)})
    sm.segments[1][4] = np.float32(1.0)
    sm.segments[2][0] = np.nextafter(np.float32(0), np.float32(1))
    p = tmp_path / "vid.scores"
    write_scores(sm, p)
    lines = p.read_text().splitlines()
    assert len(lines) == 3 and all(len(line.split()) == 50 for line in lines)
    back = read_scores(p, n_cells=49)
    assert back.video_id == "vid"
    for i in range(3):
        assert back.segments[i].tobytes() == sm.segments[i].tobytes()


@pytest.mark.parametrize("text", ["0 0.5 x\n", "0 1.5\n", "0 0.5\n0 0.5\n", "-1 0.5\n"])
def test_score_file_errors(tmp_path, text):
    p = tmp_path / "v.scores"
    p.write_text(text)
    with pytest.raises(FormatError):
        read_scores(p)


def test_score_file_wrong_width(tmp_path):
    p = tmp_path / "v.scores"
    p.write_text("0 0.5 0.5\n")
    with pytest.raises(FormatError, match="expected 49"):
        read_scores(p, n_cells=49)


def test_curve_export(tmp_path):
    rng = np.random.default_rng(3)
    sm = ScoreMap("v", {0: rng.random(49).astype(np.float32), 1: rng.random(49).astype(np.float32)})
    tr = AnnotationTrack("v", [(50, 100)])
    p = tmp_path / "v.csv"
    export_curves(sm, tr, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "frame,ground_truth,score" and len(lines) == 129
    frames, gt, sc = read_curves(p)
    assert np.array_equal(frames, np.arange(128))
    assert np.array_equal(gt, frame_ground_truth(tr, 128))
    np.testing.assert_allclose(sc, frame_scores(sm), rtol=5e-6)
    # Values already at 6 significant digits survive a second pass unchanged.
    sm6 = ScoreMap("v", {0: np.array([0.123456, 0.5]), 1: np.array([0.25, 0.999999])})
    export_curves(sm6, None, p)
    _, _, sc6 = read_curves(p)
    assert np.array_equal(sc6, frame_scores(sm6))


def test_curve_file_without_header(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("0,0,0.5\n")
    with pytest.raises(FormatError):
        read_curves(p)


def test_evaluate_oracle_and_constant_predictions():
    tracks = {"a": AnnotationTrack("a", [(64, 192)])}
    oracle = {"a": ScoreMap("a", {0: np.zeros(49), 1: np.ones(49), 2: np.ones(49), 3: np.zeros(49)}),
              "n": ScoreMap("n", {0: np.zeros(49), 1: np.zeros(49)})}
    assert evaluate(oracle, tracks).auc == 1.0
    const = {k: ScoreMap(k, {i: np.full(49, 0.5) for i in v.segments}) for k, v in oracle.items()}
    assert evaluate(const, tracks).auc == 0.5


def test_evaluate_requires_shared_ids():
    with pytest.raises(FormatError):
        evaluate({"a": ScoreMap("a", {0: np.zeros(49)})}, {"b": AnnotationTrack("b", [(0, 64)])})


def test_evaluate_with_boxes_reports_hit_rate():
    geom = GridGeometry()
    tracks = {"a": AnnotationTrack("a", [(0, 64)], [(f, 0, 0, 32, 32) for f in range(64)])}
    maps = {"a": ScoreMap("a", {0: np.eye(49)[0], 1: np.zeros(49)})}
    r = evaluate(maps, tracks, geom)
    assert r.auc == 1.0 and r.hit_rate == 1.0 and r.n_frames == 128
