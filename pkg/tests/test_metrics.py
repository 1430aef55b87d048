"""Similarities, matching, 101-point AP and the dual-protocol report."""

import itertools
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinydet import metrics as mt
from tinydet.boxes import iou
from tinydet.core import ConfigError
from tinydet.metrics import Detection, GroundTruth

import reference_evaluator

DATA = Path(__file__).parent / "data"


def rand_box(rng, lo=1.0, hi=12.0):
    x, y = rng.uniform(0, 50, 2)
    w, h = rng.uniform(lo, hi, 2)
    return np.array([x, y, x + w, y + h])


def exhaustive_match(sim, threshold):
    """Enumerate every partial one-to-one assignment and keep the one a
    score-ordered claimant sequence prefers: earlier detections first take
    the highest similarity, then the lower GT index."""
    n_det, n_gt = sim.shape
    best_key, best = None, None
    options = [[-1] + [j for j in range(n_gt) if sim[i, j] >= threshold] for i in range(n_det)]
    for assign in itertools.product(*options):
        used = [j for j in assign if j >= 0]
        if len(used) != len(set(used)):
            continue
        # an unclaimed GT that the detection could still take makes the option dominated
        key = []
        for i, j in enumerate(assign):
            free = [g for g in range(n_gt) if sim[i, g] >= threshold and g not in assign[:i]]
            if j < 0 and free:
                key = None
                break
            key.append((sim[i, j], -j) if j >= 0 else (-np.inf, 0))
        if key is None:
            continue
        if best_key is None or key > best_key:
            best_key, best = key, assign
    return np.array(best)


class TestNwd:
    def test_closed_forms(self):
        assert mt.nwd((0, 0, 4, 4), (0, 0, 4, 4), 2.0) == 1.0
        assert abs(mt.nwd((0, 0, 2, 2), (3, 0, 5, 2), 3.0) - np.exp(-1)) < 1e-15
        assert abs(mt.nwd((-2, -1, 2, 1), (-1, -1, 1, 1), 1.0) - np.exp(-1)) < 1e-15

    def test_properties_on_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a, b = rand_box(rng), rand_box(rng)
            t = np.tile(rng.uniform(-20, 20, 2), 2)
            C = rng.uniform(1, 10)
            v = mt.nwd(a, b, C)
            assert 0 < v < 1
            assert abs(v - mt.nwd(b, a, C)) <= 1e-12
            assert abs(v - mt.nwd(a + t, b + t, C)) <= 1e-12
            assert mt.nwd(a, a, C) == 1.0

    def test_nonpositive_c(self):
        with pytest.raises(ConfigError):
            mt.nwd((0, 0, 1, 1), (0, 0, 1, 1), 0)


class TestSafit:
    def test_midpoint(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rand_box(rng), rand_box(rng)
            C = float(np.sqrt((b[2] - b[0]) * (b[3] - b[1])))
            expect = (iou(a, b) + mt.nwd(a, b, C)) / 2
            assert abs(mt.safit(a, b, C) - expect) <= 1e-12

    def test_identical_is_one(self):
        for A in (0.01, 1.0, 1e6):
            assert mt.safit((1, 1, 5, 4), (1, 1, 5, 4), 3.0, A) == pytest.approx(1.0, abs=1e-15)

    def test_limits(self):
        a, b, C = (0, 0, 4, 4), (1, 0, 5, 4), 2.0
        assert mt.safit(a, b, C, A=1e8) == pytest.approx(iou(a, b), abs=1e-12)
        w0 = 1 / (1 + np.e)
        assert mt.safit_weight(0.0, C) == pytest.approx(w0, abs=1e-15)
        tiny = mt.safit(a, b, C, A=0.0)
        assert tiny == pytest.approx(w0 * iou(a, b) + (1 - w0) * mt.nwd(a, b, C), abs=1e-15)

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            a, b = rand_box(rng), rand_box(rng)
            C, s = rng.uniform(1, 8), rng.uniform(0.1, 10)
            assert abs(mt.safit(a * s, b * s, C * s) - mt.safit(a, b, C)) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 400), st.floats(0.5, 20))
    def test_monotone_in_components(self, i1, i2, n, A, C):
        w = mt.safit_weight(A, C)
        lo, hi = sorted((i1, i2))
        assert w * lo + (1 - w) * n <= w * hi + (1 - w) * n


class TestMatching:
    def test_single_tp(self):
        tp, hit = mt.match_detections([Detection((0, 0, 4, 4), 0.9)], [GroundTruth((0, 0, 4, 4))])
        assert tp.tolist() == [True] and hit.tolist() == [True]

    def test_duplicate_is_fp(self):
        dets = [Detection((0, 0, 4, 4), 0.5), Detection((0, 0, 4, 4), 0.9)]
        tp, _ = mt.match_detections(dets, [GroundTruth((0, 0, 4, 4))])
        assert tp.tolist() == [False, True]

    def test_crafted_scene_against_exhaustive_oracle(self):
        gts = [(0, 0, 10, 10), (6, 0, 16, 10)]
        dets = [(3, 0, 13, 10), (0, 0, 10, 10), (6, 0, 16, 10)]  # descending score
        sim = np.asarray(iou(np.array(dets)[:, None], np.array(gts)[None]))
        m, _ = mt.greedy_match(sim, 0.5)
        np.testing.assert_array_equal(m, exhaustive_match(sim, 0.5))
        # the first detection steals GT 0 on a tie, so the second finds nothing
        assert m.tolist() == [0, -1, 1]

    @settings(max_examples=80, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31 - 1), st.booleans())
    def test_random_against_exhaustive_oracle(self, n_det, n_gt, seed, quantise):
        rng = np.random.default_rng(seed)
        sim = rng.uniform(0, 1, (n_det, n_gt))
        if quantise:
            sim = np.round(sim * 4) / 4  # force ties
        np.testing.assert_array_equal(mt.greedy_match(sim, 0.5)[0], exhaustive_match(sim, 0.5))

    @pytest.mark.parametrize("t", [0.0, -0.1, 1.5])
    def test_threshold_range(self, t):
        with pytest.raises(ConfigError):
            mt.match_detections([], [], threshold=t)


class TestAveragePrecision:
    def test_trivial(self):
        assert mt.average_precision([True], 1) == 1.0
        assert mt.average_precision([False, False], 3) == 0.0

    def test_staircase(self):
        # recall 0.5 at precision 1, then recall 1 at precision 2/3
        expect = sum(1.0 if i <= 50 else 2 / 3 for i in range(101)) / 101
        got = mt.average_precision([True, False, True], 2)
        assert abs(got - expect) < 1e-15
        assert abs(got - 0.83498) < 1e-5

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            flags = rng.random(rng.integers(1, 30)) < 0.6
            n_gt = int(flags.sum() + rng.integers(0, 4)) or 1
            assert abs(mt.average_precision(flags, n_gt)
                       - reference_evaluator.interpolated_ap(flags.tolist(), n_gt)) < 1e-12

    def test_flip_tp_to_fp_never_helps(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            flags = rng.random(12) < 0.6
            if not flags.any():
                continue
            ap = mt.average_precision(flags, 10)
            k = rng.choice(np.flatnonzero(flags))
            worse = flags.copy()
            worse[k] = False
            assert mt.average_precision(worse, 10) <= ap


def random_scene(rng, n_images=4):
    gts, dets = [], []
    for im in range(n_images):
        for _ in range(rng.integers(1, 4)):
            g = rand_box(rng, 2, 8)
            gts.append(GroundTruth(tuple(g), 0, im))
            for _ in range(rng.integers(0, 3)):
                d = g + rng.normal(0, 1.0, 4)
                d[2:] = np.maximum(d[2:], d[:2] + 0.5)
                dets.append(Detection(tuple(d), float(rng.uniform()), 0, im))
        for _ in range(rng.integers(0, 2)):
            dets.append(Detection(tuple(rand_box(rng)), float(rng.uniform()), 0, im))
    return dets, gts


class TestEvaluate:
    def test_empty_detections(self):
        rep = mt.evaluate([], [GroundTruth((0, 0, 3, 3))])
        for p in ("iou", "safit"):
            assert (rep[p].AP, rep[p].AP50, rep[p].AP75) == (0.0, 0.0, 0.0)

    def test_perfect_detections(self):
        rng = np.random.default_rng(5)
        gts = [GroundTruth(tuple(rand_box(rng)), int(c), int(i))
               for i in range(3) for c in rng.integers(0, 2, 3)]
        dets = [Detection(g.box, 1.0, g.class_id, g.image_id) for g in gts]
        rep = mt.evaluate(dets, gts, "both")
        for p in ("iou", "safit"):
            assert (rep[p].AP, rep[p].AP50, rep[p].AP75) == (1.0, 1.0, 1.0)

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            dets, gts = random_scene(rng)
            for proto in ("iou", "safit"):
                aps = [mt.evaluate(dets, gts, proto, thresholds=[t])[proto].AP
                       for t in (0.5, 0.75, 0.9)]
                assert aps[0] >= aps[1] >= aps[2]

    def test_golden_fixture(self):
        gt = json.loads((DATA / "gt.json").read_text())
        dt = json.loads((DATA / "dets.json").read_text())
        golden = json.loads((DATA / "golden_report.json").read_text())
        rep = mt.evaluate(mt.load_detections(dt), mt.load_ground_truth(gt), "both").to_dict()
        assert rep["num_gt"] == golden["num_gt"] and rep["num_dets"] == golden["num_dets"]
        assert abs(rep["C"] - golden["C"]) < 1e-12
        for proto in ("iou", "safit"):
            for key in ("AP", "AP50", "AP75"):
                assert abs(rep[proto][key] - golden[proto][key]) < 1e-6, (proto, key)
            for cls, vals in golden[proto]["per_class"].items():
                for key, v in vals.items():
                    assert abs(rep[proto]["per_class"][cls][key] - v) < 1e-6

    def test_random_scenes_agree_with_reference(self):
        rng = np.random.default_rng(7)
        images = [{"id": i, "width": 64, "height": 64} for i in range(4)]
        for _ in range(10):
            dets, gts = random_scene(rng)
            gt_json = mt.ground_truth_json(gts, images, [{"id": 0, "name": "t"}])
            ref = reference_evaluator.evaluate(gt_json, mt.detections_json(dets))
            rep = mt.evaluate(dets, gts, "both").to_dict()
            for proto in ("iou", "safit"):
                for key in ("AP", "AP50", "AP75"):
                    assert abs(rep[proto][key] - ref[proto][key]) < 1e-9

    def test_json_round_trip(self):
        gts = [GroundTruth((1.0, 2.0, 4.0, 6.0), 1, 3)]
        dets = [Detection((1.5, 2.0, 4.0, 7.0), 0.25, 1, 3)]
        gj = mt.ground_truth_json(gts, [{"id": 3, "width": 8, "height": 8}], [{"id": 1, "name": "x"}])
        assert gj["annotations"][0]["bbox"] == [1.0, 2.0, 3.0, 4.0]
        assert mt.load_ground_truth(gj) == gts
        assert mt.load_detections(mt.detections_json(dets)) == dets
