"""Acceptance checks: one test per criterion, tolerances pinned.

Run with ``pytest -v tests/test_acceptance.py`` for one PASSED/FAILED line each.
"""
import json
import time
from fractions import Fraction

import numpy as np

from kpconsensus import io
from kpconsensus.cli import RunConfig, main
from kpconsensus.consensus import (
    GT_BOX,
    NO_GT_BOX,
    PRESETS,
    KeypointObservation,
    filter_inliers,
    medoid,
    modified_z_scores,
)
from kpconsensus.geometry import Point, Rect, containment_fraction, iou
from kpconsensus.metrics import evaluate
from kpconsensus.partbox import ScoredBox, whole_body_box
from kpconsensus.records import ImageAnnotation, Keypoint
from kpconsensus.simulator import bimodal_trials, robustness_trials
from kpconsensus.training_prep import flip_example, loss_gradients, loss_net, make_targets

import metric_fixture
from oracles import brute_medoid

TOY = io.toy_cub_root()


def random_sets(n_sets, seed, max_size=50):
    rng = np.random.default_rng(seed)
    for i in range(n_sets):
        n = int(rng.integers(1, max_size + 1))
        if i % 4 == 0:
            # small integer grid: duplicates and exact distance-sum ties
            yield rng.integers(0, 4, size=(n, 2)).astype(float)
        else:
            yield rng.normal(0, rng.uniform(1, 100), size=(n, 2)) + rng.uniform(-500, 500, 2)


def test_01_medoid_matches_brute_force():
    sets = list(random_sets(1000, seed=1))
    t0 = time.perf_counter()
    got = [medoid(s)[0] for s in sets]
    elapsed = time.perf_counter() - t0
    expected = [brute_medoid([tuple(p) for p in s]) for s in sets]
    assert got == expected
    assert elapsed < 5.0


def test_02_planted_outlier_removed():
    rng = np.random.default_rng(2)
    trials = removed = 0
    while trials < 500:
        n = int(rng.integers(5, 50))
        pts = rng.normal(0, rng.uniform(1, 20), size=(n, 2))
        direction = rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        m = np.array(medoid(pts)[1])
        mad = np.median(np.linalg.norm(pts - m, axis=1))
        allpts = np.vstack([pts, m + direction * mad * rng.uniform(10, 50)])
        # planting can move the medoid; keep only sets where the planted point
        # sits at >= 10x the full set's MAD from the full set's medoid
        m2 = np.array(medoid(allpts)[1])
        d = np.linalg.norm(allpts - m2, axis=1)
        if d[-1] < 10 * np.median(d):
            continue
        trials += 1
        obs = [KeypointObservation(Point(*p), 1.0, i) for i, p in enumerate(allpts)]
        removed += all(o.source_box_id != n for o in filter_inliers(obs, GT_BOX))
    assert removed == 500


def test_03_z_scores_scale_invariant():
    for s in random_sets(300, seed=3):
        base = modified_z_scores(s)
        for factor in (1e-3, 1.0, 1e3):
            z = modified_z_scores(s * factor)
            finite = np.isfinite(base)
            assert np.array_equal(finite, np.isfinite(z))
            np.testing.assert_allclose(z[finite], base[finite], rtol=1e-9, atol=0)


def test_04_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    h = 1e-5
    for _ in range(100):
        n = int(rng.integers(1, 16))
        v = rng.integers(0, 2, n).astype(float)
        v_hat = rng.uniform(size=n)
        l = rng.uniform(size=(n, 2))
        l[v == 0] = np.nan
        l_hat = rng.uniform(-0.5, 1.5, size=(n, 2))
        g_v, g_l = loss_gradients(v, v_hat, l, l_hat)

        fd_v = np.zeros(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            fd_v[i] = (loss_net(v, v_hat + e, l, l_hat) - loss_net(v, v_hat - e, l, l_hat)) / (2 * h)
        fd_l = np.zeros((n, 2))
        for i in range(n):
            for j in range(2):
                e = np.zeros((n, 2))
                e[i, j] = h
                fd_l[i, j] = (loss_net(v, v_hat, l, l_hat + e) - loss_net(v, v_hat, l, l_hat - e)) / (2 * h)

        for g, fd in ((g_v, fd_v), (g_l, fd_l)):
            scale = max(np.abs(g).max(), np.abs(fd).max(), 1e-12)
            assert np.abs(g - fd).max() / scale <= 1e-4
        assert (g_l[v == 0] == 0.0).all()


def test_05_flip_is_an_involution():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        width = float(rng.uniform(100, 1000))
        kps = []
        for _ in range(15):
            if rng.random() < 0.7:
                kps.append(Keypoint(float(rng.uniform(0, width)), float(rng.uniform(0, 500)), True))
            else:
                kps.append(Keypoint(0.0, 0.0, False))
        x, y = rng.uniform(0, width - 10), rng.uniform(0, 490)
        box = Rect(x, y, rng.uniform(5, width - x), rng.uniform(5, 500 - y))
        ann = ImageAnnotation("1", kps, box, width, 500.0)
        ex = make_targets(box, ann)
        twice = flip_example(flip_example(ex, width), width)
        assert np.array_equal(twice.targets_v, ex.targets_v)
        vis = ex.targets_v == 1
        assert np.abs(twice.targets_l[vis] - ex.targets_l[vis]).max(initial=0.0) <= 1e-12
        assert np.isnan(twice.targets_l[~vis]).all()


def test_06_robust_consensus_superiority():
    med, mean = robustness_trials(1000)
    assert np.nanmedian(med) < np.nanmedian(mean)
    ms, md = bimodal_trials(1000, contamination=0.3)
    ok = ~np.isnan(ms)
    assert np.mean(ms[ok] <= md[ok]) >= 0.90


# seeded regression targets for the packaged synthetic sweep (default config, seed 0)
SWEEP_TARGET = [
    (600, 1.0, 1.0, 1.0),
    (300, 1.0, 1.0, 1.0),
    (100, 1.0, 1.0, 1.0),
    (50, 1.0, 1.0, 0.975),
]


def test_07_box_count_sweep_trend(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "sweep.csv")]) == 0
    lines = [l for l in (tmp_path / "sweep.csv").read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "box_count,head_acc,torso_acc,body_acc"
    rows = [tuple(float(x) for x in l.split(",")) for l in lines[1:]]
    by_count = {int(r[0]): r for r in rows}
    assert sorted(by_count) == [50, 100, 300, 600]
    for col in (1, 2):  # head, torso
        assert by_count[50][col] >= 0.85 * by_count[600][col]
    assert [(int(r[0]), *r[1:]) for r in rows] == SWEEP_TARGET


def test_08_metric_exactness():
    preds, gts, head_pred, head_gt = metric_fixture.build()
    rep = evaluate(preds, gts, metric_fixture.STD,
                   part_boxes=[{"head": b} for b in head_pred], gt_boxes=[{"head": b} for b in head_gt])
    e = metric_fixture.EXPECTED
    assert rep.pcp_total.exact == e["pcp"]
    assert Fraction(rep.ae.total) / rep.ae.count == e["ae"]
    assert rep.fvr.exact == e["fvr"]
    assert rep.fir.exact == e["fir"]
    assert rep.part_acc["head"].exact == e["head_acc"]
    # the boundary cells themselves
    assert rep.pcp_per_keypoint["beak"].exact == Fraction(2, 2)  # exactly 1.5 sigma counts
    assert iou(head_pred[1], head_gt[1]) == 0.5  # and this one counts as a failure


def test_09_whole_body_heuristic():
    seed = Rect(10, 10, 20, 20)
    assert whole_body_box(seed, None, []) == seed
    assert whole_body_box(seed, None, [ScoredBox(Rect(100, 100, 5, 5), 0.9)]) == seed
    hi, lo = Rect(8, 8, 26, 26), Rect(9, 9, 23, 23)
    assert whole_body_box(seed, None, [ScoredBox(lo, 0.3), ScoredBox(hi, 0.7)]) == hi

    s = Rect(0, 0, 10, 10)
    at_containment, below_containment = Rect(1, 0, 10, 10), Rect(1.5, 0, 10, 10)
    at_iou, below_iou = Rect(0, 0, 20, 10), Rect(0, 0, 20.5, 10)
    assert containment_fraction(s, at_containment) == 0.9 and iou(s, at_iou) == 0.5
    assert whole_body_box(s, None, [ScoredBox(at_containment, 1.0)]) == at_containment
    assert whole_body_box(s, None, [ScoredBox(below_containment, 1.0)]) == s
    assert whole_body_box(s, None, [ScoredBox(at_iou, 1.0)]) == at_iou
    assert whole_body_box(s, None, [ScoredBox(below_iou, 1.0)]) == s


def test_10_cli_outputs_are_byte_identical(tmp_path):
    ann, pred, prop, std = str(TOY), str(TOY / "predictions.jsonl"), str(TOY / "proposals.jsonl"), str(
        TOY / "annotator_std.txt")
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"simulate": {"n_images": 6, "n_proposals": 300, "box_counts": [300, 100, 50]}}))
    commands = {
        "consensus": ["consensus", "--predictions", pred],
        "consensus-gt": ["consensus", "--predictions", pred, "--annotations", ann, "--method", "medoid-shift"],
        "partbox": ["partbox", "--consensus", "{consensus}", "--proposals", prop],
        "evaluate": ["evaluate", "--consensus", "{consensus}", "--annotations", ann, "--std", std,
                     "--proposals", prop],
        "prepare": ["prepare", "--annotations", ann, "--proposals", prop],
        "simulate": ["simulate", "--config", str(cfg)],
    }
    outputs = {}
    for run_id, threads in (("a", 1), ("b", 1), ("c", 8)):
        for name, argv in commands.items():
            out = tmp_path / f"{name}-{run_id}.out"
            argv = [a.replace("{consensus}", str(tmp_path / f"consensus-{run_id}.out")) for a in argv]
            assert main(argv + ["--threads", str(threads), "--out", str(out)]) == 0
            outputs.setdefault(name, []).append(out.read_bytes())
    for name, blobs in outputs.items():
        assert blobs[0] == blobs[1] == blobs[2], name


def test_11_preset_constants():
    assert (PRESETS["gt-box"].visibility_threshold, PRESETS["gt-box"].z_threshold) == (0.6, 0.35)
    assert (PRESETS["no-gt-box"].visibility_threshold, PRESETS["no-gt-box"].z_threshold) == (0.94, 0.3)
    assert PRESETS["gt-box"] is GT_BOX and PRESETS["no-gt-box"] is NO_GT_BOX
    for has_gt, expected in ((True, (0.6, 0.35)), (False, (0.94, 0.3))):
        dumped = json.loads(io.dumps(RunConfig().resolved(has_gt)))
        assert (dumped["visibility_threshold"], dumped["z_threshold"]) == expected
    for preset, expected in (("gt-box", (0.6, 0.35)), ("no-gt-box", (0.94, 0.3))):
        dumped = json.loads(io.dumps(RunConfig(preset=preset).resolved(True)))
        assert (dumped["preset"], dumped["visibility_threshold"], dumped["z_threshold"]) == (preset, *expected)
