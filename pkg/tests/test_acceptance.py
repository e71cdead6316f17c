"""Acceptance criteria 1-11, each at its stated tolerance.

Criteria 6-11 share one default ensemble run (and a same-seed repeat for 11);
the whole module takes roughly 17 minutes on one core.
"""

import math
import time

import numpy as np
import pytest

from conftest import record_acceptance
from oracles import (consensus_by_enumeration, depth_by_enumeration, entropy_by_enumeration, flip_distance,
                     knn_scan)
from test_margins import affine, hyperplane_distance
from test_mlp import activation_pattern, numeric_grad, random_net
from pdepth import analysis, store
from pdepth.data import gaussian_blobs, make_split
from pdepth.depth import iteration_learned, prediction_depth
from pdepth.ensemble import consensus_class, consensus_consistency, consistency_score, prediction_entropy
from pdepth.experiment import EnsembleConfig, run_ensemble
from pdepth.intervention import InterventionConfig, run_intervention
from pdepth.knn import build_probe, classify_batch
from pdepth.margins import input_margin
from pdepth.mlp import TrainConfig, backward, init_model, predict, train


@pytest.fixture(scope="module")
def default_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    timings = {}
    for name in ("a", "b"):
        t0 = time.perf_counter()
        run_ensemble(EnsembleConfig(), root / name)
        timings[name] = time.perf_counter() - t0
    return root / "a", root / "b", timings


class TestDefinitionalOracles:
    def test_criterion_1(self):
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        mismatches = 0
        branches = {"truth": 0, "lowest": 0}
        for _ in range(250):
            models, points, classes = rng.integers(1, 11), rng.integers(1, 51), rng.integers(2, 5)
            layers, steps = rng.integers(1, 6), rng.integers(1, 8)
            preds = rng.integers(0, classes, size=(models, points))
            truth = rng.integers(0, classes, size=points)
            for i in range(points):
                col = preds[:, i].tolist()
                cons = consensus_class(col, truth[i])
                mismatches += cons != consensus_by_enumeration(col, int(truth[i]))
                counts = np.bincount(col, minlength=classes)
                if (counts == counts.max()).sum() > 1:
                    branches["truth" if counts[truth[i]] == counts.max() else "lowest"] += 1
                mismatches += consistency_score(col, truth[i]) != sum(c == truth[i] for c in col) / models
                mismatches += consensus_consistency(col, cons) != sum(c == cons for c in col) / models
                mismatches += not math.isclose(prediction_entropy(col, classes), entropy_by_enumeration(col),
                                               rel_tol=0, abs_tol=1e-12)
            for m in range(models):
                for i in range(points):
                    final = int(preds[m, i])
                    probes = rng.integers(0, classes, size=layers + 1).tolist()
                    if rng.random() < 0.5:
                        probes[-1] = final
                    got = prediction_depth(probes, final).depth
                    mismatches += got != depth_by_enumeration(probes, final)
                    ckpts = rng.integers(0, classes, size=steps).tolist() + [final]
                    mismatches += iteration_learned(ckpts, final) != depth_by_enumeration(ckpts, final)
        elapsed = time.perf_counter() - t0
        ok = mismatches == 0 and elapsed < 5 and min(branches.values()) > 0
        assert record_acceptance(1, ok, f"250 ensembles, {mismatches} mismatches, tie branches {branches}, "
                                        f"{elapsed:.2f}s (< 5s)")


class TestKnnExactness:
    def test_criterion_2(self):
        rng = np.random.default_rng(99)
        refs = rng.normal(size=(1000, 16))
        refs[500:510] = refs[0]  # exact duplicates exercise index tie-breaks
        labels = rng.integers(0, 10, size=1000)
        queries = np.vstack([rng.normal(size=(90, 16)), refs[:10]])
        t0 = time.perf_counter()
        checked = mismatches = 0
        for k in (1, 3, 30):
            probe = build_probe(refs, labels, k=k, num_classes=10)
            for exclude in (None, np.arange(100)):
                pred, frac = classify_batch(probe, queries, exclude)
                for q in range(100):
                    want, want_frac, _ = knn_scan(refs, labels, queries[q], k,
                                                  None if exclude is None else q, 10)
                    mismatches += pred[q] != want or not np.allclose(frac[q], want_frac, rtol=0, atol=0)
                    checked += 1
        elapsed = time.perf_counter() - t0
        ok = mismatches == 0 and elapsed < 5
        assert record_acceptance(2, ok, f"{checked} queries (k in 1,3,30; include and exclude), "
                                        f"{mismatches} mismatches, {elapsed:.2f}s (< 5s)")


class TestGradients:
    def test_criterion_3(self):
        rng = np.random.default_rng(3)
        worst, checked, skipped, nets = 0.0, 0, 0, 0
        for loss in ("cross_entropy", "zero_hinge"):
            for _ in range(20):
                m = random_net(rng, (3, 6, 5, 3), dtype=np.float32)
                x = rng.normal(size=(4, 3)).astype(np.float32)
                y = rng.integers(0, 3, size=4)
                _, gw, gb = backward(m, x, y, loss)
                ref, x64 = m.astype(np.float64), x.astype(np.float64)
                for p, g in zip(ref.parameters(), [v for pair in zip(gw, gb) for v in pair]):
                    num, kink = numeric_grad(lambda: backward(ref, x64, y, loss)[0], p, 1e-3,
                                             lambda: activation_pattern(ref, x64, y, loss))
                    keep = ~kink
                    err = np.abs(g[keep] - num[keep]) - 1e-3 * np.abs(num[keep])
                    worst = max(worst, float(err.max(initial=-np.inf)) if keep.any() else worst)
                    checked += int(keep.sum())
                    skipped += int(kink.sum())
                nets += 1
        flat_ok = True
        for _ in range(20):
            m = random_net(rng, (3, 6, 3), dtype=np.float32)
            x = rng.normal(size=(8, 3)).astype(np.float32)
            value, gw, gb = backward(m, x, predict(m, x), "zero_hinge")
            flat_ok &= value == 0.0 and all(np.all(g == 0) for g in gw + gb)
        ok = worst <= 1e-5 and flat_ok and checked > 20 * skipped
        assert record_acceptance(3, ok, f"{nets} nets, {checked} coordinates checked at rtol 1e-3 "
                                        f"({skipped} kink-crossing skipped), hinge flat region exact: {flat_ok}")


class TestMargins:
    def test_criterion_4(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(60):
            d, c = rng.integers(2, 10), rng.integers(2, 7)
            m = affine(rng, d, c)
            x = rng.normal(size=d)
            want = hyperplane_distance(m.weights[0], m.biases[0], x)
            worst = max(worst, abs(input_margin(m, x).input_margin - want) / want)
        ds = gaussian_blobs(3, 100, 4, 2.0, 1.0, 5)
        model, _, _ = train(init_model((4, 32, 32, 3), 3), ds, make_split(ds.n, 0.0, 0),
                            TrainConfig(total_steps=300, batch_size=64, learning_rate=0.05))
        m64 = model.astype(np.float64)
        within = 0
        for x in ds.examples[np.random.default_rng(1).choice(ds.n, 20, replace=False)].astype(np.float64):
            est = input_margin(m64, x)
            flip = flip_distance(m64, x, est.predicted, est.min_pair_class, step=est.input_margin / 20)
            within += 0.3 <= est.input_margin / flip <= 3
        ok = worst <= 1e-5 and within >= 16
        assert record_acceptance(4, ok, f"affine max rel err {worst:.2e} (<= 1e-5) over 60 models; "
                                        f"{within}/20 trained-net points within [0.3, 3] of flip oracle (>= 16)")


class TestIntervention:
    def test_criterion_5(self, tmp_path):
        t0 = time.perf_counter()
        summary, errors = run_intervention(InterventionConfig(), tmp_path)
        elapsed = time.perf_counter() - t0
        ce, hg = summary["ce_sgd"], summary["hinge_gd"]
        ratio = summary["margin_ratio"]
        later = hg["reach_layer"] > ce["reach_layer"] >= 0 or (hg["reach_layer"] == -1 and ce["reach_layer"] >= 0)
        ok = not errors and ratio <= 1e-2 and later and elapsed <= 600 and store.verify_run(tmp_path).ok
        assert record_acceptance(5, ok, f"margin ratio hinge+GD/CE+SGD {ratio:.2e} (<= 1e-2); reach layer "
                                        f"{hg['reach_layer']} vs {ce['reach_layer']}; {elapsed:.0f}s (<= 600s)")


class TestEnsembleRun:
    def test_criterion_6(self, default_runs):
        run_a, _, timings = default_runs
        rho = analysis.analyze(run_a, "consistency").summary["spearman_pd_tau"]
        ok = rho > 0.3 and timings["a"] <= 900
        assert record_acceptance(6, ok, f"Spearman(mean PD, mean rescaled tau) {rho:.3f} (> 0.3); "
                                        f"run {timings['a']:.0f}s (<= 900s)")

    def test_criterion_7(self, default_runs):
        s = analysis.analyze(default_runs[0], "trend").summary
        ok = s["c_star"] <= -0.5 and s["entropy"] >= 0.5
        assert record_acceptance(7, ok, f"bucket trend C* {s['c_star']:.3f} (<= -0.5), "
                                        f"entropy {s['entropy']:.3f} (>= +0.5)")

    def test_criterion_8(self, default_runs):
        inf = analysis.analyze(default_runs[0], "curves").summary["inference"]
        noisy, orig = inf["noisy_train"], inf["noisy_original"]
        ok = noisy[-1] > orig[-1] and orig[0] > noisy[0]
        assert record_acceptance(8, ok, f"probe L: noisy {noisy[-1]:.3f} vs original {orig[-1]:.3f}; "
                                        f"probe 0: noisy {noisy[0]:.3f} vs original {orig[0]:.3f}")

    def test_criterion_9(self, default_runs):
        s = analysis.analyze(default_runs[0], "corners", count=50).summary["ambiguous_unless_label"]
        gain = s["probe_accuracy"] - s["model_accuracy"]
        ok = s["examples"] == 50 and gain >= 0.2
        assert record_acceptance(9, ok, f"layer {s['layer']} probe {s['probe_accuracy']:.3f} vs model "
                                        f"{s['model_accuracy']:.3f}: gain {gain:+.3f} (>= +0.20)")

    def test_criterion_10(self, default_runs):
        s = analysis.analyze(default_runs[0], "ksweep", ks=(10, 30)).summary
        ok = s["max_delta"] <= 0.02
        assert record_acceptance(10, ok, f"max per-layer |acc(k=10) - acc(k=30)| {s['max_delta']:.4f} (<= 0.02)")

    def test_criterion_11(self, default_runs):
        run_a, run_b, _ = default_runs
        ma, mb = (run_a / "manifest.json").read_bytes(), (run_b / "manifest.json").read_bytes()
        metrics = sorted(p.relative_to(run_a) for p in (run_a / "metrics").glob("*.csv"))
        same = [(run_a / rel).read_bytes() == (run_b / rel).read_bytes() for rel in metrics]
        reports = [store.verify_run(r) for r in (run_a, run_b)]
        ok = ma == mb and all(same) and len(metrics) > 0 and all(r.ok for r in reports)
        assert record_acceptance(11, ok, f"manifests identical: {ma == mb}; {sum(same)}/{len(metrics)} metric "
                                         f"CSVs identical; verify_run ok on both: {all(r.ok for r in reports)}")
