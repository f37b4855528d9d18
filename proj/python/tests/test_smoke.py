import csv
import io
import math

import pytest

import tstmle

SMALL = {"j": 16, "n_mean": 50, "truth_clusters": 1000}


def test_simulate_is_deterministic_and_well_formed():
    a = tstmle.simulate(SMALL, seed=3)
    assert a == tstmle.simulate(SMALL, seed=3)
    assert a != tstmle.simulate(SMALL, seed=3, rep=1)
    rows = list(csv.DictReader(io.StringIO(a)))
    assert len({r["cluster_id"] for r in rows}) == 16


def test_truth():
    t = tstmle.truth(SMALL, seed=1)
    assert math.isfinite(t["psi_star"])
    assert t["clusters_used"] + t["clusters_dropped"] == 1000
    assert t["psi_star"] == pytest.approx(t["yc1_mean"] - t["yc0_mean"])


def test_analyze_standard_estimators():
    data = tstmle.simulate(SMALL, seed=5)
    for est in tstmle.standard_estimators():
        r = tstmle.analyze(data, est, seed=1)
        assert r["ci_lo"] <= r["psi"] <= r["ci_hi"]
        assert r["df"] == 14
    r = tstmle.analyze(data, {"stage1": "tmle", "stage2": "tmle-aps"}, seed=1)
    assert r == tstmle.analyze(data, {"stage1": "tmle", "stage2": "tmle-aps"}, seed=1)
    assert "selection" in r


def test_analyze_rejects_bad_input():
    with pytest.raises(ValueError):
        tstmle.analyze("cluster_id,a\n", {})
    with pytest.raises(Exception):
        tstmle.analyze(tstmle.simulate(SMALL), {"stage1": "mars"})


def test_endpoint_unadjusted_ratio():
    # 4 of 6 measured, 2 in the target population, 1 of them with the outcome
    w1 = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
    w2 = [True, False, True, False, True, False]
    w3 = [False] * 6
    delta = [True, True, True, True, False, False]
    y1 = [True, True, False, False, False, False]
    y2 = [True, False, False, False, False, False]
    e = tstmle.endpoint("unadjusted", w1, w2, w3, delta, y1, y2)
    assert e["estimate"] == pytest.approx((1 / 6) / ((2 / 6) / (4 / 6)))
    s = tstmle.endpoint("screened", w1, w2, w3, delta, y1, y2)
    assert s["estimate"] == pytest.approx(1 / 4)
    with pytest.raises(ValueError):
        tstmle.endpoint("unadjusted", w1, w2, w3, delta, [False] * 6, [False] * 6)


def test_summary_csv():
    text = tstmle.summary(SMALL, reps=2, seed=1)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert [r["estimator"] for r in rows] == [e["name"] for e in tstmle.standard_estimators()]


def test_endpoint_tmle_runs_and_checks_rows():
    w1 = [i / 40 for i in range(40)]
    w2 = [i % 2 == 0 for i in range(40)]
    w3 = [i % 3 == 0 for i in range(40)]
    delta = [i % 4 != 0 for i in range(40)]
    y1 = [d and i % 5 < 3 for i, d in enumerate(delta)]
    y2 = [y and i % 2 == 0 for i, y in enumerate(y1)]
    e = tstmle.endpoint("tmle", w1, w2, w3, delta, y1, y2, seed=2)
    assert 0 <= e["estimate"] <= 1
    assert e["epsilon"] is not None
    with pytest.raises(ValueError):
        tstmle.endpoint("unadjusted", w1, w2, w3, [False] * 40, y1, y2)
