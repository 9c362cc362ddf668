import csv
import json

import numpy as np
import pytest

from mvhmr.ablation import SUITES, ablate, get_suite, run_seed, summarize, worker_count, write_suite_report
from mvhmr.engine import run
from mvhmr.report import METRICS, csv_text, evaluate, fmt, iteration_rows, write_json


def test_evaluate_ground_truth(scenario):
    m = evaluate(scenario, scenario.gt)
    for k in ("mpjpe", "pa_mpjpe", "pve", "mpjpe_abs", "o_err_deg"):
        assert m[k] == pytest.approx(0.0, abs=1e-6)
    assert m["pck"] == 100.0 and m["auc"] == 100.0 and m["scale"] == scenario.gt.scale
    assert set(METRICS) <= set(m)


def test_evaluate_run(scenario):
    state, trace = run(scenario)
    m = evaluate(scenario, state, trace)
    assert m["pa_mpjpe"] <= m["mpjpe"] + 1e-9
    assert len(m["curve_mpjpe"]) == 5 and m["curve_mpjpe"] == trace.mpjpe


def test_formatting():
    assert fmt(True) == "1" and fmt(np.int64(3)) == "3" and fmt(0.1) == "0.100000" and fmt("x") == "x"
    text = csv_text(("a", "b"), [{"a": 1, "b": 2.5}])
    assert text == "a,b\n1,2.500000\n"


def test_json_is_sorted_and_rounded(tmp_path):
    path = write_json(tmp_path / "x.json", {"b": np.float64(1 / 3), "a": [np.int32(2), (True, None)]})
    assert path.read_text() == json.dumps({"a": [2, [True, None]], "b": 0.333333}, indent=1, sort_keys=True) + "\n"


def test_iteration_rows(scenario):
    _, trace = run(scenario)
    rows = iteration_rows(trace)
    assert [r["level"] for r in rows] == ["init", "grid0", "1", "1", "2"]
    assert [r["iteration"] for r in rows] == list(range(5))


def test_suites_and_unknown_suite():
    assert sorted(SUITES) == ["T3", "T4", "T5"]
    assert get_suite("t4").id == "T4"
    with pytest.raises(ValueError):
        get_suite("T9")
    with pytest.raises(ValueError):
        ablate("T5", n_seeds=0)


def test_worker_count(monkeypatch):
    monkeypatch.delenv("MVHMR_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("MVHMR_THREADS", "3")
    assert worker_count() == 3 and worker_count(2) == 2 and worker_count(0) == 1


def test_run_seed_rows_one_per_variant():
    rows = run_seed("T5", 0)
    assert [r["variant"] for r in rows] == ["w_scale", "wo_scale"]
    assert rows[0]["mpjpe_abs"] <= rows[1]["mpjpe_abs"]


def test_summary_ranked():
    rows = [{"variant": v, **{m: float(i) for m in METRICS}} for i, v in enumerate(("wo_scale", "w_scale"))]
    summary = summarize(SUITES["T5"], rows)
    assert [s["variant"] for s in summary] == ["wo_scale", "w_scale"]
    assert [s["rank"] for s in summary] == [1, 2]


def test_ablate_report_files(tmp_path):
    rep = ablate("T5", n_seeds=2, first_seed=4)
    assert rep.seeds == [4, 5] and len(rep.rows) == 4
    assert [(r["variant"], r["seed"]) for r in rep.rows] == [("w_scale", 4), ("w_scale", 5), ("wo_scale", 4),
                                                             ("wo_scale", 5)]
    paths = write_suite_report(rep, tmp_path)
    names = sorted(p.name for p in paths)
    assert names == ["ablation_T5.png", "ablation_T5_rows.csv", "ablation_T5_summary.csv",
                     "ablation_T5_summary.json"]
    assert (tmp_path / "ablation_T5.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    with open(tmp_path / "ablation_T5_rows.csv") as f:
        assert len(list(csv.DictReader(f))) == 4
    summary = json.loads((tmp_path / "ablation_T5_summary.json").read_text())
    assert summary["seeds"] == [4, 5] and "Synthetic protocol" in summary["protocol"]
    assert len(summary["summary"]) == 2


def test_parallel_matches_serial():
    a = ablate("T4", n_seeds=3, workers=1)
    b = ablate("T4", n_seeds=3, workers=2)
    assert a.rows == b.rows and a.summary == b.summary
