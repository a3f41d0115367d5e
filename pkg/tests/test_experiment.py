import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onestep.errors import DomainError, EmptyInput
from onestep.experiment import (
    CSV_COLUMNS,
    PRESETS,
    ExperimentConfig,
    ReportRow,
    check_simple_monotone,
    read_report_csv,
    report_to_csv,
    report_to_json,
    run_experiment,
    summarize,
    write_report,
)

# two-pass reference on default_rng(13).exponential(size=50), computed with plain
# Python floats: mean = sum/n, then sum of squared deviations over n-1
TWO_PASS_MEAN = 0.8566311708469898
TWO_PASS_STD = 0.7463536097053958


def test_summarize_examples():
    assert summarize([1, 1, 1]) == (1.0, 0.0, 3)
    s = summarize([0, 2])
    assert s.mean == 1.0 and s.std == pytest.approx(math.sqrt(2), rel=1e-15)
    one = summarize([4.0])
    assert one.std == 0.0 and one.degenerate


def test_summarize_two_pass_oracle():
    v = np.random.default_rng(13).exponential(size=50)
    s = summarize(v)
    assert s.mean == pytest.approx(TWO_PASS_MEAN, rel=1e-12, abs=0)
    assert s.std == pytest.approx(TWO_PASS_STD, rel=1e-12, abs=0)


def test_summarize_errors():
    with pytest.raises(EmptyInput):
        summarize([])
    with pytest.raises(DomainError):
        summarize([1.0, math.inf])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=2, max_size=60))
def test_summarize_matches_numpy(values):
    s = summarize(values)
    assert s.mean == pytest.approx(np.mean(values), rel=1e-12, abs=1e-300)
    assert s.std == pytest.approx(np.std(values, ddof=1), rel=1e-9, abs=1e-9 * max(values))
    assert s.std >= 0


def test_k1_one_step_equals_centralized():
    for kind in ("beta", "gaussian"):
        cfg = ExperimentConfig(kind, 256, (1,), repeats=1, estimators=("centralized", "one_step"))
        rep = run_experiment(cfg)
        assert rep.mse("one_step", 1) == pytest.approx(rep.mse("centralized"), rel=1e-10, abs=1e-14)


def _small(**kw):
    base = dict(kind="beta", n=256, k_grid=(2, 4, 8), repeats=3, estimators=("simple_avg", "resampled_avg", "one_step", "centralized"), seed=4)
    base.update(kw)
    return ExperimentConfig(**base)


def test_row_counts():
    rep = run_experiment(_small())
    # distributed estimators once per k, centralized once
    assert len(rep.rows) == 3 * 3 + 1
    assert rep.row("centralized").k is None
    rep = run_experiment(_small(estimators=()))
    assert rep.rows == []
    assert report_to_csv(rep) == ",".join(CSV_COLUMNS) + "\n"


def test_rows_non_negative_and_echo():
    rep = run_experiment(_small())
    for r in rep.rows:
        assert r.mse_mean >= 0 and r.mse_std >= 0 and r.K == 3 and r.seed == 4
    echo = rep.configs[0]
    assert echo["k_grid"] == [2, 4, 8] and echo["repeats"] == 3 and echo["d"] == 2


def test_reproducible():
    a = run_experiment(_small())
    b = run_experiment(_small())
    assert a.deterministic_view() == b.deterministic_view()
    c = run_experiment(_small(seed=5))
    assert c.deterministic_view() != a.deterministic_view()


def test_centralized_independent_of_grid():
    a = run_experiment(_small(k_grid=(2,)))
    b = run_experiment(_small(k_grid=(4, 16)))
    assert a.row("centralized").mse_mean == b.row("centralized").mse_mean
    assert a.squared_errors[("centralized", None, 256)] == b.squared_errors[("centralized", None, 256)]


def test_failures_do_not_perturb_centralized():
    a = run_experiment(_small())
    b = run_experiment(_small(failure_rate=0.2))
    assert a.mse("centralized") == b.mse("centralized")
    assert b.failure_stats and sum(f["dropped_round1"] for f in b.failure_stats) > 0


def test_centralized_partial_uses_fewer_samples():
    rep = run_experiment(_small(estimators=("centralized", "centralized_partial"), failure_rate=0.5, repeats=5))
    assert rep.mse("centralized_partial") != rep.mse("centralized")


def test_all_failed_repeats_excluded():
    # with k=1 and r=0.6 the single machine fails in most repeats
    rep = run_experiment(_small(k_grid=(1,), estimators=("one_step",), failure_rate=0.6, repeats=10))
    row = rep.row("one_step", 1)
    assert 0 < row.failures_excluded < 10
    assert len(rep.squared_errors[("one_step", 1, 256)]) == 10 - row.failures_excluded


def test_csv_round_trip(tmp_path):
    rep = run_experiment(_small())
    p = tmp_path / "r.csv"
    write_report(rep, p, "csv")
    back = read_report_csv(p)
    assert back == rep.rows
    for a, b in zip(back, rep.rows):
        assert np.float64(a.mse_mean).view(np.int64) == np.float64(b.mse_mean).view(np.int64)


def test_csv_one_row(tmp_path):
    row = ReportRow("one_step", 8, 512, 2, 20, 0.05, 0.1, 1 / 3, 0.1 + 0.2, 0, 7, 12.5)
    p = tmp_path / "one.csv"
    from onestep.experiment import ExperimentReport

    write_report(ExperimentReport(rows=[row]), p)
    assert read_report_csv(p) == [row]


def test_json_mirrors_csv(tmp_path):
    rep = run_experiment(_small())
    p = tmp_path / "r.json"
    write_report(rep, p, "json")
    doc = json.loads(p.read_text())
    assert [list(r) for r in doc["rows"]] == [list(CSV_COLUMNS)] * len(rep.rows)
    assert [r["mse_mean"] for r in doc["rows"]] == [r.mse_mean for r in rep.rows]
    assert doc["metadata"]["configs"][0]["seed"] == 4
    assert "K-1" in doc["metadata"]["std_convention"]
    with pytest.raises(DomainError):
        write_report(rep, p, "xml")


def test_config_validation():
    with pytest.raises(DomainError):
        _small(k_grid=(3,))
    with pytest.raises(DomainError):
        _small(repeats=0)
    with pytest.raises(DomainError):
        _small(failure_rate=1.0)
    with pytest.raises(DomainError):
        _small(resample_ratio=1.0)
    with pytest.raises(DomainError):
        _small(estimators=("median",))


def test_monotone_check_allows_one_small_inversion():
    from onestep.experiment import ExperimentReport

    def rep(values):
        rows = [ReportRow("simple_avg", 2**j, 4096, 2, 1, 0.0, 0.1, v, 0.0, 0, 0, 0.0) for j, v in enumerate(values, 4)]
        return ExperimentReport(rows=rows)

    assert check_simple_monotone(rep([1.0, 2.0, 1.96, 3.0]), 16)[0].passed
    assert not check_simple_monotone(rep([1.0, 2.0, 1.8, 3.0]), 16)[0].passed
    assert not check_simple_monotone(rep([1.0, 0.99, 2.0, 1.98]), 16)[0].passed


def test_desk_preset():
    preset = PRESETS["desk"]
    report, results = preset.run()
    cfg = preset.configs[0]
    distributed = [e for e in cfg.estimators if e != "centralized"]
    assert len(report.rows) == len(distributed) * len(cfg.k_grid) + 1
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_full_scale_presets_match_dimensions():
    t1 = PRESETS["table1"].configs[0]
    assert (t1.n, t1.dim, t1.repeats) == (2**17, 20, 50)
    assert PRESETS["table2"].configs[0].dim == 100
    t3 = PRESETS["table3"].configs[0]
    assert (t3.n, max(t3.k_grid)) == (8192, 256)
    t4 = PRESETS["table4"].configs[0]
    assert (t4.n, t4.failure_rate) == (409600, 0.05)
    assert [(c.n, c.k_grid) for c in PRESETS["table5"].configs] == [(4**p, (2**p,)) for p in range(3, 10)]


@pytest.mark.slow
def test_gaussian_largest_scale_one_step_matches_centralized():
    # N=4^9, k=512: the one-step estimate is within 5% of the pooled estimate in MSE
    cfg = ExperimentConfig("gaussian", 4**9, (512,), estimators=("one_step", "centralized"), sandwich=False)
    rep = run_experiment(cfg)
    assert rep.mse("one_step", 512) <= 1.05 * rep.mse("centralized")
    assert rep.mse("one_step", 512) >= 0.95 * rep.mse("centralized")
