import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppgbp.config import RunConfig
from ppgbp.errors import EmptyInputError, IngestionError, InsufficientDataError
from ppgbp.eval import (
    EvalRecord,
    aami_check,
    aami_verdict,
    ae_stats,
    bhs_from_errors,
    bhs_grade,
    bland_altman_export,
    block_folds,
    build_folds,
    error_histogram,
    fold_seed,
    me_sd,
    metrics_report,
    read_records,
    run_lowo,
    write_bland_altman,
    write_histogram,
    write_metrics,
    write_records,
)
from ppgbp.signal import WindowSample
from ppgbp.train import train_subject


def recs_from_errors(sbp_err, dbp_err=None, target=(120.0, 80.0)):
    dbp_err = sbp_err if dbp_err is None else dbp_err
    return [EvalRecord(i, target[0], target[1], target[0] + a, target[1] + b)
            for i, (a, b) in enumerate(zip(sbp_err, dbp_err))]


def recs_with_me_sd(me, sd):
    # two points at me +/- sd/sqrt(2) have mean me and sample SD sd
    h = sd / np.sqrt(2)
    return recs_from_errors([me - h, me + h])


def label_windows(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(WindowSample(rng.normal(size=160), float(100 + 40 * rng.random()),
                                float(60 + 25 * rng.random()), i, 2.0 * i))
    return out


# ------------------------------------------------------------------ folds


def test_lowo_fold_middle():
    folds = dict(build_folds(10, 3))
    assert folds[5] == (0, 1, 9)


def test_lowo_fold_boundary():
    folds = dict(build_folds(12, 3))
    assert folds[0] == tuple(range(4, 12))
    assert folds[11] == tuple(range(0, 8))


def test_lowo_too_few_windows():
    with pytest.raises(InsufficientDataError):
        build_folds(7, 3)
    assert len(build_folds(8, 3)) == 8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 6), st.integers(0, 60))
def test_lowo_folds_respect_radius(r, extra):
    n = 2 * r + 2 + extra
    for i, train in build_folds(n, r):
        assert train
        assert all(abs(j - i) > r for j in train)
        assert len(train) == n - len([j for j in range(n) if abs(j - i) <= r])


def test_block_folds_partition_and_gap():
    folds = block_folds(50, 5, 3)
    tests = [i for t, _ in folds for i in t]
    assert tests == list(range(50))
    for test, train in folds:
        assert min(abs(j - i) for j in train for i in test) > 3


def test_no_sample_overlap_with_radius_three():
    # 8 s windows every 2 s: windows more than 3 apart share no samples
    starts = np.arange(40) * 40
    for i, train in build_folds(40, 3):
        for j in train:
            lo, hi = sorted((starts[i], starts[j]))
            assert hi >= lo + 160


def test_fold_seeds_differ():
    assert fold_seed(0, 1) != fold_seed(0, 2)
    assert fold_seed(5, 3) == fold_seed(5, 3)


# ------------------------------------------------------------------ stats


def test_ae_example():
    recs = [EvalRecord(0, 120.0, 80.0, 116.30, 80.0), EvalRecord(1, 120.0, 80.0, 120.0, 80.0)]
    mae, _ = ae_stats(recs)["sbp"]
    assert mae == pytest.approx(3.70 / 2)
    assert abs(recs[0].target_sbp - recs[0].est_sbp) == pytest.approx(3.70)


def test_perfect_records():
    recs = recs_from_errors([0.0] * 5)
    assert ae_stats(recs) == {"sbp": (0.0, 0.0), "dbp": (0.0, 0.0)}


def test_ae_matches_brute_force():
    rng = np.random.default_rng(3)
    recs = [EvalRecord(i, *rng.uniform(60, 160, size=4)) for i in range(57)]
    got = ae_stats(recs)
    ae = [abs(r.est_sbp - r.target_sbp) for r in recs]
    mae = sum(ae) / len(ae)
    sdae = (sum((a - mae) ** 2 for a in ae) / (len(ae) - 1)) ** 0.5
    assert abs(got["sbp"][0] - mae) <= 1e-12 and abs(got["sbp"][1] - sdae) <= 1e-12


def test_empty_inputs():
    for fn in (ae_stats, me_sd, bhs_grade, aami_check, bland_altman_export):
        with pytest.raises(EmptyInputError):
            fn([])


def test_me_sd_examples():
    me, sd = me_sd(recs_from_errors([-2.0, 2.0, -2.0, 2.0]))["sbp"]
    assert me == 0.0
    me, sd = me_sd(recs_from_errors([1.5] * 4))["dbp"]
    assert me == pytest.approx(1.5) and sd == pytest.approx(0.0, abs=1e-12)


def bhs_set(counts):
    errs = [4.0] * counts[0] + [9.0] * counts[1] + [14.0] * counts[2] + [20.0] * counts[3]
    return bhs_from_errors(errs)


def test_bhs_exact_a():
    pct, grade = bhs_set((60, 25, 10, 5))
    assert pct == (60.0, 85.0, 95.0) and grade == "A"


def test_bhs_exact_b():
    pct, grade = bhs_set((50, 25, 15, 10))
    assert pct == (50.0, 75.0, 90.0) and grade == "B"


def test_bhs_exact_c_and_just_below():
    assert bhs_set((40, 25, 20, 15))[1] == "C"
    assert bhs_set((59, 26, 10, 5))[1] == "B"
    assert bhs_set((39, 26, 20, 15))[1] == "fail"


def test_bhs_all_large_fails():
    pct, grade = bhs_from_errors([30.0] * 10)
    assert pct == (0.0, 0.0, 0.0) and grade == "fail"


def test_bhs_band_edge_inclusive():
    # 125.0 - 120.0 is exactly 5; float noise from subtraction must not push it out
    recs = [EvalRecord(0, 120.1, 80.0, 125.1, 80.0), EvalRecord(1, 120.0, 80.0, 125.0, 80.0)]
    assert bhs_grade(recs)["sbp"][0][0] == 100.0


GRADE_ORDER = {"A": 3, "B": 2, "C": 1, "fail": 0}


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-40, 40), min_size=1, max_size=60), st.floats(0, 1))
def test_bhs_monotone(errs, shrink):
    e = np.array(errs)
    pct, grade = bhs_from_errors(e)
    pct2, grade2 = bhs_from_errors(e * shrink)
    assert GRADE_ORDER[grade2] >= GRADE_ORDER[grade]
    assert pct[0] <= pct[1] <= pct[2]


@pytest.mark.parametrize("me,sd,ok", [(0.21, 6.27, True), (0.24, 3.40, True), (0.52, 6.16, True),
                                      (0.20, 3.15, True), (5.1, 1.0, False), (0.0, 8.5, False),
                                      (5.0, 8.0, True), (-5.0, 1.0, True)])
def test_aami(me, sd, ok):
    assert aami_verdict(me, sd) is ok
    assert aami_check(recs_with_me_sd(me, sd))["sbp"] is ok


def test_bland_altman():
    ba = bland_altman_export([EvalRecord(0, 110.0, 70.0, 114.0, 70.0)])
    assert ba["sbp"]["rows"] == [(112.0, 4.0)]
    ba = bland_altman_export(recs_from_errors([0.0] * 3))
    assert ba["dbp"]["lower"] == ba["dbp"]["upper"] == 0.0
    ba = bland_altman_export(recs_with_me_sd(1.0, 2.0))
    assert ba["sbp"]["mean_diff"] == pytest.approx(1.0)
    assert ba["sbp"]["upper"] - 1.0 == pytest.approx(3.92)
    assert 1.0 - ba["sbp"]["lower"] == pytest.approx(3.92)


def test_histogram_bins():
    hist = error_histogram(recs_from_errors([-0.5, 0.2, 0.9, 2.0]))
    assert hist["sbp"] == [(-1.0, 0.0, 1), (0.0, 1.0, 2), (1.0, 2.0, 0), (2.0, 3.0, 1)]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-20, 20), st.floats(-20, 20)), min_size=2, max_size=30),
       st.randoms())
def test_metrics_permutation_invariant(errs, rnd):
    recs = recs_from_errors([e[0] for e in errs], [e[1] for e in errs])
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    a, b = metrics_report(recs).to_dict(), metrics_report(shuffled).to_dict()
    for s in ("sbp", "dbp"):
        for k in a[s]:
            if isinstance(a[s][k], float):
                assert a[s][k] == pytest.approx(b[s][k], rel=1e-12, abs=1e-12)
            else:
                assert a[s][k] == b[s][k]


# ------------------------------------------------------------- protocol


def test_oracle_is_perfect():
    res = run_lowo(label_windows(20), RunConfig(model="oracle"))
    assert res.report.sbp.mae == 0 and res.report.dbp.mae == 0
    assert res.report.sbp.grade == "A" and res.report.dbp.aami_pass
    assert [r.index for r in res.records] == list(range(20))


def test_mean_stub_matches_closed_form():
    windows = label_windows(20)
    res = run_lowo(windows, RunConfig(model="mean"))
    lab = np.array([[w.sbp, w.dbp] for w in windows])
    expect = []
    for i in range(20):
        train = [j for j in range(20) if abs(j - i) > 3]
        expect.append(np.abs(lab[i] - lab[train].mean(axis=0)))
    np.testing.assert_allclose([res.report.sbp.mae, res.report.dbp.mae],
                               np.mean(expect, axis=0), rtol=1e-12)


def test_mean_stub_paper_faithful_is_mean_absolute_deviation():
    windows = label_windows(20)
    res = run_lowo(windows, RunConfig(model="mean", paper_faithful=True))
    lab = np.array([[w.sbp, w.dbp] for w in windows])
    mad = np.abs(lab - lab.mean(axis=0)).mean(axis=0)
    np.testing.assert_allclose([res.report.sbp.mae, res.report.dbp.mae], mad, rtol=1e-12)


def test_one_window_is_insufficient():
    with pytest.raises(InsufficientDataError):
        run_lowo(label_windows(1), RunConfig(model="oracle"))


def test_scaler_ignores_held_out_label():
    windows = label_windows(20)
    a = run_lowo(windows, RunConfig(model="mean"))
    changed = list(windows)
    w = windows[7]
    changed[7] = WindowSample(w.input, w.sbp + 50, w.dbp - 20, w.index, w.start_time)
    b = run_lowo(changed, RunConfig(model="mean"))
    assert a.records[7].est_sbp == b.records[7].est_sbp
    assert a.records[7].est_dbp == b.records[7].est_dbp


def test_fold_failures_are_recorded():
    calls = []

    def flaky(windows, cfg, exclude, hp, scaler):
        calls.append(1)
        if len(calls) == 2:
            raise InsufficientDataError("boom")
        return train_subject(windows, cfg, exclude=exclude, hp=hp, scaler=scaler)

    cfg = RunConfig(fold_mode="block-kfold", n_blocks=3).update(
        {"train.epochs": "1", "hp.lstm_units": "4", "hp.n_filters": "2"})
    res = run_lowo(label_windows(75), cfg, trainer=flaky)
    assert len(calls) == 3
    assert [f.fold for f in res.failures] == [1]
    assert res.report.failed_folds == [1] and res.report.n_folds == 3
    assert len(res.records) == 50


class Spy:
    def __init__(self, items):
        self.items, self.reads = items, set()

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        self.reads.add(i)
        return self.items[i]


def test_training_never_reads_nearby_windows():
    calls = []

    def spying(windows, cfg, exclude, hp, scaler):
        spy = Spy(windows)
        out = train_subject(spy, cfg, exclude=exclude, hp=hp, scaler=scaler)
        calls.append(spy.reads)
        return out

    cfg = RunConfig().update({"train.epochs": "1", "hp.lstm_units": "3", "hp.n_filters": "2"})
    run_lowo(label_windows(30), cfg, trainer=spying)
    assert len(calls) == 30  # one call per fold, in fold order
    for i, reads in enumerate(calls):
        assert reads == {j for j in range(30) if abs(j - i) > 3}


# ------------------------------------------------------------------ files


def test_record_file_round_trip(tmp_path):
    recs = [EvalRecord(i, 120.0 + i / 3, 80.0, 118.5, 81.25) for i in range(4)]
    write_records(recs, tmp_path / "r.csv")
    assert read_records(tmp_path / "r.csv") == recs


def test_read_records_errors(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(EmptyInputError):
        read_records(p)
    p.write_text("index,target_sbp,target_dbp,est_sbp,est_dbp\n0,1,2,3\n")
    with pytest.raises(IngestionError, match="row 2"):
        read_records(p)


def test_writers(tmp_path):
    recs = recs_from_errors([1.0, -2.0, 3.5])
    rep = metrics_report(recs)
    write_metrics(rep, tmp_path)
    data = json.loads((tmp_path / "metrics.json").read_text())
    assert data["sbp"]["bhs_grade"] == "A" and data["count"] == 3
    assert "SBP" in (tmp_path / "metrics.txt").read_text()
    write_bland_altman(recs, tmp_path / "ba.csv")
    lines = (tmp_path / "ba.csv").read_text().splitlines()
    assert lines[0] == "signal,kind,mean_mmhg,diff_mmhg" and len(lines) == 1 + 2 * (3 + 3)
    write_histogram(recs, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().startswith("signal,bin_lo,bin_hi,count\nsbp,-2,-1,1\n")
