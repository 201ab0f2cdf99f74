"""Validation folds, accuracy statistics (AE, BHS, AAMI), agreement exports
and the leave-one-window-out driver."""
import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, IngestionError, InsufficientDataError, PPGBPError
from .scaler import TargetScaler

log = logging.getLogger(__name__)

SIGNALS = ("sbp", "dbp")
BHS_BANDS = (5.0, 10.0, 15.0)
BHS_GRADES = (("A", (60, 85, 95)), ("B", (50, 75, 90)), ("C", (40, 65, 85)))
AAMI_MAX_ME = 5.0
AAMI_MAX_SD = 8.0
# absorbs float noise in est - target so an error of exactly 5 mmHg lands in the 5 mmHg band
BAND_SLACK = 1e-9


@dataclass(frozen=True)
class EvalRecord:
    index: int
    target_sbp: float
    target_dbp: float
    est_sbp: float
    est_dbp: float

    def __post_init__(self):
        object.__setattr__(self, "index", int(self.index))
        for name in ("target_sbp", "target_dbp", "est_sbp", "est_dbp"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"record {self.index}: non-finite {name}")
            object.__setattr__(self, name, v)

    @property
    def target(self):
        return np.array([self.target_sbp, self.target_dbp])

    @property
    def estimate(self):
        return np.array([self.est_sbp, self.est_dbp])


def _arrays(records, minimum=1):
    records = list(records)
    if not records:
        raise EmptyInputError("no records")
    if len(records) < minimum:
        raise EmptyInputError(f"need at least {minimum} records, got {len(records)}")
    tgt = np.array([[r.target_sbp, r.target_dbp] for r in records])
    est = np.array([[r.est_sbp, r.est_dbp] for r in records])
    return tgt, est


def signed_errors(records):
    """(n, 2) array of estimate - target, columns SBP then DBP."""
    tgt, est = _arrays(records)
    return est - tgt


# ------------------------------------------------------------------ folds


def build_folds(n_windows, exclusion_radius=3):
    """Leave-one-window-out: fold i tests window i and trains on every j with
    |j - i| > exclusion_radius."""
    r = exclusion_radius
    if n_windows < 2 * r + 2:
        raise InsufficientDataError(
            f"{n_windows} windows cannot give every fold a training set with radius {r}")
    idx = np.arange(n_windows)
    return [(i, tuple(int(j) for j in idx[np.abs(idx - i) > r])) for i in range(n_windows)]


def block_folds(n_windows, n_blocks=5, exclusion_radius=3):
    """Contiguous test blocks; training drops everything within the radius of the block."""
    if n_blocks < 2:
        raise InsufficientDataError("block folds need at least two blocks")
    if n_windows < n_blocks:
        raise InsufficientDataError(f"{n_windows} windows cannot fill {n_blocks} blocks")
    folds = []
    idx = np.arange(n_windows)
    for block in np.array_split(idx, n_blocks):
        lo, hi = int(block[0]), int(block[-1])
        train = idx[(idx < lo - exclusion_radius) | (idx > hi + exclusion_radius)]
        if train.size == 0:
            raise InsufficientDataError(f"block {lo}..{hi} leaves no training windows")
        folds.append((tuple(int(i) for i in block), tuple(int(j) for j in train)))
    return folds


# ------------------------------------------------------------ statistics


def ae_stats(records):
    """Per signal (MAE, SDAE); SDAE is the sample standard deviation."""
    tgt, est = _arrays(records, minimum=2)
    ae = np.abs(est - tgt)
    return {s: (float(ae[:, k].mean()), float(ae[:, k].std(ddof=1))) for k, s in enumerate(SIGNALS)}


def me_sd(records):
    """Per signal (mean signed error, sample SD of signed errors)."""
    tgt, est = _arrays(records, minimum=2)
    e = est - tgt
    return {s: (float(e[:, k].mean()), float(e[:, k].std(ddof=1))) for k, s in enumerate(SIGNALS)}


def bhs_from_errors(errors):
    """Cumulative percentages within 5/10/15 mmHg and the BHS letter.

    A requirement is met when the percentage is at least the threshold;
    the comparison runs on integer counts so 60 of 100 meets 60%.
    """
    ae = np.abs(np.asarray(errors, dtype=np.float64))
    n = ae.size
    if n == 0:
        raise EmptyInputError("no errors to grade")
    counts = [int(np.count_nonzero(ae <= edge + BAND_SLACK)) for edge in BHS_BANDS]
    pct = tuple(100.0 * c / n for c in counts)
    grade = "fail"
    for letter, mins in BHS_GRADES:
        if all(c * 100 >= m * n for c, m in zip(counts, mins)):
            grade = letter
            break
    return pct, grade


def bhs_grade(records):
    e = signed_errors(records)
    return {s: bhs_from_errors(e[:, k]) for k, s in enumerate(SIGNALS)}


def aami_verdict(me, sd):
    """Equality passes: |ME| <= 5 and SD <= 8."""
    return abs(me) <= AAMI_MAX_ME and sd <= AAMI_MAX_SD


def aami_check(records):
    return {s: aami_verdict(me, sd) for s, (me, sd) in me_sd(records).items()}


def bland_altman_export(records):
    """Per signal: rows of (mean of pair, estimate - target), the mean
    difference and the 1.96 SD limits of agreement."""
    tgt, est = _arrays(records)
    out = {}
    for k, s in enumerate(SIGNALS):
        mean = (tgt[:, k] + est[:, k]) / 2
        diff = est[:, k] - tgt[:, k]
        md = float(diff.mean())
        sd = float(diff.std(ddof=1)) if diff.size > 1 else 0.0
        out[s] = {"rows": list(zip(mean.tolist(), diff.tolist())), "mean_diff": md,
                  "lower": md - 1.96 * sd, "upper": md + 1.96 * sd}
    return out


def error_histogram(records, width=1.0):
    """Counts of signed error in bins [k*width, (k+1)*width) per signal."""
    e = signed_errors(records)
    out = {}
    for k, s in enumerate(SIGNALS):
        bins = np.floor(e[:, k] / width).astype(np.int64)
        lo, hi = int(bins.min()), int(bins.max())
        counts = np.bincount(bins - lo, minlength=hi - lo + 1)
        out[s] = [(b * width, (b + 1) * width, int(c)) for b, c in zip(range(lo, hi + 1), counts)]
    return out


@dataclass
class SignalMetrics:
    mae: float
    sdae: float
    me: float
    sd: float
    bhs_pct: tuple
    grade: str
    aami_pass: bool


@dataclass
class MetricsReport:
    sbp: SignalMetrics
    dbp: SignalMetrics
    count: int
    failed_folds: list = field(default_factory=list)
    n_folds: int = 0

    def to_dict(self):
        out = {"count": self.count, "n_folds": self.n_folds, "failed_folds": self.failed_folds}
        for s in SIGNALS:
            m = getattr(self, s)
            out[s] = {"mae": m.mae, "sdae": m.sdae, "me": m.me, "sd": m.sd,
                      "bhs_pct_5": m.bhs_pct[0], "bhs_pct_10": m.bhs_pct[1],
                      "bhs_pct_15": m.bhs_pct[2], "bhs_grade": m.grade,
                      "aami_pass": m.aami_pass}
        return out

    def to_text(self):
        lines = [f"records: {self.count}"]
        if self.n_folds:
            lines.append(f"folds: {self.n_folds} ({len(self.failed_folds)} failed)")
        lines.append("")
        lines.append(f"{'':6}{'MAE':>8}{'SDAE':>8}{'ME':>8}{'SD':>8}"
                     f"{'<=5':>8}{'<=10':>8}{'<=15':>8}  BHS   AAMI")
        for s in SIGNALS:
            m = getattr(self, s)
            lines.append(f"{s.upper():6}{m.mae:8.2f}{m.sdae:8.2f}{m.me:8.2f}{m.sd:8.2f}"
                         + "".join(f"{p:7.1f}%" for p in m.bhs_pct)
                         + f"  {m.grade:<5} {'pass' if m.aami_pass else 'fail'}")
        lines.append("")
        lines.append("errors in mmHg; BHS columns are cumulative % of |error| within the band")
        return "\n".join(lines) + "\n"


def metrics_report(records, failed_folds=(), n_folds=0):
    records = list(records)
    ae = ae_stats(records)
    ms = me_sd(records)
    bhs = bhs_grade(records)
    per = {}
    for s in SIGNALS:
        me, sd = ms[s]
        per[s] = SignalMetrics(ae[s][0], ae[s][1], me, sd, bhs[s][0], bhs[s][1], aami_verdict(me, sd))
    return MetricsReport(per["sbp"], per["dbp"], len(records), list(failed_folds), n_folds)


# ------------------------------------------------------------- protocol


def fold_seed(seed, fold):
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


@dataclass
class FoldOutcome:
    fold: int
    test: tuple
    records: list = field(default_factory=list)
    error: str = None
    result: object = None  # TrainResult for network folds, when kept


@dataclass
class LowoResult:
    records: list
    report: MetricsReport
    folds: list

    @property
    def failures(self):
        return [f for f in self.folds if f.error is not None]


def _predict_fold(windows, test, train, cfg, model, trainer, global_scaler, fold):
    if global_scaler is not None:
        scaler = global_scaler
    else:
        scaler = TargetScaler.fit_windows([windows[j] for j in train])
    result = None
    if model == "oracle":
        est = [(windows[i].sbp, windows[i].dbp) for i in test]
    elif model == "mean":
        est = [tuple(scaler.mean) for _ in test]
    else:
        from .train import train_subject
        trainer = trainer or train_subject
        train_set = set(train)
        exclude = {j for j in range(len(windows)) if j not in train_set}
        result = trainer(windows, cfg.train_config(fold_seed(cfg.seed, fold)), exclude=exclude,
                         hp=cfg.hp, scaler=scaler)
        est = [tuple(result.predict(windows[i].input)) for i in test]
    records = [EvalRecord(int(i), float(windows[i].sbp), float(windows[i].dbp),
                          float(e[0]), float(e[1])) for i, e in zip(test, est)]
    return records, result


def _run_fold(args):
    windows, fold, test, train, cfg, model, trainer, global_scaler, keep = args
    out = FoldOutcome(fold, tuple(test))
    try:
        out.records, result = _predict_fold(windows, test, train, cfg, model, trainer,
                                            global_scaler, fold)
        if keep:
            out.result = result
    except (PPGBPError, ValueError, FloatingPointError) as exc:
        out.error = f"{type(exc).__name__}: {exc}"
        log.warning("fold %d failed: %s", fold, out.error)
    return out


def make_folds(n, cfg):
    if cfg.fold_mode == "lowo":
        return [((i,), train) for i, train in build_folds(n, cfg.exclusion_radius)]
    return block_folds(n, cfg.n_blocks, cfg.exclusion_radius)


def run_lowo(windows, config=None, model=None, trainer=None, jobs=None, keep_results=False):
    """Evaluate ``windows`` fold by fold and aggregate the held-out predictions.

    ``config`` is a RunConfig; its fold_mode picks leave-one-window-out or
    block folds. Each fold's target scaler is fit on its training windows
    unless ``paper_faithful`` asks for one scaler over all windows. A failing
    fold is logged in the result and the remaining folds still run.
    """
    from .config import RunConfig
    cfg = config or RunConfig()
    model = model or cfg.model
    jobs = jobs or cfg.jobs
    n = len(windows)
    if n < 2:
        raise InsufficientDataError(f"{n} window(s): nothing to hold out against")
    folds = make_folds(n, cfg)
    global_scaler = TargetScaler.fit_windows([windows[i] for i in range(n)]) \
        if cfg.paper_faithful else None
    tasks = [(windows, f, test, train, cfg, model, trainer, global_scaler, keep_results)
             for f, (test, train) in enumerate(folds)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks), os.cpu_count() or 1)) as pool:
            outcomes = list(pool.map(_run_fold, tasks))
    else:
        outcomes = [_run_fold(t) for t in tasks]
    outcomes.sort(key=lambda o: o.fold)
    records = sorted((r for o in outcomes for r in o.records), key=lambda r: r.index)
    failed = [o.fold for o in outcomes if o.error is not None]
    if len(records) < 2:
        raise InsufficientDataError(
            f"only {len(records)} held-out prediction(s); {len(failed)} of {len(folds)} folds failed")
    report = metrics_report(records, failed, len(folds))
    return LowoResult(records, report, outcomes)


# ---------------------------------------------------------------- files

RECORD_COLUMNS = ["index", "target_sbp", "target_dbp", "est_sbp", "est_dbp"]


def write_records(records, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(RECORD_COLUMNS) + "\n")
        for r in records:
            fh.write(f"{r.index},{r.target_sbp!r},{r.target_dbp!r},{r.est_sbp!r},{r.est_dbp!r}\n")


def read_records(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyInputError(f"{path}: empty file")
        if [h.strip() for h in header] != RECORD_COLUMNS:
            raise IngestionError(f"header must be {','.join(RECORD_COLUMNS)}", row=1)
        out = []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(RECORD_COLUMNS):
                raise IngestionError(f"expected {len(RECORD_COLUMNS)} fields", row=row_no)
            try:
                out.append(EvalRecord(int(row[0]), *(float(v) for v in row[1:])))
            except ValueError as exc:
                raise IngestionError(str(exc), row=row_no) from None
    if not out:
        raise EmptyInputError(f"{path}: no records")
    return out


def write_metrics(report, out_dir):
    with open(os.path.join(out_dir, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_bland_altman(records, path):
    """Columns: signal, mean_mmhg, diff_mmhg (estimate - target); the
    summary rows carry the mean difference and the limits of agreement."""
    ba = bland_altman_export(records)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("signal,kind,mean_mmhg,diff_mmhg\n")
        for s in SIGNALS:
            for m, d in ba[s]["rows"]:
                fh.write(f"{s},point,{m!r},{d!r}\n")
            for kind in ("mean_diff", "lower", "upper"):
                fh.write(f"{s},{kind},,{ba[s][kind]!r}\n")


def write_histogram(records, path):
    """Columns: signal, bin_lo, bin_hi (mmHg, signed error), count."""
    hist = error_histogram(records)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("signal,bin_lo,bin_hi,count\n")
        for s in SIGNALS:
            for lo, hi, c in hist[s]:
                fh.write(f"{s},{lo:g},{hi:g},{c}\n")
