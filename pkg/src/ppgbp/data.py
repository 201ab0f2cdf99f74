"""Record ingestion, resampling, PPG/ABP alignment, synthetic subjects and
window-dataset assembly."""
import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import (
    AlignmentWarning,
    DegenerateWindowError,
    EmptyRecordError,
    IngestionError,
    InvalidSignalError,
    InvalidSpecError,
)
from .signal import (
    ABP_LOWPASS,
    PPG_BAND,
    STEP_S,
    WINDOW_S,
    FilterSpec,
    SampledSignal,
    WindowSample,
    extract_bp_labels,
    fft_filter,
    is_flat,
    normalize_window,
    split_windows,
)

log = logging.getLogger(__name__)

TARGET_FS = 20.0
ALIGN_BAND = FilterSpec.band_pass(0.5, 8.0)
RECORD_HEADER = ["t", "ppg", "abp"]


@dataclass
class SubjectRecord:
    subject_id: str
    ppg: SampledSignal
    abp: SampledSignal
    metadata: dict = field(default_factory=dict)

    @property
    def fs(self):
        return self.ppg.fs

    @property
    def duration(self):
        return self.ppg.duration

    @property
    def warnings(self):
        return self.metadata.setdefault("warnings", [])


# ---------------------------------------------------------------- CSV io


def load_record(path, subject_id=None, max_jitter=0.01):
    """Read a ``t,ppg,abp`` CSV; the sampling rate comes from the median step."""
    ts, ppg, abp = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestionError("empty file", row=1)
        if [h.strip() for h in header] != RECORD_HEADER:
            raise IngestionError(f"header must be {','.join(RECORD_HEADER)!r}, got {header!r}", row=1)
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise IngestionError(f"expected 3 fields, got {len(row)}", row=row_no)
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise IngestionError(str(exc), row=row_no) from None
            if not all(math.isfinite(v) for v in vals):
                raise IngestionError("non-finite value", row=row_no)
            ts.append(vals[0])
            ppg.append(vals[1])
            abp.append(vals[2])
    if len(ts) < 2:
        raise IngestionError("need at least two samples to infer the sampling rate")
    t = np.array(ts)
    dt = np.diff(t)
    step = float(np.median(dt))
    if step <= 0:
        raise IngestionError("timestamps are not increasing")
    off = np.flatnonzero(np.abs(dt - step) > max_jitter * step)
    if off.size:
        raise IngestionError(
            f"non-uniform sampling: step {dt[off[0]]:.6g} s vs median {step:.6g} s",
            row=int(off[0]) + 3)
    fs = round(1.0 / step, 6)
    sid = subject_id or str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return SubjectRecord(sid, SampledSignal(ppg, fs), SampledSignal(abp, fs),
                         {"source": str(path), "duration": len(ts) / fs, "t0": ts[0]})


def write_record(record, path):
    n = min(len(record.ppg), len(record.abp))
    t0 = record.metadata.get("t0", 0.0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(RECORD_HEADER) + "\n")
        ppg = record.ppg.samples.tolist()
        abp = record.abp.samples.tolist()
        for k in range(n):
            fh.write(f"{t0 + k / record.fs!r},{ppg[k]!r},{abp[k]!r}\n")


# ------------------------------------------------------------ resampling


def resample(signal, target_fs=TARGET_FS):
    """Downsample by truncating the spectrum at the new Nyquist frequency.

    Equal rates return an unchanged copy; upsampling is not supported.
    """
    fs = signal.fs
    if math.isclose(target_fs, fs, rel_tol=1e-12):
        return SampledSignal(signal.samples.copy(), fs)
    if target_fs > fs:
        raise InvalidSpecError(f"upsampling {fs} Hz -> {target_fs} Hz is not supported")
    if target_fs < 2 * PPG_BAND.high_cut_hz:
        raise InvalidSpecError(f"target rate {target_fs} Hz cannot carry the 8 Hz PPG band")
    if fs / target_fs < 1.25:
        warnings.warn(f"resampling ratio {fs / target_fs:.3f} is close to 1; "
                      "spectral truncation removes little", RuntimeWarning, stacklevel=2)
    x = signal.samples
    n = x.size
    m = int(round(n * target_fs / fs))
    if m < 2 or n < 2:
        raise EmptyRecordError("record too short to resample")
    # the DFT treats the record as periodic; taking out the straight line
    # through the end samples removes the wrap-around jump that would
    # otherwise ring through the first and last seconds
    ramp = (x[-1] - x[0]) / (n - 1)
    resid = x - (x[0] + ramp * np.arange(n))
    spectrum = np.fft.rfft(resid)
    keep = min(spectrum.size, (m + 1) // 2)  # drops the new Nyquist bin for even m
    out = np.zeros(m // 2 + 1, dtype=complex)
    out[:keep] = spectrum[:keep]
    y = np.fft.irfft(out, n=m) * (m / n)
    y += x[0] + ramp * (np.arange(m) * fs / target_fs)
    return SampledSignal(y, target_fs)


def resample_record(record, target_fs=TARGET_FS):
    ppg = resample(record.ppg, target_fs)
    abp = resample(record.abp, target_fs)
    return replace(record, ppg=ppg, abp=abp, metadata={**record.metadata, "fs": target_fs})


# ------------------------------------------------------------- alignment


@dataclass
class Alignment:
    lag: int  # samples; positive means ABP lags PPG
    lag_s: float
    peak: float
    ppg: SampledSignal
    abp: SampledSignal
    warning: str = None


def _ncc(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    return float(np.dot(a, b)) / den if den > 0 else 0.0


def align(ppg, abp, max_lag_s=2.0, min_overlap_s=30.0, min_peak=0.2):
    """Find the integer lag maximising the normalised cross-correlation of the
    band-passed signals and trim both to their overlap.

    ``abp[n + lag]`` pairs with ``ppg[n]``: a record whose ABP is the PPG
    delayed by d samples yields ``lag == d``.
    """
    if not math.isclose(ppg.fs, abp.fs, rel_tol=1e-12):
        raise InvalidSignalError(f"rates differ: {ppg.fs} vs {abp.fs}")
    fs = ppg.fs
    n = min(len(ppg), len(abp))
    max_lag = int(round(max_lag_s * fs))
    if n - max_lag < min_overlap_s * fs:
        raise EmptyRecordError(
            f"record of {n / fs:.1f} s leaves less than {min_overlap_s} s overlap for alignment")
    p = fft_filter(SampledSignal(ppg.samples[:n], fs), ALIGN_BAND).samples
    q = fft_filter(SampledSignal(abp.samples[:n], fs), ALIGN_BAND).samples
    lags = np.arange(-max_lag, max_lag + 1)
    scores = np.array([_ncc(p[:n - L], q[L:]) if L >= 0 else _ncc(p[-L:], q[:n + L])
                       for L in lags])
    best = int(np.argmax(scores))
    lag = int(lags[best])
    peak = float(scores[best])
    if lag >= 0:
        a, b = ppg.samples[:n - lag], abp.samples[lag:n]
    else:
        a, b = ppg.samples[-lag:n], abp.samples[:n + lag]
    warning = None
    if peak < min_peak:
        warning = f"alignment peak correlation {peak:.3f} below {min_peak}"
        warnings.warn(warning, AlignmentWarning, stacklevel=2)
    return Alignment(lag, lag / fs, peak, SampledSignal(a.copy(), fs), SampledSignal(b.copy(), fs),
                     warning)


def align_record(record, max_lag_s=2.0):
    res = align(record.ppg, record.abp, max_lag_s=max_lag_s)
    meta = {**record.metadata, "lag_samples": res.lag, "lag_s": res.lag_s,
            "align_peak": res.peak, "warnings": list(record.metadata.get("warnings", []))}
    if res.warning:
        meta["warnings"].append(res.warning)
    return replace(record, ppg=res.ppg, abp=res.abp, metadata=meta)


# ------------------------------------------------------- synthetic data


def _knots(value):
    """Parse ``"120"`` or ``"0:105, 600:135"`` into sorted (times, values)."""
    if isinstance(value, (int, float)):
        return (0.0,), (float(value),)
    if isinstance(value, (tuple, list)):
        ts, vs = value
        return tuple(float(t) for t in ts), tuple(float(v) for v in vs)
    parts = [p for p in str(value).replace(",", " ").split() if p]
    if len(parts) == 1 and ":" not in parts[0]:
        return (0.0,), (float(parts[0]),)
    pairs = sorted((float(a), float(b)) for a, b in (p.split(":") for p in parts))
    return tuple(p[0] for p in pairs), tuple(p[1] for p in pairs)


def _format_knots(k):
    ts, vs = k
    return ", ".join(f"{t:g}:{v:g}" for t, v in zip(ts, vs))


@dataclass(frozen=True)
class SynthSpec:
    """Trajectories are piecewise-linear knots ``((t0, t1, ...), (v0, v1, ...))``,
    held constant outside the knot range."""
    duration_s: float = 300.0
    fs: float = 125.0
    heart_rate_hz: tuple = ((0.0,), (1.2,))
    sbp_mmhg: tuple = ((0.0,), (120.0,))
    dbp_mmhg: tuple = ((0.0,), (80.0,))
    ppg_lag_s: float = 0.0
    noise_snr_db: float = math.inf
    hrv: float = 0.05  # peak relative heart-rate modulation
    seed: int = 0
    subject_id: str = "synth"

    def __post_init__(self):
        for name in ("heart_rate_hz", "sbp_mmhg", "dbp_mmhg"):
            object.__setattr__(self, name, _knots(getattr(self, name)))

    def trajectory(self, name, t):
        ts, vs = getattr(self, name)
        return np.interp(t, ts, vs)

    def validate(self):
        if not self.duration_s > 0:
            raise InvalidSpecError("duration_s must be positive")
        if not self.fs > 2 * PPG_BAND.high_cut_hz:
            raise InvalidSpecError("fs must exceed 16 Hz")
        if not 0 <= self.hrv < 0.5:
            raise InvalidSpecError("hrv must be in [0, 0.5)")
        t = np.linspace(0, self.duration_s, 2001)
        knot_t = np.concatenate([self.sbp_mmhg[0], self.dbp_mmhg[0], self.heart_rate_hz[0]])
        t = np.concatenate([t, knot_t[(knot_t >= 0) & (knot_t <= self.duration_s)]])
        if np.any(self.trajectory("sbp_mmhg", t) <= self.trajectory("dbp_mmhg", t)):
            raise InvalidSpecError("SBP must exceed DBP at all times")
        hr = self.trajectory("heart_rate_hz", t)
        if np.any(hr * (1 - self.hrv) < 0.5) or np.any(hr * (1 + self.hrv) > 3.5):
            raise InvalidSpecError("heart rate must stay within [0.5, 3.5] Hz")
        if not abs(self.ppg_lag_s) <= 2.0:
            raise InvalidSpecError("ppg_lag_s must be within +/-2 s")

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("heart_rate_hz", "sbp_mmhg", "dbp_mmhg"):
                v = _format_knots(v)
            elif isinstance(v, float) and math.isinf(v):
                v = "inf"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def parse_synth_spec(text):
    from .config import parse_kv
    kv = parse_kv(text)
    types = {f.name: f.type for f in fields(SynthSpec)}
    unknown = set(kv) - set(types)
    if unknown:
        raise InvalidSpecError(f"unknown synth spec keys: {sorted(unknown)}")
    out = {}
    for key, raw in kv.items():
        try:
            if key in ("heart_rate_hz", "sbp_mmhg", "dbp_mmhg"):
                out[key] = _knots(raw)
            elif key == "seed":
                out[key] = int(raw)
            elif key == "subject_id":
                out[key] = raw
            else:
                out[key] = float(raw)
        except ValueError as exc:
            raise InvalidSpecError(f"{key}: {exc}") from None
    return SynthSpec(**out)


# abp pulse: cos(th) - cos(3 th)/9 has zero 2nd derivative at its extremes, so
# sampled peaks and troughs sit within ~1e-3 of the programmed values at 20 Hz
_ABP_PEAK = 8.0 / 9.0


def _abp_shape(theta):
    return 0.5 * ((np.cos(theta) - np.cos(3 * theta) / 9.0) / _ABP_PEAK + 1.0)


def _phase(spec, t):
    """Cycle count phi(t); beats peak at integer phi, troughs at half-integers."""
    rng = np.random.default_rng([spec.seed, 7])
    hr = spec.trajectory("heart_rate_hz", t)
    if spec.hrv > 0:
        # respiratory-rate modulation, slow wander and beat-scale jitter; the
        # jitter keeps successive beats distinguishable for lag estimation
        mod = 0.6 * np.sin(2 * np.pi * 0.25 * t + rng.uniform(0, 2 * np.pi))
        for _ in range(3):
            mod += 0.4 * np.sin(2 * np.pi * rng.uniform(0.01, 0.08) * t + rng.uniform(0, 2 * np.pi))
        knots = np.arange(t[0], t[-1] + 0.5, 0.5)
        mod += np.interp(t, knots, rng.normal(size=knots.size))
        hr = hr * (1.0 + spec.hrv * np.clip(mod / 2.0, -1.0, 1.0))
    dt = np.diff(t)
    return np.concatenate([[0.0], np.cumsum(0.5 * (hr[1:] + hr[:-1]) * dt)])


def _ppg_wave(theta, sbp, dbp):
    # morphology tracks pressure: 2nd-harmonic weight follows SBP, 3rd follows DBP
    r2 = np.clip(0.15 + 0.5 * (sbp - 100.0) / 50.0, 0.0, 0.8)
    r3 = np.clip(0.05 + 0.3 * (dbp - 60.0) / 30.0, 0.0, 0.5)
    return np.cos(theta) + r2 * np.cos(2 * theta) + r3 * np.cos(3 * theta)


def synthesize(spec):
    """Generate a PPG/ABP pair from the trajectories in ``spec``.

    ABP is DBP(t) plus a pulse of height SBP(t) - DBP(t) peaking once per beat.
    PPG follows the same beat phase delayed by ``ppg_lag_s``, with a
    pressure-dependent shape and amplitude, plus white noise at the requested
    SNR.
    """
    spec.validate()
    fs = spec.fs
    n = int(round(spec.duration_s * fs))
    # extend the phase grid backwards so the lagged PPG has history at t=0
    pad = int(math.ceil(2.5 * fs))
    t_ext = (np.arange(-pad, n) / fs)
    phi_ext = _phase(spec, t_ext)
    phi_ext -= phi_ext[pad]
    t = t_ext[pad:]
    phi = phi_ext[pad:]
    sbp = spec.trajectory("sbp_mmhg", t)
    dbp = spec.trajectory("dbp_mmhg", t)
    theta = 2 * np.pi * phi
    abp = dbp + (sbp - dbp) * _abp_shape(theta)

    phi_lag = np.interp(t - spec.ppg_lag_s, t_ext, phi_ext)
    pp = sbp - dbp
    ppg = (pp / 40.0) * _ppg_wave(2 * np.pi * phi_lag, sbp, dbp)
    rng = np.random.default_rng([spec.seed, 11])
    ppg = ppg + 0.05 * np.sin(2 * np.pi * 0.2 * t + rng.uniform(0, 2 * np.pi))
    if math.isfinite(spec.noise_snr_db):
        centred = ppg - ppg.mean()
        sigma = math.sqrt(float(np.mean(centred * centred))) / 10 ** (spec.noise_snr_db / 20)
        ppg = ppg + rng.normal(scale=sigma, size=n)
    meta = {"source": "synthetic", "duration": n / fs, "seed": spec.seed, "t0": 0.0}
    return SubjectRecord(spec.subject_id, SampledSignal(ppg, fs), SampledSignal(abp, fs), meta)


def trajectory_labels(spec, start_times, window_s=WINDOW_S):
    """Ground-truth (SBP, DBP) per window straight from the trajectories.

    SBP is the largest programmed SBP over the beat peaks inside the window,
    DBP the smallest programmed DBP over the troughs.
    """
    fs = spec.fs
    n = int(round(spec.duration_s * fs))
    pad = int(math.ceil(2.5 * fs))
    t_ext = np.arange(-pad, n) / fs
    phi_ext = _phase(spec, t_ext)
    phi_ext -= phi_ext[pad]
    t, phi = t_ext[pad:], phi_ext[pad:]
    out = []
    for s in start_times:
        lo, hi = s, s + window_s - 1.0 / fs
        sel = (t >= lo - 1e-9) & (t <= hi + 1e-9)
        ph = phi[sel]
        tt = t[sel]
        peaks = np.arange(math.ceil(ph[0]), math.floor(ph[-1]) + 1)
        troughs = np.arange(math.ceil(ph[0] - 0.5), math.floor(ph[-1] - 0.5) + 1) + 0.5
        tp = np.interp(peaks, ph, tt)
        tr = np.interp(troughs, ph, tt)
        out.append((float(spec.trajectory("sbp_mmhg", tp).max()),
                    float(spec.trajectory("dbp_mmhg", tr).min())))
    return out


# --------------------------------------------------------------- dataset


@dataclass
class WindowDataset:
    windows: list
    fs: float
    skipped: list = field(default_factory=list)  # source window ordinals that were dropped
    source_index: list = field(default_factory=list)  # source ordinal of each kept window
    subject_id: str = ""

    def __len__(self):
        return len(self.windows)

    def __getitem__(self, i):
        return self.windows[i]


def _endpoint_line(x):
    return x[0] + (x[-1] - x[0]) / max(x.size - 1, 1) * np.arange(x.size)


def _filter_detrended(signal, spec):
    """Brick-wall filter with the end-to-end line taken out first.

    The line is added back for low-pass filters and dropped for band-pass
    ones, so a drifting record does not ring at its ends.
    """
    line = _endpoint_line(signal.samples)
    out = fft_filter(SampledSignal(signal.samples - line, signal.fs), spec).samples
    if spec.kind == "low-pass":
        out = out + line
    return SampledSignal(out, signal.fs)


def build_dataset(record, window_s=WINDOW_S, step_s=STEP_S, source_ppg=None):
    """Filter, window, normalise and label an aligned record.

    A window is skipped when its raw PPG is flat or its filtered PPG has no
    variance; kept windows are renumbered 0..n-1 and ``source_index`` maps
    them back. ``source_ppg`` is the PPG before resampling: spectral
    resampling smears a flatline's edges into it, so flatness is judged on
    the original samples when they are available.
    """
    if not math.isclose(record.ppg.fs, record.abp.fs, rel_tol=1e-12):
        raise InvalidSignalError("PPG and ABP must share a sampling rate")
    fs = record.ppg.fs
    n = min(len(record.ppg), len(record.abp))
    raw_ppg = SampledSignal(record.ppg.samples[:n], fs)
    ppg = _filter_detrended(raw_ppg, PPG_BAND)
    abp = _filter_detrended(SampledSignal(record.abp.samples[:n], fs), ABP_LOWPASS)
    ppg_w = split_windows(ppg, window_s, step_s)
    abp_w = split_windows(abp, window_s, step_s)
    raw_w = split_windows(raw_ppg, window_s, step_s)
    windows, skipped, source = [], [], []
    src = source_ppg or raw_ppg
    src_len = int(round(window_s * src.fs))
    for k, ((start, pw), (_, aw), (_, rw)) in enumerate(zip(ppg_w, abp_w, raw_w)):
        s0 = int(round(start / fs * src.fs))
        try:
            if is_flat(rw) or is_flat(src.samples[s0:s0 + src_len]):
                raise DegenerateWindowError("flat raw PPG")
            x = normalize_window(pw)
        except DegenerateWindowError:
            log.warning("%s: skipping degenerate window %d at %.1f s",
                        record.subject_id, k, start / fs)
            skipped.append(k)
            continue
        sbp, dbp = extract_bp_labels(aw)
        windows.append(WindowSample(x, sbp, dbp, len(windows), start / fs))
        source.append(k)
    if not windows:
        raise EmptyRecordError(f"{record.subject_id}: no usable windows")
    return WindowDataset(windows, fs, skipped, source, record.subject_id)


def preprocess_record(record, target_fs=TARGET_FS, max_lag_s=2.0):
    """Full conditioning chain: align, resample, then build the window dataset."""
    aligned = align_record(record, max_lag_s=max_lag_s)
    source = aligned.ppg
    if aligned.fs > target_fs:
        aligned = resample_record(aligned, target_fs)
    return aligned, build_dataset(aligned, source_ppg=source)


# ---------------------------------------------------- dataset file io

DATASET_MAGIC = "# ppgbp-windows v1"


def write_dataset(ds, path):
    """CSV: two comment lines, a header, then one row per window.

    Columns: index, source_index, start_time (s), sbp, dbp (mmHg), x0..x{L-1}.
    """
    length = ds.windows[0].input.size
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(DATASET_MAGIC + "\n")
        skipped = ";".join(str(k) for k in ds.skipped)
        fh.write(f"# fs={ds.fs!r} subject={ds.subject_id} skipped={skipped}\n")
        fh.write(",".join(["index", "source_index", "start_time", "sbp", "dbp"]
                          + [f"x{i}" for i in range(length)]) + "\n")
        for w, src in zip(ds.windows, ds.source_index):
            vals = [repr(v) for v in w.input.tolist()]
            fh.write(",".join([str(w.index), str(src), repr(float(w.start_time)),
                               repr(float(w.sbp)), repr(float(w.dbp))] + vals) + "\n")


def read_dataset(path):
    with open(path, newline="", encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != DATASET_MAGIC:
            raise IngestionError(f"{path}: not a window dataset file", row=1)
        meta = dict(item.split("=", 1) for item in fh.readline()[1:].split())
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:5] != ["index", "source_index", "start_time", "sbp", "dbp"]:
            raise IngestionError("bad dataset header", row=3)
        windows, source = [], []
        for row_no, row in enumerate(reader, start=4):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"expected {len(header)} fields, got {len(row)}", row=row_no)
            try:
                x = np.array([float(v) for v in row[5:]])
                windows.append(WindowSample(x, float(row[3]), float(row[4]), int(row[0]),
                                            float(row[2])))
                source.append(int(row[1]))
            except ValueError as exc:
                raise IngestionError(str(exc), row=row_no) from None
    skipped = [int(k) for k in meta.get("skipped", "").split(";") if k]
    return WindowDataset(windows, float(meta["fs"]), skipped, source, meta.get("subject", ""))
