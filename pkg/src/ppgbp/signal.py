"""Frequency-domain filtering, windowing and per-window normalisation."""
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateWindowError,
    EmptyRecordError,
    InvalidSignalError,
    InvalidSpecError,
)

WINDOW_S = 8.0
STEP_S = 2.0

# relative std below which a slice counts as flat
FLAT_RTOL = 1e-10


@dataclass(frozen=True)
class SampledSignal:
    samples: np.ndarray
    fs: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise InvalidSignalError("signal must be a non-empty 1-D array")
        if not np.all(np.isfinite(x)):
            raise InvalidSignalError("signal contains non-finite values")
        if not (np.isfinite(self.fs) and self.fs > 0):
            raise InvalidSignalError(f"sampling frequency must be positive, got {self.fs}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "fs", float(self.fs))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.fs


@dataclass(frozen=True)
class FilterSpec:
    kind: str  # "band-pass" or "low-pass"
    high_cut_hz: float
    low_cut_hz: float = 0.0

    def __post_init__(self):
        if self.kind not in ("band-pass", "low-pass"):
            raise InvalidSpecError(f"unknown filter kind {self.kind!r}")
        if self.low_cut_hz < 0 or not self.high_cut_hz > self.low_cut_hz:
            raise InvalidSpecError(
                f"need 0 <= low_cut < high_cut, got {self.low_cut_hz}, {self.high_cut_hz}")

    @classmethod
    def band_pass(cls, low, high):
        return cls("band-pass", high_cut_hz=high, low_cut_hz=low)

    @classmethod
    def low_pass(cls, high):
        return cls("low-pass", high_cut_hz=high)

    def check(self, fs):
        if self.high_cut_hz >= fs / 2:
            raise InvalidSpecError(
                f"cutoff {self.high_cut_hz} Hz is not below Nyquist ({fs / 2} Hz)")


PPG_BAND = FilterSpec.band_pass(0.1, 8.0)
ABP_LOWPASS = FilterSpec.low_pass(5.0)


@dataclass(frozen=True)
class WindowSample:
    input: np.ndarray
    sbp: float
    dbp: float
    index: int
    start_time: float


def passband_mask(n, fs, spec):
    """Boolean mask over the ``rfft`` bins of an ``n``-sample signal that survive ``spec``.

    Bin k sits at k*fs/n; a bin is kept iff it lies inside the closed passband.
    """
    freqs = np.arange(n // 2 + 1) * fs / n
    keep = freqs <= spec.high_cut_hz
    if spec.kind == "band-pass":
        keep &= freqs >= spec.low_cut_hz
        # DC always goes for band-pass; low_cut == 0 would otherwise keep it
        keep[0] = False
    return keep


def fft_filter(signal, spec):
    """Brick-wall FFT filter: zero every bin outside the passband, invert.

    The output has the same length and rate as the input. There is no
    transition band, so ringing near the record edges is expected.
    """
    x = signal.samples
    if x.size < 2:
        raise InvalidSignalError("filtering needs at least 2 samples")
    spec.check(signal.fs)
    # numpy's pocketfft handles any length (Bluestein for awkward primes)
    spectrum = np.fft.rfft(x)
    spectrum[~passband_mask(x.size, signal.fs, spec)] = 0.0
    return SampledSignal(np.fft.irfft(spectrum, n=x.size), signal.fs)


def window_bounds(n_samples, fs, window_s=WINDOW_S, step_s=STEP_S):
    """Start indices and the common length of every full window."""
    length = int(round(window_s * fs))
    starts = []
    k = 0
    while True:
        start = int(round(k * step_s * fs))
        if start + length > n_samples:
            break
        starts.append(start)
        k += 1
    return starts, length


def split_windows(signal, window_s=WINDOW_S, step_s=STEP_S):
    """Cut ``signal`` into overlapping windows; returns ``[(start_index, view), ...]``.

    Slices are views into ``signal.samples``; trailing samples that do not
    fill a window are dropped.
    """
    starts, length = window_bounds(len(signal), signal.fs, window_s, step_s)
    if not starts:
        raise EmptyRecordError(
            f"record of {signal.duration:.3f} s is shorter than one {window_s} s window")
    x = signal.samples
    return [(s, x[s:s + length]) for s in starts]


def is_flat(x):
    x = np.asarray(x, dtype=np.float64)
    std = x.std()
    return std == 0.0 or std <= FLAT_RTOL * np.max(np.abs(x))


def normalize_window(x):
    """Scale to zero mean and unit population variance."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or is_flat(x):
        raise DegenerateWindowError("window has zero variance")
    centred = x - x.mean()
    out = centred / np.sqrt(np.mean(centred * centred))
    # second pass mops up rounding left by the first so the 1e-9 moments hold
    out -= out.mean()
    return out / np.sqrt(np.mean(out * out))


def extract_bp_labels(abp):
    """(SBP, DBP) of a pressure window: its maximum and minimum."""
    abp = np.asarray(abp, dtype=np.float64)
    if abp.size == 0:
        raise InvalidSignalError("empty pressure window")
    if not np.all(np.isfinite(abp)):
        raise InvalidSignalError("pressure window contains non-finite values")
    return float(abp.max()), float(abp.min())
