"""Deterministic ECG preprocessing and feature extraction.

The pipeline is: FIR bandpass -> Pan-Tompkins R-peak detection -> beat
segmentation around each R peak -> normalize / convolve / normalize (NCN)
feature vectors.  Every stage is a pure function of its inputs, so repeated
runs are bit-identical.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve, firwin

from .errors import ConfigurationError, DegenerateInputError

log = logging.getLogger(__name__)

DEFAULT_BAND = (1.0, 40.0)      # Hz
DEFAULT_TAPS = 513              # odd; sized so a 0.2 Hz tone loses >99% power
DEFAULT_WINDOW_MS = (250.0, 400.0)   # pre/post R peak, covers P through T
DEFAULT_KERNEL = 5              # NCN moving-average width (samples)
REFRACTORY_S = 0.2              # minimum R-R spacing enforced by the detector


@dataclass(frozen=True)
class RawSignal:
    """A sampled single-lead signal in millivolts."""

    samples: np.ndarray
    fs: float

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ConfigurationError("signal must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(arr)):
            raise ConfigurationError("signal contains non-finite samples")
        if not self.fs > 0:
            raise ConfigurationError(f"sampling rate must be positive, got {self.fs}")
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "fs", float(self.fs))

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class BeatSegment:
    """A fixed-length window of samples around one R peak."""

    samples: np.ndarray
    r_index: int
    fs: float

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if not 0 <= self.r_index < arr.size:
            raise ConfigurationError("r_index must fall inside the segment")
        object.__setattr__(self, "samples", arr)


@dataclass(frozen=True)
class FeatureVector:
    """Per-beat feature values; dimension is fixed per pipeline config."""

    values: np.ndarray
    subject_id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ConfigurationError("feature values must be finite")
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to turn a raw strip into per-beat feature vectors."""

    band: tuple[float, float] = DEFAULT_BAND
    taps: int = DEFAULT_TAPS
    window_ms: tuple[float, float] = DEFAULT_WINDOW_MS
    kernel_width: int = DEFAULT_KERNEL
    denoise: bool = True

    @property
    def feature_dim(self) -> int:
        """Segment length for a given sampling rate is set at call time."""
        raise AttributeError("feature dimension depends on fs; use segment_length(fs)")

    def segment_length(self, fs: float) -> int:
        pre_ms, post_ms = self.window_ms
        return int(np.rint((pre_ms + post_ms) * fs / 1000.0))


def bandpass_fir(signal: RawSignal, lo: float = DEFAULT_BAND[0],
                 hi: float = DEFAULT_BAND[1], taps: int = DEFAULT_TAPS) -> RawSignal:
    """Zero-delay linear-phase FIR bandpass (Hamming windowed sinc).

    The input is edge-padded so the output has the same length, and the
    group delay of the odd-length filter is compensated exactly.
    """
    if taps % 2 == 0 or taps < 3:
        raise ConfigurationError(f"taps must be odd and >= 3, got {taps}")
    if not (0.0 < lo < hi < signal.fs / 2.0):
        raise ConfigurationError(
            f"band edges must satisfy 0 < lo < hi < fs/2, got ({lo}, {hi}) at fs={signal.fs}")
    h = firwin(taps, [lo, hi], pass_zero=False, fs=signal.fs, window="hamming")
    half = taps // 2
    padded = np.pad(signal.samples, half, mode="edge")
    out = fftconvolve(padded, h, mode="valid")
    return RawSignal(out, signal.fs)


def _local_maxima(x: np.ndarray) -> np.ndarray:
    """Indices of strict-or-plateau local maxima of x."""
    if x.size < 3:
        return np.empty(0, dtype=np.intp)
    left = x[1:-1] > x[:-2]
    right = x[1:-1] >= x[2:]
    return np.nonzero(left & right)[0] + 1


def detect_r_peaks(signal: RawSignal, refractory_s: float = REFRACTORY_S) -> np.ndarray:
    """Pan-Tompkins R-peak detection.

    Canonical stages: a detector-internal 5-15 Hz bandpass that isolates
    QRS energy, 5-point derivative, squaring, 150 ms moving-window
    integration, then an adaptive dual threshold with a refractory period.
    The internal bandpass belongs to the detector itself, so detection
    stays usable even when the denoising front end is skipped.

    Returns a strictly increasing index array; empty (with a log line) when
    no QRS energy is found.
    """
    fs = signal.fs
    if signal.duration < 2.0:
        raise ConfigurationError("need at least 2 s of signal for peak detection")

    hi = min(15.0, 0.45 * fs)
    if hi > 5.0:
        det_taps = 129 if fs * 0.5 > 20 else 65
        h = firwin(det_taps, [5.0, hi], pass_zero=False, fs=fs, window="hamming")
        x = fftconvolve(np.pad(signal.samples, det_taps // 2, mode="edge"), h,
                        mode="valid")
    else:
        x = signal.samples

    deriv = np.convolve(x, np.array([1.0, 2.0, 0.0, -2.0, -1.0]) * (fs / 8.0), mode="same")
    squared = deriv * deriv
    win = max(1, int(round(0.15 * fs)))
    mwi = np.convolve(squared, np.ones(win) / win, mode="same")

    refractory = max(1, int(round(refractory_s * fs)))
    cand = _local_maxima(mwi)
    # Convolution edge effects make the first/last integration window
    # unreliable; peaks there are discarded rather than misplaced.
    cand = cand[(cand >= win) & (cand < mwi.size - win)]
    if cand.size == 0 or np.max(mwi) <= 0.0:
        log.info("detect_r_peaks: no QRS energy found (flat or degenerate input)")
        return np.empty(0, dtype=np.intp)

    # Adaptive dual-threshold state, seeded from the first two seconds.
    head = mwi[: int(2 * fs)]
    spki = float(np.max(head)) * 0.5
    npki = float(np.mean(head)) * 0.5
    accepted: list[int] = []
    for i in cand:
        peak = mwi[i]
        thr = npki + 0.25 * (spki - npki)
        if peak >= thr:
            if accepted and i - accepted[-1] < refractory:
                # Within refractory: keep the stronger of the two.
                if mwi[i] > mwi[accepted[-1]]:
                    accepted[-1] = i
                continue
            accepted.append(int(i))
            spki = 0.125 * peak + 0.875 * spki
        else:
            npki = 0.125 * peak + 0.875 * npki

    if not accepted:
        log.info("detect_r_peaks: no peaks cleared the adaptive threshold")
        return np.empty(0, dtype=np.intp)

    # Map each integrator peak back to the R sample: the MWI crest lags the
    # R wave by roughly the integration window.
    r_peaks = []
    back = win
    fwd = max(1, win // 4)
    for i in accepted:
        lo_i = max(0, i - back)
        hi_i = min(x.size, i + fwd)
        r_peaks.append(lo_i + int(np.argmax(x[lo_i:hi_i])))

    # Deduplicate and re-enforce spacing after the remap.
    r_peaks = sorted(set(r_peaks))
    kept: list[int] = []
    for idx in r_peaks:
        if kept and idx - kept[-1] < refractory:
            if x[idx] > x[kept[-1]]:
                kept[-1] = idx
        else:
            kept.append(idx)
    return np.asarray(kept, dtype=np.intp)


def segment_beats(signal: RawSignal, peaks: np.ndarray,
                  window_ms: tuple[float, float] = DEFAULT_WINDOW_MS) -> list[BeatSegment]:
    """Cut a fixed window around each R peak.

    Peaks whose window would cross the signal boundary are dropped; the
    drop count is reported via the module logger.
    """
    pre_ms, post_ms = window_ms
    fs = signal.fs
    total = int(np.rint((pre_ms + post_ms) * fs / 1000.0))
    pre = int(np.rint(pre_ms * fs / 1000.0))
    post = total - pre
    segments = []
    dropped = 0
    for p in np.asarray(peaks, dtype=np.intp):
        lo = p - pre
        hi = p + post
        if lo < 0 or hi > signal.samples.size:
            dropped += 1
            continue
        segments.append(BeatSegment(signal.samples[lo:hi], pre, fs))
    if dropped:
        log.info("segment_beats: dropped %d boundary peak(s)", dropped)
    return segments


def extract_features(beat: BeatSegment, kernel_width: int = DEFAULT_KERNEL) -> FeatureVector:
    """NCN features: z-normalize, moving-average smooth, z-normalize again.

    The smoothing kernel is edge-replicated so the output keeps the segment
    length; kernel_width == 1 reduces to a plain z-normalized segment.
    """
    n = beat.samples.size
    if kernel_width % 2 == 0 or not 0 < kernel_width < n:
        raise ConfigurationError(
            f"kernel_width must be odd and < segment length, got {kernel_width} for length {n}")
    x = beat.samples
    sd = float(np.std(x))
    if sd <= 0.0 or not np.isfinite(sd):
        raise DegenerateInputError("zero-variance segment cannot be normalized")
    z = (x - np.mean(x)) / sd
    if kernel_width > 1:
        half = kernel_width // 2
        kernel = np.full(kernel_width, 1.0 / kernel_width)
        z = np.convolve(np.pad(z, half, mode="edge"), kernel, mode="valid")
        sd2 = float(np.std(z))
        if sd2 <= 0.0:
            raise DegenerateInputError("segment collapsed to a constant after smoothing")
        z = (z - np.mean(z)) / sd2
    return FeatureVector(z)


def validate_beats(rows: np.ndarray, min_corr: float = 0.5) -> np.ndarray:
    """Drop rows that do not resemble the ensemble median beat.

    Detected "beats" that are actually noise bursts correlate near zero
    with the per-element median of all rows, while genuine beats stay well
    correlated even under heavy noise.  Rows are z-normalized features, so
    the correlation is a plain inner product.  Falls back to the input when
    fewer than two rows survive.
    """
    if rows.shape[0] < 3:
        return rows
    med = np.median(rows, axis=0)
    norm = float(np.linalg.norm(med))
    if norm == 0.0:
        return rows
    corr = rows @ med / (np.linalg.norm(rows, axis=1) * norm + 1e-12)
    kept = rows[corr >= min_corr]
    return kept if kept.shape[0] >= 2 else rows


def beat_feature_matrix(signal: RawSignal, config: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """Run the full pipeline on a strip and stack per-beat feature vectors.

    Returns an (n_beats, D) array; n_beats may be zero when detection finds
    nothing usable.
    """
    work = signal
    if config.denoise:
        work = bandpass_fir(work, config.band[0], config.band[1], config.taps)
    peaks = detect_r_peaks(work)
    beats = segment_beats(work, peaks, config.window_ms)
    rows = []
    for beat in beats:
        try:
            rows.append(extract_features(beat, config.kernel_width).values)
        except DegenerateInputError:
            continue
    if not rows:
        return np.empty((0, config.segment_length(signal.fs)))
    return np.vstack(rows)


def write_signal_csv(signal: RawSignal, path) -> None:
    """CSV format: header line ``fs=<Hz>`` then one sample (mV) per line."""
    with open(path, "w") as fh:
        fh.write(f"fs={signal.fs:.10g}\n")
        for v in signal.samples:
            fh.write(f"{v:.10g}\n")


def read_signal_csv(path) -> RawSignal:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("fs="):
            raise ConfigurationError(f"expected 'fs=<Hz>' header, got {header!r}")
        fs = float(header[3:])
        samples = np.array([float(line) for line in fh if line.strip()])
    return RawSignal(samples, fs)
