"""Gammatone-cepstral features for audio event detection streams."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from math import gcd

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

# Additive floor applied before the log; also the post-subtraction energy floor.
LOG_FLOOR = 1e-10
NOISE_FLOOR_PERCENTILE = 10.0

# Glasberg-Moore equivalent rectangular bandwidth constants.
_EAR_Q = 9.26449
_MIN_BW = 24.7
_BW_FACTOR = 1.019
_GT_ORDER = 4


@dataclass(eq=False)
class Waveform:
    """Mono audio, float64 samples nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = samples
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def rms(self) -> float:
        if len(self.samples) == 0:
            return 0.0
        return float(np.sqrt(np.mean(np.square(self.samples))))


@dataclass(frozen=True)
class FeatureConfig:
    """Extraction parameters; equality of these fields defines feature-space compatibility."""

    sample_rate: int = 16000
    n_channels: int = 64
    f_min: float = 50.0
    f_max: float = 8000.0
    window_len: float = 0.1
    hop_len: float = 0.01
    noise_subtraction: bool = False

    def __post_init__(self):
        if self.n_channels < 2:
            raise ValueError(f"need at least 2 channels, got {self.n_channels}")
        if not 0.0 < self.f_min < self.f_max:
            raise ValueError(f"need 0 < f_min < f_max, got {self.f_min}, {self.f_max}")
        if self.f_max > self.sample_rate / 2:
            raise ValueError(
                f"f_max {self.f_max} exceeds Nyquist for rate {self.sample_rate}"
            )
        if not 0.0 < self.hop_len <= self.window_len:
            raise ValueError(
                f"need 0 < hop_len <= window_len, got {self.hop_len}, {self.window_len}"
            )

    def fingerprint(self) -> dict:
        """Fields that pin the feature space a model was trained in.

        Noise subtraction is a per-stream preprocessing toggle, not part of the
        space itself, so it is excluded.
        """
        fp = asdict(self)
        del fp["noise_subtraction"]
        return fp


@dataclass(eq=False)
class FeatureMatrix:
    """One cepstral row per analysis segment."""

    rows: np.ndarray
    segment_times: np.ndarray
    config: FeatureConfig

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.segment_times = np.asarray(self.segment_times, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValueError(f"rows must be 2-d, got shape {self.rows.shape}")
        if len(self.segment_times) != len(self.rows):
            raise ValueError("segment_times length does not match rows")

    @property
    def n_segments(self) -> int:
        return self.rows.shape[0]

    def segment_centers(self) -> np.ndarray:
        """Center time of each segment in seconds."""
        return self.segment_times + self.config.window_len / 2.0

    @property
    def duration(self) -> float:
        """Time covered by the segmented stream, in seconds."""
        if self.n_segments == 0:
            return 0.0
        return float(self.segment_times[-1]) + self.config.window_len


def load_audio(path) -> Waveform:
    """Decode a PCM or float WAV file to a mono Waveform.

    Integer encodings are scaled to [-1, 1]; multi-channel input is averaged
    down to mono.
    """
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValueError(f"unsupported/corrupt container: {path}: {exc}") from exc
    if data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy places 24-bit PCM in the high bytes of int32
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported sample encoding {data.dtype} in {path}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return Waveform(samples, int(rate))


def save_audio(path, waveform: Waveform) -> None:
    """Write a Waveform as 16-bit PCM, clipping to full scale."""
    clipped = np.clip(waveform.samples, -1.0, 32767.0 / 32768.0)
    wavfile.write(path, waveform.sample_rate, (clipped * 32768.0).astype(np.int16))


def resample(waveform: Waveform, target_rate: int) -> Waveform:
    """Polyphase resampling; identity when rates already match."""
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == waveform.sample_rate:
        return waveform
    g = gcd(target_rate, waveform.sample_rate)
    out = resample_poly(waveform.samples, target_rate // g, waveform.sample_rate // g)
    return Waveform(out, target_rate)


def hz_to_cam(f):
    """Frequency in Hz to ERB-rate scale (Cams)."""
    return 21.4 * np.log10(4.37e-3 * np.asarray(f, dtype=np.float64) + 1.0)


def cam_to_hz(c):
    """ERB-rate scale (Cams) back to Hz."""
    return (np.power(10.0, np.asarray(c, dtype=np.float64) / 21.4) - 1.0) / 4.37e-3


def erb_bandwidth(f):
    """Equivalent rectangular bandwidth at frequency f, in Hz."""
    return _MIN_BW + np.asarray(f, dtype=np.float64) / _EAR_Q


def erb_space(f_min: float, f_max: float, n_channels: int) -> np.ndarray:
    """Center frequencies equally spaced on the ERB-rate scale, ascending."""
    cams = np.linspace(hz_to_cam(f_min), hz_to_cam(f_max), n_channels)
    return cam_to_hz(cams)


def gammatone_weights(config: FeatureConfig, n_fft: int) -> np.ndarray:
    """Spectral weights of a gammatone filterbank on the rFFT bins.

    Row k holds the squared magnitude response of a fourth-order gammatone
    centered at the k-th ERB-spaced frequency, normalized to unit sum so each
    channel integrates the power spectrum with equal total weight.
    """
    freqs = np.fft.rfftfreq(n_fft, 1.0 / config.sample_rate)
    centers = erb_space(config.f_min, config.f_max, config.n_channels)
    bw = _BW_FACTOR * erb_bandwidth(centers)
    rel = (freqs[np.newaxis, :] - centers[:, np.newaxis]) / bw[:, np.newaxis]
    weights = np.power(1.0 + rel * rel, -float(_GT_ORDER))
    return weights / weights.sum(axis=1, keepdims=True)


def subtract_noise_floor(energies: np.ndarray) -> np.ndarray:
    """Remove a per-channel stationary noise estimate from filterbank energies.

    The floor is the 10th percentile of each channel over all segments; the
    result is clamped to a small positive value so the log stays defined.
    """
    energies = np.asarray(energies, dtype=np.float64)
    if np.any(energies < 0):
        raise ValueError("filterbank energies must be non-negative")
    if energies.shape[0] == 0:
        return energies.copy()
    floor = np.percentile(energies, NOISE_FLOOR_PERCENTILE, axis=0)
    return np.maximum(energies - floor, LOG_FLOOR)


def gammatone_cepstra(waveform: Waveform, config: FeatureConfig) -> FeatureMatrix:
    """Extract gammatone-cepstral coefficients from overlapping windows.

    The stream is cut into windows of ``window_len`` seconds every ``hop_len``
    seconds (trailing partial window dropped), each window is Hann-weighted,
    its power spectrum is pooled by the gammatone filterbank, and a DCT-II of
    the log energies yields one cepstral row per segment.
    """
    if waveform.sample_rate != config.sample_rate:
        raise ValueError(
            f"waveform rate {waveform.sample_rate} does not match "
            f"configured rate {config.sample_rate}; resample first"
        )
    win = int(round(config.window_len * config.sample_rate))
    hop = int(round(config.hop_len * config.sample_rate))
    n = len(waveform.samples)
    n_segments = 0 if n < win else (n - win) // hop + 1
    if n_segments == 0:
        rows = np.zeros((0, config.n_channels))
        return FeatureMatrix(rows, np.zeros(0), config)

    offsets = np.arange(n_segments) * hop
    frames = waveform.samples[offsets[:, np.newaxis] + np.arange(win)]
    frames = frames * get_window("hann", win, fftbins=True)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    energies = power @ gammatone_weights(config, win).T
    if config.noise_subtraction:
        energies = subtract_noise_floor(energies)
    rows = dct(np.log(energies + LOG_FLOOR), type=2, norm="ortho", axis=1)
    times = offsets / config.sample_rate
    return FeatureMatrix(rows, times, config)


def dump_features_csv(features: FeatureMatrix, path) -> None:
    """Write one row per segment: onset time followed by the coefficients."""
    n_coef = features.rows.shape[1]
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["time"] + [f"c{i}" for i in range(n_coef)])
        for t, row in zip(features.segment_times, features.rows):
            writer.writerow([f"{t:.6f}"] + [repr(float(v)) for v in row])
