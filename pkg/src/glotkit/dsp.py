"""Deterministic signal-processing primitives shared by corpus generation,
the losses, the networks and the evaluation stage.

All functions are pure: identical inputs give bit-identical outputs.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.interpolate import CubicSpline

LOG_FLOOR = 1e-5


@dataclass
class AudioBuffer:
    """Mono sample sequence plus its sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ValueError("AudioBuffer holds mono 1-D signals")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioBuffer samples must be finite")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class PulseSignal:
    """Glottal-flow signal at the analyzer rate (2 kHz).

    `start_offset_s` is the time of the first sample relative to the
    start of the underlying 16 kHz signal; the analyzer's valid padding
    places its first output at 496.5 input samples.
    """

    samples: np.ndarray
    sample_rate: int = 2000
    start_offset_s: float = 0.5 / 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    def __len__(self):
        return len(self.samples)


@dataclass
class LogMagSpectrogram:
    """Frames of log STFT magnitudes, [n_frames x n_bins]."""

    frames: np.ndarray
    window_len: int
    hop: int


@dataclass
class MelEnvelope:
    """Log mel-band energies, [n_frames x n_bands], on a fixed frame hop."""

    frames: np.ndarray
    frame_hop: float  # seconds

    @property
    def n_bands(self):
        return self.frames.shape[1]


def hann_window(size):
    """Symmetric Hann window w[n] = 0.5 * (1 - cos(2*pi*n / (size-1)))."""
    size = int(size)
    if size < 2:
        raise ValueError(f"hann_window needs size >= 2, got {size}")
    n = np.arange(size)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (size - 1)))


def next_pow2(n):
    p = 1
    while p < n:
        p *= 2
    return p


def window_samples(window_ms, sample_rate):
    return int(round(window_ms * sample_rate / 1000.0))


def frame_signal(x, window_len, hop):
    """Strided frame view [n_frames x window_len]; raises if too short."""
    n = len(x)
    if n < window_len:
        raise ValueError(f"signal length {n} shorter than one window ({window_len})")
    n_frames = 1 + (n - window_len) // hop
    (st,) = x.strides
    return as_strided(x, (n_frames, window_len), (st * hop, st))


def stft_log_mag(signal, window_ms):
    """Half-overlap log-magnitude STFT.

    Frames are Hann-windowed, zero-padded to the next power-of-two FFT
    size; magnitudes are floored at 1e-5 before the natural log.
    """
    wlen = window_samples(window_ms, signal.sample_rate)
    hop = wlen // 2
    frames = frame_signal(signal.samples, wlen, hop)
    win = hann_window(wlen)
    nfft = next_pow2(wlen)
    mag = np.abs(np.fft.rfft(frames * win, n=nfft, axis=1))
    return LogMagSpectrogram(np.log(np.maximum(mag, LOG_FLOOR)), wlen, hop)


def mel_scale(f_hz):
    return 2595.0 * np.log10(1.0 + f_hz / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mel_filterbank(n_bands, nfft, sample_rate):
    """Triangular mel filters from 0 Hz to Nyquist, [n_bands x nfft//2+1]."""
    if n_bands < 1:
        raise ValueError("n_bands must be >= 1")
    n_bins = nfft // 2 + 1
    mel_pts = np.linspace(0.0, mel_scale(sample_rate / 2.0), n_bands + 2)
    hz_pts = mel_to_hz(mel_pts)
    bins = hz_pts / (sample_rate / 2.0) * (n_bins - 1)
    fb = np.zeros((n_bands, n_bins))
    for b in range(n_bands):
        left, center, right = bins[b], bins[b + 1], bins[b + 2]
        k = np.arange(n_bins)
        up = (k - left) / max(center - left, 1e-12)
        down = (right - k) / max(right - center, 1e-12)
        tri = np.clip(np.minimum(up, down), 0.0, None)
        s = tri.sum()
        # unit-area rows: band energies are weighted averages, so white
        # noise yields roughly equal energy in every band
        fb[b] = tri / s if s > 0 else tri
    return fb


def mel_band_envelope(signal, n_bands, window_ms=32.0, hop_ms=5.0):
    """Log mel-band energies of the power spectrogram.

    Deterministic surrogate spectral-envelope estimate: Hann-windowed
    power STFT pushed through a triangular mel filterbank, floored and
    logged.
    """
    wlen = window_samples(window_ms, signal.sample_rate)
    hop = window_samples(hop_ms, signal.sample_rate)
    frames = frame_signal(signal.samples, wlen, hop)
    win = hann_window(wlen)
    nfft = next_pow2(wlen)
    power = np.abs(np.fft.rfft(frames * win, n=nfft, axis=1)) ** 2
    fb = mel_filterbank(n_bands, nfft, signal.sample_rate)
    energies = power @ fb.T
    return MelEnvelope(np.log(np.maximum(energies, LOG_FLOOR)), hop_ms / 1000.0)


def upsample_linear(signal, factor):
    """Linear interpolation by an integer factor; knots are preserved.

    Output length is (len - 1) * factor + 1.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    x = signal.samples
    if len(x) == 0:
        raise ValueError("cannot upsample an empty signal")
    if len(x) == 1 or factor == 1:
        return AudioBuffer(x.copy(), signal.sample_rate * factor)
    n_out = (len(x) - 1) * factor + 1
    t = np.arange(n_out) / factor
    y = np.interp(t, np.arange(len(x)), x)
    return AudioBuffer(y, signal.sample_rate * factor)


def upsample_cubic(signal, factor):
    """Natural cubic-spline interpolation by an integer factor.

    Falls back to linear interpolation for signals with fewer than 4
    knots (the spline system is under-determined there).
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    x = signal.samples
    if len(x) == 0:
        raise ValueError("cannot upsample an empty signal")
    if len(x) < 4:
        return upsample_linear(signal, factor)
    if factor == 1:
        return AudioBuffer(x.copy(), signal.sample_rate)
    spline = CubicSpline(np.arange(len(x)), x, bc_type="natural")
    n_out = (len(x) - 1) * factor + 1
    y = spline(np.arange(n_out) / factor)
    return AudioBuffer(y, signal.sample_rate * factor)


def white_noise(length, seed, sample_rate=16000):
    """Zero-mean unit-variance Gaussian noise, deterministic per seed."""
    rng = np.random.default_rng(seed)
    return AudioBuffer(rng.standard_normal(int(length)), sample_rate)
