"""The five training losses and their weighted combination.

Spectral losses are multi-resolution log-magnitude STFT MAEs (half-overlap
Hann windows, magnitudes floored at 1e-5 before the natural log) and are
phase-blind; the time-domain losses carry the phase information, which is
where the pulse positions live.  The analysis-synthesis bundle combines:

  AS-spectral (0.1)  resynthesis vs speech, windows 160/53.3/32/22.9/17.8 ms
  AS-time     (10)   noise-free resynthesis vs speech, point-wise MAE
  ASA-time    (1)    re-analysis of the resynthesis vs the original
                     analysis, MSE at 2 kHz (re-analysis weights detached)
  A-spectral  (0.02) analyzed pulses vs LF reference pulses, 80/40 ms @2 kHz
  A-time      (10)   analyzed pulses vs ground-truth pulses (synthetic only)
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, abs_, mean, reshape, square, stft_logmag
from .dsp import hann_window, next_pow2, window_samples
from .models import analyzer_output_len, upsample_pulse_linear

AS_SPECTRAL_WINDOWS_MS = (160.0, 53.3, 32.0, 22.9, 17.8)
A_SPECTRAL_WINDOWS_MS = (80.0, 40.0)

# analyzer output sample i sits 496.5 + 8 i input samples into its input,
# so the synthesizer's 2560-sample window starts 62 analysis samples in
REANALYSIS_CROP = 62


@dataclass
class LossWeights:
    as_spectral: float = 0.1
    as_time: float = 10.0
    asa_time: float = 1.0
    a_spectral: float = 0.02
    a_time: float = 10.0

    def __post_init__(self):
        for name in ("as_spectral", "as_time", "asa_time", "a_spectral", "a_time"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class SpectralLossSpec:
    windows_ms: tuple
    sample_rate: int

    def __post_init__(self):
        if list(self.windows_ms) != sorted(self.windows_ms, reverse=True):
            raise ValueError("window sizes must be sorted descending")


AS_SPECTRAL_SPEC = SpectralLossSpec(AS_SPECTRAL_WINDOWS_MS, 16000)
A_SPECTRAL_SPEC = SpectralLossSpec(A_SPECTRAL_WINDOWS_MS, 2000)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def multi_res_spectral_mae(x, y, spec):
    """Mean over resolutions of the MAE between log-magnitude STFTs.

    `x`, `y`: Tensor or array, [time] or [batch, time], equal shapes.
    """
    x, y = _as_tensor(x), _as_tensor(y)
    if x.data.shape != y.data.shape:
        raise ValueError(f"shape mismatch: {x.data.shape} vs {y.data.shape}")
    total = None
    for wms in spec.windows_ms:
        wlen = window_samples(wms, spec.sample_rate)
        hop = wlen // 2
        win = hann_window(wlen)
        nfft = next_pow2(wlen)
        lx = stft_logmag(x, win, nfft, hop)
        ly = stft_logmag(y, win, nfft, hop)
        term = mean(abs_(lx - ly))
        total = term if total is None else total + term
    return total * (1.0 / len(spec.windows_ms))


def as_time_loss(resynth_noise_zero, target):
    """Point-wise MAE between the noise-free resynthesis and the speech."""
    a, b = _as_tensor(resynth_noise_zero), _as_tensor(target)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    return mean(abs_(a - b))


def asa_time_loss(reanalysis, original_analysis):
    """MSE at 2 kHz between re-analyzed pulses and the original analysis.

    The caller must run the re-analysis pass with detached parameters;
    both operands may carry gradient (synthesizer and first analyzer).
    Note the degenerate optimum: two all-zero pulse signals give 0.
    """
    a, b = _as_tensor(reanalysis), _as_tensor(original_analysis)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    return mean(square(a - b))


def a_spectral_loss(analyzed_pulses, reference_pulses):
    """80/40 ms multi-resolution spectral MAE between pulse signals @2 kHz."""
    return multi_res_spectral_mae(analyzed_pulses, reference_pulses,
                                  A_SPECTRAL_SPEC)


def a_time_loss(analyzed_pulses, target_pulses):
    """MSE between the analyzer output and ground-truth pulses."""
    a, b = _as_tensor(analyzed_pulses), _as_tensor(target_pulses)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    return mean(square(a - b))


def resynth_target(audio_batch, n_synth):
    """The 16 kHz speech samples the resynthesis is compared against.

    Resynthesis sample n sits at input position 496.5 + n, so the target
    is the two-point average of the input at 496 + n and 497 + n.
    """
    a = np.asarray(audio_batch)
    return 0.5 * (a[..., 496:496 + n_synth] + a[..., 497:497 + n_synth])


def step2_real_bundle(audio, noise, cond, reference_pulses, analyzer,
                      synthesizer, weights=None, ablate_a_spectral=False):
    """Weighted real-data loss over one batch, with per-loss breakdown.

    Parameters
    ----------
    audio : array [batch, 3553] speech segments @16 kHz
    noise : array [batch, 2560] white-noise input for the synthesizer
    cond : array [batch, 80, 2560] per-sample 64+16 band conditioning
    reference_pulses : array [batch, 320] LF pulses rendered from the
        utterance's f0/Rd/voicing annotations, on the analyzer output grid
    analyzer, synthesizer : the two networks (analyzer batch norm frozen)
    weights : LossWeights
    ablate_a_spectral : drop the A-spectral regularizer

    Returns (total Tensor, breakdown dict of floats, analyzed pulses
    [batch, n_out] as a plain array for monitoring).
    """
    if weights is None:
        weights = LossWeights()
    audio = np.asarray(audio)
    b, seg = audio.shape
    n_out = analyzer_output_len(seg)
    n_synth = 8 * n_out  # eight 16 kHz samples per analysis sample
    x = Tensor(audio.astype(np.float32)[:, None, :])
    pulses = reshape(analyzer.forward(x), (b, n_out))
    up = upsample_pulse_linear(pulses, 8)
    noise_t = Tensor(np.asarray(noise, dtype=np.float32))
    cond_t = Tensor(np.asarray(cond, dtype=np.float32))
    zeros_t = Tensor(np.zeros_like(noise_t.data))
    target = Tensor(resynth_target(audio, n_synth).astype(np.float32))

    resynth = synthesizer.forward(up, noise_t, cond_t)
    resynth_zero = synthesizer.forward(up, zeros_t, cond_t)
    l_as_spec = multi_res_spectral_mae(resynth, target, AS_SPECTRAL_SPEC)
    l_as_time = as_time_loss(resynth_zero, target)

    n_re = analyzer_output_len(n_synth)
    reanalysis = reshape(
        analyzer.forward(reshape(resynth, (b, 1, n_synth)), detach_params=True),
        (b, n_re))
    original = pulses[:, REANALYSIS_CROP:REANALYSIS_CROP + n_re]
    l_asa = asa_time_loss(reanalysis, original)

    total = weights.as_spectral * l_as_spec + weights.as_time * l_as_time \
        + weights.asa_time * l_asa
    breakdown = {
        "as_spectral": float(l_as_spec.item()),
        "as_time": float(l_as_time.item()),
        "asa_time": float(l_asa.item()),
        "a_spectral": 0.0,
    }
    if not ablate_a_spectral and weights.a_spectral > 0:
        ref = Tensor(np.asarray(reference_pulses, dtype=np.float32))
        l_a_spec = a_spectral_loss(pulses, ref)
        total = total + weights.a_spectral * l_a_spec
        breakdown["a_spectral"] = float(l_a_spec.item())
    breakdown["total"] = float(total.item())
    return total, breakdown, pulses.data.copy()
