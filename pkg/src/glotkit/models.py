"""The two networks.

Analyzer: fully convolutional, valid-padded, 16 kHz speech in, 2 kHz
glottal flow out.  Three conv+pool stages take the rate to 2 kHz, two wide
convs and a 1x1 head finish the job; the total trim is 993 input samples,
so the first output sample is centred 496.5 input samples in and output
sample i sits at input position 496.5 + 8 i.

Synthesizer: WaveNet-style non-autoregressive stack (two stacks of six
dilated layers, gated units, residual + skip connections), driven by the
upsampled pulse signal plus a white-noise channel and conditioned on
per-sample 64 + 16 band envelopes.  Internally zero-padded, so output
length equals input length.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Tensor, BatchNormState, batch_norm, concat, conv1d,
                       gated_unit, leaky_relu, pad, pool_avg, relu, reshape)
from .dsp import AudioBuffer, PulseSignal, upsample_cubic

ANALYZER_TRIM = 993
DOWNSAMPLE = 8
MIN_ANALYZER_INPUT = ANALYZER_TRIM + 1


@dataclass
class AnalyzerConfig:
    channels: int = 64
    kernel_sizes: tuple = (32, 32, 32, 49, 50)
    pool_after: tuple = (True, True, True, False, False)
    leaky_slope: float = 0.01

    def __post_init__(self):
        ds, trim = 1, 0
        for k, pooled in zip(self.kernel_sizes, self.pool_after):
            trim += (k - 1) * ds
            if pooled:
                ds *= 2
        if trim != ANALYZER_TRIM:
            raise ValueError(
                f"layer layout trims {trim} input samples, need {ANALYZER_TRIM}")
        if ds != DOWNSAMPLE:
            raise ValueError(f"downsampling {ds}, need {DOWNSAMPLE}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")


@dataclass
class SynthesizerConfig:
    stacks: int = 2
    layers_per_stack: int = 6
    dilations: tuple = (1, 2, 4, 8, 16, 32)
    residual_channels: int = 64
    skip_channels: int = 64
    kernel_size: int = 3
    cond_channels: int = 64 + 16

    def __post_init__(self):
        if self.stacks != 2 or self.layers_per_stack != 6:
            raise ValueError("synthesizer uses exactly two stacks of six layers")
        if len(self.dilations) != self.layers_per_stack:
            raise ValueError("one dilation per layer required")


def reference_configs():
    """Full-width analyzer/synthesizer configurations."""
    return AnalyzerConfig(), SynthesizerConfig()


def toy_configs(width=16):
    """Reduced-width configurations for desk-scale training runs."""
    return (AnalyzerConfig(channels=width),
            SynthesizerConfig(residual_channels=width, skip_channels=width))


def analyzer_output_len(n_input):
    """Output sample count for a valid-padded pass over `n_input` samples."""
    if n_input < MIN_ANALYZER_INPUT:
        raise ValueError(
            f"analyzer needs >= {MIN_ANALYZER_INPUT} samples, got {n_input}")
    return (n_input - MIN_ANALYZER_INPUT) // DOWNSAMPLE + 1


def _conv_init(rng, out_ch, in_ch, k, dtype):
    std = np.sqrt(2.0 / (in_ch * k))
    return Tensor((rng.standard_normal((out_ch, in_ch, k)) * std).astype(dtype),
                  requires_grad=True)


def _bias_init(out_ch, dtype):
    return Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)


class Analyzer:
    """Valid-padded convolutional analyzer with switchable batch-norm mode."""

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or AnalyzerConfig()
        self.bn_mode = "train"
        rng = np.random.default_rng(seed)
        c = self.config.channels
        self.params = {}
        self.bn = []
        in_ch = 1
        for i, k in enumerate(self.config.kernel_sizes):
            self.params[f"conv{i}.w"] = _conv_init(rng, c, in_ch, k, dtype)
            self.params[f"conv{i}.b"] = _bias_init(c, dtype)
            st = BatchNormState(c, dtype=dtype)
            self.bn.append(st)
            self.params[f"bn{i}.gamma"] = st.gamma
            self.params[f"bn{i}.beta"] = st.beta
            in_ch = c
        self.params["head.w"] = _conv_init(rng, 1, c, 1, dtype)
        self.params["head.b"] = _bias_init(1, dtype)

    def freeze_batchnorm(self):
        self.bn_mode = "frozen"

    def forward(self, x, detach_params=False):
        """x: Tensor [batch, 1, time] -> Tensor [batch, 1, time_out].

        With `detach_params` the pass uses value-only views of every
        parameter: gradients still flow to the input, but no parameter
        accumulates gradient (the re-analysis convention).  Batch norm
        then always runs in frozen mode so the pass stays deterministic.
        """
        if x.data.ndim != 3 or x.data.shape[1] != 1:
            raise ValueError(f"analyzer expects [batch, 1, time], got {x.shape}")
        if x.data.shape[2] < MIN_ANALYZER_INPUT:
            raise ValueError(
                f"analyzer needs >= {MIN_ANALYZER_INPUT} samples, got {x.data.shape[2]}")
        get = (lambda n: self.params[n].detach()) if detach_params \
            else (lambda n: self.params[n])
        h = x
        for i in range(len(self.config.kernel_sizes)):
            h = conv1d(h, get(f"conv{i}.w"), get(f"conv{i}.b"))
            if detach_params:
                st = self.bn[i]
                dtype = h.data.dtype
                mu = st.running_mean.astype(dtype)[None, :, None]
                sd = np.sqrt(st.running_var + st.eps).astype(dtype)[None, :, None]
                hhat = (h - Tensor(mu)) * Tensor(1.0 / sd)
                h = hhat * Tensor(st.gamma.data.reshape(1, -1, 1)) \
                    + Tensor(st.beta.data.reshape(1, -1, 1))
            else:
                h = batch_norm(h, self.bn[i], mode=self.bn_mode)
            h = leaky_relu(h, self.config.leaky_slope)
            if self.config.pool_after[i]:
                h = pool_avg(h, 2)
        return conv1d(h, get("head.w"), get("head.b"))

    def trainable_params(self):
        return dict(self.params)

    def state_dict(self):
        out = dict(self.params)
        for i, st in enumerate(self.bn):
            out[f"bn{i}.running_mean"] = Tensor(st.running_mean)
            out[f"bn{i}.running_var"] = Tensor(st.running_var)
        return out

    def load_state(self, tensors):
        for name, p in self.params.items():
            p.data[...] = tensors[name].data.astype(p.data.dtype).reshape(p.data.shape)
        for i, st in enumerate(self.bn):
            st.running_mean[...] = tensors[f"bn{i}.running_mean"].data.astype(np.float64)
            st.running_var[...] = tensors[f"bn{i}.running_var"].data.astype(np.float64)


def analyzer_forward(analyzer, audio):
    """AudioBuffer @16 kHz -> PulseSignal @2 kHz (batch-of-one pass)."""
    if audio.sample_rate != 16000:
        raise ValueError(f"analyzer expects 16 kHz audio, got {audio.sample_rate}")
    x = Tensor(audio.samples.astype(np.float32)[None, None, :])
    y = analyzer.forward(x)
    # valid padding: output sample i sits 496.5 input samples plus i
    # output periods into the audio
    return PulseSignal(y.data[0, 0].astype(np.float64),
                       start_offset_s=496.5 / 16000)


class Synthesizer:
    """Gated dilated-convolution synthesizer, output length = input length."""

    def __init__(self, config=None, seed=1, dtype=np.float32):
        self.config = config or SynthesizerConfig()
        rng = np.random.default_rng(seed)
        r = self.config.residual_channels
        s = self.config.skip_channels
        cc = self.config.cond_channels
        k = self.config.kernel_size
        self.params = {
            "in.w": _conv_init(rng, r, 2, 1, dtype),
            "in.b": _bias_init(r, dtype),
        }
        for st in range(self.config.stacks):
            for l in range(self.config.layers_per_stack):
                p = f"s{st}l{l}"
                self.params[f"{p}.dil.w"] = _conv_init(rng, 2 * r, r, k, dtype)
                self.params[f"{p}.dil.b"] = _bias_init(2 * r, dtype)
                self.params[f"{p}.cond.w"] = _conv_init(rng, 2 * r, cc, 1, dtype)
                self.params[f"{p}.cond.b"] = _bias_init(2 * r, dtype)
                self.params[f"{p}.res.w"] = _conv_init(rng, r, r, 1, dtype)
                self.params[f"{p}.res.b"] = _bias_init(r, dtype)
                self.params[f"{p}.skip.w"] = _conv_init(rng, s, r, 1, dtype)
                self.params[f"{p}.skip.b"] = _bias_init(s, dtype)
        self.params["out1.w"] = _conv_init(rng, s, s, 1, dtype)
        self.params["out1.b"] = _bias_init(s, dtype)
        self.params["out2.w"] = _conv_init(rng, 1, s, 1, dtype)
        self.params["out2.b"] = _bias_init(1, dtype)

    def forward(self, pulse, noise, cond):
        """pulse, noise: Tensor [batch, time]; cond: Tensor [batch, cond_ch, time]."""
        if pulse.data.shape != noise.data.shape:
            raise ValueError(
                f"pulse/noise length mismatch: {pulse.shape} vs {noise.shape}")
        if cond.data.shape[2] != pulse.data.shape[1]:
            raise ValueError(
                f"conditioning length {cond.data.shape[2]} != input {pulse.data.shape[1]}")
        b, t = pulse.data.shape
        r = self.config.residual_channels
        x = concat([reshape(pulse, (b, 1, t)), reshape(noise, (b, 1, t))], axis=1)
        h = conv1d(x, self.params["in.w"], self.params["in.b"])
        skip_sum = None
        half = (self.config.kernel_size - 1) // 2
        for st in range(self.config.stacks):
            for l, d in enumerate(self.config.dilations):
                p = f"s{st}l{l}"
                hp = pad(h, [(0, 0), (0, 0), (half * d, half * d)])
                z = conv1d(hp, self.params[f"{p}.dil.w"],
                           self.params[f"{p}.dil.b"], dilation=d)
                z = z + conv1d(cond, self.params[f"{p}.cond.w"],
                               self.params[f"{p}.cond.b"])
                g = gated_unit(z[:, :r, :], z[:, r:, :])
                skip = conv1d(g, self.params[f"{p}.skip.w"],
                              self.params[f"{p}.skip.b"])
                skip_sum = skip if skip_sum is None else skip_sum + skip
                h = h + conv1d(g, self.params[f"{p}.res.w"],
                               self.params[f"{p}.res.b"])
        y = relu(skip_sum)
        y = relu(conv1d(y, self.params["out1.w"], self.params["out1.b"]))
        y = conv1d(y, self.params["out2.w"], self.params["out2.b"])
        return reshape(y, (b, t))

    def trainable_params(self):
        return dict(self.params)

    def state_dict(self):
        return dict(self.params)

    def load_state(self, tensors):
        for name, p in self.params.items():
            p.data[...] = tensors[name].data.astype(p.data.dtype).reshape(p.data.shape)


def upsample_pulse_linear(pulse, factor=8):
    """Differentiable linear pulse upsampling, Tensor [batch, T] -> [batch, factor*T].

    Zero-stuffing followed by a triangular interpolation kernel; knot t
    lands exactly on output sample factor*t, and the final (factor-1)
    samples ramp linearly toward zero (there is no knot after the last).
    """
    b, t = pulse.data.shape
    x = reshape(pulse, (b, 1, t, 1))
    x = pad(x, [(0, 0), (0, 0), (0, 0), (0, factor - 1)])
    x = reshape(x, (b, 1, t * factor))
    x = pad(x, [(0, 0), (0, 0), (factor - 1, factor - 1)])
    tri = 1.0 - np.abs(np.arange(2 * factor - 1) - (factor - 1)) / factor
    kernel = Tensor(tri[None, None, :].astype(pulse.data.dtype))
    return reshape(conv1d(x, kernel), (b, t * factor))


def upsample_pulse_cubic(pulses):
    """Inference-time cubic upsampling of a PulseSignal to 16 kHz."""
    factor = 16000 // pulses.sample_rate
    buf = AudioBuffer(pulses.samples, pulses.sample_rate)
    return upsample_cubic(buf, factor)


def upsample_envelope(env, n_samples, sample_rate=16000):
    """Per-sample conditioning [n_bands, n_samples] from framed envelopes.

    Frame f of a 32 ms / 5 ms-hop envelope covers samples starting at
    f * hop; values are linearly interpolated at the frame centres and
    held constant beyond the first/last centre.
    """
    hop = int(round(env.frame_hop * sample_rate))
    wlen_half = hop * 3  # ~half the 32 ms analysis window at 5 ms hop
    centers = np.arange(env.frames.shape[0]) * hop + wlen_half
    t = np.arange(n_samples)
    out = np.empty((env.frames.shape[1], n_samples))
    for band in range(env.frames.shape[1]):
        out[band] = np.interp(t, centers, env.frames[:, band])
    return out
