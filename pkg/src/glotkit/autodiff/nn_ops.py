"""Network-level differentiable operations: dilated convolution, pooling,
batch normalization, gated activations and the framed log-magnitude STFT
used by the spectral losses.

Convolutions use the cross-correlation convention (no kernel flip) and are
evaluated through strided views plus BLAS-backed einsum, which is the fast
path on CPU.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, tanh, sigmoid, mul, sqrt

__all__ = ["conv1d", "pool_avg", "batch_norm", "gated_unit", "stft_logmag"]


def _conv_view(x, k, d):
    """Strided view [B, C, k, T_out] of x [B, C, T] for a dilated kernel."""
    b, c, t = x.shape
    t_out = t - (k - 1) * d
    sb, sc, st = x.strides
    return as_strided(x, (b, c, k, t_out), (sb, sc, st * d, st))


def conv1d(x, weight, bias=None, dilation=1):
    """Valid-padded dilated 1-D convolution (cross-correlation).

    Parameters
    ----------
    x : Tensor [batch, in_ch, time]
    weight : Tensor [out_ch, in_ch, k]
    bias : Tensor [out_ch] or None
    dilation : int

    Returns
    -------
    Tensor [batch, out_ch, time - (k - 1) * dilation]
    """
    k = weight.data.shape[2]
    d = int(dilation)
    if x.data.ndim != 3:
        raise ValueError(f"conv1d expects [batch, ch, time], got shape {x.data.shape}")
    t = x.data.shape[2]
    if t < (k - 1) * d + 1:
        raise ValueError(
            f"conv1d input too short: time={t} < (k-1)*d+1={(k - 1) * d + 1}")
    view = _conv_view(x.data, k, d)
    y = np.einsum("bckt,ock->bot", view, weight.data, optimize=True)
    if bias is not None:
        y = y + bias.data[None, :, None]
    parents = (x, weight) + ((bias,) if bias is not None else ())
    out = Tensor(y, parents=parents)
    if out._parents:
        def backward(g):
            if weight.requires_grad:
                weight.accum_grad(np.einsum("bot,bckt->ock", g, view, optimize=True))
            if bias is not None and bias.requires_grad:
                bias.accum_grad(g.sum(axis=(0, 2)))
            if x.requires_grad:
                # full correlation of upstream grad with the flipped kernel
                p = (k - 1) * d
                gp = np.pad(g, ((0, 0), (0, 0), (p, p)))
                gview = _conv_view(gp, k, d)
                wflip = weight.data[:, :, ::-1]
                x.accum_grad(np.einsum("bokt,ock->bct", gview, wflip, optimize=True))
        out._backward = backward
    return out


def pool_avg(x, factor=2):
    """Average pooling along the last axis.

    A trailing group shorter than `factor` is averaged over its actual
    length, so an odd-length input of length 2m+1 yields m+1 outputs.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("pool factor must be >= 1")
    t = x.data.shape[-1]
    n_full = t // factor
    rem = t - n_full * factor
    head = x.data[..., :n_full * factor]
    pooled = head.reshape(head.shape[:-1] + (n_full, factor)).mean(axis=-1)
    if rem:
        tail = x.data[..., n_full * factor:].mean(axis=-1, keepdims=True)
        y = np.concatenate([pooled, tail], axis=-1)
    else:
        y = pooled
    out = Tensor(y, parents=(x,))
    if out._parents:
        def backward(g):
            gx = np.empty_like(x.data)
            gh = np.repeat(g[..., :n_full], factor, axis=-1) / factor
            gx[..., :n_full * factor] = gh
            if rem:
                gx[..., n_full * factor:] = g[..., n_full:] / rem
            x.accum_grad(gx)
        out._backward = backward
    return out


class BatchNormState:
    """Running statistics plus affine parameters for one channel axis."""

    def __init__(self, n_channels, dtype=np.float32, momentum=0.9, eps=1e-5):
        self.gamma = Tensor(np.ones(n_channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(n_channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(n_channels, dtype=np.float64)
        self.running_var = np.ones(n_channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, state, mode="train"):
    """Batch normalization over [batch, ch, time] along (batch, time).

    `mode="train"` normalizes with batch statistics and updates the running
    stats (momentum 0.9); `mode="frozen"` uses the stored running stats and
    never touches them, while still passing gradients to the input and to
    the affine parameters.
    """
    if mode not in ("train", "frozen"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    dtype = x.data.dtype
    if mode == "train":
        mu = x.mean(axis=(0, 2), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(0, 2), keepdims=True)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mu.data.ravel()
        state.running_var = m * state.running_var + (1 - m) * var.data.ravel()
        xhat = xc / sqrt(var + state.eps)
    else:
        mu = state.running_mean.astype(dtype)[None, :, None]
        sd = np.sqrt(state.running_var + state.eps).astype(dtype)[None, :, None]
        xhat = (x - Tensor(mu)) * Tensor(1.0 / sd)
    g = state.gamma.reshape((1, -1, 1))
    b = state.beta.reshape((1, -1, 1))
    return xhat * g + b


def gated_unit(x_filter, x_gate):
    """WaveNet-style gate: tanh(x_filter) * sigmoid(x_gate)."""
    return mul(tanh(x_filter), sigmoid(x_gate))


def frame_count(n_samples, window_len, hop):
    if n_samples < window_len:
        raise ValueError(
            f"signal length {n_samples} shorter than window {window_len}")
    return 1 + (n_samples - window_len) // hop


def stft_logmag(x, window, n_fft, hop, floor=1e-5):
    """Log-magnitude STFT of a batch of signals, differentiable.

    Parameters
    ----------
    x : Tensor [batch, time] (a 1-D input is treated as batch of one)
    window : ndarray [window_len]
    n_fft : int, >= window_len; frames are zero-padded up to it
    hop : int
    floor : float, magnitude floor applied before the natural log

    Returns
    -------
    Tensor [batch, n_frames, n_fft // 2 + 1]
    """
    squeeze = x.data.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    b, t = xd.shape
    wlen = len(window)
    n_frames = frame_count(t, wlen, hop)
    sb, st = xd.strides
    frames = as_strided(xd, (b, n_frames, wlen), (sb, st * hop, st))
    win = window.astype(xd.dtype)
    fw = frames * win
    spec = np.fft.rfft(fw, n=n_fft, axis=-1)
    mag = np.abs(spec)
    floored = mag <= floor
    mag_f = np.maximum(mag, floor)
    y = np.log(mag_f)
    if squeeze:
        y = y[0]
    out = Tensor(y, parents=(x,))
    if out._parents:
        def backward(g):
            if squeeze:
                gg = g[None]
            else:
                gg = g
            # d log|X| / dX as a complex factor; zero where the floor clips
            c = np.where(floored, 0.0, gg / np.maximum(mag * mag, floor * floor)) * spec
            full = np.zeros(gg.shape[:-1] + (n_fft,), dtype=complex)
            full[..., : n_fft // 2 + 1] = c
            gframes = np.real(np.fft.ifft(full, axis=-1)) * n_fft
            gframes = gframes[..., :wlen] * win
            gx = np.zeros_like(xd, dtype=np.float64)
            for i in range(n_frames):
                gx[:, i * hop:i * hop + wlen] += gframes[:, i, :]
            if squeeze:
                gx = gx[0]
            x.accum_grad(gx)
        out._backward = backward
    return out
