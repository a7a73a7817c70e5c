"""Annotated dataset generation and persistence.

Synthetic utterances are LF pulse trains shaped by a random smooth 64-band
spectral envelope, mixed with 16-band-shaped noise at a random SNR;
annotations (GCIs, f0/Rd/voicing tracks, envelopes, the 2 kHz flow target)
are exact by construction.  Pseudo-real utterances are the same recipe with
jitter, shimmer and pulse-shape morphing applied, standing in for real
speech whose GCIs are withheld from training and used only for evaluation.
"""

import json
import os
import wave
from dataclasses import dataclass, field

import numpy as np

from .dsp import (AudioBuffer, MelEnvelope, PulseSignal, frame_signal,
                  hann_window, mel_band_envelope, white_noise, window_samples)
from .lf_model import GciList, PulseTrainSpec, render_pulse_train

F0_MIN = 70.0
F0_MAX = 400.0
RD_LOW = 0.5
RD_HIGH = 2.2
FRAME_HOP = 0.005
EDGE_UNVOICED_FRAMES = 10  # 50 ms unvoiced margin at both utterance ends
SNR_RANGE_DB = (10.0, 30.0)


class DatasetError(RuntimeError):
    """Raised for missing/corrupt dataset files or invalid manifests."""


@dataclass
class UtteranceSpec:
    """Everything needed to render one utterance deterministically."""

    pulse_spec: PulseTrainSpec
    env64_gain: np.ndarray      # log bin-gain curve over 64 bands (voiced)
    env16_gain: np.ndarray      # log bin-gain curve over 16 bands (noise)
    snr_db: float
    noise_gain: float
    noise_seed: int
    utterance_id: str
    speaker_id: str


@dataclass
class UtteranceRecord:
    utterance_id: str
    audio: AudioBuffer
    gci: GciList
    f0_track: np.ndarray
    rd_track: np.ndarray
    voicing: np.ndarray
    frame_hop: float
    env64: MelEnvelope
    env16: MelEnvelope
    kind: str                   # "synthetic" | "pseudo-real"
    speaker_id: str
    split_tag: str = "train"
    pulse_target: PulseSignal = None
    gain: float = 1.0
    spec: UtteranceSpec = None  # kept in memory for re-rendering; not persisted
    noise: np.ndarray = None    # additive noise component; not persisted

    def __post_init__(self):
        if self.kind not in ("synthetic", "pseudo-real"):
            raise ValueError(f"unknown record kind {self.kind!r}")
        if (self.pulse_target is not None) != (self.kind == "synthetic"):
            raise ValueError("pulse_target must be present iff the record is synthetic")
        n = len(self.f0_track)
        if not (len(self.rd_track) == len(self.voicing) == n):
            raise ValueError("annotation tracks must share length")


@dataclass
class DatasetManifest:
    entries: list               # dicts: id, wav, sidecar, split, kind, speaker
    seed: int = 0

    def __post_init__(self):
        ids = [e["id"] for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate utterance ids in manifest: {dupes}")


def _smooth(x, width):
    """Zero-phase moving smooth with a Hann kernel (edge-padded)."""
    if width < 3:
        return x
    k = hann_window(width)
    k /= k.sum()
    xp = np.concatenate([np.repeat(x[:1], width), x, np.repeat(x[-1:], width)])
    return np.convolve(xp, k, mode="same")[width:width + len(x)]


def _bounded_walk(rng, n, lo, hi, step, smooth_width=21):
    """Random walk reflected into [lo, hi], then smoothed and clipped."""
    steps = rng.standard_normal(n) * step
    x = np.empty(n)
    x[0] = rng.uniform(lo + 0.2 * (hi - lo), hi - 0.2 * (hi - lo))
    for i in range(1, n):
        v = x[i - 1] + steps[i]
        if v < lo:
            v = 2 * lo - v
        elif v > hi:
            v = 2 * hi - v
        x[i] = np.clip(v, lo, hi)
    return np.clip(_smooth(x, smooth_width), lo, hi)


def _segment_voicing(rng, n_frames):
    """Alternating unvoiced/voiced runs; both utterance ends unvoiced."""
    voiced = np.zeros(n_frames, dtype=bool)
    pos = 0
    state = False  # start unvoiced
    while pos < n_frames:
        if state:
            length = int(round(rng.uniform(0.100, 0.500) / FRAME_HOP))
        else:
            length = int(round(rng.uniform(0.050, 0.300) / FRAME_HOP))
        voiced[pos:pos + length] = state
        pos += length
        state = not state
    voiced[:EDGE_UNVOICED_FRAMES] = False
    voiced[-EDGE_UNVOICED_FRAMES:] = False
    return voiced


def _rd_floor(f0):
    """Minimum usable Rd as a function of f0.

    Tense pulses (low Rd) at high f0 have return phases much shorter than
    the 2 kHz target resolution; keeping Rd above this floor keeps closure
    instants recoverable from the decimated flow.
    """
    return RD_LOW + 0.6 * np.clip((f0 - 250.0) / 150.0, 0.0, 1.0)


def random_utterance_spec(seed, duration_s, speaker_id=None, utterance_id=None):
    """Draw a deterministic utterance spec: smooth f0 and Rd contours,
    alternating voiced/unvoiced segments, random band-gain curves, SNR."""
    if not 1.0 <= duration_s <= 10.0:
        raise ValueError(f"duration {duration_s} s outside [1, 10]")
    rng = np.random.default_rng(seed)
    n_frames = int(round(duration_s / FRAME_HOP))
    f0 = _bounded_walk(rng, n_frames, F0_MIN, F0_MAX, step=3.0)
    rd = _bounded_walk(rng, n_frames, RD_LOW, RD_HIGH, step=0.02)
    rd = np.clip(np.maximum(rd, _rd_floor(f0)), RD_LOW, RD_HIGH)
    voicing = _segment_voicing(rng, n_frames)
    ee = rng.uniform(0.15, 0.35)
    pulse_spec = PulseTrainSpec(f0_track=f0, rd_track=rd, voicing=voicing,
                                ee=ee, frame_hop=FRAME_HOP)
    env64 = _smooth(rng.standard_normal(64), 9) * 0.8
    env16 = _smooth(rng.standard_normal(16), 5) * 0.8
    snr_db = rng.uniform(*SNR_RANGE_DB)
    noise_seed = int(rng.integers(0, 2 ** 31))
    if speaker_id is None:
        speaker_id = f"spk{seed % 8:02d}"
    if utterance_id is None:
        utterance_id = f"utt{seed:08d}"
    return UtteranceSpec(pulse_spec=pulse_spec, env64_gain=env64,
                         env16_gain=env16, snr_db=snr_db, noise_gain=1.0,
                         noise_seed=noise_seed, utterance_id=utterance_id,
                         speaker_id=speaker_id)


def _band_filter(x, log_gains, sample_rate=16000, window_ms=32.0):
    """Filter a signal by a fixed log band-gain curve in the STFT domain.

    Band log-gains are interpolated over FFT bins, applied to half-overlap
    Hann-windowed frames, and overlap-added back (windowed synthesis with
    squared-window normalization).
    """
    n = len(x)
    wlen = window_samples(window_ms, sample_rate)
    hop = wlen // 2
    xp = np.concatenate([np.zeros(hop), x, np.zeros(wlen)])
    frames = frame_signal(xp, wlen, hop).copy()
    win = hann_window(wlen)
    spec = np.fft.rfft(frames * win, axis=1)
    n_bins = spec.shape[1]
    n_bands = len(log_gains)
    centers = (np.arange(n_bands) + 0.5) / n_bands * (n_bins - 1)
    gains = np.exp(np.interp(np.arange(n_bins), centers, log_gains))
    frames_f = np.fft.irfft(spec * gains, n=wlen, axis=1) * win
    out = np.zeros(len(xp))
    norm = np.zeros(len(xp))
    w2 = win * win
    for i, fr in enumerate(frames_f):
        out[i * hop:i * hop + wlen] += fr
        norm[i * hop:i * hop + wlen] += w2
    out /= np.maximum(norm, 1e-8)
    return out[hop:hop + n]


def pulse_target_from_flow(flow16, gain):
    """Glottal-flow target at 2 kHz on the analyzer's output grid.

    Output sample j corresponds to 16 kHz position 8j + 0.5 (the analyzer's
    first valid output is 496.5 input samples in; segment starts are kept
    to multiples of 8 so indices align).  Values are two-point averages of
    the adjacent 16 kHz flow samples.
    """
    n = len(flow16) // 8
    idx = 8 * np.arange(n)
    return PulseSignal((flow16[idx] + flow16[idx + 1]) * (0.5 * gain))


def synth_utterance(spec, jitter_pct=0.0, shimmer_pct=0.0, shape_morph=0.0,
                    perturb_seed=0, kind="synthetic"):
    """Render a spec to an annotated utterance record.

    With zero perturbation the render is a pure function of the spec, so
    re-rendering reproduces the record bit-exactly.
    """
    sr = 16000
    deriv, gci, flow = render_pulse_train(
        spec.pulse_spec, sr, jitter_pct=jitter_pct, shimmer_pct=shimmer_pct,
        shape_morph=shape_morph, perturb_seed=perturb_seed)
    voiced_audio = _band_filter(deriv.samples, spec.env64_gain, sr)
    noise_component = np.zeros(len(voiced_audio))
    if spec.noise_gain > 0.0:
        raw = white_noise(len(voiced_audio), spec.noise_seed, sr).samples
        shaped = _band_filter(raw, spec.env16_gain, sr)
        rms_v = np.sqrt(np.mean(voiced_audio ** 2))
        rms_n = np.sqrt(np.mean(shaped ** 2))
        if rms_v > 0 and rms_n > 0:
            amp = rms_v / (10.0 ** (spec.snr_db / 20.0) * rms_n)
        else:
            amp = 0.01 if rms_n > 0 else 0.0
        noise_component = shaped * (amp * spec.noise_gain)
    audio = voiced_audio + noise_component
    peak = np.max(np.abs(audio)) if len(audio) else 0.0
    gain = 0.99 / peak if peak > 0.99 else 1.0
    audio = audio * gain
    noise_component = noise_component * gain
    ab = AudioBuffer(audio, sr)
    env64 = mel_band_envelope(ab, 64)
    env16 = mel_band_envelope(AudioBuffer(noise_component, sr), 16)
    pulse_target = pulse_target_from_flow(flow.samples, gain) \
        if kind == "synthetic" else None
    ps = spec.pulse_spec
    return UtteranceRecord(
        utterance_id=spec.utterance_id, audio=ab, gci=gci,
        f0_track=ps.f0_track.copy(), rd_track=ps.rd_track.copy(),
        voicing=ps.voicing.copy(), frame_hop=ps.frame_hop,
        env64=env64, env16=env16, kind=kind, speaker_id=spec.speaker_id,
        pulse_target=pulse_target, gain=gain, spec=spec,
        noise=noise_component)


def perturb_utterance(record, jitter_pct, shimmer_pct, shape_morph, seed=1):
    """Re-render a synthetic record with jitter/shimmer/shape perturbation.

    The result is tagged pseudo-real: its GCI annotations track the
    perturbed closure instants and its 2 kHz flow target is withheld.
    """
    if not 0.0 <= jitter_pct <= 10.0 or not 0.0 <= shimmer_pct <= 10.0:
        raise ValueError("jitter and shimmer must be in [0, 10] percent")
    if not 0.0 <= shape_morph <= 1.0:
        raise ValueError("shape_morph must be in [0, 1]")
    if record.spec is None:
        raise ValueError("record carries no spec; cannot re-render")
    out = synth_utterance(record.spec, jitter_pct=jitter_pct,
                          shimmer_pct=shimmer_pct, shape_morph=shape_morph,
                          perturb_seed=seed, kind="pseudo-real")
    out.split_tag = record.split_tag
    return out


# ---------------------------------------------------------------------------
# persistence

def _write_wav(path, samples, sample_rate):
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def _read_wav(path):
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise DatasetError(f"{path}: expected 16-bit mono PCM")
        sr = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return AudioBuffer(data.astype(np.float64) / 32767.0, sr)


def _sidecar_dict(record):
    d = {
        "gci_times_s": [float(t) for t in record.gci.times],
        "f0_hz": record.f0_track.tolist(),
        "rd": record.rd_track.tolist(),
        "voiced": [bool(v) for v in record.voicing],
        "frame_hop_s": record.frame_hop,
        "env64": record.env64.frames.tolist(),
        "env16": record.env16.frames.tolist(),
        "env_hop_s": record.env64.frame_hop,
        "kind": record.kind,
        "speaker_id": record.speaker_id,
        "gain": record.gain,
    }
    if record.pulse_target is not None:
        d["pulse_target"] = record.pulse_target.samples.tolist()
    return d


def write_dataset(records, out_dir, seed=0):
    """Persist records (WAV + JSON sidecar each) and the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for rec in records:
        wav = f"{rec.utterance_id}.wav"
        sidecar = f"{rec.utterance_id}.json"
        _write_wav(os.path.join(out_dir, wav), rec.audio.samples,
                   rec.audio.sample_rate)
        with open(os.path.join(out_dir, sidecar), "w") as f:
            json.dump(_sidecar_dict(rec), f)
        entries.append({"id": rec.utterance_id, "wav": wav, "sidecar": sidecar,
                        "split": rec.split_tag, "kind": rec.kind,
                        "speaker": rec.speaker_id})
    manifest = DatasetManifest(entries=entries, seed=seed)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump({"seed": manifest.seed, "entries": manifest.entries}, f,
                  indent=2)
    return manifest


class Dataset:
    """Lazy view over a persisted dataset: records load on demand."""

    def __init__(self, manifest, root):
        self.manifest = manifest
        self.root = root

    def __len__(self):
        return len(self.manifest.entries)

    def ids(self, split=None, kind=None):
        return [e["id"] for e in self.manifest.entries
                if (split is None or e["split"] == split)
                and (kind is None or e["kind"] == kind)]

    def load(self, utt_id):
        entry = next((e for e in self.manifest.entries if e["id"] == utt_id),
                     None)
        if entry is None:
            raise DatasetError(f"unknown utterance id {utt_id!r}")
        wav_path = os.path.join(self.root, entry["wav"])
        sc_path = os.path.join(self.root, entry["sidecar"])
        for p in (wav_path, sc_path):
            if not os.path.exists(p):
                raise DatasetError(f"entry {utt_id!r}: missing file {p}")
        try:
            audio = _read_wav(wav_path)
            with open(sc_path) as f:
                d = json.load(f)
            pulse_target = None
            if "pulse_target" in d:
                pulse_target = PulseSignal(np.asarray(d["pulse_target"]))
            return UtteranceRecord(
                utterance_id=utt_id, audio=audio,
                gci=GciList(np.asarray(d["gci_times_s"])),
                f0_track=np.asarray(d["f0_hz"]),
                rd_track=np.asarray(d["rd"]),
                voicing=np.asarray(d["voiced"], dtype=bool),
                frame_hop=d["frame_hop_s"],
                env64=MelEnvelope(np.asarray(d["env64"]), d["env_hop_s"]),
                env16=MelEnvelope(np.asarray(d["env16"]), d["env_hop_s"]),
                kind=d["kind"], speaker_id=d["speaker_id"],
                split_tag=entry["split"], pulse_target=pulse_target,
                gain=d["gain"])
        except DatasetError:
            raise
        except (ValueError, KeyError, json.JSONDecodeError, wave.Error,
                EOFError) as exc:
            raise DatasetError(f"entry {utt_id!r}: corrupt data ({exc})") from exc

    def records(self, split=None, kind=None):
        for i in self.ids(split=split, kind=kind):
            yield self.load(i)


def read_dataset(root):
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise DatasetError(f"no manifest at {path}")
    try:
        with open(path) as f:
            d = json.load(f)
        manifest = DatasetManifest(entries=d["entries"], seed=d.get("seed", 0))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"corrupt manifest {path}: {exc}") from exc
    return Dataset(manifest, root)


def split_dataset(manifest, fractions, seed):
    """Assign split tags by shuffled contiguous blocks; deterministic."""
    total = sum(fractions.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {total}")
    ids = [e["id"] for e in manifest.entries]
    order = np.random.default_rng(seed).permutation(len(ids))
    n = len(ids)
    tags = {}
    start = 0
    items = list(fractions.items())
    for j, (name, frac) in enumerate(items):
        stop = n if j == len(items) - 1 else start + int(round(frac * n))
        for k in order[start:stop]:
            tags[ids[k]] = name
        start = stop
    entries = [dict(e, split=tags[e["id"]]) for e in manifest.entries]
    return DatasetManifest(entries=entries, seed=manifest.seed)
