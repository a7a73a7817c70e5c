"""Two-step training: separate pretraining of the analyzer (A-time) and
synthesizer (AS-spectral + AS-time), then joint refinement where each step
runs two updates — the real-data loss bundle on a pseudo-real batch into
both networks, followed by an A-time update on a synthetic batch into the
analyzer only.

Batches are drawn with stateless per-step seeding (seed, phase, step), so
a run resumed from a checkpoint replays exactly the batches it would have
seen; together with float32-precision learning rates this makes resumes
bit-exact.
"""

import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Adam, PlateauSchedule, Tensor, load_checkpoint, \
    reshape, save_checkpoint
from .corpus import pulse_target_from_flow
from .lf_model import PulseTrainSpec, render_pulse_train
from .losses import LossWeights, as_time_loss, a_time_loss, \
    multi_res_spectral_mae, resynth_target, step2_real_bundle, \
    AS_SPECTRAL_SPEC, REANALYSIS_CROP
from .models import analyzer_output_len, upsample_envelope, \
    upsample_pulse_linear
from .dsp import white_noise

COLLAPSE_ENERGY_FRACTION = 0.01
COLLAPSE_PATIENCE_STEPS = 50


class CollapseError(RuntimeError):
    """Joint training collapsed to the zero-pulse degenerate optimum."""


@dataclass
class PhaseConfig:
    batch: int
    lr: float
    updates_per_epoch: int
    segment: int
    epochs: int
    plateau_factor: float = 0.75
    plateau_patience: int = 10
    min_lr: float = None

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class TrainConfig:
    step1_analyzer: PhaseConfig = field(default_factory=lambda: PhaseConfig(
        batch=128, lr=2e-4, updates_per_epoch=500, segment=3553, epochs=50))
    step1_synth: PhaseConfig = field(default_factory=lambda: PhaseConfig(
        batch=8, lr=5e-5, updates_per_epoch=512, segment=2560, epochs=50,
        min_lr=1e-6))
    step2: PhaseConfig = field(default_factory=lambda: PhaseConfig(
        batch=8, lr=1e-5, updates_per_epoch=500, segment=3553, epochs=100))
    weights: LossWeights = field(default_factory=LossWeights)
    ablate_a_spectral: bool = False


@dataclass
class TrainLogEntry:
    step: int
    epoch: int
    losses: dict
    lr_analyzer: float = 0.0
    lr_synth: float = 0.0
    validation: float = 0.0
    pulse_energy: float = 0.0


def freeze_batchnorm(analyzer):
    """Switch the analyzer's batch-norm layers to frozen mode for good."""
    analyzer.freeze_batchnorm()
    return analyzer


def _rng(seed, phase, step):
    return np.random.default_rng([int(seed), int(phase), int(step)])


def _log(out_dir, entry, fname="train_log.txt"):
    if out_dir is None:
        return
    parts = [f"step={entry.step}", f"epoch={entry.epoch}"]
    parts += [f"{k}={v:.6g}" for k, v in entry.losses.items()]
    parts += [f"lr_a={entry.lr_analyzer:.6g}", f"lr_s={entry.lr_synth:.6g}",
              f"val={entry.validation:.6g}", f"pulse_energy={entry.pulse_energy:.6g}"]
    with open(os.path.join(out_dir, fname), "a") as f:
        f.write(" ".join(parts) + "\n")


# ---------------------------------------------------------------------------
# batch assembly

def _pick_segment_start(rec, segment, rng):
    """Random segment start as a multiple of 8 (keeps the 2 kHz grids aligned)."""
    smax = (len(rec.audio) - segment) // 8
    if smax < 0:
        raise ValueError(
            f"utterance {rec.utterance_id} shorter than one segment ({segment})")
    return 8 * int(rng.integers(0, smax + 1))


def analyzer_batch(records, segment, batch, rng):
    """(audio [B, seg], target pulses [B, n_out], voiced mask [B, n_out])."""
    n_out = analyzer_output_len(segment)
    xs = np.empty((batch, segment), dtype=np.float32)
    ys = np.empty((batch, n_out), dtype=np.float32)
    vm = np.empty((batch, n_out), dtype=bool)
    for b in range(batch):
        rec = records[int(rng.integers(len(records)))]
        s = _pick_segment_start(rec, segment, rng)
        j0 = s // 8 + REANALYSIS_CROP
        xs[b] = rec.audio.samples[s:s + segment]
        ys[b] = rec.pulse_target.samples[j0:j0 + n_out]
        frames = ((8 * (j0 + np.arange(n_out)) + 0.5) / 16000
                  / rec.frame_hop).astype(int)
        vm[b] = rec.voicing[np.minimum(frames, len(rec.voicing) - 1)]
    return xs, ys, vm


def _cond_for_segment(rec, start16, length):
    """Per-sample 64+16 band conditioning covering [start16, start16+length)."""
    key = "_cond_cache"
    cache = getattr(rec, key, None)
    if cache is None or cache.shape[1] < start16 + length:
        n = len(rec.audio)
        e64 = upsample_envelope(rec.env64, n)
        e16 = upsample_envelope(rec.env16, n)
        cache = np.concatenate([e64, e16], axis=0).astype(np.float32)
        setattr(rec, key, cache)
    return cache[:, start16:start16 + length]


def synthesizer_batch(records, segment16, batch, rng, noise_seed):
    """Ground-truth pulse segments plus aligned audio targets and cond.

    Draws from `batch` distinct files whenever enough are available.
    Returns (pulse [B, n2k], noise [B, seg], cond [B, 80, seg],
    target [B, seg]).
    """
    n2k = segment16 // 8
    idx = np.arange(len(records))
    if len(records) >= batch:
        idx = rng.permutation(idx)[:batch]
    else:
        idx = rng.integers(0, len(records), size=batch)
    pulse = np.empty((batch, n2k), dtype=np.float32)
    cond = np.empty((batch, 80, segment16), dtype=np.float32)
    target = np.empty((batch, segment16), dtype=np.float32)
    for b, ri in enumerate(idx):
        rec = records[int(ri)]
        j_hi = len(rec.pulse_target) - n2k
        a_hi = (len(rec.audio) - segment16 - 1) // 8
        j0 = int(rng.integers(0, min(j_hi, a_hi) + 1))
        s16 = 8 * j0
        pulse[b] = rec.pulse_target.samples[j0:j0 + n2k]
        cond[b] = _cond_for_segment(rec, s16, segment16)
        a = rec.audio.samples
        target[b] = 0.5 * (a[s16:s16 + segment16] + a[s16 + 1:s16 + segment16 + 1])
    # offset keeps sentinel (negative) probe seeds valid
    noise_rng = np.random.default_rng([noise_seed + 2 ** 20, 1])
    noise = noise_rng.standard_normal((batch, segment16)).astype(np.float32)
    return pulse, noise, cond, target


def reference_pulses_2k(rec, ee=0.25):
    """LF reference pulses on the analyzer grid, from the record's
    f0/Rd/voicing annotations (the A-spectral regularization target)."""
    cached = getattr(rec, "_ref_pulses", None)
    if cached is None:
        spec = PulseTrainSpec(f0_track=rec.f0_track, rd_track=rec.rd_track,
                              voicing=rec.voicing, ee=ee,
                              frame_hop=rec.frame_hop)
        _, _, flow = render_pulse_train(spec, 16000)
        cached = pulse_target_from_flow(flow.samples, 1.0).samples
        setattr(rec, "_ref_pulses", cached)
    return cached


def real_batch(records, segment, batch, rng, noise_seed):
    """A pseudo-real batch for the step-2 bundle.

    Returns (audio [B, seg], noise [B, 2560-per-seg], cond, ref_pulses,
    voiced mask on the analyzer grid).
    """
    n_out = analyzer_output_len(segment)
    n_synth = 8 * n_out
    audio = np.empty((batch, segment), dtype=np.float32)
    cond = np.empty((batch, 80, n_synth), dtype=np.float32)
    refp = np.empty((batch, n_out), dtype=np.float32)
    vm = np.empty((batch, n_out), dtype=bool)
    for b in range(batch):
        rec = records[int(rng.integers(len(records)))]
        s = _pick_segment_start(rec, segment, rng)
        audio[b] = rec.audio.samples[s:s + segment]
        cond[b] = _cond_for_segment(rec, s + 496, n_synth)
        ref = reference_pulses_2k(rec)
        j0 = s // 8 + REANALYSIS_CROP
        refp[b] = ref[j0:j0 + n_out]
        frames = ((8 * (j0 + np.arange(n_out)) + 0.5) / 16000
                  / rec.frame_hop).astype(int)
        vm[b] = rec.voicing[np.minimum(frames, len(rec.voicing) - 1)]
    noise = np.random.default_rng([noise_seed + 2 ** 20, 2]).standard_normal(
        (batch, n_synth)).astype(np.float32)
    return audio, noise, cond, refp, vm


def voiced_pulse_energy(pred, voiced_mask):
    """Mean squared analyzer output over voiced positions (collapse stat)."""
    if not voiced_mask.any():
        return 0.0
    return float(np.mean(np.asarray(pred)[voiced_mask] ** 2))


# ---------------------------------------------------------------------------
# checkpoint plumbing

def _phase_state(prefix_tensors, optimizers, epoch):
    state = dict(prefix_tensors)
    for name, opt in optimizers.items():
        for k, t in opt.state_tensors().items():
            state[f"{name}.{k}"] = t
    state["meta.epoch"] = Tensor(np.array([float(epoch)]))
    return state


def _save_phase(path, model_states, optimizers, epoch):
    tensors = {}
    for prefix, sd in model_states.items():
        for k, t in sd.items():
            tensors[f"{prefix}.{k}"] = t
    save_checkpoint(_phase_state(tensors, optimizers, epoch), path)


def _load_phase(path, models, optimizers):
    loaded = load_checkpoint(path)
    for prefix, model in models.items():
        sub = {k[len(prefix) + 1:]: t for k, t in loaded.items()
               if k.startswith(prefix + ".") and not k.startswith(prefix + ".adam.")}
        model.load_state(sub)
    for name, opt in optimizers.items():
        sub = {k[len(name) + 1:]: t for k, t in loaded.items()
               if k.startswith(name + ".adam.")}
        opt.load_state_tensors(sub)
    return int(round(float(loaded["meta.epoch"].data.ravel()[0])))


# ---------------------------------------------------------------------------
# training phases

def pretrain_analyzer(train_records, val_records, analyzer, config=None,
                      seed=0, out_dir=None, resume=False):
    """Step 1, analyzer: minimize A-time on synthetic data.

    Freezes the analyzer's batch-norm layers permanently on completion.
    Returns the per-epoch training/validation loss history.
    """
    config = config or TrainConfig()
    ph = config.step1_analyzer
    if not train_records:
        raise ValueError("empty training dataset")
    if not val_records:
        val_records = train_records
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    opt = Adam(analyzer.trainable_params(), lr=ph.lr)
    sched = PlateauSchedule(opt, factor=ph.plateau_factor,
                            patience=ph.plateau_patience, min_lr=ph.min_lr)
    ckpt = os.path.join(out_dir, "analyzer_step1_last.ckpt") if out_dir else None
    start_epoch = 0
    if resume and ckpt and os.path.exists(ckpt):
        start_epoch = _load_phase(ckpt, {"analyzer": analyzer}, {"opt": opt})
        sched.best_metric = None  # schedule restarts; lr itself is restored
    history = []
    step = start_epoch * ph.updates_per_epoch
    for epoch in range(start_epoch, ph.epochs):
        train_losses = []
        for _ in range(ph.updates_per_epoch):
            rng = _rng(seed, 1, step)
            xs, ys, _ = analyzer_batch(train_records, ph.segment, ph.batch, rng)
            pred = reshape(analyzer.forward(Tensor(xs[:, None, :])),
                           (ph.batch, ys.shape[1]))
            loss = a_time_loss(pred, ys)
            opt.zero_grad()
            loss.backward()
            opt.step()
            train_losses.append(float(loss.item()))
            step += 1
        val = _validate_analyzer(analyzer, val_records, ph, seed)
        lr = sched.update(val)
        history.append({"epoch": epoch, "train": float(np.mean(train_losses)),
                        "val": val, "lr": lr})
        _log(out_dir, TrainLogEntry(step=step, epoch=epoch,
                                    losses={"a_time": history[-1]["train"]},
                                    lr_analyzer=lr, validation=val))
        if ckpt:
            _save_phase(ckpt, {"analyzer": analyzer.state_dict()},
                        {"opt": opt}, epoch + 1)
    freeze_batchnorm(analyzer)
    if out_dir:
        _save_phase(os.path.join(out_dir, "analyzer_step1.ckpt"),
                    {"analyzer": analyzer.state_dict()}, {"opt": opt},
                    ph.epochs)
    return history


def _validate_analyzer(analyzer, records, ph, seed, n_batches=2):
    mode = analyzer.bn_mode
    analyzer.bn_mode = "frozen"
    losses = []
    for i in range(n_batches):
        rng = _rng(seed, 101, i)
        xs, ys, _ = analyzer_batch(records, ph.segment, min(ph.batch, 16), rng)
        pred = analyzer.forward(Tensor(xs[:, None, :]))
        losses.append(float(a_time_loss(
            reshape(pred, (xs.shape[0], ys.shape[1])), ys).item()))
    analyzer.bn_mode = mode
    return float(np.mean(losses))


def _synth_losses(synthesizer, pulse, noise, cond, target, weights):
    up = upsample_pulse_linear(Tensor(pulse), 8)
    out = synthesizer.forward(up, Tensor(noise), Tensor(cond))
    out_zero = synthesizer.forward(up, Tensor(np.zeros_like(noise)), Tensor(cond))
    l_spec = multi_res_spectral_mae(out, Tensor(target), AS_SPECTRAL_SPEC)
    l_time = as_time_loss(out_zero, Tensor(target))
    total = weights.as_spectral * l_spec + weights.as_time * l_time
    return total, float(l_spec.item()), float(l_time.item())


def pretrain_synthesizer(train_records, val_records, synthesizer, config=None,
                         seed=0, out_dir=None, resume=False):
    """Step 1, synthesizer: ground-truth pulses to audio, AS losses."""
    config = config or TrainConfig()
    ph = config.step1_synth
    if not train_records:
        raise ValueError("empty training dataset")
    if not val_records:
        val_records = train_records
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    opt = Adam(synthesizer.trainable_params(), lr=ph.lr)
    sched = PlateauSchedule(opt, factor=ph.plateau_factor,
                            patience=ph.plateau_patience, min_lr=ph.min_lr)
    ckpt = os.path.join(out_dir, "synth_step1_last.ckpt") if out_dir else None
    start_epoch = 0
    if resume and ckpt and os.path.exists(ckpt):
        start_epoch = _load_phase(ckpt, {"synth": synthesizer}, {"opt": opt})
        sched.best_metric = None
    history = []
    step = start_epoch * ph.updates_per_epoch
    for epoch in range(start_epoch, ph.epochs):
        train_losses = []
        for _ in range(ph.updates_per_epoch):
            rng = _rng(seed, 2, step)
            batch = synthesizer_batch(train_records, ph.segment, ph.batch,
                                      rng, noise_seed=step)
            total, l_spec, l_time = _synth_losses(synthesizer, *batch,
                                                  config.weights)
            opt.zero_grad()
            total.backward()
            opt.step()
            train_losses.append(float(total.item()))
            step += 1
        val_rng = _rng(seed, 102, 0)
        vbatch = synthesizer_batch(val_records, ph.segment,
                                   min(ph.batch, len(val_records)),
                                   val_rng, noise_seed=-1)
        vtotal, _, _ = _synth_losses(synthesizer, *vbatch, config.weights)
        val = float(vtotal.item())
        lr = sched.update(val)
        history.append({"epoch": epoch, "train": float(np.mean(train_losses)),
                        "val": val, "lr": lr})
        _log(out_dir, TrainLogEntry(step=step, epoch=epoch,
                                    losses={"as_total": history[-1]["train"]},
                                    lr_synth=lr, validation=val))
        if ckpt:
            _save_phase(ckpt, {"synth": synthesizer.state_dict()},
                        {"opt": opt}, epoch + 1)
    if out_dir:
        _save_phase(os.path.join(out_dir, "synth_step1.ckpt"),
                    {"synth": synthesizer.state_dict()}, {"opt": opt},
                    ph.epochs)
    return history


def joint_train(synthetic_records, pseudo_records, analyzer, synthesizer,
                config=None, seed=0, out_dir=None, resume=False,
                pseudo_val_records=None):
    """Step 2: two updates per step (real bundle into both networks, then
    A-time on synthetic into the analyzer only), with the collapse guard.

    Raises CollapseError when the voiced pulse energy stays below 1% of
    its starting value for 50 consecutive steps.
    """
    config = config or TrainConfig()
    ph = config.step2
    if not synthetic_records or not pseudo_records:
        raise ValueError("joint training needs synthetic and pseudo-real data")
    if pseudo_val_records is None or not pseudo_val_records:
        pseudo_val_records = pseudo_records
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    analyzer.bn_mode = "frozen"
    opt_a = Adam(analyzer.trainable_params(), lr=ph.lr)
    opt_s = Adam(synthesizer.trainable_params(), lr=ph.lr)
    sched = PlateauSchedule(opt_a, factor=ph.plateau_factor,
                            patience=ph.plateau_patience, min_lr=ph.min_lr)
    ckpt = os.path.join(out_dir, "step2_last.ckpt") if out_dir else None
    start_epoch = 0
    if resume and ckpt and os.path.exists(ckpt):
        start_epoch = _load_phase(
            ckpt, {"analyzer": analyzer, "synth": synthesizer},
            {"opt_a": opt_a, "opt_s": opt_s})
        sched.best_metric = None

    # collapse baseline: voiced pulse energy on a fixed probe batch
    probe_rng = _rng(seed, 103, 0)
    p_audio, _, _, _, p_vm = real_batch(pseudo_records, ph.segment,
                                        min(ph.batch, 8), probe_rng,
                                        noise_seed=-2)
    p_pred = analyzer.forward(Tensor(p_audio[:, None, :])).data[:, 0, :]
    baseline = voiced_pulse_energy(p_pred, p_vm)
    low_count = 0

    history = []
    step = start_epoch * ph.updates_per_epoch
    for epoch in range(start_epoch, ph.epochs):
        epoch_losses = []
        for _ in range(ph.updates_per_epoch):
            rng = _rng(seed, 3, step)
            audio, noise, cond, refp, vm = real_batch(
                pseudo_records, ph.segment, ph.batch, rng, noise_seed=step)
            total, breakdown, pulses = step2_real_bundle(
                audio, noise, cond, refp, analyzer, synthesizer,
                weights=config.weights,
                ablate_a_spectral=config.ablate_a_spectral)
            opt_a.zero_grad()
            opt_s.zero_grad()
            total.backward()
            opt_a.step()
            opt_s.step()

            rng2 = _rng(seed, 4, step)
            xs, ys, _ = analyzer_batch(synthetic_records, ph.segment,
                                       ph.batch, rng2)
            pred = reshape(analyzer.forward(Tensor(xs[:, None, :])),
                           (ph.batch, ys.shape[1]))
            loss2 = config.weights.a_time * a_time_loss(pred, ys)
            opt_a.zero_grad()
            loss2.backward()
            opt_a.step()
            breakdown["a_time"] = float(loss2.item())
            epoch_losses.append(breakdown)

            energy = voiced_pulse_energy(pulses, vm)
            if baseline > 0 and energy < COLLAPSE_ENERGY_FRACTION * baseline:
                low_count += 1
                if low_count >= COLLAPSE_PATIENCE_STEPS:
                    raise CollapseError(
                        f"voiced pulse energy {energy:.3e} below "
                        f"{COLLAPSE_ENERGY_FRACTION:.0%} of baseline "
                        f"{baseline:.3e} for {low_count} consecutive steps "
                        f"at step {step} (zero-pulse degenerate optimum)")
            else:
                low_count = 0
            step += 1
        val = _validate_step2(analyzer, synthesizer, pseudo_val_records,
                              ph, config, seed)
        lr = sched.update(val)
        opt_s.lr = opt_a.lr
        mean_losses = {k: float(np.mean([d[k] for d in epoch_losses]))
                       for k in epoch_losses[0]}
        history.append({"epoch": epoch, "val": val, "lr": lr,
                        "losses": mean_losses})
        _log(out_dir, TrainLogEntry(step=step, epoch=epoch,
                                    losses=mean_losses, lr_analyzer=lr,
                                    lr_synth=opt_s.lr, validation=val,
                                    pulse_energy=energy))
        if ckpt:
            _save_phase(ckpt, {"analyzer": analyzer.state_dict(),
                               "synth": synthesizer.state_dict()},
                        {"opt_a": opt_a, "opt_s": opt_s}, epoch + 1)
    if out_dir:
        _save_phase(os.path.join(out_dir, "step2.ckpt"),
                    {"analyzer": analyzer.state_dict(),
                     "synth": synthesizer.state_dict()},
                    {"opt_a": opt_a, "opt_s": opt_s}, ph.epochs)
    return history


def _validate_step2(analyzer, synthesizer, records, ph, config, seed):
    rng = _rng(seed, 104, 0)
    audio, noise, cond, refp, _ = real_batch(records, ph.segment,
                                             min(ph.batch, 8), rng,
                                             noise_seed=-3)
    total, _, _ = step2_real_bundle(audio, noise, cond, refp, analyzer,
                                 synthesizer, weights=config.weights,
                                 ablate_a_spectral=config.ablate_a_spectral)
    return float(total.item())
