"""Trainer contracts: default configuration audit, batch alignment
oracles, stateless batch seeding, checkpoint/resume bit-exactness, the
two-updates-per-step schedule and the collapse guard."""

import numpy as np
import pytest

from glotkit import trainer
from glotkit.autodiff import Tensor, load_checkpoint
from glotkit.corpus import (perturb_utterance, random_utterance_spec,
                            synth_utterance)
from glotkit.dsp import AudioBuffer, MelEnvelope, PulseSignal
from glotkit.lf_model import GciList
from glotkit.corpus import UtteranceRecord
from glotkit.models import Analyzer, Synthesizer, analyzer_output_len, \
    toy_configs
from glotkit.trainer import (COLLAPSE_ENERGY_FRACTION,
                             COLLAPSE_PATIENCE_STEPS, CollapseError,
                             PhaseConfig, TrainConfig, _rng, analyzer_batch,
                             joint_train, pretrain_analyzer,
                             pretrain_synthesizer, real_batch,
                             reference_pulses_2k, synthesizer_batch,
                             voiced_pulse_energy)

A_CFG, S_CFG = toy_configs(width=8)


def tiny_config(**kw):
    cfg = TrainConfig(
        step1_analyzer=PhaseConfig(batch=2, lr=2e-4, updates_per_epoch=3,
                                   segment=3553, epochs=2),
        step1_synth=PhaseConfig(batch=2, lr=5e-5, updates_per_epoch=2,
                                segment=2560, epochs=1, min_lr=1e-6),
        step2=PhaseConfig(batch=2, lr=1e-5, updates_per_epoch=2,
                          segment=3553, epochs=1))
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def records():
    return [synth_utterance(random_utterance_spec(s, 1.5)) for s in (31, 32)]


@pytest.fixture(scope="module")
def pseudo(records):
    return [perturb_utterance(r, 2.0, 2.0, 0.2) for r in records]


# ---------------------------------------------------------------------------
# configuration audit


def test_default_step1_analyzer_config():
    ph = TrainConfig().step1_analyzer
    assert ph.batch == 128
    assert ph.lr == 2e-4
    assert ph.updates_per_epoch == 500
    assert ph.plateau_factor == 0.75
    assert ph.plateau_patience == 10


def test_default_step1_synth_config():
    ph = TrainConfig().step1_synth
    assert ph.batch == 8
    assert ph.segment == 2560
    assert ph.updates_per_epoch == 512
    assert ph.lr == 5e-5
    assert ph.min_lr == 1e-6


def test_default_step2_config():
    ph = TrainConfig().step2
    assert ph.batch == 8
    assert ph.segment == 3553
    assert ph.lr == 1e-5


def test_default_loss_weights():
    w = TrainConfig().weights
    assert (w.as_spectral, w.as_time, w.asa_time, w.a_spectral, w.a_time) \
        == (0.1, 10.0, 1.0, 0.02, 10.0)


def test_phase_config_validation():
    with pytest.raises(ValueError):
        PhaseConfig(batch=0, lr=1e-4, updates_per_epoch=1, segment=2560,
                    epochs=1)


# ---------------------------------------------------------------------------
# batching


def test_rng_stateless_and_distinct():
    a = _rng(7, 1, 5).integers(0, 1 << 30, 4)
    b = _rng(7, 1, 5).integers(0, 1 << 30, 4)
    c = _rng(7, 1, 6).integers(0, 1 << 30, 4)
    d = _rng(7, 2, 5).integers(0, 1 << 30, 4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def _index_record(n16=24000):
    """Record whose audio and pulse target are their own sample indices,
    so batch slicing can be checked against closed-form values."""
    n_frames = n16 // 80
    n2k = n16 // 8
    return UtteranceRecord(
        utterance_id="idx", audio=AudioBuffer(np.arange(n16) / n16, 16000),
        gci=GciList(np.empty(0)), f0_track=np.full(n_frames, 100.0),
        rd_track=np.ones(n_frames),
        voicing=np.zeros(n_frames, dtype=bool), frame_hop=0.005,
        env64=MelEnvelope(np.zeros((2, 64)), 0.005),
        env16=MelEnvelope(np.zeros((2, 16)), 0.005),
        kind="synthetic", speaker_id="s",
        pulse_target=PulseSignal(np.arange(n2k, dtype=np.float64)))


def test_analyzer_batch_alignment_oracle():
    rec = _index_record()
    seg = 2560
    n_out = analyzer_output_len(seg)
    xs, ys, vm = analyzer_batch([rec], seg, 3, _rng(0, 1, 0))
    assert xs.shape == (3, seg) and ys.shape == (3, n_out)
    for b in range(3):
        s = int(round(xs[b, 0] * 24000))  # segment start from the audio value
        assert s % 8 == 0
        # target j0 = s/8 + 62: output i maps to input position 496.5 + 8i
        assert np.allclose(ys[b], s // 8 + 62 + np.arange(n_out))
    assert not vm.any()  # record is fully unvoiced


def test_synthesizer_batch_alignment_oracle():
    rec = _index_record()
    seg = 2560
    pulse, noise, cond, target = synthesizer_batch([rec], seg, 2,
                                                   _rng(0, 2, 0),
                                                   noise_seed=0)
    assert pulse.shape == (2, seg // 8)
    assert noise.shape == target.shape == (2, seg)
    assert cond.shape == (2, 80, seg)
    for b in range(2):
        j0 = int(round(pulse[b, 0]))
        s16 = 8 * j0
        # the audio target is the two-point average at n + 0.5
        expected = (np.arange(s16, s16 + seg) + 0.5) / 24000
        assert np.allclose(target[b], expected, atol=1e-6)


def test_synthesizer_batch_noise_deterministic(records):
    _, n1, _, _ = synthesizer_batch(records, 2560, 2, _rng(0, 2, 3),
                                    noise_seed=3)
    _, n2, _, _ = synthesizer_batch(records, 2560, 2, _rng(0, 2, 3),
                                    noise_seed=3)
    _, n3, _, _ = synthesizer_batch(records, 2560, 2, _rng(0, 2, 3),
                                    noise_seed=4)
    assert np.array_equal(n1, n2)
    assert not np.array_equal(n1, n3)


def test_real_batch_shapes(pseudo):
    seg = 3553
    n_out = analyzer_output_len(seg)
    audio, noise, cond, refp, vm = real_batch(pseudo, seg, 2, _rng(0, 3, 0),
                                              noise_seed=0)
    assert audio.shape == (2, seg)
    assert noise.shape == (2, 8 * n_out)
    assert cond.shape == (2, 80, 8 * n_out)
    assert refp.shape == (2, n_out) and vm.shape == (2, n_out)


def test_reference_pulses_cached_and_deterministic(pseudo):
    rec = pseudo[0]
    a = reference_pulses_2k(rec)
    b = reference_pulses_2k(rec)
    assert a is b  # cached
    assert len(a) == len(rec.audio) // 8
    # voiced regions carry pulse energy
    assert np.mean(a ** 2) > 0


def test_voiced_pulse_energy():
    pred = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 3.0]])
    mask = np.array([[True, False, False], [False, False, True]])
    assert voiced_pulse_energy(pred, mask) == pytest.approx(5.0)
    assert voiced_pulse_energy(pred, np.zeros_like(mask)) == 0.0


def test_segment_longer_than_utterance_raises(records):
    with pytest.raises(ValueError):
        analyzer_batch(records, 30000, 1, _rng(0, 1, 0))


# ---------------------------------------------------------------------------
# phase runs


def test_pretrain_analyzer_runs_and_freezes(records, tmp_path):
    an = Analyzer(A_CFG, seed=0)
    hist = pretrain_analyzer(records, records, an, tiny_config(), seed=0,
                             out_dir=tmp_path)
    assert len(hist) == 2
    assert an.bn_mode == "frozen"
    assert (tmp_path / "analyzer_step1.ckpt").exists()
    assert (tmp_path / "analyzer_step1_last.ckpt").exists()
    assert (tmp_path / "train_log.txt").read_text().count("\n") == 2
    assert all(np.isfinite(h["train"]) and np.isfinite(h["val"])
               for h in hist)


def test_pretrain_analyzer_resume_bit_exact(records, tmp_path):
    cfg = tiny_config()
    one = Analyzer(A_CFG, seed=5)
    pretrain_analyzer(records, records, one, cfg, seed=9,
                      out_dir=tmp_path / "a")

    cfg1 = tiny_config()
    cfg1.step1_analyzer.epochs = 1
    two = Analyzer(A_CFG, seed=5)
    pretrain_analyzer(records, records, two, cfg1, seed=9,
                      out_dir=tmp_path / "b")
    two2 = Analyzer(A_CFG, seed=0)  # fresh weights; all come from the ckpt
    two2.bn_mode = "train"
    pretrain_analyzer(records, records, two2, tiny_config(), seed=9,
                      out_dir=tmp_path / "b", resume=True)
    for k in one.params:
        assert np.array_equal(one.params[k].data, two2.params[k].data), k
    for st1, st2 in zip(one.bn, two2.bn):
        assert np.allclose(st1.running_mean, st2.running_mean)


def test_pretrain_analyzer_empty_dataset():
    with pytest.raises(ValueError):
        pretrain_analyzer([], [], Analyzer(A_CFG), tiny_config())


def test_pretrain_synthesizer_runs(records, tmp_path):
    sy = Synthesizer(S_CFG, seed=1)
    before = {k: p.data.copy() for k, p in sy.params.items()}
    hist = pretrain_synthesizer(records, records, sy, tiny_config(), seed=0,
                                out_dir=tmp_path)
    assert len(hist) == 1
    assert (tmp_path / "synth_step1.ckpt").exists()
    changed = [k for k in before
               if not np.array_equal(before[k], sy.params[k].data)]
    assert "in.w" in changed and "out2.w" in changed


def test_joint_train_two_updates_per_step(records, pseudo, tmp_path):
    an = Analyzer(A_CFG, seed=0)
    an.freeze_batchnorm()
    sy = Synthesizer(S_CFG, seed=1)
    cfg = tiny_config()
    hist = joint_train(records, pseudo, an, sy, cfg, seed=0,
                       out_dir=tmp_path)
    assert len(hist) == 1
    assert set(hist[0]["losses"]) >= {"as_spectral", "as_time", "asa_time",
                                      "a_spectral", "a_time", "total"}
    # the analyzer optimizer takes two updates per step, the synthesizer one
    state = load_checkpoint(tmp_path / "step2.ckpt")
    n_updates = cfg.step2.updates_per_epoch * cfg.step2.epochs
    assert int(state["opt_a.adam.meta"].data[0]) == 2 * n_updates
    assert int(state["opt_s.adam.meta"].data[0]) == n_updates


def test_joint_train_updates_both_networks(records, pseudo):
    an = Analyzer(A_CFG, seed=0)
    an.freeze_batchnorm()
    sy = Synthesizer(S_CFG, seed=1)
    a_before = {k: p.data.copy() for k, p in an.params.items()}
    s_before = {k: p.data.copy() for k, p in sy.params.items()}
    joint_train(records, pseudo, an, sy, tiny_config(), seed=0)
    assert any(not np.array_equal(a_before[k], an.params[k].data)
               for k in a_before)
    assert any(not np.array_equal(s_before[k], sy.params[k].data)
               for k in s_before)


def test_joint_train_requires_both_kinds(records):
    an = Analyzer(A_CFG)
    sy = Synthesizer(S_CFG)
    with pytest.raises(ValueError):
        joint_train(records, [], an, sy, tiny_config())
    with pytest.raises(ValueError):
        joint_train([], records, an, sy, tiny_config())


def test_collapse_guard_fires(records, pseudo, monkeypatch):
    """If the analyzer's voiced pulse energy stays under 1% of its probe
    baseline for the patience window, joint training aborts."""
    from glotkit import losses as losses_mod

    real_bundle = losses_mod.step2_real_bundle

    def zero_pulse_bundle(*args, **kw):
        total, bd, pulses = real_bundle(*args, **kw)
        return total, bd, np.zeros_like(pulses)

    monkeypatch.setattr(trainer, "step2_real_bundle", zero_pulse_bundle)
    monkeypatch.setattr(trainer, "COLLAPSE_PATIENCE_STEPS", 3)
    an = Analyzer(A_CFG, seed=0)
    an.freeze_batchnorm()
    sy = Synthesizer(S_CFG, seed=1)
    cfg = tiny_config()
    cfg.step2.updates_per_epoch = 6
    with pytest.raises(CollapseError):
        joint_train(records, pseudo, an, sy, cfg, seed=0)


def test_collapse_constants():
    assert COLLAPSE_ENERGY_FRACTION == 0.01
    assert COLLAPSE_PATIENCE_STEPS == 50
