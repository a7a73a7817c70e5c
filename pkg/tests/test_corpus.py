"""Corpus generation and persistence: determinism, annotation correctness,
audio shaping, perturbation semantics and dataset round trips."""

import json

import numpy as np
import pytest

from glotkit.corpus import (Dataset, DatasetError, DatasetManifest,
                            EDGE_UNVOICED_FRAMES, perturb_utterance,
                            pulse_target_from_flow, random_utterance_spec,
                            read_dataset, split_dataset, synth_utterance,
                            write_dataset)
from glotkit.dsp import PulseSignal


@pytest.fixture(scope="module")
def rec():
    return synth_utterance(random_utterance_spec(3, 3.0))


def test_spec_deterministic():
    a = random_utterance_spec(5, 2.0)
    b = random_utterance_spec(5, 2.0)
    assert np.array_equal(a.pulse_spec.f0_track, b.pulse_spec.f0_track)
    assert np.array_equal(a.env64_gain, b.env64_gain)
    assert a.snr_db == b.snr_db and a.noise_seed == b.noise_seed


def test_spec_ranges():
    for seed in range(6):
        s = random_utterance_spec(seed, 4.0)
        assert np.all((s.pulse_spec.f0_track >= 70.0)
                      & (s.pulse_spec.f0_track <= 400.0))
        assert np.all((s.pulse_spec.rd_track >= 0.5)
                      & (s.pulse_spec.rd_track <= 2.2))
        assert 10.0 <= s.snr_db <= 30.0


def test_spec_duration_bounds():
    with pytest.raises(ValueError):
        random_utterance_spec(0, 0.5)
    with pytest.raises(ValueError):
        random_utterance_spec(0, 11.0)


def test_edge_frames_unvoiced():
    for seed in range(5):
        s = random_utterance_spec(seed, 2.0)
        v = s.pulse_spec.voicing
        assert not v[:EDGE_UNVOICED_FRAMES].any()
        assert not v[-EDGE_UNVOICED_FRAMES:].any()


def test_render_deterministic(rec):
    again = synth_utterance(random_utterance_spec(3, 3.0))
    assert np.array_equal(rec.audio.samples, again.audio.samples)
    assert np.array_equal(rec.pulse_target.samples, again.pulse_target.samples)
    assert np.array_equal(rec.gci.times, again.gci.times)


def test_render_shapes(rec):
    assert rec.audio.sample_rate == 16000
    assert len(rec.audio) == 3 * 16000
    assert len(rec.pulse_target) == len(rec.audio) // 8
    assert rec.env64.frames.shape[1] == 64
    assert rec.env16.frames.shape[1] == 16
    assert np.max(np.abs(rec.audio.samples)) <= 0.99 + 1e-9


def test_gcis_inside_voiced_frames(rec):
    frames = (np.asarray(rec.gci.times) / rec.frame_hop).astype(int)
    assert len(rec.gci) > 10
    assert np.all(rec.voicing[frames])


def test_gci_spacing_matches_f0(rec):
    times = np.asarray(rec.gci.times)
    spacing = np.diff(times)
    same_segment = spacing < 0.6 / 70.0  # exclude across-gap jumps
    mid = times[:-1][same_segment] + spacing[same_segment] / 2
    f0 = rec.f0_track[(mid / rec.frame_hop).astype(int)]
    rel = spacing[same_segment] * f0
    assert np.all(np.abs(rel - 1.0) < 0.25)


def test_pulse_target_alignment():
    flow = np.arange(32, dtype=np.float64)
    tgt = pulse_target_from_flow(flow, gain=2.0)
    assert isinstance(tgt, PulseSignal)
    assert np.allclose(tgt.samples, (flow[::8][:4] + flow[1::8][:4]))


def test_pulse_target_tracks_voicing(rec):
    hop_frames = rec.frame_hop * 2000  # target samples per annotation frame
    tgt = rec.pulse_target.samples
    voiced_mask = np.repeat(rec.voicing, int(hop_frames))[:len(tgt)]
    v_energy = np.mean(tgt[voiced_mask] ** 2)
    u_energy = np.mean(tgt[~voiced_mask] ** 2)
    # the leaky flow integrator decays past voiced-segment ends, so the
    # unvoiced floor is small but not zero
    assert v_energy > 5 * u_energy


def test_audio_correlates_with_band_filtered_pulses(rec):
    # voiced audio is a filtered pulse train: in voiced regions the audio
    # energy must be dominated by the pulse component, not the noise
    noise = rec.noise
    clean = rec.audio.samples - noise
    assert np.sqrt(np.mean(clean ** 2)) > np.sqrt(np.mean(noise ** 2))


def test_noise_component_snr(rec):
    clean = rec.audio.samples - rec.noise
    snr = 20 * np.log10(np.sqrt(np.mean(clean ** 2))
                        / np.sqrt(np.mean(rec.noise ** 2)))
    assert 9.0 <= snr <= 31.0


def test_zero_perturbation_is_identity(rec):
    out = synth_utterance(rec.spec, jitter_pct=0.0, shimmer_pct=0.0,
                          shape_morph=0.0, kind="synthetic")
    assert np.array_equal(out.audio.samples, rec.audio.samples)


def test_perturb_marks_pseudo_real(rec):
    out = perturb_utterance(rec, 2.0, 2.0, 0.3, seed=7)
    assert out.kind == "pseudo-real"
    assert out.pulse_target is None
    assert not np.array_equal(out.audio.samples, rec.audio.samples)
    # same voicing structure: GCI counts stay within a few percent
    assert abs(len(out.gci) - len(rec.gci)) <= 0.1 * len(rec.gci)


def test_perturb_range_validation(rec):
    with pytest.raises(ValueError):
        perturb_utterance(rec, -1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        perturb_utterance(rec, 0.0, 11.0, 0.0)
    with pytest.raises(ValueError):
        perturb_utterance(rec, 0.0, 0.0, 1.5)


def test_record_kind_invariants(rec):
    with pytest.raises(ValueError):
        synth_utterance(rec.spec, kind="bogus")


def test_dataset_round_trip(tmp_path, rec):
    write_dataset([rec], tmp_path, seed=11)
    ds = read_dataset(tmp_path)
    assert len(ds) == 1
    back = ds.load(rec.utterance_id)
    # PCM16 quantization bounds the audio error
    assert np.max(np.abs(back.audio.samples - rec.audio.samples)) < 1.0 / 32000
    assert np.allclose(back.gci.times, rec.gci.times)
    assert np.allclose(back.pulse_target.samples, rec.pulse_target.samples)
    assert np.array_equal(back.voicing, rec.voicing)
    assert back.speaker_id == rec.speaker_id
    assert back.kind == "synthetic"


def test_dataset_unknown_id(tmp_path, rec):
    write_dataset([rec], tmp_path)
    ds = read_dataset(tmp_path)
    with pytest.raises(DatasetError):
        ds.load("nope")


def test_dataset_missing_wav(tmp_path, rec):
    write_dataset([rec], tmp_path)
    (tmp_path / f"{rec.utterance_id}.wav").unlink()
    ds = read_dataset(tmp_path)
    with pytest.raises(DatasetError):
        ds.load(rec.utterance_id)


def test_dataset_corrupt_sidecar(tmp_path, rec):
    write_dataset([rec], tmp_path)
    (tmp_path / f"{rec.utterance_id}.json").write_text("{not json")
    ds = read_dataset(tmp_path)
    with pytest.raises(DatasetError):
        ds.load(rec.utterance_id)


def test_dataset_no_manifest(tmp_path):
    with pytest.raises(DatasetError):
        read_dataset(tmp_path)


def test_manifest_duplicate_ids():
    e = {"id": "u1", "wav": "u1.wav", "sidecar": "u1.json",
         "split": "train", "kind": "synthetic", "speaker": "s"}
    with pytest.raises(DatasetError):
        DatasetManifest(entries=[dict(e), dict(e)])


def _toy_manifest(n):
    return DatasetManifest(entries=[
        {"id": f"u{i}", "wav": f"u{i}.wav", "sidecar": f"u{i}.json",
         "split": "train", "kind": "synthetic", "speaker": f"s{i % 3}"}
        for i in range(n)])


def test_split_fractions():
    m = split_dataset(_toy_manifest(20), {"train": 0.8, "valid": 0.1,
                                          "test": 0.1}, seed=4)
    tags = [e["split"] for e in m.entries]
    assert tags.count("train") == 16
    assert tags.count("valid") == 2
    assert tags.count("test") == 2


def test_split_deterministic_and_seed_sensitive():
    a = split_dataset(_toy_manifest(30), {"a": 0.5, "b": 0.5}, seed=1)
    b = split_dataset(_toy_manifest(30), {"a": 0.5, "b": 0.5}, seed=1)
    c = split_dataset(_toy_manifest(30), {"a": 0.5, "b": 0.5}, seed=2)
    assert [e["split"] for e in a.entries] == [e["split"] for e in b.entries]
    assert [e["split"] for e in a.entries] != [e["split"] for e in c.entries]


def test_split_must_sum_to_one():
    with pytest.raises(ValueError):
        split_dataset(_toy_manifest(10), {"a": 0.5, "b": 0.4}, seed=0)


def test_dataset_filtering(tmp_path, rec):
    pr = perturb_utterance(rec, 1.0, 1.0, 0.2)
    pr.utterance_id = rec.utterance_id + "-pr"
    write_dataset([rec, pr], tmp_path)
    ds = read_dataset(tmp_path)
    assert ds.ids(kind="synthetic") == [rec.utterance_id]
    assert ds.ids(kind="pseudo-real") == [pr.utterance_id]
