import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from emoedit.signal import (
    FEAT_DIM, LOGF0_COL, SAMPLE_RATE, VOICING_COL, AudioError, FrameConfig, Waveform,
    estimate_f0_yin, extract_features, features_to_f0, invert_features, load_features,
    load_wav, n_frames, save_features, save_wav, validate_features,
)


def sine(freq, dur=0.5, sr=SAMPLE_RATE, amp=0.5):
    t = np.arange(int(dur * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


# ---------------------------------------------------------------- I/O

def test_load_wav_canonical_rate(tmp_path):
    path = tmp_path / "a.wav"
    wavfile.write(path, 16000, (0.3 * 32767 * np.sin(np.arange(16000) * 0.05)).astype(np.int16))
    w = load_wav(path)
    assert len(w) == 16000 and w.sample_rate == 16000
    assert np.max(np.abs(w.samples)) <= 1.0


def test_load_wav_resamples_48k(tmp_path):
    path = tmp_path / "b.wav"
    wavfile.write(path, 48000, (0.3 * 32767 * np.sin(np.arange(48000) * 0.01)).astype(np.int16))
    assert len(load_wav(path)) == 16000


def test_load_wav_takes_first_channel(tmp_path):
    path = tmp_path / "st.wav"
    data = np.stack([np.full(800, 1000), np.full(800, -1000)], axis=1).astype(np.int16)
    wavfile.write(path, 16000, data)
    assert np.all(load_wav(path).samples > 0)


def test_load_wav_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_wav(tmp_path / "missing.wav")
    empty = tmp_path / "empty.wav"
    wavfile.write(empty, 16000, np.zeros(0, dtype=np.int16))
    with pytest.raises(AudioError, match="zero-length"):
        load_wav(empty)
    flt = tmp_path / "float.wav"
    wavfile.write(flt, 16000, np.zeros(100, dtype=np.float32))
    with pytest.raises(AudioError, match="non-PCM"):
        load_wav(flt)


def test_wav_round_trip(tmp_path):
    w = sine(300, 0.2)
    save_wav(tmp_path / "x.wav", w)
    back = load_wav(tmp_path / "x.wav")
    assert np.max(np.abs(back.samples - w.samples)) < 1e-4
    assert not os.path.exists(tmp_path / "x.wav.tmp")


def test_waveform_invariants():
    with pytest.raises(AudioError):
        Waveform(np.zeros((2, 10)))
    with pytest.raises(AudioError):
        Waveform(np.array([0.0, np.nan]))
    with pytest.raises(AudioError):
        Waveform(np.zeros(10), 0)


def test_frame_config_invariants():
    with pytest.raises(ValueError):
        FrameConfig(hop=0.03, window=0.025)
    with pytest.raises(ValueError):
        FrameConfig(n_mels=20, n_cepstra=30)


# ---------------------------------------------------------------- features

def test_frame_count_one_second():
    assert n_frames(16000) == 98
    assert extract_features(sine(200, 1.0)).shape == (98, FEAT_DIM)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=400, max_value=6000))
def test_frame_count_law(n):
    assert n_frames(n) == (n - 400) // 160 + 1


def test_short_audio_rejected():
    with pytest.raises(AudioError, match="shorter than one window"):
        extract_features(Waveform(np.zeros(399)))


def test_silence_is_finite_and_unvoiced():
    f = extract_features(Waveform(np.zeros(8000)))
    assert np.all(np.isfinite(f))
    assert np.all(f[:, VOICING_COL] == 0) and np.all(f[:, LOGF0_COL] == 0)


def test_extract_is_deterministic():
    w = sine(180, 0.3)
    assert np.array_equal(extract_features(w), extract_features(w))


def test_voicing_matches_yin_and_logf0_zero_when_unvoiced():
    rng = np.random.default_rng(3)
    x = np.concatenate([sine(150, 0.3).samples, 0.3 * rng.standard_normal(4800)])
    w = Waveform(x)
    f = extract_features(w)
    track = estimate_f0_yin(w)
    assert np.array_equal(f[:, VOICING_COL] == 1.0, track.voiced)
    assert np.all(f[f[:, VOICING_COL] == 0, LOGF0_COL] == 0)
    assert np.allclose(np.exp(f[track.voiced, LOGF0_COL]), track.f0_hz[track.voiced])


@pytest.mark.parametrize("freq", [100, 150, 220, 330, 440])
def test_yin_sine_accuracy(freq):
    track = estimate_f0_yin(sine(freq))
    assert abs(np.median(track.f0_hz[track.voiced]) - freq) <= 2.0


def test_yin_white_noise_unvoiced():
    w = Waveform(0.3 * np.random.default_rng(0).standard_normal(16000))
    assert np.mean(~estimate_f0_yin(w).voiced) >= 0.9


def test_yin_band_and_zero_rule():
    track = estimate_f0_yin(sine(250, 0.4))
    assert np.all((track.f0_hz[track.voiced] >= 60) & (track.f0_hz[track.voiced] <= 500))
    assert np.all(track.f0_hz[~track.voiced] == 0)


# ---------------------------------------------------------------- validation and files

def test_validate_features():
    good = np.zeros((3, FEAT_DIM))
    validate_features(good)
    bad = good.copy()
    bad[0, VOICING_COL] = 0.5
    with pytest.raises(ValueError, match="binary"):
        validate_features(bad)
    bad = good.copy()
    bad[1, 2] = np.inf
    with pytest.raises(ValueError):
        validate_features(bad)
    with pytest.raises(ValueError):
        validate_features(np.zeros((0, FEAT_DIM)))
    with pytest.raises(ValueError):
        validate_features(np.zeros((3, 31)))


def test_feature_file_round_trip(tmp_path):
    f = extract_features(sine(200, 0.3))
    save_features(tmp_path / "a.feat", f)
    back = load_features(tmp_path / "a.feat")
    assert back.shape == f.shape
    assert np.allclose(back, f.astype(np.float32))
    raw = (tmp_path / "a.feat").read_bytes()
    assert np.frombuffer(raw[:8], "<u4").tolist() == list(f.shape)


def test_feature_file_truncated(tmp_path):
    f = extract_features(sine(200, 0.3))
    save_features(tmp_path / "a.feat", f)
    data = (tmp_path / "a.feat").read_bytes()
    (tmp_path / "b.feat").write_bytes(data[:-4])
    with pytest.raises(ValueError, match="size mismatch"):
        load_features(tmp_path / "b.feat")


# ---------------------------------------------------------------- preview synthesis

def test_invert_duration():
    f = np.zeros((100, FEAT_DIM))
    w = invert_features(f)
    assert len(w) == 16000 and w.duration == pytest.approx(1.0)


def test_invert_unvoiced_is_finite_noise():
    f = extract_features(Waveform(0.2 * np.random.default_rng(1).standard_normal(8000)))
    f[:, LOGF0_COL] = 0
    f[:, VOICING_COL] = 0
    w = invert_features(f)
    assert np.all(np.isfinite(w.samples)) and np.std(w.samples) > 0


def test_invert_round_trip_f0():
    f = extract_features(sine(180, 1.0))
    f2 = extract_features(invert_features(f))
    n = min(len(f), len(f2))
    both = (f[:n, VOICING_COL] == 1) & (f2[:n, VOICING_COL] == 1)
    assert both.mean() > 0.8
    rel = np.abs(features_to_f0(f2[:n])[both] / features_to_f0(f[:n])[both] - 1)
    assert np.median(rel) < 0.05
