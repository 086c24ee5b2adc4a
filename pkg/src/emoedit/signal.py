"""Audio I/O, framing, cepstral features, YIN pitch tracking and a preview synthesizer.

Feature layout (``FEAT_DIM`` = 32 columns per 10 ms frame)::

    0..29  cepstra (DCT-II of log mel-band energies)
    30     natural-log F0 in Hz, 0 for unvoiced frames
    31     voicing flag, exactly 0.0 or 1.0

Feature files (``.feat``, format version 1) are an 8-byte little-endian
header ``(uint32 T, uint32 D)`` followed by ``T * D`` little-endian float32
values in row-major order.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from math import gcd

import numpy as np
from scipy import fft as sfft
from scipy import signal as ssig
from scipy.io import wavfile

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
N_CEPSTRA = 30
LOGF0_COL = 30
VOICING_COL = 31
FEAT_DIM = 32
LOG_FLOOR = 1e-10
FEAT_FORMAT_VERSION = 1

F0_MIN = 60.0
F0_MAX = 500.0
YIN_THRESHOLD = 0.1
YIN_FRAME = 0.040


class AudioError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrameConfig:
    hop: float = 0.010
    window: float = 0.025
    n_mels: int = 40
    n_cepstra: int = N_CEPSTRA
    n_fft: int = 512

    def __post_init__(self):
        if not 0 < self.hop <= self.window:
            raise ValueError("need 0 < hop <= window")
        if self.n_cepstra > self.n_mels:
            raise ValueError("n_cepstra must not exceed n_mels")

    def hop_samples(self, sr: int = SAMPLE_RATE) -> int:
        return int(round(self.hop * sr))

    def window_samples(self, sr: int = SAMPLE_RATE) -> int:
        return int(round(self.window * sr))


@dataclass
class F0Track:
    f0_hz: np.ndarray
    voiced: np.ndarray

    def __post_init__(self):
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if np.any(self.f0_hz < 0) or np.any(self.f0_hz[~self.voiced] != 0):
            raise ValueError("unvoiced frames must carry f0 = 0")

    def __len__(self):
        return len(self.f0_hz)


def validate_features(frames: np.ndarray) -> np.ndarray:
    """Check the FeatureSequence invariants and return a float64 copy-free view."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != FEAT_DIM or frames.shape[0] < 1:
        raise ValueError(f"feature sequence must be T x {FEAT_DIM} with T >= 1, got {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise ValueError("feature sequence contains NaN/Inf")
    v = frames[:, VOICING_COL]
    if not np.all((v == 0.0) | (v == 1.0)):
        raise ValueError("voicing column must be binary")
    return frames


# ---------------------------------------------------------------- WAV I/O

def resample(x: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    if sr_in == sr_out:
        return np.asarray(x, dtype=np.float64)
    g = gcd(sr_in, sr_out)
    return ssig.resample_poly(np.asarray(x, dtype=np.float64), sr_out // g, sr_in // g)


def load_wav(path) -> Waveform:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing file: {path}")
    sr, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        raise AudioError(f"non-PCM encoding ({data.dtype}) in {path}")
    if x.ndim == 2:
        x = x[:, 0]
    if x.size == 0:
        raise AudioError(f"zero-length audio: {path}")
    if sr != SAMPLE_RATE:
        x = resample(x, sr, SAMPLE_RATE)
    return Waveform(np.clip(x, -1.0, 1.0), SAMPLE_RATE)


def save_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM; samples are clipped to [-1, 1]."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    tmp = f"{path}.tmp"
    wavfile.write(tmp, w.sample_rate, pcm)
    os.replace(tmp, path)


def save_features(path, frames: np.ndarray) -> None:
    frames = validate_features(frames)
    T, D = frames.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(struct.pack("<II", T, D))
        f.write(frames.astype("<f4").tobytes())
    os.replace(tmp, path)


def load_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) != 8:
            raise ValueError(f"truncated feature header: {path}")
        T, D = struct.unpack("<II", header)
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != T * D:
        raise ValueError(f"feature payload size mismatch in {path}")
    return validate_features(data.reshape(T, D).astype(np.float64))


# ---------------------------------------------------------------- framing

def n_frames(n_samples: int, cfg: FrameConfig = FrameConfig(), sr: int = SAMPLE_RATE) -> int:
    win, hop = cfg.window_samples(sr), cfg.hop_samples(sr)
    if n_samples < win:
        raise AudioError(f"audio shorter than one window ({n_samples} < {win} samples)")
    return (n_samples - win) // hop + 1


def frame_signal(x: np.ndarray, frame_len: int, hop: int, count: int, offset: int = 0) -> np.ndarray:
    """Frames ``x[offset + t*hop : offset + t*hop + frame_len]`` for t < count, zero-padded."""
    pad_left = max(0, -offset)
    need = offset + (count - 1) * hop + frame_len
    pad_right = max(0, need - len(x))
    xp = np.pad(x, (pad_left, pad_right))
    start = offset + pad_left
    idx = start + np.arange(count)[:, None] * hop + np.arange(frame_len)[None, :]
    return xp[idx]


def mel_filterbank(n_mels: int, n_fft: int, sr: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """HTK-style triangular filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sr / 2 if fmax is None else fmax

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    lower = (freqs[None, :] - edges[:-2, None]) / (edges[1:-1, None] - edges[:-2, None])
    upper = (edges[2:, None] - freqs[None, :]) / (edges[2:, None] - edges[1:-1, None])
    return np.maximum(0.0, np.minimum(lower, upper))


def log_mel_spectrogram(w: Waveform, cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    """(T, n_mels) log mel-band power, log floor applied."""
    sr = w.sample_rate
    win, hop = cfg.window_samples(sr), cfg.hop_samples(sr)
    T = n_frames(len(w), cfg, sr)
    frames = frame_signal(w.samples, win, hop, T) * np.hamming(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    fb = mel_filterbank(cfg.n_mels, cfg.n_fft, sr)
    return np.log(np.maximum(power @ fb.T, LOG_FLOOR))


# ---------------------------------------------------------------- YIN

def _yin_frames(frames: np.ndarray, sr: int, fmin: float, fmax: float,
                threshold: float) -> tuple[np.ndarray, np.ndarray]:
    L = frames.shape[1]
    tau_min = int(np.floor(sr / fmax))
    tau_max = int(np.ceil(sr / fmin))
    W = L - tau_max
    if W < tau_max:
        raise ValueError("YIN frame too short for the search band")

    nfft = sfft.next_fast_len(L + W)
    head = frames[:, :W]
    corr = sfft.irfft(sfft.rfft(frames, nfft, axis=1) * np.conj(sfft.rfft(head, nfft, axis=1)),
                      nfft, axis=1)[:, :tau_max + 1]
    csum = np.concatenate([np.zeros((len(frames), 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    taus = np.arange(tau_max + 1)
    energy_lag = csum[:, taus + W] - csum[:, taus]
    diff = np.maximum(energy_lag[:, :1] + energy_lag - 2.0 * corr, 0.0)

    cmnd = np.ones_like(diff)
    running = np.cumsum(diff[:, 1:], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd[:, 1:] = np.where(running > 0, diff[:, 1:] * taus[1:] / running, 1.0)

    f0 = np.zeros(len(frames))
    voiced = np.zeros(len(frames), dtype=bool)
    silent = energy_lag[:, 0] <= LOG_FLOOR * W
    for i in np.flatnonzero(~silent):
        d = cmnd[i]
        below = np.flatnonzero(d[tau_min:tau_max] < threshold)
        if below.size == 0:
            continue
        tau = tau_min + below[0]
        while tau + 1 < tau_max and d[tau + 1] < d[tau]:
            tau += 1
        # parabolic refinement of the dip
        a, b, c = d[tau - 1], d[tau], d[tau + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom > 0 else 0.0
        hz = sr / (tau + float(np.clip(shift, -1, 1)))
        if fmin <= hz <= fmax:
            f0[i] = hz
            voiced[i] = True
    return f0, voiced


def estimate_f0_yin(w: Waveform, cfg: FrameConfig = FrameConfig(), fmin: float = F0_MIN,
                    fmax: float = F0_MAX, threshold: float = YIN_THRESHOLD) -> F0Track:
    """Per-frame F0 on the feature frame grid.

    Each analysis frame is YIN_FRAME long and centred on the matching feature
    window, so the track length always equals the feature frame count.
    """
    sr = w.sample_rate
    win, hop = cfg.window_samples(sr), cfg.hop_samples(sr)
    T = n_frames(len(w), cfg, sr)
    L = int(round(YIN_FRAME * sr))
    frames = frame_signal(w.samples, L, hop, T, offset=win // 2 - L // 2)
    f0, voiced = _yin_frames(frames, sr, fmin, fmax, threshold)
    return F0Track(f0, voiced)


# ---------------------------------------------------------------- features

def extract_features(w: Waveform, cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    """Waveform -> (T, 32) feature matrix."""
    logmel = log_mel_spectrogram(w, cfg)
    cep = sfft.dct(logmel, type=2, norm="ortho", axis=1)[:, :cfg.n_cepstra]
    track = estimate_f0_yin(w, cfg)
    out = np.zeros((len(cep), FEAT_DIM))
    out[:, :cfg.n_cepstra] = cep
    out[track.voiced, LOGF0_COL] = np.log(track.f0_hz[track.voiced])
    out[:, VOICING_COL] = track.voiced.astype(np.float64)
    return out


def features_to_f0(frames: np.ndarray) -> np.ndarray:
    """Hz per frame from the log-F0/voicing columns (0 where unvoiced)."""
    frames = np.asarray(frames)
    voiced = frames[:, VOICING_COL] > 0.5
    return np.where(voiced, np.exp(frames[:, LOGF0_COL] * voiced), 0.0)


def invert_features(frames: np.ndarray, cfg: FrameConfig = FrameConfig(),
                    sr: int = SAMPLE_RATE, seed: int = 0) -> Waveform:
    """Crude preview: pulse-train / noise excitation shaped by the cepstral envelope.

    Output length is exactly ``T * hop`` samples.
    """
    frames = validate_features(frames)
    T = len(frames)
    win, hop = cfg.window_samples(sr), cfg.hop_samples(sr)
    n_out = T * hop

    # excitation, unit power
    f0 = features_to_f0(frames)
    f0_per_sample = np.repeat(f0, hop)
    phase = np.cumsum(f0_per_sample / sr)
    pulses = np.zeros(n_out)
    wraps = np.flatnonzero(np.diff(np.floor(phase), prepend=0.0) > 0)
    pulses[wraps] = np.sqrt(sr / np.maximum(f0_per_sample[wraps], 1.0))
    noise = np.random.default_rng(seed).standard_normal(n_out)
    exc = np.where(f0_per_sample > 0, pulses, noise)

    # spectral envelope per frame
    log_mel = np.zeros((T, cfg.n_mels))
    log_mel[:, :cfg.n_cepstra] = frames[:, :cfg.n_cepstra]
    log_mel = sfft.idct(log_mel, type=2, norm="ortho", axis=1)
    fb = mel_filterbank(cfg.n_mels, cfg.n_fft, sr)
    band_energy = np.exp(np.minimum(log_mel, 50.0)) / np.maximum(fb.sum(axis=1), 1e-8)
    window = np.hamming(win)
    bin_power = band_energy @ fb
    gain = np.sqrt(bin_power / np.sum(window ** 2))

    seg = frame_signal(exc, win, hop, T) * window[None, :]
    spec = np.fft.rfft(seg, n=cfg.n_fft, axis=1) * gain
    shaped = np.fft.irfft(spec, n=cfg.n_fft, axis=1)[:, :win] * window[None, :]

    out = np.zeros((T - 1) * hop + win)
    norm = np.zeros_like(out)
    for t in range(T):
        out[t * hop:t * hop + win] += shaped[t]
        norm[t * hop:t * hop + win] += window ** 2
    out = (out / np.maximum(norm, 1e-8))[:n_out]
    if len(out) < n_out:
        out = np.pad(out, (0, n_out - len(out)))
    peak = np.max(np.abs(out)) if out.size else 0.0
    if peak > 0.99:
        out = out * (0.99 / peak)
    return Waveform(out, sr)
