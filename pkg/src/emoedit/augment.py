"""F0-perturbation of emotional speech and merging of a neutral corpus."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy import signal as ssig

from .corpus import NEUTRAL, Manifest
from .signal import Waveform, load_wav, save_wav

logger = logging.getLogger(__name__)

DEFAULT_SHIFTS = (-4.0, -2.0, 2.0, 4.0)
MAX_SEMITONES = 6.0


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftSpec:
    semitones: float

    def __post_init__(self):
        if not np.isfinite(self.semitones) or abs(self.semitones) > MAX_SEMITONES:
            raise AugmentError(f"shift must lie in [-{MAX_SEMITONES}, {MAX_SEMITONES}] semitones")

    @property
    def ratio(self) -> float:
        return 2.0 ** (self.semitones / 12.0)

    @property
    def suffix(self) -> str:
        return f"#shift{self.semitones:+g}"


def _wsola(x: np.ndarray, n_out: int, factor: float, win: int, tolerance: int) -> np.ndarray:
    hs = win // 2
    ha = hs / factor
    window = np.hanning(win + 1)[:win]  # periodic Hann, sums to 1 at 50% overlap
    n_frames = int(np.ceil(n_out / hs)) + 1
    pad = tolerance + win
    xp = np.pad(x, (pad, pad + win + int(np.ceil(n_frames * ha)) + 2 * tolerance))
    out = np.zeros(n_frames * hs + win)
    prev = 0
    for k in range(n_frames):
        nominal = int(round(k * ha))
        if k == 0:
            chosen = nominal
        else:
            # best match to the natural continuation of the previous frame
            target = xp[pad + prev + hs:pad + prev + hs + win]
            lo = pad + nominal - tolerance
            scores = ssig.correlate(xp[lo:lo + win + 2 * tolerance], target, mode="valid")
            chosen = nominal - tolerance + int(np.argmax(scores))
        out[k * hs:k * hs + win] += window * xp[pad + chosen:pad + chosen + win]
        prev = chosen
    return out[:n_out]


def time_stretch(x: np.ndarray, factor: float, win: int = 1024, tolerance: int = 320) -> np.ndarray:
    """WSOLA time-stretch; output has ``round(len(x) * factor)`` samples.

    The tolerance must cover one period of the lowest F0 of interest
    (320 samples = 50 Hz at 16 kHz) so every splice can land in phase.
    """
    x = np.asarray(x, dtype=np.float64)
    n_out = int(round(len(x) * factor))
    if n_out == 0 or len(x) == 0:
        return np.zeros(n_out)
    # lead-in so the first real samples are already under full overlap
    lead = win // 2
    lead_out = int(round(lead * factor))
    y = _wsola(np.pad(x, (lead, 0)), n_out + lead_out, factor, win, tolerance)
    return y[lead_out:]


def pitch_shift(w: Waveform, s) -> Waveform:
    """Shift F0 by ``s`` semitones while keeping duration: resample, then stretch back.

    ``s`` is a ShiftSpec or a plain number; only ShiftSpec enforces the
    augmentation range.
    """
    semitones = s.semitones if isinstance(s, ShiftSpec) else float(s)
    if semitones == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    frac = Fraction(2.0 ** (-semitones / 12.0)).limit_denominator(1000)
    squeezed = ssig.resample_poly(w.samples, frac.numerator, frac.denominator)
    stretched = time_stretch(squeezed, len(w) / len(squeezed))
    if len(stretched) < len(w):
        stretched = np.pad(stretched, (0, len(w) - len(stretched)))
    return Waveform(np.clip(stretched[:len(w)], -1.0, 1.0), w.sample_rate)


def augment_emotional(m: Manifest, shifts, out_dir) -> Manifest:
    """Originals plus one pitch-shifted copy per shift, written as WAV under ``out_dir``."""
    shifts = [s if isinstance(s, ShiftSpec) else ShiftSpec(float(s)) for s in shifts]
    if not shifts:
        raise AugmentError("at least one shift is required")
    if any(s.semitones == 0 for s in shifts):
        raise AugmentError("zero shift in list would duplicate records")
    if len({s.semitones for s in shifts}) != len(shifts):
        raise AugmentError("duplicate shifts in list")
    os.makedirs(out_dir, exist_ok=True)
    records = list(m.records)
    for r in m.records:
        w = load_wav(r.wav_path)
        for s in shifts:
            utt = r.utt_id + s.suffix
            path = os.path.abspath(os.path.join(out_dir, f"{utt}.wav"))
            save_wav(path, pitch_shift(w, s))
            records.append(replace(r, utt_id=utt, wav_path=path, provenance="f0_augmented"))
    records.sort(key=lambda r: r.utt_id)
    return Manifest(records, m.split, "f0_augmented")


def merge_neutral(emotional: Manifest, neutral: Manifest, prefix: str = "neutral/") -> Manifest:
    taken = {r.utt_id for r in emotional.records}
    clash = any(r.utt_id in taken for r in neutral.records)
    merged = list(emotional.records)
    for r in neutral.records:
        merged.append(replace(r, utt_id=prefix + r.utt_id if clash else r.utt_id,
                              emotion=NEUTRAL, provenance="neutral_merged"))
    merged.sort(key=lambda r: r.utt_id)
    out = Manifest(merged, emotional.split,
                   "neutral_merged" if neutral.records else emotional.provenance)
    n_neutral = sum(r.emotion.id == 0 for r in merged)
    logger.info("merged %d neutral records: neutral=%d non-neutral=%d neutral/non-neutral=%.3f",
                len(neutral.records), n_neutral, len(merged) - n_neutral, neutral_ratio(out))
    return out


def neutral_ratio(m: Manifest) -> float:
    n_neutral = sum(r.emotion.id == 0 for r in m.records)
    n_other = len(m.records) - n_neutral
    return n_neutral / n_other if n_other else float("inf")
