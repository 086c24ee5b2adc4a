"""Deterministic synthetic speech corpus.

Letters become formant-filtered pulse trains (vowels, voiced consonants) or
band-passed noise (unvoiced consonants). Each emotion has a fixed F0 level,
contour, energy and tempo signature, and each speaker has an F0 base and a
formant scale, so the corpus behaves like a tiny parallel emotional dataset.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import signal as ssig

from .corpus import EMOTIONS, EmotionLabel, UtteranceRecord, tokenize
from .signal import SAMPLE_RATE, Waveform, save_wav

HOP = 160
LEAD_FRAMES = 12
GAP_FRAMES = 4

SENTENCES = (
    "the colorful light shines",
    "a quiet river runs over stone",
    "green birds sing in the morning",
    "cold wind blows across the hill",
    "she found a bright blue kite",
    "warm bread waits on the table",
    "we walked home under the stars",
    "the old clock ticks slowly",
    "my friend plays a soft song",
    "rain falls on the small garden",
)

# (F0 scale, F0 slope over the utterance in octaves, vibrato depth, energy, tempo)
EMOTION_STYLE = {
    "neutral": (1.00, -0.10, 0.00, 0.25, 1.00),
    "happy": (1.18, 0.05, 0.08, 0.32, 0.92),
    "sad": (0.92, -0.05, 0.00, 0.14, 1.20),
    "angry": (1.12, -0.30, 0.03, 0.45, 0.88),
    "surprise": (1.32, 0.40, 0.05, 0.36, 1.00),
}

VOWELS = {
    "a": (730, 1090, 2440), "e": (530, 1840, 2480), "i": (390, 1990, 2550),
    "o": (570, 840, 2410), "u": (440, 1020, 2240), "y": (300, 2200, 2900),
}
VOICED_CONS = set("bdgjlmnrvwz")
UNVOICED_CONS = set("cfhkpqstx")


@dataclass(frozen=True)
class Speaker:
    speaker_id: str
    gender: str
    f0_base: float
    formant_scale: float


def make_speakers(n: int, prefix: str = "spk", start: int = 0) -> list[Speaker]:
    out = []
    for i in range(start, start + n):
        female = i % 2 == 0
        f0 = (200.0 if female else 115.0) * (1.0 + 0.04 * ((i * 7) % 5 - 2))
        out.append(Speaker(f"{prefix}{i:02d}", "female" if female else "male", f0,
                           (1.12 if female else 1.0) * (1.0 + 0.02 * ((i * 3) % 5 - 2))))
    return out


def _letter_frames(ch: str) -> int:
    base = 10 if ch in VOWELS else 6
    return base + zlib.crc32(ch.encode()) % 3


def _resonate(x: np.ndarray, freqs, sr: int, bw: float = 90.0) -> np.ndarray:
    y = np.zeros_like(x)
    for k, f in enumerate(freqs):
        f = min(f, 0.45 * sr)
        r = np.exp(-np.pi * bw * (1 + k) / sr)
        a = [1.0, -2 * r * np.cos(2 * np.pi * f / sr), r * r]
        y += ssig.lfilter([1.0 - r], a, x) / (1 + k)
    return y


def synthesize(text: str, speaker: Speaker, emotion, seed: int = 0,
               sr: int = SAMPLE_RATE) -> tuple[Waveform, list]:
    """Render ``text``; returns the waveform and (word, start_frame, end_frame) spans."""
    emotion = EmotionLabel.parse(emotion)
    scale, slope, vib, energy, tempo = EMOTION_STYLE[emotion.name]
    rng = np.random.default_rng(zlib.crc32(f"{text}|{speaker.speaker_id}|{emotion.id}|{seed}".encode()))
    hop = HOP * sr // SAMPLE_RATE

    # segment plan in frames: (kind, letter, n_frames)
    plan = [("sil", "", LEAD_FRAMES)]
    spans = []
    pos = LEAD_FRAMES
    for wi, word in enumerate(text.lower().split()):
        if wi:
            plan.append(("sil", "", GAP_FRAMES))
            pos += GAP_FRAMES
        start = pos
        for ch in word:
            n = max(3, int(round(_letter_frames(ch) * tempo)))
            plan.append(("letter", ch, n))
            pos += n
        spans.append((word, start, pos))
    plan.append(("sil", "", LEAD_FRAMES))
    pos += LEAD_FRAMES
    n_samples = pos * hop + (400 - hop)

    # F0 contour with per-word accents
    t = np.arange(n_samples) / n_samples
    f0 = speaker.f0_base * scale * 2.0 ** (slope * (t - 0.5))
    f0 *= 1.0 + vib * np.sin(2 * np.pi * 4.5 * np.arange(n_samples) / sr)
    for _, s, e in spans:
        mid = (s + e) / 2 * hop
        f0 *= 1.0 + 0.04 * scale * np.exp(-0.5 * ((np.arange(n_samples) - mid) / (0.4 * (e - s) * hop)) ** 2)
    phase = np.cumsum(f0 / sr)
    pulses = (phase % 1.0) - 0.5
    noise = rng.standard_normal(n_samples)

    out = np.zeros(n_samples)
    cursor = 0
    ramp = np.hanning(2 * 40)
    for kind, ch, n in plan:
        a, b = cursor * hop, min(n_samples, (cursor + n) * hop)
        cursor += n
        if kind == "sil":
            continue
        if ch in VOWELS:
            seg = _resonate(pulses[a:b], [f * speaker.formant_scale for f in VOWELS[ch]], sr)
            gain = 1.0
        elif ch in VOICED_CONS:
            f1 = 250 + 40 * (ord(ch) % 7)
            seg = _resonate(pulses[a:b], [f1 * speaker.formant_scale, 1400 + 90 * (ord(ch) % 9)], sr)
            gain = 0.5
        else:
            lo = 1500 + 300 * (ord(ch) % 8)
            sos = ssig.butter(2, [lo, min(lo + 2500, 0.45 * sr)], btype="band", fs=sr, output="sos")
            seg = ssig.sosfilt(sos, noise[a:b])
            gain = 0.35
        seg = seg / (np.sqrt(np.mean(seg ** 2)) + 1e-9) * gain
        env = np.ones(len(seg))
        k = min(40, len(seg) // 2)
        env[:k] = ramp[:k]
        env[len(seg) - k:] = ramp[80 - k:]
        out[a:b] += seg * env
    out *= energy
    out += 1e-3 * noise[::-1]
    peak = np.max(np.abs(out))
    if peak > 0.95:
        out *= 0.95 / peak
    return Waveform(out, sr), spans


def toy_utterances(n: int = 8, seed: int = 0) -> list[tuple[UtteranceRecord, Waveform]]:
    """``n`` in-memory utterances cycling through sentences, emotions and two speakers."""
    speakers = make_speakers(2)
    out = []
    for i in range(n):
        spk = speakers[i % 2]
        emo = EmotionLabel(i % len(EMOTIONS))
        text = SENTENCES[i % len(SENTENCES)]
        w, spans = synthesize(text, spk, emo, seed)
        rec = UtteranceRecord(
            utt_id=f"toy_{i:03d}", speaker_id=spk.speaker_id, gender=spk.gender, emotion=emo,
            text=text, tokens=tokenize(text), wav_path="", word_spans=spans)
        out.append((rec, w))
    return out


def write_corpus(out_dir, n_emotional_speakers: int = 2, n_neutral_speakers: int = 2,
                 n_sentences: int = 4, seed: int = 0) -> tuple[str, str]:
    """Write ESD-style and VCTK-style trees under ``out_dir``; returns both roots."""
    emo_root = os.path.join(out_dir, "emotional")
    neu_root = os.path.join(out_dir, "neutral")
    sentences = [SENTENCES[i % len(SENTENCES)] for i in range(n_sentences)]

    def write_genders(root, speakers):
        with open(os.path.join(root, "genders.tsv"), "w", encoding="utf-8") as f:
            for s in speakers:
                f.write(f"{s.speaker_id}\t{s.gender}\n")

    def write_alignments(path, rows):
        import json
        with open(path, "w", encoding="utf-8") as f:
            for utt, spans in rows:
                f.write(json.dumps({"utt_id": utt, "word_spans": [list(s) for s in spans]}) + "\n")

    emo_speakers = make_speakers(n_emotional_speakers, "esd")
    os.makedirs(emo_root, exist_ok=True)
    write_genders(emo_root, emo_speakers)
    for spk in emo_speakers:
        spk_dir = os.path.join(emo_root, spk.speaker_id)
        rows, lines = [], []
        for e, name in enumerate(EMOTIONS):
            d = os.path.join(spk_dir, name.capitalize())
            os.makedirs(d, exist_ok=True)
            for j, text in enumerate(sentences):
                utt = f"{spk.speaker_id}_{e * 100 + j + 1:06d}"
                w, spans = synthesize(text, spk, e, seed)
                save_wav(os.path.join(d, f"{utt}.wav"), w)
                lines.append(f"{utt}\t{text}\t{name.capitalize()}\n")
                rows.append((utt, spans))
        with open(os.path.join(spk_dir, f"{spk.speaker_id}.txt"), "w", encoding="utf-8") as f:
            f.writelines(lines)
        write_alignments(os.path.join(spk_dir, "alignments.jsonl"), rows)

    neu_speakers = make_speakers(n_neutral_speakers, "vctk", start=n_emotional_speakers)
    os.makedirs(neu_root, exist_ok=True)
    write_genders(neu_root, neu_speakers)
    for spk in neu_speakers:
        spk_dir = os.path.join(neu_root, spk.speaker_id)
        os.makedirs(spk_dir, exist_ok=True)
        rows = []
        for j in range(n_sentences):
            text = SENTENCES[(j + n_sentences) % len(SENTENCES)]
            utt = f"{spk.speaker_id}_{j + 1:03d}"
            w, spans = synthesize(text, spk, 0, seed)
            save_wav(os.path.join(spk_dir, f"{utt}.wav"), w)
            with open(os.path.join(spk_dir, f"{utt}.txt"), "w", encoding="utf-8") as f:
                f.write(text + "\n")
            rows.append((utt, spans))
        write_alignments(os.path.join(spk_dir, "alignments.jsonl"), rows)
    return emo_root, neu_root
