"""Corpus ingestion (ESD-style emotional, VCTK-style neutral), tokenization and splits.

Emotional layout::

    root/<speaker>/<speaker>.txt          utt_id<TAB>text[<TAB>emotion]
    root/<speaker>/<Emotion>/<utt_id>.wav
    root/<speaker>/alignments.jsonl       optional word spans
    root/genders.tsv                      optional speaker<TAB>gender

Neutral layout::

    root/<speaker>/<utt_id>.wav
    root/<speaker>/<utt_id>.txt           or one root/<speaker>/<speaker>.txt
"""

from __future__ import annotations

import json
import logging
import os
import re
import unicodedata
from dataclasses import asdict, dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

EMOTIONS = ("neutral", "happy", "sad", "angry", "surprise")
GENDERS = ("female", "male", "unknown")
SPLITS = ("train", "val", "test")
PROVENANCES = ("original", "f0_augmented", "neutral_merged")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class EmotionLabel:
    id: int

    def __post_init__(self):
        if not isinstance(self.id, (int, np.integer)) or not 0 <= self.id < len(EMOTIONS):
            raise CorpusError(f"invalid emotion id: {self.id!r}")

    @classmethod
    def parse(cls, value) -> "EmotionLabel":
        if isinstance(value, EmotionLabel):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        name = str(value).strip().lower()
        if name not in EMOTIONS:
            raise CorpusError(f"unknown emotion: {value!r}")
        return cls(EMOTIONS.index(name))

    @property
    def name(self) -> str:
        return EMOTIONS[self.id]

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(len(EMOTIONS))
        v[self.id] = 1.0
        return v


NEUTRAL = EmotionLabel(0)


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    gender: str
    emotion: EmotionLabel
    text: str
    tokens: list
    wav_path: str
    word_spans: list | None = None
    provenance: str = "original"

    def __post_init__(self):
        self.emotion = EmotionLabel.parse(self.emotion)
        if self.gender not in GENDERS:
            raise CorpusError(f"invalid gender {self.gender!r} for {self.utt_id}")
        if not self.tokens:
            raise CorpusError(f"empty token sequence for {self.utt_id}")
        if self.word_spans is not None:
            self.word_spans = [(str(w), int(s), int(e)) for w, s, e in self.word_spans]
            prev_end = 0
            for w, s, e in self.word_spans:
                if s < prev_end or e <= s:
                    raise CorpusError(f"word spans overlap or are unordered in {self.utt_id}")
                prev_end = e

    def to_json(self) -> dict:
        d = asdict(self)
        d["emotion"] = self.emotion.name
        if self.word_spans is not None:
            d["word_spans"] = [list(s) for s in self.word_spans]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "UtteranceRecord":
        return cls(**d)


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    split: str = "train"
    provenance: str = "original"

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.utt_id in seen:
                raise CorpusError(f"duplicate utt_id {r.utt_id}")
            seen.add(r.utt_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def speakers(self) -> list[str]:
        return sorted({r.speaker_id for r in self.records})

    def summary(self) -> dict:
        by_emotion = {e: 0 for e in EMOTIONS}
        by_speaker: dict[str, int] = {}
        for r in self.records:
            by_emotion[r.emotion.name] += 1
            by_speaker[r.speaker_id] = by_speaker.get(r.speaker_id, 0) + 1
        return {"split": self.split, "records": len(self.records),
                "emotions": by_emotion, "speakers": dict(sorted(by_speaker.items()))}


def write_manifest(path, m: Manifest) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for r in m.records:
            f.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def read_manifest(path, split: str | None = None, provenance: str = "original") -> Manifest:
    if split is None:
        stem = os.path.basename(str(path)).split(".")[0]
        split = stem if stem in SPLITS else "train"
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(UtteranceRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: bad manifest line ({exc})") from exc
    return Manifest(records, split, provenance)


# ---------------------------------------------------------------- tokens

PAD_ID = 0
UNK_ID = 1
GRAPHEMES = " abcdefghijklmnopqrstuvwxyz'.,?!-"


class Tokenizer:
    """Grapheme tokenizer, or phoneme tokenizer when a lexicon is supplied.

    With a lexicon, words are looked up and the phone inventory (sorted) is
    appended after the grapheme table so ids stay stable; words missing from
    the lexicon fall back to graphemes.
    """

    def __init__(self, lexicon: dict | None = None):
        self.lexicon = {k.lower(): list(v) for k, v in (lexicon or {}).items()}
        symbols = ["<pad>", "<unk>", *GRAPHEMES]
        phones = sorted({p for prons in self.lexicon.values() for p in prons} - set(symbols))
        self.symbols = symbols + phones
        self.ids = {s: i for i, s in enumerate(self.symbols)}

    @property
    def vocab_size(self) -> int:
        return len(self.symbols)

    @staticmethod
    def normalize(text: str) -> str:
        text = unicodedata.normalize("NFKC", text).lower()
        return re.sub(r"\s+", " ", text).strip()

    def __call__(self, text: str) -> list[int]:
        norm = self.normalize(text)
        if not norm:
            raise CorpusError("cannot tokenize empty text")
        if not self.lexicon:
            return [self.ids.get(ch, UNK_ID) for ch in norm]
        out: list[int] = []
        for i, word in enumerate(norm.split(" ")):
            if i:
                out.append(self.ids[" "])
            prons = self.lexicon.get(word)
            symbols = prons if prons is not None else list(word)
            out.extend(self.ids.get(s, UNK_ID) for s in symbols)
        return out


DEFAULT_TOKENIZER = Tokenizer()


def tokenize(text: str) -> list[int]:
    return DEFAULT_TOKENIZER(text)


def words(text: str) -> list[str]:
    return Tokenizer.normalize(text).split(" ")


# ---------------------------------------------------------------- ingestion

def _read_genders(root) -> dict[str, str]:
    path = os.path.join(root, "genders.tsv")
    if not os.path.isfile(path):
        return {}
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.strip().split("\t")
            if len(parts) >= 2:
                g = parts[1].strip().lower()
                out[parts[0]] = {"f": "female", "m": "male"}.get(g, g if g in GENDERS else "unknown")
    return out


def _read_transcripts(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8-sig") as f:
        for line in f:
            parts = line.rstrip("\n").split("\t")
            if len(parts) >= 2 and parts[0]:
                out[parts[0].strip()] = parts[1].strip()
    return out


def _read_alignments(path) -> dict[str, list]:
    if not os.path.isfile(path):
        return {}
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out[d["utt_id"]] = d["word_spans"]
    return out


def _subdirs(path) -> list[str]:
    return sorted(d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d)))


def _wavs(path) -> list[str]:
    return sorted(f for f in os.listdir(path) if f.lower().endswith(".wav"))


def ingest_emotional_corpus(root, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> Manifest:
    if not os.path.isdir(root):
        raise CorpusError(f"corpus root does not exist: {root}")
    genders = _read_genders(root)
    records = []
    for spk in _subdirs(root):
        spk_dir = os.path.join(root, spk)
        tpath = os.path.join(spk_dir, f"{spk}.txt")
        emotion_dirs = _subdirs(spk_dir)
        if not emotion_dirs:
            continue
        if not os.path.isfile(tpath):
            raise CorpusError(f"missing transcript: {tpath}")
        texts = _read_transcripts(tpath)
        spans = _read_alignments(os.path.join(spk_dir, "alignments.jsonl"))
        for emo_dir in emotion_dirs:
            try:
                emotion = EmotionLabel.parse(emo_dir)
            except CorpusError:
                raise CorpusError(f"unknown emotion directory {emo_dir!r} in {spk_dir}") from None
            # ESD nests train/evaluation/test folders below each emotion
            for dirpath, _, files in sorted(os.walk(os.path.join(spk_dir, emo_dir))):
                for wav in sorted(f for f in files if f.lower().endswith(".wav")):
                    utt = os.path.splitext(wav)[0]
                    if utt not in texts:
                        raise CorpusError(f"missing transcript for {utt} in {tpath}")
                    records.append(UtteranceRecord(
                        utt_id=utt, speaker_id=spk, gender=genders.get(spk, "unknown"),
                        emotion=emotion, text=texts[utt], tokens=tokenizer(texts[utt]),
                        wav_path=os.path.abspath(os.path.join(dirpath, wav)),
                        word_spans=spans.get(utt)))
    records.sort(key=lambda r: r.utt_id)
    return Manifest(records, "train", "original")


def ingest_neutral_corpus(root, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> Manifest:
    if not os.path.isdir(root):
        raise CorpusError(f"corpus root does not exist: {root}")
    genders = _read_genders(root)
    records = []
    for spk in _subdirs(root):
        spk_dir = os.path.join(root, spk)
        shared = os.path.join(spk_dir, f"{spk}.txt")
        texts = _read_transcripts(shared) if os.path.isfile(shared) else {}
        spans = _read_alignments(os.path.join(spk_dir, "alignments.jsonl"))
        for wav in _wavs(spk_dir):
            utt = os.path.splitext(wav)[0]
            text = texts.get(utt)
            own = os.path.join(spk_dir, f"{utt}.txt")
            if text is None and os.path.isfile(own):
                with open(own, encoding="utf-8") as f:
                    text = f.read().strip()
            if not text:
                raise CorpusError(f"missing transcript for {utt} in {spk_dir}")
            records.append(UtteranceRecord(
                utt_id=utt, speaker_id=spk, gender=genders.get(spk, "unknown"),
                emotion=NEUTRAL, text=text, tokens=tokenizer(text),
                wav_path=os.path.abspath(os.path.join(spk_dir, wav)),
                word_spans=spans.get(utt)))
    if not records:
        logger.warning("no utterances found under %s", root)
    records.sort(key=lambda r: r.utt_id)
    return Manifest(records, "train", "original")


def make_splits(m: Manifest, held_out_speakers, val_fraction: float = 0.1,
                seed: int = 0) -> tuple[Manifest, Manifest, Manifest]:
    """Held-out speakers form the test set; the rest is shuffled into train/val."""
    if not 0.0 <= val_fraction < 1.0:
        raise CorpusError("val_fraction must be in [0, 1)")
    held = set(held_out_speakers)
    unknown = held - set(m.speakers())
    if unknown:
        raise CorpusError(f"unknown held-out speaker(s): {sorted(unknown)}")
    ordered = sorted(m.records, key=lambda r: r.utt_id)
    test = [r for r in ordered if r.speaker_id in held]
    rest = [r for r in ordered if r.speaker_id not in held]
    order = np.random.default_rng(seed).permutation(len(rest))
    n_val = int(round(val_fraction * len(rest)))
    val = sorted((rest[i] for i in order[:n_val]), key=lambda r: r.utt_id)
    train = sorted((rest[i] for i in order[n_val:]), key=lambda r: r.utt_id)
    return (Manifest(train, "train", m.provenance), Manifest(val, "val", m.provenance),
            Manifest(test, "test", m.provenance))


def relabel(r: UtteranceRecord, **changes) -> UtteranceRecord:
    return replace(r, **changes)
