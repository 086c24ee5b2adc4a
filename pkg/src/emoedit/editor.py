"""Delete / insert / replace on feature sequences with a selectable emotion.

Spans are half-open. Word spans ``[i, j)`` index into ``record.word_spans``;
frame spans ``[s, e)`` index feature frames. Every edit returns a region map
in output coordinates: ``original`` regions copy source frames verbatim,
``generated`` regions come from the model.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import jsonschema
import numpy as np

from .corpus import EMOTIONS, EmotionLabel, Manifest, UtteranceRecord, tokenize, words
from .masking import MaskSpec
from .model import EmoCampNet, predict_masked
from .signal import validate_features

logger = logging.getLogger(__name__)


class EditError(ValueError):
    pass


@dataclass
class Region:
    source: str          # "original" | "generated"
    start: int           # output frames, half-open
    end: int
    src_start: int | None = None
    emotion: str | None = None

    def to_json(self) -> dict:
        d = {"source": self.source, "start": self.start, "end": self.end}
        if self.source == "original":
            d["src_start"] = self.src_start
        else:
            d["emotion"] = self.emotion
        return d


@dataclass
class EditResult:
    features: np.ndarray
    region_map: list
    text: str = ""

    @property
    def emotion_used(self) -> list[str]:
        return [r.emotion for r in self.region_map if r.source == "generated"]

    def generated(self) -> list[np.ndarray]:
        return [self.features[r.start:r.end] for r in self.region_map if r.source == "generated"]

    def check(self, source: np.ndarray | None = None) -> None:
        """Region map partitions the output; original regions match ``source`` exactly."""
        pos = 0
        for r in self.region_map:
            if r.start != pos or r.end <= r.start:
                raise EditError("region map has a gap, overlap or empty region")
            if source is not None and r.source == "original":
                n = r.end - r.start
                if not np.array_equal(self.features[r.start:r.end], source[r.src_start:r.src_start + n]):
                    raise EditError("original region differs from source frames")
            pos = r.end
        if pos != len(self.features):
            raise EditError("region map does not cover the output")

    def region_map_json(self) -> list[dict]:
        return [r.to_json() for r in self.region_map]


# ---------------------------------------------------------------- durations

@dataclass
class DurationTable:
    per_token: dict = field(default_factory=dict)   # token id -> mean frames
    global_mean: float = 8.0

    def to_json(self) -> dict:
        return {"per_token": {str(k): v for k, v in sorted(self.per_token.items())},
                "global_mean": self.global_mean}

    @classmethod
    def from_json(cls, d: dict) -> "DurationTable":
        return cls({int(k): float(v) for k, v in d["per_token"].items()}, float(d["global_mean"]))


def build_duration_table(records) -> DurationTable:
    """Mean frames per token from word spans; the space token gets the mean word gap."""
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}

    def add(tok, frames):
        sums[tok] = sums.get(tok, 0.0) + frames
        counts[tok] = counts.get(tok, 0) + 1

    space = tokenize("a a")[1]
    for r in records:
        if not r.word_spans:
            continue
        prev_end = None
        for word, s, e in r.word_spans:
            toks = tokenize(word)
            for t in toks:
                add(t, (e - s) / len(toks))
            if prev_end is not None:
                add(space, s - prev_end)
            prev_end = e
    if not counts:
        return DurationTable()
    per = {t: sums[t] / counts[t] for t in sums}
    total = sum(sums.values()) / sum(counts.values())
    return DurationTable(per, max(1.0, total))


def estimate_duration(tokens, table: DurationTable) -> int:
    if len(tokens) == 0:
        raise EditError("cannot estimate duration of an empty token sequence")
    total = sum(table.per_token.get(int(t), table.global_mean) for t in tokens)
    return max(1, int(np.floor(total + 0.5)))


# ---------------------------------------------------------------- helpers

def _original(start, end, src_start) -> list[Region]:
    return [Region("original", start, end, src_start)] if end > start else []


def _check_span(span, T) -> tuple[int, int]:
    s, e = int(span[0]), int(span[1])
    if not 0 <= s <= e <= T:
        raise EditError(f"span ({s}, {e}) out of range for T={T}")
    return s, e


def word_frames(record: UtteranceRecord, i: int, j: int) -> tuple[int, int]:
    """Frame span covering words ``[i, j)``."""
    spans = record.word_spans
    if not spans:
        raise EditError(f"{record.utt_id} has no word spans; use frame spans")
    if not 0 <= i < j <= len(spans):
        raise EditError(f"word span [{i}, {j}) unresolvable for {len(spans)} words")
    return spans[i][1], spans[j - 1][2]


def word_boundary_frame(record: UtteranceRecord, k: int) -> int:
    spans = record.word_spans
    if not spans:
        raise EditError(f"{record.utt_id} has no word spans; use frame positions")
    if not 0 <= k <= len(spans):
        raise EditError(f"word position {k} out of range")
    return spans[k][1] if k < len(spans) else spans[-1][2]


def _words_in(record: UtteranceRecord, s: int, e: int) -> tuple[int, int] | None:
    """Word index range ``[i, j)`` whose centres lie in frames ``[s, e)``."""
    if not record.word_spans:
        return None
    inside = [k for k, (_, a, b) in enumerate(record.word_spans) if s <= (a + b) / 2 < e]
    if inside:
        return inside[0], inside[-1] + 1
    before = sum(1 for _, a, b in record.word_spans if (a + b) / 2 < s)
    return before, before


def _edited_record(record: UtteranceRecord, i: int, j: int, new_words: list[str],
                   s: int, e: int, L: int) -> UtteranceRecord:
    """Transcript and word spans after replacing words [i, j) / frames [s, e) by L frames."""
    old = words(record.text)
    text = " ".join(old[:i] + new_words + old[j:])
    spans = None
    if record.word_spans is not None:
        shift = L - (e - s)
        left = [w for w in record.word_spans[:i]]
        right = [(w, a + shift, b + shift) for w, a, b in record.word_spans[j:]]
        mid = []
        if new_words:
            edges = np.linspace(s, s + L, len(new_words) + 1).round().astype(int)
            mid = [(w, int(a), int(max(b, a + 1))) for w, a, b in zip(new_words, edges[:-1], edges[1:])]
        spans = left + mid + right
        # keep spans ordered even after rounding
        fixed, prev = [], 0
        for w, a, b in spans:
            a = max(a, prev)
            b = max(b, a + 1)
            fixed.append((w, a, b))
            prev = b
        spans = fixed
    return replace(record, text=text, tokens=tokenize(text), word_spans=spans)


def _splice(record, feats, s, e, new_text, emotion, params, table, resize):
    """Shared body of replace/insert: frames [s, e) become model output."""
    feats = validate_features(feats)
    emotion = EmotionLabel.parse(emotion)
    new_words = words(new_text) if new_text.strip() else []
    new_tokens = tokenize(new_text)
    idx = _words_in(record, s, e)
    if idx is None:
        logger.warning("no word spans for %s; transcript left unchanged", record.utt_id)
        i = j = 0
        edited = record
    else:
        i, j = idx
    L = e - s
    if resize or L == 0:
        if table is None:
            raise EditError("a duration table is required to size the generated region")
        L = estimate_duration(new_tokens, table)
    if idx is not None:
        edited = _edited_record(record, i, j, new_words, s, e, L)
    canvas = np.concatenate([feats[:s], np.zeros((L, feats.shape[1])), feats[e:]], axis=0)
    pred = predict_masked(edited, canvas, MaskSpec(s, L), emotion, params)
    canvas[s:s + L] = pred
    regions = (_original(0, s, 0) + [Region("generated", s, s + L, emotion=emotion.name)]
               + _original(s + L, len(canvas), e))
    return EditResult(canvas, regions, edited.text), edited


# ---------------------------------------------------------------- operations

def apply_delete(feats: np.ndarray, span) -> EditResult:
    feats = validate_features(feats)
    s, e = _check_span(span, len(feats))
    if e - s == len(feats):
        raise EditError("cannot delete every frame")
    out = np.concatenate([feats[:s], feats[e:]], axis=0)
    return EditResult(out, _original(0, s, 0) + _original(s, len(out), e))


def apply_replace(record: UtteranceRecord, feats: np.ndarray, span, new_text: str, emotion,
                  params: EmoCampNet, table: DurationTable | None = None) -> EditResult:
    """Regenerate frames ``span`` for ``new_text`` with the chosen emotion.

    The region keeps its length when the token count of the replaced words is
    unchanged, otherwise it is re-sized with ``estimate_duration``.
    """
    if not new_text or not new_text.strip():
        raise EditError("replacement text is empty")
    feats = validate_features(feats)
    s, e = _check_span(span, len(feats))
    idx = _words_in(record, s, e)
    if idx is not None and idx[1] > idx[0]:
        old_tokens = tokenize(" ".join(words(record.text)[idx[0]:idx[1]]))
        resize = len(old_tokens) != len(tokenize(new_text))
    else:
        resize = table is not None
    return _splice(record, feats, s, e, new_text, emotion, params, table, resize)[0]


def apply_insert(record: UtteranceRecord, feats: np.ndarray, position: int, text: str, emotion,
                 params: EmoCampNet, table: DurationTable) -> EditResult:
    feats = validate_features(feats)
    if not text or not text.strip():
        return EditResult(feats.copy(), _original(0, len(feats), 0), record.text)
    if not 0 <= position <= len(feats):
        raise EditError(f"insert position {position} out of range")
    for w, a, b in record.word_spans or []:
        if a < position < b:
            raise EditError(f"insert position {position} falls inside word {w!r} ({a}-{b})")
    return _splice(record, feats, position, position, text, emotion, params, table, True)[0]


# ---------------------------------------------------------------- edit scripts

EDIT_SCRIPT_SCHEMA = {
    "type": "object",
    "required": ["ops"],
    "additionalProperties": False,
    "properties": {
        "utt_id": {"type": "string"},
        "ops": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["type"],
                "additionalProperties": False,
                "properties": {
                    "type": {"enum": ["delete", "insert", "replace"]},
                    "span_words": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                   "minItems": 2, "maxItems": 2},
                    "span_frames": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                    "minItems": 2, "maxItems": 2},
                    "position_word": {"type": "integer", "minimum": 0},
                    "position_frame": {"type": "integer", "minimum": 0},
                    "text": {"type": "string"},
                    "emotion": {"enum": list(EMOTIONS) + [e.capitalize() for e in EMOTIONS]},
                },
                "allOf": [
                    {"if": {"properties": {"type": {"const": "insert"}}},
                     "then": {"required": ["text"], "oneOf": [{"required": ["position_word"]},
                                                              {"required": ["position_frame"]}]}},
                    {"if": {"properties": {"type": {"const": "replace"}}},
                     "then": {"required": ["text"], "oneOf": [{"required": ["span_words"]},
                                                              {"required": ["span_frames"]}]}},
                    {"if": {"properties": {"type": {"const": "delete"}}},
                     "then": {"oneOf": [{"required": ["span_words"]}, {"required": ["span_frames"]}]}},
                ],
            },
        },
    },
}


@dataclass
class EditOp:
    type: str
    span_words: tuple | None = None
    span_frames: tuple | None = None
    position_word: int | None = None
    position_frame: int | None = None
    text: str = ""
    emotion: str = "neutral"


@dataclass
class EditScript:
    ops: list
    utt_id: str | None = None

    @property
    def needs_model(self) -> bool:
        return any(op.type != "delete" for op in self.ops)

    @classmethod
    def from_dict(cls, d: dict) -> "EditScript":
        try:
            jsonschema.validate(d, EDIT_SCRIPT_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise EditError(f"edit script schema violation at {where}: {exc.message}") from None
        ops = []
        for o in d["ops"]:
            ops.append(EditOp(
                type=o["type"],
                span_words=tuple(o["span_words"]) if "span_words" in o else None,
                span_frames=tuple(o["span_frames"]) if "span_frames" in o else None,
                position_word=o.get("position_word"), position_frame=o.get("position_frame"),
                text=o.get("text", ""), emotion=o.get("emotion", "neutral").lower()))
        return cls(ops, d.get("utt_id"))

    @classmethod
    def loads(cls, text: str) -> "EditScript":
        """Parse JSON text; json.JSONDecodeError (with line/column) propagates."""
        return cls.from_dict(json.loads(text))


def _resolve(op: EditOp, record: UtteranceRecord) -> tuple[int, int]:
    if op.span_words is not None:
        return word_frames(record, *op.span_words)
    if op.span_frames is not None:
        return tuple(op.span_frames)
    if op.position_word is not None:
        p = word_boundary_frame(record, op.position_word)
        return p, p
    return op.position_frame, op.position_frame


def _shift_regions(regions: list[Region], s: int, e: int, new: list[Region]) -> list[Region]:
    """Replace output frames [s, e) of a region map by ``new`` (already positioned at s)."""
    growth = sum(r.end - r.start for r in new) - (e - s)
    out = []
    for r in regions:
        if r.end <= s:
            out.append(r)
            continue
        if r.start >= e:
            out.append(replace(r, start=r.start + growth, end=r.end + growth,
                               src_start=r.src_start))
            continue
        if r.start < s:
            out.append(replace(r, end=s))
        if r.end > e:
            src = None if r.src_start is None else r.src_start + (e - r.start)
            out.append(replace(r, start=e + growth, end=r.end + growth, src_start=src))
    out.extend(new)
    return sorted(out, key=lambda r: r.start)


def apply_script(record: UtteranceRecord, feats: np.ndarray, script: EditScript,
                 params: EmoCampNet | None = None, table: DurationTable | None = None,
                 emotion: str | None = None) -> EditResult:
    """Apply all ops (resolved against the source, applied right to left)."""
    feats = validate_features(feats)
    resolved = []
    for op in script.ops:
        s, e = _check_span(_resolve(op, record), len(feats))
        resolved.append((s, e, op))
    resolved.sort(key=lambda x: (x[0], x[1]))
    for (s1, e1, _), (s2, e2, _) in zip(resolved, resolved[1:]):
        if s2 < e1 or (s1 == e1 == s2 == e2):
            raise EditError("edit operations overlap after resolution")
    if script.needs_model and params is None:
        raise EditError("replace/insert operations need a model")

    cur_feats, cur_record = feats, record
    regions = _original(0, len(feats), 0)
    for s, e, op in reversed(resolved):
        emo = emotion or op.emotion
        if op.type == "delete":
            res = apply_delete(cur_feats, (s, e))
            idx = _words_in(cur_record, s, e)
            if idx is not None:
                cur_record = _edited_record(cur_record, idx[0], idx[1], [], s, e, 0)
            new = []
        else:
            if op.type == "insert":
                if not op.text.strip():
                    continue
                for w, a, b in cur_record.word_spans or []:
                    if a < s < b:
                        raise EditError(f"insert position {s} falls inside word {w!r}")
                resize = True
            else:
                if not op.text.strip():
                    raise EditError("replacement text is empty")
                idx = _words_in(cur_record, s, e)
                if idx is not None and idx[1] > idx[0]:
                    old = tokenize(" ".join(words(cur_record.text)[idx[0]:idx[1]]))
                    resize = len(old) != len(tokenize(op.text))
                else:
                    resize = table is not None
            res, cur_record = _splice(cur_record, cur_feats, s, e, op.text, emo, params, table, resize)
            gen = [r for r in res.region_map if r.source == "generated"][0]
            new = [gen]
        regions = _shift_regions(regions, s, e, new)
        cur_feats = res.features
    result = EditResult(cur_feats, _merge(regions), cur_record.text)
    result.check(feats)
    return result


def _merge(regions: list[Region]) -> list[Region]:
    """Join adjacent original regions that are contiguous in the source too."""
    out: list[Region] = []
    for r in regions:
        if (out and r.source == out[-1].source == "original"
                and out[-1].src_start + (out[-1].end - out[-1].start) == r.src_start):
            out[-1] = replace(out[-1], end=r.end)
        else:
            out.append(r)
    return out


def duration_table_from_manifest(m: Manifest) -> DurationTable:
    return build_duration_table(m.records)
