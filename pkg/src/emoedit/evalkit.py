"""Objective evaluation: mel-cepstral distortion over a DTW path, F0 statistics
of generated regions, and a small LSTM speech-emotion classifier.

MCD uses cepstra 1..28 of the feature vector (energy c0 and the last
coefficient are left out)::

    MCD(a, b) = 10 / ln 10 * sqrt(2 * sum_i (a_i - b_i)^2)
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn
from safetensors.torch import load_file, save_file
from scipy.spatial.distance import cdist

from .augment import pitch_shift
from .corpus import EMOTIONS, EmotionLabel, Manifest
from .editor import EditResult
from .signal import FrameConfig, Waveform, features_to_f0, invert_features, load_wav, log_mel_spectrogram

logger = logging.getLogger(__name__)

MCD_ORDER = 28
CEPSTRAL_SLICE = slice(1, 1 + MCD_ORDER)
MCD_SCALE = 10.0 / math.log(10.0)


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------- MCD

def mcd(a, b) -> float:
    """MCD in dB between two 28-dim cepstral vectors."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EvalError(f"mcd needs two vectors of equal length, got {a.shape} and {b.shape}")
    if len(a) != MCD_ORDER:
        raise EvalError(f"mcd expects {MCD_ORDER}-dim vectors, got {len(a)}")
    return MCD_SCALE * math.sqrt(2.0 * math.fsum((a - b) ** 2))


def cepstral_part(seq) -> np.ndarray:
    """(T, 28) sub-vectors from a (T, 32) feature sequence; (T, 28) input passes through."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2:
        raise EvalError("expected a 2-D feature sequence")
    if seq.shape[1] == MCD_ORDER:
        return seq
    if seq.shape[1] < CEPSTRAL_SLICE.stop:
        raise EvalError(f"feature dim {seq.shape[1]} too small for MCD")
    return seq[:, CEPSTRAL_SLICE]


def dtw_path(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost monotone path with steps (1,0), (0,1), (1,1).

    Ties are broken in favour of the diagonal, then of advancing the first
    sequence.
    """
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev = acc[i], acc[i - 1]
        c = cost[i - 1]
        for j in range(1, m + 1):
            row[j] = c[j - 1] + min(prev[j - 1], prev[j], row[j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        options = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        best = min(o[0] for o in options)
        _, i, j = next(o for o in options if o[0] == best)
        path.append((i - 1, j - 1))
    return path[::-1]


def mcd_dtw(A, B, return_path: bool = False):
    """Mean frame-pair MCD along the Euclidean-cost DTW path of two sequences."""
    A, B = cepstral_part(A), cepstral_part(B)
    if len(A) == 0 or len(B) == 0:
        raise EvalError("mcd_dtw needs nonempty sequences")
    cost = cdist(A, B, metric="euclidean")
    path = dtw_path(cost)
    value = math.fsum(MCD_SCALE * math.sqrt(2.0) * cost[i, j] for i, j in path) / len(path)
    return (value, path) if return_path else value


@dataclass
class McdReport:
    rows: list = field(default_factory=list)   # {"utt_id", "emotion", "mcd_db"}

    def add(self, utt_id: str, emotion, edited, reference) -> float:
        value = mcd_dtw(edited, reference)
        self.rows.append({"utt_id": utt_id, "emotion": EmotionLabel.parse(emotion).name,
                          "mcd_db": value})
        return value

    def per_emotion(self) -> dict:
        out = {}
        for e in EMOTIONS:
            vals = [r["mcd_db"] for r in self.rows if r["emotion"] == e]
            if vals:
                out[e] = float(np.mean(vals))
        return out

    def summary(self) -> dict:
        vals = [r["mcd_db"] for r in self.rows]
        return {"n": len(vals), "mean_mcd_db": float(np.mean(vals)) if vals else None,
                "per_emotion": self.per_emotion()}


# ---------------------------------------------------------------- F0 statistics

@dataclass
class F0StatsTable:
    cells: dict = field(default_factory=dict)   # (gender, emotion) -> {"mean", "std", "n_frames"} | None

    def rows(self) -> list[dict]:
        out = []
        for (g, e), cell in sorted(self.cells.items()):
            if cell is None:
                out.append({"gender": g, "emotion": e, "mean_hz": "", "std_hz": "", "n_frames": 0})
            else:
                out.append({"gender": g, "emotion": e, "mean_hz": cell["mean"], "std_hz": cell["std"],
                            "n_frames": cell["n_frames"]})
        return out

    def to_json(self) -> dict:
        return {f"{g}/{e}": cell for (g, e), cell in sorted(self.cells.items())}


def f0_stats(edited) -> F0StatsTable:
    """Pool voiced-frame F0 (Hz) of generated regions per (gender, emotion).

    ``edited`` is an iterable of (EditResult, gender, emotion). Cells without
    any voiced frame are kept as ``None``.
    """
    pooled: dict[tuple, list] = {}
    for result, gender, emotion in edited:
        regions = [r for r in result.region_map if r.source == "generated"]
        if not regions:
            raise EvalError("edit result has no generated region")
        key = (str(gender), EmotionLabel.parse(emotion).name)
        bucket = pooled.setdefault(key, [])
        for r in regions:
            f0 = features_to_f0(result.features[r.start:r.end])
            bucket.extend(f0[f0 > 0].tolist())
    table = F0StatsTable()
    for key, values in pooled.items():
        if values:
            v = np.asarray(values)
            table.cells[key] = {"mean": float(v.mean()), "std": float(v.std()), "n_frames": len(v)}
        else:
            table.cells[key] = None
    return table


# ---------------------------------------------------------------- SER

@dataclass
class SerConfig:
    hidden: int = 256
    fc: int = 256
    dropout: float = 0.5
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 10
    seed: int = 0
    augment_shifts: tuple = ()
    stop_at_accuracy: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "SerConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown SER config keys: {sorted(unknown)}")
        d = dict(d)
        if "augment_shifts" in d:
            d["augment_shifts"] = tuple(d["augment_shifts"])
        return cls(**d)


class SerModel(nn.Module):
    """LSTM over log-mel frames, mean-pooled, then FC-256 ReLU and a 5-way softmax."""

    def __init__(self, n_mels: int = 40, hidden: int = 256, fc: int = 256, dropout: float = 0.5,
                 n_classes: int = len(EMOTIONS)):
        super().__init__()
        self.dims = {"n_mels": n_mels, "hidden": hidden, "fc": fc, "dropout": dropout,
                     "n_classes": n_classes}
        self.lstm = nn.LSTM(n_mels, hidden, batch_first=True)
        self.drop = nn.Dropout(dropout)
        self.fc = nn.Linear(hidden, fc)
        self.out = nn.Linear(fc, n_classes)
        self.register_buffer("mel_mean", torch.zeros(n_mels))
        self.register_buffer("mel_std", torch.ones(n_mels))

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Logits (B, classes) for padded log-mel input (B, T, n_mels)."""
        h, _ = self.lstm((x - self.mel_mean) / self.mel_std)
        valid = torch.arange(x.shape[1])[None, :] < lengths[:, None]
        pooled = (self.drop(h) * valid[..., None]).sum(1) / lengths[:, None].to(h.dtype)
        return self.out(torch.relu(self.fc(pooled)))

    @torch.no_grad()
    def predict_proba(self, log_mel: np.ndarray) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            x = torch.as_tensor(np.asarray(log_mel), dtype=torch.float32)[None]
            return torch.softmax(self(x, torch.tensor([x.shape[1]])), -1)[0].double().numpy()
        finally:
            self.train(was)

    def save(self, path: str) -> None:
        tensors = {k: v.detach().float().contiguous() for k, v in self.state_dict().items()}
        save_file(tensors, f"{path}.tmp")
        with open(f"{path}.json.tmp", "w", encoding="utf-8") as f:
            json.dump(self.dims, f, indent=2)
        os.replace(f"{path}.json.tmp", f"{path}.json")
        os.replace(f"{path}.tmp", path)

    @classmethod
    def load(cls, path: str) -> "SerModel":
        with open(f"{path}.json", encoding="utf-8") as f:
            dims = json.load(f)
        model = cls(**dims)
        model.load_state_dict(load_file(path))
        model.eval()
        return model


def _pad(batch: list[np.ndarray]):
    lengths = torch.tensor([len(x) for x in batch])
    out = torch.zeros(len(batch), int(lengths.max()), batch[0].shape[1])
    for i, x in enumerate(batch):
        out[i, :len(x)] = torch.as_tensor(x, dtype=torch.float32)
    return out, lengths


@torch.no_grad()
def ser_predict(model: SerModel, feats: list[np.ndarray]) -> np.ndarray:
    model.eval()
    preds = []
    for k in range(0, len(feats), 32):
        x, lengths = _pad(feats[k:k + 32])
        preds.append(model(x, lengths).argmax(-1).numpy())
    return np.concatenate(preds)


def train_ser_features(feats: list[np.ndarray], labels, config: SerConfig = SerConfig()) -> SerModel:
    """Fit the classifier on precomputed log-mel sequences; stops early at ``stop_at_accuracy``."""
    labels = np.asarray([EmotionLabel.parse(v).id for v in labels])
    if len(feats) != len(labels) or not feats:
        raise EvalError("need one label per (nonempty) training clip")
    if len(set(labels.tolist())) < 2:
        raise EvalError("SER training needs at least 2 emotion classes")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = SerModel(feats[0].shape[1], config.hidden, config.fc, config.dropout)
    stacked = np.concatenate(feats)
    model.mel_mean.copy_(torch.as_tensor(stacked.mean(0)))
    model.mel_std.copy_(torch.as_tensor(np.maximum(stacked.std(0), 1e-3)))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    loss_fn = nn.CrossEntropyLoss()
    model.history = []
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(feats))
        for k in range(0, len(order), config.batch_size):
            idx = order[k:k + config.batch_size]
            x, lengths = _pad([feats[i] for i in idx])
            loss = loss_fn(model(x, lengths), torch.as_tensor(labels[idx]))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        acc = float((ser_predict(model, feats) == labels).mean())
        model.history.append({"epoch": epoch + 1, "train_acc": acc})
        if acc >= config.stop_at_accuracy:
            break
    model.eval()
    return model


def train_ser(manifest: Manifest, config: SerConfig = SerConfig(),
              frame_cfg: FrameConfig = FrameConfig()) -> SerModel:
    """Train on the manifest's audio, optionally adding pitch-shifted copies."""
    feats, labels = [], []
    for r in manifest.records:
        w = load_wav(r.wav_path)
        feats.append(log_mel_spectrogram(w, frame_cfg))
        labels.append(r.emotion.id)
        for s in config.augment_shifts:
            feats.append(log_mel_spectrogram(pitch_shift(w, s), frame_cfg))
            labels.append(r.emotion.id)
    return train_ser_features(feats, labels, config)


def confusion_from_labels(true, pred, n_classes: int = len(EMOTIONS)) -> np.ndarray:
    """Row-normalised confusion matrix (rows: intended, columns: predicted).

    Rows without samples stay all-zero.
    """
    counts = np.zeros((n_classes, n_classes))
    for t, p in zip(true, pred):
        counts[int(t), int(p)] += 1
    totals = counts.sum(1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def edit_log_mel(result: EditResult, frame_cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    """Log-mel of the preview waveform of the generated frames (all frames if none)."""
    regions = [r for r in result.region_map if r.source == "generated"]
    frames = (np.concatenate([result.features[r.start:r.end] for r in regions])
              if regions else result.features)
    wave = invert_features(frames, frame_cfg)
    win = frame_cfg.window_samples(wave.sample_rate)
    if len(wave) < win:
        wave = Waveform(np.pad(wave.samples, (0, win - len(wave))), wave.sample_rate)
    return log_mel_spectrogram(wave, frame_cfg)


def confusion_matrix(model: SerModel, edits) -> np.ndarray:
    """``edits``: iterable of (EditResult, intended emotion)."""
    edits = list(edits)
    if not edits:
        raise EvalError("confusion matrix needs at least one edit")
    feats = [edit_log_mel(r) for r, _ in edits]
    true = [EmotionLabel.parse(e).id for _, e in edits]
    return confusion_from_labels(true, ser_predict(model, feats))


def confusion_json(matrix: np.ndarray) -> dict:
    return {"labels": list(EMOTIONS), "matrix": np.asarray(matrix).tolist(),
            "accuracy_mean_recall": float(np.mean(np.diag(matrix)))}
