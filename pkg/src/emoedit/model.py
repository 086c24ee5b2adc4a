"""Emotion-selectable mask-predict acoustic model.

Forward path for one utterance::

    h_x   = text_encoder(tokens)                  (M, H)
    h_emo = emotion_table[emotion]                (H,)
    h_c   = ncg(features with the mask zeroed)    (T, H)
    coarse = pass1(query=h_c, memory=[h_x; h_emo])
    y_pre  = coarse + pass2(query=coarse, memory=h_c)

The discriminator maps h_c to per-frame P(frame came from neutral speech).
All submodules respect padding masks so padded batches give the same
unpadded outputs as single-utterance calls.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from .corpus import DEFAULT_TOKENIZER, EMOTIONS, PAD_ID, EmotionLabel, UtteranceRecord
from .masking import MaskSpec
from .signal import FEAT_DIM, LOGF0_COL, VOICING_COL, validate_features

PARAMS_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int = DEFAULT_TOKENIZER.vocab_size
    hidden: int = 256
    token_embed_dim: int = 256
    text_conv_layers: int = 3
    text_blocks: int = 3
    decoder_blocks: int = 6
    attention_heads: int = 4
    ffn_dim: int = 1024
    ncg_layers: int = 3
    ncg_kernel: int = 5
    disc_layers: int = 3
    disc_kernel: int = 3
    feat_dim: int = FEAT_DIM
    n_emotions: int = len(EMOTIONS)
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden % self.attention_heads:
            raise ValueError("hidden must be divisible by attention_heads")
        if self.feat_dim != FEAT_DIM:
            raise ValueError(f"feat_dim must be {FEAT_DIM}")
        if self.n_emotions != len(EMOTIONS):
            raise ValueError(f"n_emotions must be {len(EMOTIONS)}")
        if min(self.text_conv_layers, self.text_blocks, self.decoder_blocks,
               self.ncg_layers, self.disc_layers) < 1:
            raise ValueError("every stack needs at least one layer")

    @property
    def pass_blocks(self) -> tuple[int, int]:
        """Decoder blocks for (coarse pass, refine pass); each pass gets at least one."""
        first = max(1, self.decoder_blocks - self.decoder_blocks // 2)
        return first, max(1, self.decoder_blocks // 2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(hidden=8, token_embed_dim=8, text_conv_layers=1, text_blocks=1,
                    decoder_blocks=1, attention_heads=2, ffn_dim=16, ncg_layers=1,
                    disc_layers=1, dropout=0.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(hidden=64, token_embed_dim=64, text_conv_layers=3, text_blocks=2,
                    decoder_blocks=4, attention_heads=4, ffn_dim=128, dropout=0.0)
        base.update(overrides)
        return cls(**base)


def sinusoid_table(length: int, dim: int, device=None, dtype=None) -> torch.Tensor:
    pos = torch.arange(length, device=device, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, device=device, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, device=device, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, :dim // 2]
    return pe.to(dtype or torch.get_default_dtype())


def _zero_pad(x: torch.Tensor, pad: torch.Tensor | None) -> torch.Tensor:
    """Zero the padded frames of a (B, L, C) tensor; pad is True where padded."""
    return x if pad is None else x.masked_fill(pad[..., None], 0.0)


class ConvStack(nn.Module):
    """Conv1d -> LayerNorm over channels -> GELU, padded frames zeroed before every conv."""

    def __init__(self, in_dim, dim, n_layers, kernel, dropout=0.0):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv1d(in_dim if i == 0 else dim, dim, kernel, padding=kernel // 2) for i in range(n_layers))
        self.norms = nn.ModuleList(nn.LayerNorm(dim) for _ in range(n_layers))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, pad=None):
        for conv, norm in zip(self.convs, self.norms):
            x = _zero_pad(x, pad)
            x = conv(x.transpose(1, 2)).transpose(1, 2)
            x = self.dropout(F.gelu(norm(x)))
        return _zero_pad(x, pad)


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.token_embed_dim, padding_idx=PAD_ID)
        self.convs = ConvStack(cfg.token_embed_dim, cfg.hidden, cfg.text_conv_layers, 5, cfg.dropout)
        layer = nn.TransformerEncoderLayer(cfg.hidden, cfg.attention_heads, cfg.ffn_dim, cfg.dropout,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, cfg.text_blocks, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.hidden)

    def forward(self, tokens, pad=None):
        x = self.convs(self.embed(tokens), pad)
        x = x + sinusoid_table(x.shape[1], x.shape[2], x.device, x.dtype)
        x = self.blocks(x, src_key_padding_mask=pad)
        return _zero_pad(self.norm(x), pad)


class NeutralContentGenerator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.convs = ConvStack(cfg.feat_dim, cfg.hidden, cfg.ncg_layers, cfg.ncg_kernel)
        self.proj = nn.Linear(cfg.hidden, cfg.hidden)

    def forward(self, masked_feats, pad=None):
        return _zero_pad(self.proj(self.convs(masked_feats, pad)), pad)


class FrameDiscriminator(nn.Module):
    """Per-frame logit that the content frame came from neutral speech."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        k = cfg.disc_kernel
        dims = [cfg.hidden] * cfg.disc_layers + [1]
        self.convs = nn.ModuleList(nn.Conv1d(dims[i], dims[i + 1], k, padding=k // 2)
                                   for i in range(cfg.disc_layers))

    def forward(self, h_c, pad=None):
        x = h_c
        for i, conv in enumerate(self.convs):
            x = _zero_pad(x, pad)
            x = conv(x.transpose(1, 2)).transpose(1, 2)
            if i + 1 < len(self.convs):
                x = F.gelu(x)
        return x[..., 0]


class TwoPassDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n1, n2 = cfg.pass_blocks

        def stack(n):
            layer = nn.TransformerDecoderLayer(cfg.hidden, cfg.attention_heads, cfg.ffn_dim, cfg.dropout,
                                               activation="gelu", batch_first=True, norm_first=True)
            return nn.TransformerDecoder(layer, n)

        self.coarse_blocks = stack(n1)
        self.coarse_out = nn.Sequential(nn.LayerNorm(cfg.hidden), nn.Linear(cfg.hidden, cfg.feat_dim))
        self.refine_in = nn.Linear(cfg.feat_dim, cfg.hidden)
        self.refine_blocks = stack(n2)
        self.refine_out = nn.Sequential(nn.LayerNorm(cfg.hidden), nn.Linear(cfg.hidden, cfg.feat_dim))

    def forward(self, h_x, h_emo, h_c, text_pad=None, frame_pad=None):
        B, T, H = h_c.shape
        pos = sinusoid_table(T, H, h_c.device, h_c.dtype)
        memory = torch.cat([h_x, h_emo[:, None, :]], dim=1)
        mem_pad = None
        if text_pad is not None:
            mem_pad = torch.cat([text_pad, text_pad.new_zeros(B, 1)], dim=1)
        q = self.coarse_blocks(h_c + pos, memory, tgt_key_padding_mask=frame_pad,
                               memory_key_padding_mask=mem_pad)
        coarse = self.coarse_out(q)
        r = self.refine_blocks(self.refine_in(coarse) + pos, h_c, tgt_key_padding_mask=frame_pad,
                               memory_key_padding_mask=frame_pad)
        fine = coarse + self.refine_out(r)
        return _zero_pad(coarse, frame_pad), _zero_pad(fine, frame_pad)


class EmoCampNet(nn.Module):
    """All trainable tensors plus feature normalisation statistics (buffers)."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.version = PARAMS_VERSION
        self.text_encoder = TextEncoder(self.cfg)
        self.emotion_table = nn.Embedding(self.cfg.n_emotions, self.cfg.hidden)
        self.ncg = NeutralContentGenerator(self.cfg)
        self.decoder = TwoPassDecoder(self.cfg)
        self.discriminator = FrameDiscriminator(self.cfg)
        self.register_buffer("feat_mean", torch.zeros(self.cfg.feat_dim))
        self.register_buffer("feat_std", torch.ones(self.cfg.feat_dim))

    def generator_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("discriminator.")]

    def discriminator_parameters(self):
        return list(self.discriminator.parameters())

    def set_normalizer(self, feats: list[np.ndarray]) -> None:
        stacked = np.concatenate(feats, axis=0)
        self.feat_mean.copy_(torch.as_tensor(stacked.mean(axis=0)))
        self.feat_std.copy_(torch.as_tensor(np.maximum(stacked.std(axis=0), 1e-3)))

    def normalize(self, feats: torch.Tensor) -> torch.Tensor:
        return (feats - self.feat_mean) / self.feat_std

    def denormalize(self, feats: torch.Tensor) -> torch.Tensor:
        return feats * self.feat_std + self.feat_mean

    def encode(self, tokens, masked_feats, emotion, text_pad=None, frame_pad=None):
        h_x = self.text_encoder(tokens, text_pad)
        h_emo = self.emotion_table(emotion)
        h_c = self.ncg(masked_feats, frame_pad)
        return h_x, h_emo, h_c

    def forward(self, tokens, masked_feats, emotion, text_pad=None, frame_pad=None):
        """Batched forward on normalised features; returns (coarse, fine, h_c)."""
        h_x, h_emo, h_c = self.encode(tokens, masked_feats, emotion, text_pad, frame_pad)
        coarse, fine = self.decoder(h_x, h_emo, h_c, text_pad, frame_pad)
        return coarse, fine, h_c

    # ------------------------------------------------------------ checkpoints

    def save(self, path: str, metadata: dict | None = None) -> None:
        """Write ``path`` (safetensors, float32) and ``path + '.json'`` (config)."""
        tensors = {k: v.detach().to(torch.float32).contiguous().cpu() for k, v in self.state_dict().items()}
        meta = {"params_version": str(self.version)}
        meta.update({k: str(v) for k, v in (metadata or {}).items()})
        tmp = f"{path}.tmp"
        save_file(tensors, tmp, metadata=meta)
        with open(f"{path}.json.tmp", "w", encoding="utf-8") as f:
            json.dump({"params_version": self.version, "config": asdict(self.cfg)}, f, indent=2)
        os.replace(f"{path}.json.tmp", f"{path}.json")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "EmoCampNet":
        with open(f"{path}.json", encoding="utf-8") as f:
            sidecar = json.load(f)
        if sidecar.get("params_version") != PARAMS_VERSION:
            raise ValueError(f"unsupported params version {sidecar.get('params_version')}")
        model = cls(ModelConfig.from_dict(sidecar["config"]))
        tensors = load_file(path)
        expected = model.state_dict()
        if set(tensors) != set(expected):
            missing, extra = set(expected) - set(tensors), set(tensors) - set(expected)
            raise ValueError(f"checkpoint tensors do not match config (missing={sorted(missing)[:3]}, "
                             f"unexpected={sorted(extra)[:3]})")
        for k, v in tensors.items():
            if tuple(v.shape) != tuple(expected[k].shape):
                raise ValueError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(expected[k].shape)}")
            if not torch.isfinite(v).all():
                raise ValueError(f"non-finite values in {k}")
        model.load_state_dict(tensors)
        model.eval()
        return model


# ---------------------------------------------------------------- single-utterance API

def _as_tokens(tokens, p: EmoCampNet) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(tokens, dtype=np.int64))
    if t.ndim != 1 or len(t) == 0:
        raise ValueError("tokens must be a nonempty 1-D sequence")
    if t.min() < 0 or t.max() >= p.cfg.vocab_size:
        raise ValueError("token id out of range")
    return t[None]


def _dtype(p: EmoCampNet):
    return next(p.parameters()).dtype


@torch.no_grad()
def text_encode(tokens, p: EmoCampNet) -> np.ndarray:
    return p.text_encoder(_as_tokens(tokens, p))[0].numpy()


@torch.no_grad()
def emotion_embed(e, p: EmoCampNet) -> np.ndarray:
    e = EmotionLabel.parse(e)
    return p.emotion_table.weight[e.id].numpy().copy()


@torch.no_grad()
def ncg_forward(masked_feats, p: EmoCampNet) -> np.ndarray:
    """Content sequence for already-normalised, mask-zeroed features."""
    x = torch.as_tensor(np.asarray(masked_feats), dtype=_dtype(p))
    return p.ncg(x[None])[0].numpy()


@torch.no_grad()
def discriminate(h_c, p: EmoCampNet) -> np.ndarray:
    x = torch.as_tensor(np.asarray(h_c), dtype=_dtype(p))
    return torch.sigmoid(p.discriminator(x[None]))[0].numpy()


@torch.no_grad()
def decode(h_x, h_emo, h_c, mask: MaskSpec, p: EmoCampNet) -> np.ndarray:
    """Full-length (T, 32) prediction in normalised feature space."""
    dt = _dtype(p)
    h_c = torch.as_tensor(np.asarray(h_c), dtype=dt)
    mask.check(len(h_c))
    _, fine = p.decoder(torch.as_tensor(np.asarray(h_x), dtype=dt)[None],
                        torch.as_tensor(np.asarray(h_emo), dtype=dt)[None], h_c[None])
    return fine[0].numpy()


def snap_features(frames: np.ndarray) -> np.ndarray:
    """Force a raw prediction into a valid FeatureSequence (binary voicing)."""
    out = np.array(frames, dtype=np.float64)
    voiced = out[:, VOICING_COL] > 0.5
    out[:, VOICING_COL] = voiced.astype(np.float64)
    out[~voiced, LOGF0_COL] = 0.0
    return out


@torch.no_grad()
def predict_masked(record: UtteranceRecord, feats: np.ndarray, mask: MaskSpec, e,
                   p: EmoCampNet) -> np.ndarray:
    """Predict the masked region of raw features ``feats``; returns (mask.length, 32)."""
    feats = validate_features(feats)
    mask.check(len(feats))
    was_training = p.training
    p.eval()
    try:
        dt = _dtype(p)
        x = p.normalize(torch.as_tensor(feats, dtype=dt))
        x[mask.start:mask.end] = 0.0
        tokens = _as_tokens(record.tokens, p)
        emo = torch.tensor([EmotionLabel.parse(e).id])
        _, fine, _ = p(tokens, x[None], emo)
        region = p.denormalize(fine[0, mask.start:mask.end]).to(torch.float64).numpy()
    finally:
        p.train(was_training)
    return snap_features(region)
