"""Losses, alternating generator/discriminator optimisation and gradient checks.

Discriminator convention: D(h_c) is the probability that a content frame
came from neutral speech (target 1 for neutral, 0 otherwise). The
adversarial objective is

    L_adv = mean_{neutral frames} log D + mean_{non-neutral frames} log(1 - D)

D maximises it (loss -L_adv); the generator minimises
lambda_adv * L_adv + L_rec. Only observed frames (not masked, not padded)
enter L_adv.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .corpus import UtteranceRecord
from .masking import MaskSpec, sample_mask
from .model import EmoCampNet, FrameDiscriminator, ModelConfig
from .signal import FEAT_DIM, VOICING_COL

logger = logging.getLogger(__name__)

LOG_EPS = 1e-7
METRIC_FIELDS = ("step", "L_rec", "L_adv", "D_acc", "wall_ms")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_adv: float = 0.5
    mask_ratio: float = 0.12
    lr: float = 1e-3
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    d_steps_per_g_step: int = 1
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in (0, 1)")
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.batch_size < 1 or self.d_steps_per_g_step < 0:
            raise ValueError("batch_size >= 1 and d_steps_per_g_step >= 0 required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- losses

def adversarial_loss(d_out_neutral, d_out_nonneutral) -> torch.Tensor:
    """Frame-level L_adv from D probabilities (any shapes; all frames pooled per side)."""
    d_n = torch.as_tensor(d_out_neutral).reshape(-1)
    d_e = torch.as_tensor(d_out_nonneutral).reshape(-1)
    if d_n.numel() == 0 and d_e.numel() == 0:
        raise TrainingError("adversarial loss needs at least one frame")
    terms = []
    if d_n.numel():
        terms.append(torch.log(d_n.clamp(LOG_EPS, 1.0 - LOG_EPS)).mean())
    else:
        warnings.warn("no neutral frames in batch; using the non-neutral term only", stacklevel=2)
    if d_e.numel():
        terms.append(torch.log((1.0 - d_e).clamp(LOG_EPS, 1.0 - LOG_EPS)).mean())
    else:
        warnings.warn("no non-neutral frames in batch; using the neutral term only", stacklevel=2)
    return sum(terms)


def reconstruction_loss(pred, target, mask: MaskSpec) -> torch.Tensor:
    """MSE over the masked frames and all channels of one utterance."""
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError("pred and target must have the same shape")
    mask.check(pred.shape[0])
    return ((pred[mask.start:mask.end] - target[mask.start:mask.end]) ** 2).mean()


def masked_mse(pred: torch.Tensor, target: torch.Tensor, region: torch.Tensor) -> torch.Tensor:
    """Batched reconstruction loss; ``region`` (B, T) is True on masked frames."""
    sq = ((pred - target) ** 2).sum(dim=-1)
    return (sq * region).sum() / (region.sum() * pred.shape[-1])


def objectives(l_adv, l_rec, cfg: TrainConfig):
    """(generator_loss, discriminator_loss)."""
    return cfg.lambda_adv * l_adv + l_rec, -l_adv


# ---------------------------------------------------------------- batching

@dataclass
class Example:
    tokens: list
    feats: np.ndarray  # raw (T, 32)
    emotion: int

    @classmethod
    def from_record(cls, record: UtteranceRecord, feats: np.ndarray) -> "Example":
        return cls(list(record.tokens), np.asarray(feats, dtype=np.float64), record.emotion.id)


@dataclass
class Batch:
    tokens: torch.Tensor      # (B, M)
    text_pad: torch.Tensor    # (B, M) True = pad
    feats: torch.Tensor       # (B, T, 32) normalised targets
    frame_pad: torch.Tensor   # (B, T)
    emotion: torch.Tensor     # (B,)
    region: torch.Tensor      # (B, T) True = masked
    masks: list

    @property
    def masked_input(self) -> torch.Tensor:
        return self.feats.masked_fill(self.region[..., None], 0.0)

    @property
    def neutral(self) -> torch.Tensor:
        return self.emotion == 0

    @property
    def observed(self) -> torch.Tensor:
        return ~(self.region | self.frame_pad)


def make_batch(model: EmoCampNet, examples: list[Example], masks: list[MaskSpec]) -> Batch:
    dtype = next(model.parameters()).dtype
    B = len(examples)
    M = max(len(e.tokens) for e in examples)
    T = max(len(e.feats) for e in examples)
    tokens = torch.zeros(B, M, dtype=torch.long)
    text_pad = torch.ones(B, M, dtype=torch.bool)
    feats = torch.zeros(B, T, FEAT_DIM, dtype=dtype)
    frame_pad = torch.ones(B, T, dtype=torch.bool)
    region = torch.zeros(B, T, dtype=torch.bool)
    with torch.no_grad():
        for i, (ex, m) in enumerate(zip(examples, masks)):
            n, t = len(ex.tokens), len(ex.feats)
            m.check(t)
            tokens[i, :n] = torch.as_tensor(ex.tokens)
            text_pad[i, :n] = False
            feats[i, :t] = model.normalize(torch.as_tensor(ex.feats, dtype=dtype))
            frame_pad[i, :t] = False
            region[i, m.start:m.end] = True
    emotion = torch.tensor([e.emotion for e in examples], dtype=torch.long)
    return Batch(tokens, text_pad, feats, frame_pad, emotion, region, list(masks))


def _d_terms(model: EmoCampNet, h_c: torch.Tensor, batch: Batch):
    probs = torch.sigmoid(model.discriminator(h_c, batch.frame_pad))
    obs = batch.observed
    neutral_frames = obs & batch.neutral[:, None]
    other_frames = obs & ~batch.neutral[:, None]
    return probs, probs[neutral_frames], probs[other_frames]


def balanced_accuracy(p_neutral: torch.Tensor, p_other: torch.Tensor) -> float:
    """Mean of per-class frame accuracies (robust to neutral/non-neutral imbalance)."""
    accs = []
    if p_neutral.numel():
        accs.append((p_neutral > 0.5).double().mean().item())
    if p_other.numel():
        accs.append((p_other < 0.5).double().mean().item())
    return float(np.mean(accs)) if accs else float("nan")


def generator_loss(model: EmoCampNet, batch: Batch, cfg: TrainConfig):
    """(L_G, L_rec, L_adv) for a fixed batch, with gradients flowing everywhere."""
    _, pred, h_c = model(batch.tokens, batch.masked_input, batch.emotion, batch.text_pad, batch.frame_pad)
    l_rec = masked_mse(pred, batch.feats, batch.region)
    _, p_n, p_e = _d_terms(model, h_c, batch)
    l_adv = adversarial_loss(p_n, p_e)
    l_g, _ = objectives(l_adv, l_rec, cfg)
    return l_g, l_rec, l_adv


# ---------------------------------------------------------------- trainer

def build_model(cfg: ModelConfig, seed: int = 0) -> EmoCampNet:
    torch.manual_seed(seed)
    return EmoCampNet(cfg)


class Trainer:
    """Single-writer training loop over in-memory examples."""

    def __init__(self, model: EmoCampNet, cfg: TrainConfig, examples: list[Example],
                 metrics_path: str | None = None):
        if not examples:
            raise TrainingError("no training examples")
        self.model = model
        self.cfg = cfg
        self.examples = examples
        self.metrics_path = metrics_path
        self.rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(cfg.seed)
        self.opt_g = torch.optim.Adam(model.generator_parameters(), lr=cfg.lr)
        self.opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=cfg.lr)
        self.step = 0
        self._order: list[int] = []
        self.history: list[dict] = []

    def next_batch(self) -> Batch:
        n = min(self.cfg.batch_size, len(self.examples))
        while len(self._order) < n:
            self._order.extend(self.rng.permutation(len(self.examples)).tolist())
        idx, self._order = self._order[:n], self._order[n:]
        chosen = [self.examples[i] for i in idx]
        masks = [sample_mask(len(e.feats), self.cfg.mask_ratio, self.rng) for e in chosen]
        return make_batch(self.model, chosen, masks)

    def current_lr(self) -> float:
        """Learning rate for the next step; a pure function of the step so resume needs no state."""
        cfg, k = self.cfg, self.step
        if cfg.warmup_steps and k < cfg.warmup_steps:
            return cfg.lr * (k + 1) / cfg.warmup_steps
        if cfg.lr_schedule == "cosine":
            span = max(cfg.steps - cfg.warmup_steps, 1)
            frac = min(max(k - cfg.warmup_steps, 0) / span, 1.0)
            return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        return cfg.lr

    def train_step(self, batch: Batch) -> dict:
        t0 = time.perf_counter()
        model, cfg = self.model, self.cfg
        model.train()
        lr = self.current_lr()
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

        # discriminator: maximise L_adv with the generator frozen
        d_acc = float("nan")
        l_d = torch.tensor(float("nan"))
        for _ in range(cfg.d_steps_per_g_step):
            with torch.no_grad():
                h_c = model.ncg(batch.masked_input, batch.frame_pad)
            _, p_n, p_e = _d_terms(model, h_c, batch)
            l_d = -adversarial_loss(p_n, p_e)
            self._check_finite(l_d=l_d)
            self.opt_d.zero_grad(set_to_none=True)
            l_d.backward()
            self.opt_d.step()
            d_acc = balanced_accuracy(p_n.detach(), p_e.detach())

        # generator: minimise lambda * L_adv + L_rec with D frozen
        for p in model.discriminator_parameters():
            p.requires_grad_(False)
        try:
            _, pred, h_c = model(batch.tokens, batch.masked_input, batch.emotion,
                                 batch.text_pad, batch.frame_pad)
            l_rec = masked_mse(pred, batch.feats, batch.region)
            _, p_n, p_e = _d_terms(model, h_c, batch)
            l_adv = adversarial_loss(p_n, p_e)
            l_g, _ = objectives(l_adv, l_rec, cfg)
            self._check_finite(l_rec=l_rec, l_adv=l_adv)
            self.opt_g.zero_grad(set_to_none=True)
            l_g.backward()
            self.opt_g.step()
        finally:
            for p in model.discriminator_parameters():
                p.requires_grad_(True)

        self.step += 1
        metrics = {"step": self.step, "L_rec": l_rec.item(), "L_adv": l_adv.item(),
                   "D_acc": d_acc, "wall_ms": (time.perf_counter() - t0) * 1000.0}
        self.history.append(metrics)
        if self.metrics_path:
            self._append_metrics(metrics)
        return metrics

    def _check_finite(self, **losses):
        for name, v in losses.items():
            if not torch.isfinite(v):
                detail = ", ".join(f"{k}={x.item():.4g}" for k, x in losses.items())
                raise TrainingError(f"non-finite {name} at step {self.step + 1} ({detail})")

    def _append_metrics(self, metrics: dict):
        new = not os.path.exists(self.metrics_path)
        with open(self.metrics_path, "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
            if new:
                w.writeheader()
            w.writerow(metrics)

    def run(self, steps: int | None = None, checkpoint_dir: str | None = None) -> list[dict]:
        total = self.cfg.steps if steps is None else steps
        while self.step < total:
            m = self.train_step(self.next_batch())
            if self.cfg.log_every and m["step"] % self.cfg.log_every == 0:
                logger.info("step %d L_rec=%.4f L_adv=%.4f D_acc=%.3f", m["step"], m["L_rec"],
                            m["L_adv"], m["D_acc"])
            if checkpoint_dir and self.cfg.checkpoint_every and m["step"] % self.cfg.checkpoint_every == 0:
                self.save_state(checkpoint_dir)
        if checkpoint_dir:
            self.save_state(checkpoint_dir)
        return self.history

    # ------------------------------------------------------------ resume

    def save_state(self, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, "model.safetensors")
        self.model.save(path, {"step": self.step})
        state = {
            "step": self.step,
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng": json.dumps(self.rng.bit_generator.state),
            "order": list(self._order),
            "torch_rng": torch.get_rng_state(),
            "train_config": asdict(self.cfg),
        }
        torch.save(state, os.path.join(directory, "trainer_state.pt.tmp"))
        os.replace(os.path.join(directory, "trainer_state.pt.tmp"), os.path.join(directory, "trainer_state.pt"))
        return path

    def load_state(self, directory: str) -> None:
        loaded = EmoCampNet.load(os.path.join(directory, "model.safetensors"))
        self.model.load_state_dict(loaded.state_dict())
        state = torch.load(os.path.join(directory, "trainer_state.pt"), weights_only=False)
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.step = int(state["step"])
        self.rng.bit_generator.state = json.loads(state["rng"])
        self._order = list(state["order"])
        torch.set_rng_state(state["torch_rng"])


# ---------------------------------------------------------------- gradient check

def grad_check(model: EmoCampNet, batch_examples: list[Example], epsilon: float = 1e-5,
               n_params: int = 50, lambda_adv: float = 0.5, seed: int = 0,
               masks: list[MaskSpec] | None = None) -> dict:
    """Analytic vs central-difference gradients of the generator loss (float64).

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    Returns the maximum plus the sampled coordinates.
    """
    model = model.double().eval()
    rng = np.random.default_rng(seed)
    if masks is None:
        masks = [sample_mask(len(e.feats), 0.12, rng) for e in batch_examples]
    batch = make_batch(model, batch_examples, masks)
    cfg = TrainConfig(lambda_adv=lambda_adv)

    def loss() -> torch.Tensor:
        return generator_loss(model, batch, cfg)[0]

    model.zero_grad(set_to_none=True)
    loss().backward()
    named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    sizes = np.array([p.numel() for _, p in named])
    flat = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    rows = []
    with torch.no_grad():
        for f in np.sort(flat):
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            name, p = named[k]
            i = int(f - offsets[k])
            analytic = p.grad.reshape(-1)[i].item()
            view = p.data.reshape(-1)
            orig = view[i].item()
            view[i] = orig + epsilon
            up = loss().item()
            view[i] = orig - epsilon
            down = loss().item()
            view[i] = orig
            numeric = (up - down) / (2 * epsilon)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            rows.append({"param": name, "index": i, "analytic": analytic, "numeric": numeric,
                         "abs_err": abs(analytic - numeric), "rel_err": rel})
    return {"max_rel_err": max(r["rel_err"] for r in rows),
            "max_abs_err": max(r["abs_err"] for r in rows), "rows": rows}


# ---------------------------------------------------------------- toy decoupling experiment

def offset_toy_dataset(n: int = 32, T: int = 60, offset: float = 1.5, n_offset_channels: int = 10,
                       seed: int = 0) -> list[Example]:
    """Smooth random "content" sequences; non-neutral examples add a fixed channel offset.

    Every content sequence appears twice (neutral and emotional) so the two
    classes differ only by the offset.
    """
    rng = np.random.default_rng(seed)
    delta = np.zeros(FEAT_DIM)
    delta[1:1 + n_offset_channels] = offset
    kernel = np.hanning(9) / np.hanning(9).sum()
    out = []
    for i in range(n // 2):
        raw = rng.standard_normal((T + 8, FEAT_DIM))
        content = np.stack([np.convolve(raw[:, c], kernel, mode="valid") for c in range(FEAT_DIM)], 1)[:T]
        content = content / content.std(axis=0, keepdims=True)
        content[:, VOICING_COL] = (content[:, VOICING_COL] > 0).astype(np.float64)
        content[:, VOICING_COL - 1] *= content[:, VOICING_COL]
        tokens = rng.integers(2, 30, size=T // 6).tolist()
        emo = int(rng.integers(1, 5))
        out.append(Example(tokens, content, 0))
        shifted = content.copy()
        shifted += delta
        out.append(Example(tokens, shifted, emo))
    return out


def _probe_accuracy(model: EmoCampNet, examples: list[Example], rng: np.random.Generator) -> float:
    masks = [sample_mask(len(e.feats), 0.12, rng) for e in examples]
    batch = make_batch(model, examples, masks)
    model.eval()
    with torch.no_grad():
        h_c = model.ncg(batch.masked_input, batch.frame_pad)
        _, p_n, p_e = _d_terms(model, h_c, batch)
    return balanced_accuracy(p_n, p_e)


def train_discriminator_only(model: EmoCampNet, examples: list[Example], steps: int,
                             lr: float = 1e-3, batch_size: int = 16, seed: int = 0) -> list[float]:
    """Fit D on a frozen NCG; returns per-step balanced accuracy."""
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.discriminator_parameters(), lr=lr)
    accs = []
    for _ in range(steps):
        idx = rng.choice(len(examples), size=min(batch_size, len(examples)), replace=False)
        chosen = [examples[i] for i in idx]
        batch = make_batch(model, chosen, [sample_mask(len(e.feats), 0.12, rng) for e in chosen])
        with torch.no_grad():
            h_c = model.ncg(batch.masked_input, batch.frame_pad)
        _, p_n, p_e = _d_terms(model, h_c, batch)
        loss = -adversarial_loss(p_n, p_e)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        accs.append(balanced_accuracy(p_n.detach(), p_e.detach()))
    return accs


def decoupling_experiment(model_cfg: ModelConfig | None = None, frozen_steps: int = 2000,
                          adversarial_steps: int = 2000, lambda_adv: float = 0.5,
                          d_steps_per_g_step: int = 5, seed: int = 0, target_frozen: float = 0.9,
                          fresh_probe_steps: int = 300) -> dict:
    """Frozen-NCG discriminator accuracy vs accuracy after adversarial training.

    Phase 1 trains only D on a randomly initialised, frozen NCG (stopping early
    once the held-out accuracy reaches ``target_frozen``). Phase 2 continues with
    the alternating G/D loop. Accuracies are balanced frame accuracies of the
    co-trained discriminator on held-out examples. With ``fresh_probe_steps``
    a newly initialised discriminator is also fitted to the final, frozen NCG,
    which tells genuine invariance apart from evasion of one particular D.
    """
    model_cfg = model_cfg or ModelConfig.toy(hidden=32, ffn_dim=64, decoder_blocks=2, text_blocks=1)
    train = offset_toy_dataset(32, seed=seed)
    held = offset_toy_dataset(16, seed=seed + 1000)
    model = build_model(model_cfg, seed)
    model.set_normalizer([e.feats for e in train])
    eval_rng = np.random.default_rng(seed + 1)

    frozen_acc, used = 0.0, 0
    while used < frozen_steps:
        chunk = min(100, frozen_steps - used)
        train_discriminator_only(model, train, chunk, seed=seed + used)
        used += chunk
        frozen_acc = _probe_accuracy(model, held, eval_rng)
        if frozen_acc >= target_frozen:
            break

    trainer = Trainer(model, TrainConfig(lambda_adv=lambda_adv, batch_size=16, seed=seed,
                                         d_steps_per_g_step=d_steps_per_g_step), train)
    trainer.run(adversarial_steps)
    adv_acc = float(np.mean([_probe_accuracy(model, held, eval_rng) for _ in range(4)]))
    probe_acc = float("nan")
    if fresh_probe_steps:
        probe = copy.deepcopy(model)
        torch.manual_seed(seed + 7)
        probe.discriminator = FrameDiscriminator(probe.cfg).to(next(model.parameters()).dtype)
        train_discriminator_only(probe, train, fresh_probe_steps, seed=seed + 3)
        probe_acc = _probe_accuracy(probe, held, np.random.default_rng(seed + 2))
    return {"frozen_acc": frozen_acc, "frozen_steps": used, "adversarial_acc": adv_acc,
            "fresh_probe_acc": probe_acc, "model": model, "history": trainer.history,
            "held_out": held}
