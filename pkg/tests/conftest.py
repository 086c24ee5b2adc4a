import time

import numpy as np
import pytest
import torch

from emoedit.evalkit import mcd_dtw
from emoedit.masking import MaskSpec, mask_length
from emoedit.model import ModelConfig, predict_masked
from emoedit.signal import extract_features
from emoedit.synth import toy_utterances
from emoedit.training import Example, TrainConfig, Trainer, build_model, decoupling_experiment

OVERFIT_STEPS = 5000
OVERFIT_CONFIG = TrainConfig(batch_size=8, steps=OVERFIT_STEPS, lr=2e-3, lr_schedule="cosine",
                             warmup_steps=200, seed=0, log_every=0)


def pytest_configure(config):
    torch.set_num_threads(1)


def eval_masks(T: int, ratio: float = 0.12) -> list[MaskSpec]:
    """Three fixed masks per utterance: early, centred and late."""
    L = mask_length(T, ratio)
    return [MaskSpec(s, L) for s in (T // 4, T // 2 - L // 2, 3 * T // 4 - L)]


def masked_mcd(model, records, feats, emotion=None) -> list[float]:
    out = []
    for r, f in zip(records, feats):
        for m in eval_masks(len(f)):
            pred = predict_masked(r, f, m, r.emotion if emotion is None else emotion, model)
            out.append(mcd_dtw(pred, f[m.start:m.end]))
    return out


@pytest.fixture(scope="session")
def overfit():
    """Toy model overfit on 8 synthetic utterances; shared by several acceptance checks."""
    t0 = time.perf_counter()
    utts = toy_utterances(8)
    records = [r for r, _ in utts]
    feats = [extract_features(w) for _, w in utts]
    model = build_model(ModelConfig.toy(), seed=0)
    model.set_normalizer(feats)
    trainer = Trainer(model, OVERFIT_CONFIG, [Example.from_record(r, f) for r, f in zip(records, feats)])
    history = trainer.run()
    model.eval()
    return {"model": model, "records": records, "feats": feats, "history": history,
            "mcd": masked_mcd(model, records, feats), "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def decoupling():
    t0 = time.perf_counter()
    res = decoupling_experiment(frozen_steps=2000, adversarial_steps=2000, seed=0)
    res["seconds"] = time.perf_counter() - t0
    return res
