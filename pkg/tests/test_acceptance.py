"""Acceptance checks 1-12; each prints one PASS/FAIL line."""
import itertools
import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import torch

from emoedit.augment import ShiftSpec, pitch_shift
from emoedit.corpus import EMOTIONS
from emoedit.editor import apply_insert, apply_replace, build_duration_table, word_boundary_frame
from emoedit.evalkit import (
    SerConfig, confusion_from_labels, confusion_matrix, mcd, mcd_dtw, ser_predict, train_ser_features,
)
from emoedit.masking import sample_mask
from emoedit.model import ModelConfig, discriminate, ncg_forward
from emoedit.signal import FrameConfig, Waveform, estimate_f0_yin, log_mel_spectrogram
from emoedit.synth import SENTENCES, make_speakers, synthesize
from emoedit.training import (
    TrainConfig, adversarial_loss, build_model, generator_loss, grad_check, make_batch, objectives,
    reconstruction_loss,
)

from .test_evalkit import brute_force_dtw
from .test_training import examples

K = 10.0 / math.log(10.0)


def report(capsys, n: int, ok: bool, detail: str):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def test_criterion_01_mcd_oracle(capsys):
    a = np.zeros(28)
    one = a.copy()
    one[0] = 1.0
    got = [mcd(a, a), mcd(a, a + 0.1), mcd(a, one)]
    want = [0.0, K * math.sqrt(2 * 28 * 0.01), K * math.sqrt(2.0)]
    ok = all(abs(g - w) <= 1e-6 for g, w in zip(got, want))
    ok &= abs(got[1] - 3.2500) < 5e-5 and abs(got[2] - 6.1418) < 1e-4
    report(capsys, 1, ok, "MCD identity/0.1-offset/unit-offset = " + ", ".join(f"{g:.6f}" for g in got) + " dB")


def test_criterion_02_dtw_equivalence(capsys):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(200):
        A = rng.standard_normal((int(rng.integers(1, 11)), 28))
        B = rng.standard_normal((int(rng.integers(1, 11)), 28))
        value, path = mcd_dtw(A, B, return_path=True)
        ref, ref_path = brute_force_dtw(A.tolist(), B.tolist())
        mismatches += not (value == ref and path == ref_path)
    dt = time.perf_counter() - t0
    report(capsys, 2, mismatches == 0 and dt < 60,
           f"mcd_dtw vs exhaustive paths: {mismatches}/200 mismatches, {dt:.1f} s")


def test_criterion_03_yin_accuracy(capsys):
    errs = {}
    for f in (100, 150, 220, 330, 440):
        t = np.arange(16000) / 16000
        track = estimate_f0_yin(Waveform(0.5 * np.sin(2 * np.pi * f * t)))
        errs[f] = abs(float(np.median(track.f0_hz[track.voiced])) - f)
    report(capsys, 3, max(errs.values()) <= 2.0,
           "YIN median abs error (Hz): " + ", ".join(f"{f}:{e:.3f}" for f, e in errs.items()))


def test_criterion_04_pitch_shift_law(capsys):
    t = np.arange(int(0.8 * 16000)) / 16000
    base = Waveform(0.5 * np.sin(2 * np.pi * 220 * t))
    track = estimate_f0_yin(base)
    f_base = float(np.median(track.f0_hz[track.voiced]))
    worst_ratio, worst_len = 0.0, 0
    for s in (-4, -2, 2, 4):
        out = pitch_shift(base, ShiftSpec(s))
        tr = estimate_f0_yin(out)
        ratio = float(np.median(tr.f0_hz[tr.voiced])) / f_base
        worst_ratio = max(worst_ratio, abs(ratio / 2 ** (s / 12) - 1))
        worst_len = max(worst_len, abs(len(out) - len(base)))
    report(capsys, 4, worst_ratio <= 0.01 and worst_len <= FrameConfig().hop_samples(),
           f"max relative F0-ratio error {worst_ratio:.4%}, max length change {worst_len} samples")


def test_criterion_05_loss_identities(capsys):
    rng = np.random.default_rng(5)
    worst = 0.0
    for k in range(20):
        lam = float(rng.uniform(0, 2))
        cfg = TrainConfig(lambda_adv=lam)
        model = build_model(ModelConfig.tiny(), seed=k).double()
        exs = examples(4, seed=k)
        batch = make_batch(model, exs, [sample_mask(len(e.feats), 0.12, rng) for e in exs])
        l_g, l_rec, l_adv = generator_loss(model, batch, cfg)
        _, l_d = objectives(l_adv, l_rec, cfg)
        worst = max(worst, abs((l_g - lam * l_adv - l_rec).item()), abs((l_d + l_adv).item()))
    half = adversarial_loss(torch.full((9,), 0.5, dtype=torch.float64),
                            torch.full((9,), 0.5, dtype=torch.float64)).item()
    report(capsys, 5, worst <= 1e-6 and abs(half + 1.38629) <= 1e-5,
           f"max identity residual {worst:.2e}, L_adv(D=0.5) = {half:.6f}")


def test_criterion_06_mask_contract(capsys):
    rng = np.random.default_rng(6)
    lengths = {sample_mask(1000, 0.12, rng).length for _ in range(2000)}
    changed = 0
    for _ in range(200):
        T = int(rng.integers(2, 400))
        m = sample_mask(T, 0.12, rng)
        pred = torch.as_tensor(rng.standard_normal((T, 32)))
        target = torch.as_tensor(rng.standard_normal((T, 32)))
        noise = torch.as_tensor(rng.standard_normal((T, 32)) * 1e3)
        noise[m.start:m.end] = 0
        changed += reconstruction_loss(pred + noise, target, m).item() != reconstruction_loss(pred, target, m).item()
    report(capsys, 6, lengths == {120} and changed == 0,
           f"mask lengths at T=1000: {sorted(lengths)}; out-of-mask perturbations changing L_rec: {changed}/200")


def test_criterion_07_gradient_check(capsys):
    t0 = time.perf_counter()
    res = grad_check(build_model(ModelConfig.tiny(), 0), examples(3, T=(12, 20)), epsilon=1e-5, n_params=60)
    dt = time.perf_counter() - t0
    n = len(res["rows"])
    report(capsys, 7, res["max_rel_err"] <= 1e-3 and n >= 50 and dt < 300,
           f"max relative error {res['max_rel_err']:.2e} over {n} parameters (float64), {dt:.1f} s")


def test_criterion_08_adversarial_decoupling(capsys, decoupling):
    r = decoupling
    ok = r["frozen_acc"] >= 0.9 and r["frozen_steps"] <= 2000 and r["adversarial_acc"] <= 0.65
    ok &= r["seconds"] < 15 * 60
    report(capsys, 8, ok,
           f"frozen-NCG D accuracy {r['frozen_acc']:.3f} after {r['frozen_steps']} steps; "
           f"after adversarial training {r['adversarial_acc']:.3f} (fresh probe {r['fresh_probe_acc']:.3f}); "
           f"{r['seconds']:.0f} s")


def test_decoupled_content_has_matching_discriminator_outputs(decoupling):
    model = decoupling["model"].eval()
    gaps = []
    held = decoupling["held_out"]
    for neutral, other in zip(held[::2], held[1::2]):
        outs = []
        for e in (neutral, other):
            x = model.normalize(torch.as_tensor(e.feats, dtype=torch.float32)).numpy()
            outs.append(discriminate(ncg_forward(x, model), model).mean())
        gaps.append(abs(outs[0] - outs[1]))
    assert np.mean(gaps) < 0.15


def test_criterion_09_overfit(capsys, overfit):
    h = overfit["history"]
    mcd_mean, mcd_max = float(np.mean(overfit["mcd"])), float(np.max(overfit["mcd"]))
    l100, l_last = h[99]["L_rec"], h[-1]["L_rec"]
    ok = len(h) <= 5000 and mcd_mean < 8.0 and l_last < l100 and overfit["seconds"] < 30 * 60
    report(capsys, 9, ok,
           f"{len(h)} steps: masked-region MCD mean {mcd_mean:.2f} dB (max {mcd_max:.2f}) over "
           f"{len(overfit['mcd'])} masks; L_rec step 100 {l100:.4f} -> final {l_last:.4f}; "
           f"{overfit['seconds'] / 60:.1f} min")


def _emotion_inserts(overfit):
    model, records, feats = overfit["model"], overfit["records"], overfit["feats"]
    rec, f = records[0], feats[0]
    table = build_duration_table(records)
    pos = word_boundary_frame(rec, 2)
    return rec, f, [apply_insert(rec, f, pos, "light colorful", e, model, table) for e in EMOTIONS]


def test_criterion_10_emotion_selectability(capsys, overfit):
    rec, f, outs = _emotion_inserts(overfit)
    gens = [o.generated()[0] for o in outs]
    diffs = [float(np.mean(np.abs(a - b))) for a, b in itertools.combinations(gens, 2)]
    exact = True
    for o in outs:
        for r in o.region_map:
            if r.source == "original":
                n = r.end - r.start
                exact &= np.array_equal(o.features[r.start:r.end], f[r.src_start:r.src_start + n])
        exact &= sum(r.end - r.start for r in o.region_map if r.source == "original") == len(f)
    report(capsys, 10, min(diffs) > 0 and exact,
           f"5 generated regions of {len(gens[0])} frames; min pairwise mean |diff| {min(diffs):.4f}; "
           f"outside-region frames bit-identical: {exact}")


def _ser_clips():
    speakers = make_speakers(2)
    feats, labels = [], []
    for i in range(50):
        emo = i % 5
        w, _ = synthesize(SENTENCES[(i // 10) % len(SENTENCES)], speakers[(i // 5) % 2], emo, seed=i)
        feats.append(log_mel_spectrogram(w))
        labels.append(emo)
    return feats, labels


def test_criterion_11_ser_overfit(capsys, overfit):
    feats, labels = _ser_clips()
    t0 = time.perf_counter()
    model = train_ser_features(feats, labels, SerConfig())
    acc = float(np.mean(ser_predict(model, feats) == np.asarray(labels)))
    epochs = len(model.history)
    _, _, outs = _emotion_inserts(overfit)
    matrix = confusion_matrix(model, list(zip(outs, EMOTIONS)))
    train_matrix = confusion_from_labels(labels, ser_predict(model, feats))
    rows = np.concatenate([matrix.sum(1), train_matrix.sum(1)])
    ok = acc >= 0.95 and epochs <= 200 and np.all(np.abs(rows - 1) <= 1e-6)
    report(capsys, 11, ok,
           f"training accuracy {acc:.3f} after {epochs} epochs ({time.perf_counter() - t0:.0f} s); "
           f"max |row sum - 1| {np.max(np.abs(rows - 1)):.1e}")


def test_criterion_12_end_to_end(capsys, tmp_path):
    t0 = time.perf_counter()
    env = dict(os.environ, PYTHONPATH=os.pathsep.join(sys.path))
    codes = []

    def run(*args):
        proc = subprocess.run([sys.executable, "-m", "emoedit", *args], env=env, capture_output=True, text=True)
        codes.append((args[0], proc.returncode))
        assert proc.returncode == 0, proc.stderr
        return proc.stdout

    data, ckpt = tmp_path / "data", tmp_path / "ckpt"
    run("synth-corpus", "--out", str(tmp_path / "corpus"))
    run("prepare", "--emotional", str(tmp_path / "corpus" / "emotional"),
        "--neutral", str(tmp_path / "corpus" / "neutral"), "--out", str(data))
    run("train", "--data", str(data), "--out", str(ckpt), "--toy", "--steps", "300", "--batch-size", "8")
    with open(data / "train.jsonl") as f:
        rec = next(r for r in map(json.loads, f) if len(r.get("word_spans") or []) >= 3)
    script = tmp_path / "insert.json"
    script.write_text(json.dumps({"utt_id": rec["utt_id"],
                                  "ops": [{"type": "insert", "position_word": 2, "text": "really"}]}))
    edits = tmp_path / "edits"
    run("edit", "--data", str(data), "--script", str(script), "--checkpoint", str(ckpt / "model.safetensors"),
        "--out", str(edits), "--all-emotions")
    run("eval-mcd", "--edits", str(edits / "edits.jsonl"), "--out", str(tmp_path / "eval"))
    run("eval-f0", "--edits", str(edits / "edits.jsonl"), "--out", str(tmp_path / "eval"))
    dt = time.perf_counter() - t0
    n_edits = sum(1 for _ in open(edits / "edits.jsonl"))
    outputs = all((tmp_path / "eval" / n).is_file() for n in ("mcd.csv", "f0_stats.csv", "f0_curves.png"))
    report(capsys, 12, n_edits == 5 and outputs and dt < 45 * 60,
           "pipeline " + " -> ".join(f"{c}:{rc}" for c, rc in codes) + f"; {n_edits} edits; {dt / 60:.1f} min")


def test_neutral_same_text_replace_matches_original(overfit):
    # regenerating a word with its own text on neutral training utterances stays within the overfit bound
    model, records, feats = overfit["model"], overfit["records"], overfit["feats"]
    table = build_duration_table(records)
    values = []
    for rec, f in zip(records, feats):
        if rec.emotion.name != "neutral":
            continue
        for k, (word, s, e) in enumerate(rec.word_spans):
            out = apply_replace(rec, f, (s, e), word, "neutral", model, table)
            gen = [r for r in out.region_map if r.source == "generated"][0]
            values.append(mcd_dtw(out.features[gen.start:gen.end], f[s:e]))
    assert values and float(np.mean(values)) < 8.0
