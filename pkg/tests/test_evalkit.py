import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emoedit.editor import EditResult, Region
from emoedit.evalkit import (
    EvalError, F0StatsTable, McdReport, SerConfig, SerModel, confusion_from_labels, confusion_json,
    confusion_matrix, dtw_path, f0_stats, mcd, mcd_dtw, ser_predict, train_ser_features,
)
from emoedit.signal import FEAT_DIM, LOGF0_COL, VOICING_COL

K = 10.0 / np.log(10.0)


def brute_force_dtw(A, B):
    """Exhaustive search over every monotone (1,0)/(0,1)/(1,1) path."""
    n, m = len(A), len(B)
    cost = [[math.sqrt(sum((a - b) ** 2 for a, b in zip(A[i], B[j]))) for j in range(m)] for i in range(n)]
    best = [math.inf, None]
    path = [(0, 0)]

    def walk(i, j, total):
        if (i, j) == (n - 1, m - 1):
            if total < best[0]:
                best[0], best[1] = total, list(path)
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                path.append((a, b))
                walk(a, b, total + cost[a][b])
                path.pop()

    walk(0, 0, cost[0][0])
    p = best[1]
    return math.fsum(K * math.sqrt(2.0) * cost[i][j] for i, j in p) / len(p), p


# ---------------------------------------------------------------- MCD

def test_mcd_hand_cases():
    a = np.zeros(28)
    assert mcd(a, a) == 0.0
    assert mcd(a, a + 0.1) == pytest.approx(K * math.sqrt(2 * 28 * 0.01), abs=1e-9)
    assert round(mcd(a, a + 0.1), 4) == 3.2500
    one = a.copy()
    one[5] = 1.0
    assert mcd(a, one) == pytest.approx(K * math.sqrt(2), abs=1e-9)
    # 6.141851 dB; the commonly quoted figure is the truncated 6.1418
    assert mcd(a, one) == pytest.approx(6.1418, abs=1e-4)


def test_mcd_rejects_bad_shapes():
    with pytest.raises(EvalError):
        mcd(np.zeros(28), np.zeros(27))
    with pytest.raises(EvalError):
        mcd(np.zeros(30), np.zeros(30))


vec = arrays(np.float64, 28, elements=st.floats(-50, 50))


@settings(max_examples=100, deadline=None)
@given(vec, vec, vec)
def test_mcd_is_a_metric(a, b, c):
    assert mcd(a, b) == mcd(b, a)
    assert mcd(a, a) == 0.0 and mcd(a, b) >= 0
    assert mcd(a, c) <= mcd(a, b) + mcd(b, c) + 1e-9


def test_mcd_dtw_uses_cepstra_1_to_28():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((20, FEAT_DIM))
    g = f.copy()
    g[:, [0, 29, LOGF0_COL, VOICING_COL]] += 5.0
    assert mcd_dtw(f, g) == 0.0
    g[:, 1] += 0.1
    assert mcd_dtw(f, g) == pytest.approx(K * math.sqrt(2 * 0.01))


def test_mcd_dtw_empty():
    with pytest.raises(EvalError):
        mcd_dtw(np.zeros((0, FEAT_DIM)), np.zeros((3, FEAT_DIM)))


def test_dtw_matches_brute_force_small():
    rng = np.random.default_rng(1)
    for _ in range(30):
        A = rng.standard_normal((int(rng.integers(1, 7)), 28))
        B = rng.standard_normal((int(rng.integers(1, 7)), 28))
        value, path = mcd_dtw(A, B, return_path=True)
        ref, ref_path = brute_force_dtw(A.tolist(), B.tolist())
        assert path == ref_path and value == ref


def test_dtw_tie_break_prefers_diagonal():
    assert dtw_path(np.zeros((3, 3))) == [(0, 0), (1, 1), (2, 2)]
    # backtracking from the end takes the diagonal first on ties
    assert dtw_path(np.zeros((3, 2))) == [(0, 0), (1, 0), (2, 1)]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000), st.data())
def test_dtw_frame_duplication_invariance(n, seed, data):
    A = np.random.default_rng(seed).standard_normal((n, 28))
    reps = data.draw(st.lists(st.integers(1, 3), min_size=n, max_size=n))
    B = np.repeat(A, reps, axis=0)
    assert mcd_dtw(A, B) == 0.0


def test_mcd_report():
    rep = McdReport()
    f = np.zeros((5, FEAT_DIM))
    rep.add("a", "happy", f, f)
    g = f.copy()
    g[:, 1:29] += 0.1
    rep.add("b", 3, g, f)
    s = rep.summary()
    assert s["n"] == 2 and s["per_emotion"]["happy"] == 0.0
    assert s["per_emotion"]["angry"] == pytest.approx(3.25, abs=1e-4)


# ---------------------------------------------------------------- F0

def _edit(f0_hz, voiced=True, n=20):
    feats = np.zeros((n + 10, FEAT_DIM))
    if voiced:
        feats[5:5 + n, LOGF0_COL] = np.log(f0_hz)
        feats[5:5 + n, VOICING_COL] = 1.0
    regions = [Region("original", 0, 5, 0), Region("generated", 5, 5 + n, emotion="sad"),
               Region("original", 5 + n, n + 10, 5)]
    return EditResult(feats, regions)


def test_f0_stats_constant_tone():
    table = f0_stats([(_edit(200.0), "female", "sad")])
    cell = table.cells[("female", "sad")]
    assert cell["mean"] == pytest.approx(200.0) and cell["std"] == pytest.approx(0.0, abs=1e-9)
    assert cell["n_frames"] == 20


def test_f0_stats_pools_and_unvoiced():
    table = f0_stats([(_edit(100.0), "male", 2), (_edit(300.0), "male", 2),
                      (_edit(150.0, voiced=False), "female", "angry")])
    assert table.cells[("male", "sad")]["mean"] == pytest.approx(200.0)
    assert table.cells[("male", "sad")]["std"] == pytest.approx(100.0)
    assert table.cells[("female", "angry")] is None
    rows = table.rows()
    assert {r["n_frames"] for r in rows} == {0, 40}
    json.dumps(table.to_json())


def test_f0_stats_requires_generated_region():
    res = EditResult(np.zeros((4, FEAT_DIM)), [Region("original", 0, 4, 0)])
    with pytest.raises(EvalError):
        f0_stats([(res, "male", 0)])
    assert f0_stats([]).cells == {}
    assert isinstance(f0_stats([]), F0StatsTable)


# ---------------------------------------------------------------- SER

def test_ser_model_outputs():
    model = SerModel(n_mels=40, hidden=16, fc=16).eval()
    p = model.predict_proba(np.random.default_rng(0).standard_normal((50, 40)))
    assert p.shape == (5,)
    assert abs(p.sum() - 1) <= 1e-5 and np.all(p >= 0)
    assert model.out.out_features == 5


def test_ser_config():
    assert SerConfig().hidden == 256 and SerConfig().fc == 256 and SerConfig().dropout == 0.5
    with pytest.raises(ValueError):
        SerConfig.from_dict({"hidden": 8, "layers": 2})


def _toy_mels(n_per=4, seed=0):
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for emo in range(5):
        for _ in range(n_per):
            x = rng.standard_normal((int(rng.integers(20, 40)), 40)) * 0.3
            x[:, emo * 8:(emo + 1) * 8] += 2.0
            feats.append(x)
            labels.append(emo)
    return feats, labels


def test_train_ser_features_learns_separable_set(tmp_path):
    feats, labels = _toy_mels()
    cfg = SerConfig(hidden=32, fc=32, dropout=0.0, epochs=60, batch_size=5)
    model = train_ser_features(feats, labels, cfg)
    assert model.history[-1]["train_acc"] >= 0.95
    assert np.array_equal(ser_predict(model, feats), labels)
    path = str(tmp_path / "ser.safetensors")
    model.save(path)
    back = SerModel.load(path)
    assert np.array_equal(ser_predict(back, feats), labels)


def test_train_ser_needs_two_classes():
    feats, _ = _toy_mels(1)
    with pytest.raises(EvalError):
        train_ser_features(feats, [1] * len(feats))


def test_confusion_from_labels():
    assert np.array_equal(confusion_from_labels(range(5), range(5)), np.eye(5))
    m = confusion_from_labels([0, 0, 1, 1, 1], [0, 1, 1, 1, 2])
    assert m[0].tolist() == [0.5, 0.5, 0, 0, 0]
    assert np.allclose(m[1], [0, 2 / 3, 1 / 3, 0, 0])
    assert np.all(m[2:] == 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60))
def test_confusion_rows_sum_to_one(pairs):
    true, pred = zip(*pairs)
    m = confusion_from_labels(true, pred)
    for i in range(5):
        s = m[i].sum()
        assert (abs(s - 1) <= 1e-6) if i in true else s == 0


def test_confusion_matrix_errors_and_json():
    model = SerModel(hidden=8, fc=8).eval()
    with pytest.raises(EvalError):
        confusion_matrix(model, [])
    m = confusion_matrix(model, [(_edit(200.0), "sad"), (_edit(120.0), "happy")])
    assert m.shape == (5, 5)
    out = confusion_json(m)
    assert out["labels"][0] == "neutral" and len(out["matrix"]) == 5
    torch.testing.assert_close(torch.tensor(m.sum(1)[[1, 2]]), torch.ones(2, dtype=torch.float64))
