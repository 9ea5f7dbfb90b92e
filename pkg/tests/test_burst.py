import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rachpred.burst import (
    BurstNetParams, BurstTrainConfig, aggregate_step_labels, burst_forward, burst_loss_and_grads,
    compute_metrics, decide, expand_decisions_for_plot, f1_score, train_burst,
)


def _confusion(tp, fp, fn, tn):
    d = np.r_[np.ones(tp + fp), np.zeros(fn + tn)].astype(int)
    l = np.r_[np.ones(tp), np.zeros(fp), np.ones(fn), np.zeros(tn)].astype(int)
    return d, l


# --------------------------------------------------------------- forward

def test_zero_weights_give_half():
    p = BurstNetParams.init(6, hidden_size=3)
    assert burst_forward(np.arange(6.0), p) == 0.5


def test_saturated_bias_gives_one():
    p = BurstNetParams.init(6, hidden_size=3)
    p.b2[:] = 50.0
    assert burst_forward(np.ones(6), p) == pytest.approx(1.0, abs=1e-15)


def test_two_unit_scalar_case_by_hand():
    p = BurstNetParams.init(1, hidden_size=2)
    p.W1[:, 0] = [1.5, -2.0]
    p.b1[:] = [0.1, 0.3]
    p.W2[0] = [0.7, 1.1]
    p.b2[:] = [-0.4]
    p.input_mean[:] = [1.0]
    p.input_scale[:] = [2.0]
    x = 3.0
    z = (x - 1.0) / 2.0
    h = [max(0.0, 1.5 * z + 0.1), max(0.0, -2.0 * z + 0.3)]
    expect = 1 / (1 + math.exp(-(0.7 * h[0] + 1.1 * h[1] - 0.4)))
    assert burst_forward(np.array([x]), p) == pytest.approx(expect, rel=1e-14)


def test_default_hidden_size_and_validation():
    p = BurstNetParams.init(600)
    assert p.hidden_size == 600 and p.chunk_size == 600
    with pytest.raises(ValueError):
        BurstNetParams.init(4, threshold=1.0)
    with pytest.raises(ValueError):
        burst_forward(np.zeros(5), BurstNetParams.init(4))


def test_save_load_roundtrip(tmp_path):
    p = BurstNetParams.init(8, 5, 0.4, 0.3, np.random.default_rng(0))
    p.save(tmp_path / "b.json")
    q = BurstNetParams.load(tmp_path / "b.json")
    x = np.random.default_rng(1).normal(size=(4, 8))
    assert np.array_equal(burst_forward(x, p), burst_forward(x, q))
    assert q.threshold == 0.3 and q.dropout == 0.4


@pytest.mark.parametrize("loss", ["mse", "xent"])
def test_gradients_match_finite_differences(loss):
    rng = np.random.default_rng(3)
    p = BurstNetParams.init(5, 4, rng=rng)
    X, y = rng.normal(size=(7, 5)), rng.integers(0, 2, 7).astype(float)
    _, g = burst_loss_and_grads(X, y, p, loss)
    for name, arr in p.arrays().items():
        flat = arr.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + 1e-6
            up, _ = burst_loss_and_grads(X, y, p, loss)
            flat[i] = keep - 1e-6
            down, _ = burst_loss_and_grads(X, y, p, loss)
            flat[i] = keep
            fd[i] = (up - down) / 2e-6
        assert np.allclose(g[name].reshape(-1), fd, rtol=1e-5, atol=1e-9), name


def test_training_separates_easy_classes():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 10))
    y = (X[:, :3].sum(axis=1) > 0.5).astype(int)
    p, hist = train_burst(X, y, BurstTrainConfig(epochs=15, learning_rate=3e-3, dropout=0.2, seed=1))
    assert hist[-1]["f1"] > 0.9
    assert hist[-1]["loss"] < hist[0]["loss"]
    q, _ = train_burst(X, y, BurstTrainConfig(epochs=15, learning_rate=3e-3, dropout=0.2, seed=1))
    assert np.array_equal(p.W1, q.W1)


# --------------------------------------------------------------- metrics

def test_all_correct():
    m = compute_metrics([1, 0, 1, 0], [1, 0, 1, 0])
    assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)


def test_reported_precision_recall_pair():
    # 1691/1780 = 0.95 and 1691/1900 = 0.89
    d, l = _confusion(1691, 89, 209, 5000)
    m = compute_metrics(d, l)
    assert m.precision == pytest.approx(0.95, abs=1e-12)
    assert m.recall == pytest.approx(0.89, abs=1e-12)
    assert round(m.f1, 4) == 0.9190
    assert round(m.f1, 2) == 0.92


def test_small_table():
    m = compute_metrics(*_confusion(1, 1, 0, 0))
    assert (m.precision, m.recall) == (0.5, 1.0)
    assert m.f1 == pytest.approx(2 / 3)


def test_degenerate_cases_and_errors():
    m = compute_metrics([0, 0, 0], [0, 0, 0])
    assert m.precision == m.recall == m.f1 == 0.0
    assert set(m.degenerate) == {"precision", "recall", "f1"}
    with pytest.raises(ValueError):
        compute_metrics([0, 1], [0, 1, 1])


def test_constant_negative_classifier_on_imbalanced_data():
    labels = np.r_[np.zeros(990), np.ones(10)]
    m = compute_metrics(np.zeros(1000), labels)
    assert m.recall == 0.0 and m.f1 == 0.0
    assert (m.true_negatives + m.true_positives) / 1000 == 0.99


@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
@settings(max_examples=1000, deadline=None)
def test_f1_is_harmonic_mean(tp, fp, fn, tn):
    m = compute_metrics(*_confusion(tp, fp, fn, tn))
    assert (m.true_positives, m.false_positives, m.false_negatives, m.true_negatives) == (tp, fp, fn, tn)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    assert m.precision == pytest.approx(p) and m.recall == pytest.approx(r)
    expect = 2 * p * r / (p + r) if p + r else 0.0
    assert m.f1 == pytest.approx(expect, abs=1e-15)
    assert 0 <= m.f1 <= 1


@given(st.lists(st.floats(0, 1), min_size=5, max_size=60), st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_raising_threshold_never_increases_recall(probs, t1, t2):
    lo, hi = sorted((t1, t2))
    labels = (np.arange(len(probs)) % 3 == 0).astype(int)
    p = BurstNetParams.init(1)
    p.threshold = lo
    r_lo = compute_metrics(decide(probs, p), labels).recall
    p.threshold = hi
    r_hi = compute_metrics(decide(probs, p), labels).recall
    assert r_hi <= r_lo


def test_f1_score_helper():
    assert f1_score(0, 0) == 0.0
    assert f1_score(0.95, 0.89) == pytest.approx(1.691 / 1.84, rel=1e-14)


# ------------------------------------------------------- labels and plots

def test_step_label_aggregation():
    slot = np.zeros(40, dtype=int)
    slot[12] = 1
    slot[20:27] = 1
    lasts = [9, 19, 29]
    assert aggregate_step_labels(slot, lasts, 10).tolist() == [0, 1, 1]
    assert aggregate_step_labels(slot, lasts, 10, "majority").tolist() == [0, 0, 1]
    with pytest.raises(ValueError):
        aggregate_step_labels(slot, lasts, 10, "mean")


def test_expand_for_plot():
    out = expand_decisions_for_plot([1, 0, 1], 100)
    assert out.shape == (300,)
    assert out[0] == 20 and out[150] == 0 and out[299] == 20
    assert not expand_decisions_for_plot([0, 0], 7).any()
