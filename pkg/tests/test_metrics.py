import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nilmtx.data import ApplianceSpec
from nilmtx.errors import DimensionError, InstrumentationError
from nilmtx.metrics import (
    ConfusionCounts,
    EpochTimer,
    accuracy,
    confusion,
    evaluate,
    f1,
    f1_from_counts,
    mae,
    mre,
)

# ---------------------------------------------------------------- loop oracles


def loop_counts(pred, true):
    tp = fp = tn = fn = 0
    for p, t in zip(pred, true):
        if p == 1 and t == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif t == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def loop_accuracy(pred, true):
    tp, _, tn, _ = loop_counts(pred, true)
    return (tp + tn) / len(pred)


def loop_f1(pred, true):
    tp, fp, _, fn = loop_counts(pred, true)
    if tp == 0:
        return 1.0 if fp == 0 and fn == 0 else 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def loop_mae(pred, true):
    return math.fsum(abs(p - t) for p, t in zip(pred, true)) / len(pred)


def loop_mre(pred, true, floor):
    return math.fsum(abs(p - t) / max(t, p, floor) for p, t in zip(pred, true)) / len(pred)


def test_examples():
    pred, true = [1, -1, 1, 1], [1, 1, 1, -1]
    assert accuracy(pred, true) == 0.5
    assert f1(pred, true) == pytest.approx(2 / 3, abs=1e-15)
    assert accuracy(true, true) == 1.0
    assert accuracy([-t for t in true], true) == 0.0
    assert f1([-1] * 4, [-1] * 4) == 1.0
    assert f1_from_counts(ConfusionCounts(tp=0, fp=4, tn=0, fn=0)) == 0.0
    assert mae([10, 20], [12, 18]) == 2.0
    assert mae([3, 4], [3, 4]) == 0.0
    assert mre([10, 20], [12, 18], 1.0) == pytest.approx((2 / 12 + 2 / 20) / 2, abs=1e-15)
    assert mre([10, 20], [12, 18], 1.0) == pytest.approx(0.13333, abs=1e-5)
    assert mre([5, 6], [5, 6], 1.0) == 0.0
    assert mre(np.zeros(5), np.zeros(5), ApplianceSpec("fridge", 400, 50)) == 0.0


def test_length_mismatch():
    for fn in (accuracy, f1, mae):
        with pytest.raises(DimensionError):
            fn([1, 1], [1])
    with pytest.raises(DimensionError):
        mre([1.0], [1.0, 2.0], 1.0)


def test_oracles_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        sp = rng.choice([-1, 1], size=n, p=[0.6, 0.4])
        st_ = rng.choice([-1, 1], size=n, p=[0.6, 0.4])
        pw = rng.uniform(0, 500, size=n) * (rng.uniform(size=n) > 0.3)
        tw = rng.uniform(0, 500, size=n) * (rng.uniform(size=n) > 0.3)
        floor = float(rng.uniform(1, 60))
        assert accuracy(sp, st_) == loop_accuracy(sp.tolist(), st_.tolist())
        assert f1(sp, st_) == loop_f1(sp.tolist(), st_.tolist())
        assert mae(pw, tw) == loop_mae(pw.tolist(), tw.tolist())
        assert mre(pw, tw, floor) == loop_mre(pw.tolist(), tw.tolist(), floor)


def sequences_with(tp, fp, fn, tn=1):
    pred = [1] * tp + [1] * fp + [-1] * fn + [-1] * tn
    true = [1] * tp + [-1] * fp + [1] * fn + [-1] * tn
    return pred, true


@pytest.mark.parametrize("tp,fp,fn", list(itertools.product(range(3), repeat=3)))
def test_f1_edge_conventions(tp, fp, fn):
    pred, true = sequences_with(tp, fp, fn)
    c = confusion(pred, true)
    assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, 1)
    got = f1(pred, true)
    assert got == loop_f1(pred, true)
    if tp == 0:
        assert got == (1.0 if fp == fn == 0 else 0.0)
    else:
        assert got == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_permutation_invariance(data):
    n = data.draw(st.integers(1, 40))
    pred = np.array(data.draw(st.lists(st.sampled_from([-1, 1]), min_size=n, max_size=n)))
    true = np.array(data.draw(st.lists(st.sampled_from([-1, 1]), min_size=n, max_size=n)))
    perm = np.array(data.draw(st.permutations(range(n))))
    assert accuracy(pred[perm], true[perm]) == accuracy(pred, true)
    assert f1(pred[perm], true[perm]) == f1(pred, true)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(0, 1000, allow_nan=False), min_size=1, max_size=30),
    st.floats(0.125, 8.0),
    st.integers(0, 2**31),
)
def test_mae_scales(values, c, seed):
    a = np.array(values)
    b = np.random.default_rng(seed).uniform(0, 1000, size=a.size)
    assert mae(c * a, c * b) == pytest.approx(c * mae(a, b), rel=1e-12, abs=1e-12)


def test_ranges_and_zero_predictor():
    true = np.array([0.0, 0.0, 300.0, 100.0])
    report = evaluate(np.zeros(4), true, on_threshold=50.0)
    assert report.f1 == 0.0
    assert report.mae == pytest.approx(true.mean())
    assert 0 <= report.acc <= 1 and report.mre >= 0
    assert report.mean_seconds == 0.0


# ---------------------------------------------------------------- timing


class StubClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now

    def sleep(self, seconds):
        self.now += seconds


def test_timer_with_stub_workload():
    clock = StubClock()
    timer = EpochTimer(clock)
    for _ in range(2):
        timer.begin()
        clock.sleep(1.0)
        timer.end()
    assert len(timer.seconds) == 2
    assert all(0.9 <= s <= 1.5 for s in timer.seconds)


def test_timer_real_clock_is_positive():
    timer = EpochTimer()
    timer.begin()
    sum(range(1000))
    assert timer.end() > 0


def test_timer_zero_epochs_and_unpaired():
    timer = EpochTimer()
    assert timer.seconds == []
    with pytest.raises(InstrumentationError):
        timer.end()
    timer.begin()
    with pytest.raises(InstrumentationError):
        timer.begin()
