import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microt import nn, split
from microt.formats import param_blob
from oracles import brute_force_split


def random_profile(rng, n=None):
    n = n or int(rng.integers(2, 12))
    macs = np.cumsum(rng.integers(0, 5000, size=n)) + int(rng.integers(1, 1000))
    mac_full = int(macs[-1] + rng.integers(0, 5000))
    accs = np.clip(np.sort(rng.uniform(0.1, 0.9, size=n)) + rng.normal(0, 0.05, size=n), 0.01, 1.0)
    acc_full = float(rng.uniform(0.5, 1.0))
    return list(range(1, n + 1)), accs.tolist(), macs.tolist(), acc_full, mac_full


def test_normalize_examples():
    assert split.min_max_normalize([2, 4, 6]) == [0, 0.5, 1]
    assert split.min_max_normalize([3, 3]) == [0.5, 0.5]
    assert split.min_max_normalize([0, 0.25, 1]) == [0, 0.25, 1]
    assert split.min_max_normalize([1, math.inf, 3]) == [0, 1, 1]
    with pytest.raises(ValueError):
        split.min_max_normalize([])


def test_fused_score_examples():
    assert split.fused_score(1, 1, 1) == 1
    # 3xyz / (x + y + z) at one half: 3 * 0.125 / 1.5
    assert split.fused_score(0.5, 0.5, 0.5) == pytest.approx(0.25)
    assert split.fused_score(0, 0.3, 0.9) == 0
    assert split.fused_score(0, 0, 0) == 0
    with pytest.raises(ValueError):
        split.fused_score(-0.1, 1, 1)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_fused_score_symmetric_and_bounded(x, y, z):
    f = split.fused_score(x, y, z)
    for perm in [(y, x, z), (z, y, x), (x, z, y)]:
        assert split.fused_score(*perm) == pytest.approx(f, abs=1e-15)
    assert 0 <= f <= max(x, y, z) + 1e-15


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        idx, accs, macs, af, mf = random_profile(rng)
        report = split.score_candidates(idx, accs, macs, af, mf)
        assert report.optimal_index == idx[brute_force_split(accs, macs, af, mf)]


def test_dominant_candidate_wins():
    # candidate 3: lowest loss, biggest step gain, and cheapest relative to its predecessor's trend
    report = split.score_candidates([1, 2, 3, 4], [0.3, 0.31, 0.8, 0.81], [100, 300, 320, 900], 0.9, 1000)
    assert report.optimal_index == 3


def test_first_candidate_has_zero_gain_and_stays_eligible():
    report = split.score_candidates([5, 6], [0.5, 0.6], [10, 20], 0.7, 40)
    first = report.candidates[0]
    assert first.gain is None and first.gain_norm == 0.0 and first.fused_score == 0.0
    # every score zero: the first candidate is returned
    flat = split.score_candidates([5, 6], [0.5, 0.7], [10, 20], 0.7, 40)
    assert [c.fused_score for c in flat.candidates] == [0.0, 0.0] and flat.optimal_index == 5


def test_zero_mac_step_is_maximal_gain():
    report = split.score_candidates([1, 2, 3], [0.2, 0.5, 0.6], [10, 10, 40], 0.8, 100)
    assert report.candidates[1].gain == math.inf and report.candidates[1].gain_norm == 1.0


def test_score_candidates_validation():
    with pytest.raises(ValueError):
        split.score_candidates([1], [0.5], [10], 0.6, 20)
    with pytest.raises(ValueError):
        split.score_candidates([1, 2], [0.5, 0.6], [30, 10], 0.6, 40)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(0.1, 1.0))
def test_argmax_scale_invariant(seed, mac_scale, acc_scale):
    idx, accs, macs, af, mf = random_profile(np.random.default_rng(seed))
    base = split.score_candidates(idx, accs, macs, af, mf).optimal_index
    scaled_m = split.score_candidates(idx, accs, [m * mac_scale for m in macs], af, mf * mac_scale)
    scaled_a = split.score_candidates(idx, [a * acc_scale for a in accs], macs, af * acc_scale, mf)
    assert scaled_m.optimal_index == base
    assert scaled_a.optimal_index == base


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_report_invariants(seed):
    idx, accs, macs, af, mf = random_profile(np.random.default_rng(seed))
    report = split.score_candidates(idx, accs, macs, af, mf)
    scores = [c.fused_score for c in report.candidates]
    best = report.best
    assert report.candidate_range[0] <= report.optimal_index <= report.candidate_range[1]
    assert best.fused_score == max(scores)
    if max(scores) > 0:
        assert report.optimal_index == idx[scores.index(max(scores))]
    for c in report.candidates:
        assert 0 <= c.gain_norm <= 1 and 0 <= c.acc_loss_ratio_norm <= 1 and 0 <= c.mac_reduction_ratio_norm <= 1
        assert 0 <= c.mac_reduction_ratio <= 1


def test_csv_has_footer_and_all_columns():
    report = split.score_candidates([1, 2, 3], [0.2, 0.5, 0.6], [10, 20, 40], 0.8, 100)
    text = report.to_csv()
    lines = text.strip().splitlines()
    assert lines[-1] == f"# optimal_index={report.optimal_index}"
    header = next(line for line in lines if not line.startswith("#"))
    for col in ("accuracy", "macs", "delta_acc", "delta_mac", "gain", "gain_norm", "acc_loss_ratio_norm",
                "mac_reduction_ratio_norm", "fused_score"):
        assert col in header.split(",")


def net_fixture():
    return nn.seeded_init((1, 8, 8), "conv:4:3 relu conv:6:3 relu conv:8:3 relu gap", 0)


def test_split_model_reassembles_exactly():
    net = net_fixture()
    x = np.random.default_rng(0).normal(size=(100, 1, 8, 8))
    full = nn.forward(net, x)[0]
    for k in range(len(net) + 1):
        part, rem = split.split_model(net, k)
        joined = nn.forward(rem, nn.forward(part, x)[0])[0]
        assert np.array_equal(joined, full)
        assert nn.mac_count(part) + nn.mac_count(rem) == nn.mac_count(net)
        assert param_blob(split.join_models(part, rem)) == param_blob(net)
    assert len(split.split_model(net, len(net))[1]) == 0
    with pytest.raises(IndexError):
        split.split_model(net, len(net) + 1)


def test_default_range():
    assert split.default_range(20) == (5, 17)
    lo, hi = split.default_range(3)
    assert 1 <= lo <= hi <= 3


def test_evaluate_candidates_on_separable_data():
    from microt.data import two_blobs

    net = net_fixture().without_head()
    x, y = two_blobs(160, 0, size=8)
    probe = split.ProbeData(x[:120], y[:120], x[120:], y[120:])
    idx, accs, macs, acc_full, mac_full = split.evaluate_candidates(net, probe, (2, 6), probe_epochs=20)
    assert idx == [2, 3, 4, 5, 6]
    assert all(b >= a for a, b in zip(macs, macs[1:]))
    assert mac_full == nn.mac_count(net)
    assert acc_full > 0.8
    only = split.evaluate_candidates(net, probe, (2, 6), candidates=[4], probe_epochs=5)
    assert only[0] == [4]
    with pytest.raises(ValueError):
        split.evaluate_candidates(net, probe, (0, 3))
