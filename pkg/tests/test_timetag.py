import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eqkd import timetag as tt
from eqkd.config import Config, replace
from eqkd.experiments import synthetic_tags
from eqkd.sim_link import LinkSimulator
from oracles import brute_histogram, brute_match

sorted_tags = st.lists(st.integers(0, 10**6), min_size=0, max_size=200).map(lambda x: np.sort(np.array(x, np.int64)))


def _gauss_peak(n, offset, sigma, seed, background=0, span=10**8):
    rng = np.random.default_rng(seed)
    ta = np.sort(rng.integers(0, span, n))
    tb = ta + offset + np.rint(rng.normal(0, sigma, n)).astype(np.int64)
    if background:
        tb = np.concatenate([tb, rng.integers(0, span, background)])
    return ta, np.sort(tb)


# ---------------------------------------------------------------- coarse stage


def test_coarse_offset_trivial():
    assert tt.coarse_offset(np.array([1_000_000]), np.array([1_004_000])) == 4000
    t = np.array([5, 9, 12])
    assert tt.coarse_offset(t, t) == 0
    with pytest.raises(tt.EmptyBlock):
        tt.coarse_offset(np.array([], np.int64), t)


def _first_chunk(seed, offset_ps=1e6):
    sim = LinkSimulator(replace(Config(), **{"clock.offset_ps": offset_ps}), seed, 0.1, chunk_s=0.001)
    sim._step()
    ta = np.concatenate([p[0] for p in sim._buf["a"].parts])
    tb = np.concatenate([p[0] for p in sim._buf["b"].parts])
    return ta, tb, float(sim.truth_offset_ps([ta[0]])[0])


@pytest.mark.xfail(strict=True, reason="first tags are rarely one pair at these losses; see ledger")
def test_coarse_offset_within_10ns_for_most_seeds():
    hits = 0
    for seed in range(100):
        ta, tb, truth = _first_chunk(seed)
        hits += abs(tt.coarse_offset(ta, tb) - truth) <= 10_000
    assert hits >= 95


def test_acquisition_recovers_offset_from_coarse():
    ta, tb, truth = _first_chunk(0)
    centre, sig = tt.acquire_offset(ta, tb, tt.coarse_offset(ta, tb))
    assert abs(centre - truth) < 1000 and sig >= 5
    est = tt.refine_offset(ta, tb, centre)
    assert abs(est.offset_ps - truth) < 32


# ---------------------------------------------------------------- histogram


def test_histogram_single_pair():
    h = tt.correlation_histogram(np.array([100]), np.array([100]), 0, 40, 16)
    assert h.n_bins == 5 and h.counts[h.n_bins // 2] == 1 and h.total == 1
    assert h.bin_centers[h.n_bins // 2] == 0.0
    with pytest.raises(ValueError):
        tt.correlation_histogram(np.array([1]), np.array([1]), 0, 40, 0)


@given(sorted_tags, sorted_tags, st.integers(-2000, 2000), st.integers(0, 5000), st.integers(1, 700))
def test_histogram_matches_brute_force(ta, tb, center, half, bw):
    h = tt.correlation_histogram(ta, tb, center, half, bw)
    np.testing.assert_array_equal(h.counts, brute_histogram(ta, tb, h.lo_ps, bw, h.n_bins))
    assert h.lo_ps <= center - half and h.lo_ps + h.n_bins * bw >= center + half


def test_histogram_flat_for_uncorrelated_streams():
    rng = np.random.default_rng(3)
    span = 10**10
    ta = np.sort(rng.integers(0, span, 20_000))
    tb = np.sort(rng.integers(0, span, 20_000))
    h = tt.correlation_histogram(ta, tb, 0, 500_000, 1000)
    expected = h.counts.mean()
    chi2 = float(((h.counts - expected) ** 2 / expected).sum())
    dof = h.n_bins - 1
    # Normal approximation; 5 sigma keeps the false-failure rate negligible.
    assert abs(chi2 - dof) < 5 * math.sqrt(2 * dof)


def test_simulated_stream_has_single_peak_at_offset():
    ta, tb, truth = _first_chunk(4)
    h = tt.correlation_histogram(ta, tb, int(truth), 500_000, 1000)
    k = int(np.argmax(h.counts))
    assert abs(h.bin_centers[k] - truth) <= 1000
    bg = np.median(h.counts)
    above = np.flatnonzero(h.counts > bg + 5 * np.sqrt(bg))
    assert set(above.tolist()) <= {k - 1, k, k + 1}


def test_histogram_csv():
    h = tt.correlation_histogram(np.array([0]), np.array([16]), 0, 16, 16)
    assert h.to_csv().splitlines() == ["bin_center_ps,count", "-16.0,0", "0.0,0", "16.0,1"]


# ---------------------------------------------------------------- peak location


def test_locate_peak_delta():
    counts = np.ones(101, np.int64)
    counts[37] = 500
    h = tt.CorrelationHistogram(16, 0, counts, int(counts.sum()))
    centre, sig, _, _ = tt.locate_peak(h)
    assert centre == pytest.approx(h.bin_centers[37])
    assert sig > 5


def test_locate_peak_flat_raises():
    h = tt.CorrelationHistogram(16, 0, np.full(101, 40, np.int64), 4040)
    with pytest.raises(tt.NoPeak):
        tt.locate_peak(h)
    with pytest.raises(tt.NoPeak):
        tt.locate_peak(tt.CorrelationHistogram(16, 0, np.zeros(11, np.int64), 0))


def test_gaussian_centroid_within_32ps():
    rng = np.random.default_rng(11)
    good = 0
    for trial in range(200):
        truth = int(rng.integers(-5000, 5000))
        ta, tb = _gauss_peak(10_000, truth, 42.5, trial)
        est = tt.refine_offset(ta, tb, truth + rng.integers(-800, 800))
        good += abs(est.offset_ps - truth) <= 32
    assert good >= 0.99 * 200


@pytest.mark.parametrize("truth, coarse", [(123_456, 123_000), (0, 0), (123_956, 123_456)])
def test_refine_offset(truth, coarse):
    ta, tb = _gauss_peak(5000, truth, 42.5, 1, background=5000)
    est = tt.refine_offset(ta, tb, coarse, t_s=2.0)
    assert abs(est.offset_ps - truth) <= (16 if truth == 0 else 32)
    assert 0 < est.offset_uncertainty_ps < 32
    assert est.last_update_time == 2.0


def test_clock_estimate_mapping():
    est = tt.ClockEstimate(1000.0, 100.0, 1.0, 0.0)
    tb = np.array([0, tt.PS_PER_S], np.int64)
    np.testing.assert_array_equal(est.to_alice(tb), [-1000, tt.PS_PER_S - 1100])


# ---------------------------------------------------------------- tracking


def _batch(t_s, offset, seed, n=3000, sigma=42.5):
    rng = np.random.default_rng(seed)
    ta = np.sort(rng.integers(int(t_s * tt.PS_PER_S), int((t_s + 0.1) * tt.PS_PER_S), n))
    tb = np.sort(ta + int(round(offset)) + np.rint(rng.normal(0, sigma, n)).astype(np.int64))
    return ta, tb


def test_tracker_zero_error_zero_correction():
    tr = tt.ClockTracker(tt.ClockEstimate(0.0, 0.0, 5.0, 0.0))
    est, steer = tr.update(1.0, 0.0, 1.0)
    assert est.offset_ps == 0.0 and est.skew_ps_per_s == 0.0 and steer == 0.0


def test_tracker_learns_constant_skew():
    tr = tt.ClockTracker(tt.ClockEstimate(0.0, 0.0, 20.0, 0.0))
    for k in range(1, 30):
        est, steer = tr.track(float(k), *_batch(k, 100.0 * k, k))
    assert abs(tr.estimate.skew_ps_per_s - 100.0) < 10
    assert steer == pytest.approx(-tr.estimate.skew_ps_per_s)


@pytest.mark.xfail(strict=True, reason="from a zero-skew prior the 0.3/0.1 gains need ~20 updates; see ledger")
def test_tracker_skew_settles_within_five_updates_cold():
    tr = tt.ClockTracker(tt.ClockEstimate(0.0, 0.0, 20.0, 0.0))
    for k in range(1, 6):
        est, _ = tr.track(float(k), *_batch(k, 100.0 * k, k))
    assert abs(est.skew_ps_per_s - 100.0) <= 10


def test_tracker_skew_settles_within_five_updates_after_acquisition():
    # The nodes seed skew from two refined offsets one second apart.
    e0 = tt.refine_offset(*_batch(0, 0.0, 100), 0.0, 0.0)
    e1 = tt.refine_offset(*_batch(1, 100.0, 101), 100.0, 1.0)
    tr = tt.ClockTracker(tt.ClockEstimate(e1.offset_ps, e1.offset_ps - e0.offset_ps, e1.offset_uncertainty_ps, 1.0))
    for k in range(2, 7):
        est, _ = tr.track(float(k), *_batch(k, 100.0 * k, k))
    assert abs(est.skew_ps_per_s - 100.0) <= 10
    assert abs(est.offset_ps - 600.0) <= 32


def test_tracker_relocks_after_step():
    tr = tt.ClockTracker(tt.ClockEstimate(0.0, 100.0, 5.0, 0.0))
    for k in range(1, 5):
        tr.track(float(k), *_batch(k, 100.0 * k, k))
    est = None
    for j, k in enumerate(range(5, 8)):
        est, _ = tr.track(float(k), *_batch(k, 100.0 * k + 1000, k))
        if abs(est.offset_ps - (100.0 * k + 1000)) < 32:
            break
    assert j < 3 and tr.reseats == 1


def test_tracker_lost_lock_after_three_misses():
    tr = tt.ClockTracker(tt.ClockEstimate(0.0, 0.0, 5.0, 0.0))
    empty = np.zeros(0, np.int64)
    tr.track(1.0, empty, empty)
    tr.track(2.0, empty, empty)
    with pytest.raises(tt.LostLock):
        tr.track(3.0, empty, empty)


def test_tracker_deterministic():
    runs = []
    for _ in range(2):
        tr = tt.ClockTracker(tt.ClockEstimate(0.0, 0.0, 20.0, 0.0))
        runs.append([tr.track(float(k), *_batch(k, 50.0 * k, k))[0] for k in range(1, 6)])
    assert runs[0] == runs[1]


# ---------------------------------------------------------------- matching


def test_match_trivial():
    m = tt.match_coincidences(np.array([100]), np.array([100 + 5000 + 30]), 5000, 128)
    assert len(m) == 1 and m.residual_ps.tolist() == [30]
    assert len(tt.match_coincidences(np.zeros(0, np.int64), np.array([1]), 0)) == 0
    assert len(tt.match_coincidences(np.array([0]), np.array([65]), 0, 128)) == 0
    assert len(tt.match_coincidences(np.array([0]), np.array([64]), 0, 128)) == 1


def test_match_contested_and_tie():
    # Two Bob tags want the same Alice tag: the earlier Bob tag wins.
    m = tt.match_coincidences(np.array([100]), np.array([90, 100]), 0, 128)
    assert m.bob_index.tolist() == [0]
    # Equidistant Alice tags: the earlier one is taken.
    m = tt.match_coincidences(np.array([80, 120]), np.array([100]), 0, 128)
    assert m.alice_index.tolist() == [0]


def test_match_equals_brute_force_on_1e4_tags():
    ta, tb = synthetic_tags(10_000, rate_hz=5e9, pair_fraction=0.3, offset_ps=777, seed=5)
    m = tt.match_coincidences(ta, tb, 777, 128)
    want = brute_match(ta, tb, 777, 128)
    assert list(zip(m.alice_index.tolist(), m.bob_index.tolist(), m.residual_ps.tolist())) == want


@given(sorted_tags, sorted_tags, st.integers(-500, 500), st.sampled_from([2, 64, 128, 1000]))
def test_match_brute_force_property(ta, tb, offset, window):
    m = tt.match_coincidences(ta, tb, offset, window)
    assert list(zip(m.alice_index.tolist(), m.bob_index.tolist(), m.residual_ps.tolist())) == \
        brute_match(ta, tb, offset, window)
    assert len(m) <= min(len(ta), len(tb))
    assert np.all(np.abs(m.residual_ps) <= window // 2)
    assert len(set(m.alice_index.tolist())) == len(m) == len(set(m.bob_index.tolist()))


@given(sorted_tags, sorted_tags, st.integers(-10**6, 10**6))
def test_match_translation_invariant(ta, tb, shift):
    m1 = tt.match_coincidences(ta, tb, 0, 128)
    m2 = tt.match_coincidences(ta + shift, tb + shift, 0, 128)
    np.testing.assert_array_equal(m1.alice_index, m2.alice_index)
    np.testing.assert_array_equal(m1.bob_index, m2.bob_index)


def test_match_carries_channels():
    m = tt.match_coincidences(np.array([0, 500]), np.array([10, 510]), 0, 128,
                              channels_a=np.array([2, 3]), channels_b=np.array([6, 7]))
    assert m.alice_channel.tolist() == [2, 3] and m.bob_channel.tolist() == [6, 7]
