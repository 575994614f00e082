import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eqkd.config import replace
from eqkd.experiments import lossless, sift_with_truth_clock
from eqkd.sifting import (
    BASIS_X,
    BASIS_Z,
    ClockNotLocked,
    InsufficientStatistics,
    PhaseController,
    RawKeyAccumulator,
    bob_sifted_bits,
    build_announcement,
    estimate_qber_x,
    sift_match,
)
from eqkd.sim_link import Channel as C
from eqkd.timetag import ClockEstimate

LOCKED = ClockEstimate(0.0, 0.0, 1.0)


def test_announcement_three_tags():
    ann = build_announcement(4, [100, 200, 300], [C.BZ0, C.BX1, C.BZ1])
    assert ann.basis.tolist() == [BASIS_Z, BASIS_X, BASIS_Z]
    assert ann.x_bits.tolist() == [1]
    assert len(ann) == 3 and ann.block_id == 4


def test_empty_announcement():
    ann = build_announcement(0, [], [])
    res = sift_match([10], [C.AZ0], ann, LOCKED)
    assert len(res.response.indices) == 0 and len(res.alice_bits) == 0


def test_az1_match_gives_bit_one():
    ann = build_announcement(0, [1000 + 40], [C.BZ1])
    res = sift_match([1000], [C.AZ1], ann, LOCKED)
    assert res.response.indices.tolist() == [0]
    assert res.alice_bits.tolist() == [1]
    assert bob_sifted_bits([C.BZ1], res.response).tolist() == [1]


def test_mixed_basis_discarded():
    ann = build_announcement(0, [100, 200, 300], [C.BZ0, C.BX1, C.BZ1])
    res = sift_match([100, 200, 300], [C.AZ0, C.AX1, C.AX0], ann, LOCKED)
    assert res.response.indices.tolist() == [0]
    assert res.alice_bits.tolist() == [0]
    assert (res.x_alice.tolist(), res.x_bob.tolist()) == ([1], [1])


def test_offset_applied_before_matching():
    clock = ClockEstimate(1_000_000.0, 0.0, 1.0)
    ann = build_announcement(0, [1_000_500, 1_002_000], [C.BZ0, C.BZ1])
    res = sift_match([500, 2000 + 60], [C.AZ0, C.AZ1], ann, clock)
    assert res.response.indices.tolist() == [0, 1]
    assert res.residual_ps.tolist() == [0, -60]


def test_ten_tag_scenario_brute_force():
    # Z detections sit 5 us apart so every match is unambiguous.
    rng = np.random.default_rng(1)
    tb = np.arange(10, dtype=np.int64) * 5_000_000 + 1_000
    cb = rng.choice([C.BZ0, C.BZ1, C.BX0, C.BX1], 10).astype(np.uint8)
    delay = rng.integers(-200, 200, 10)
    ta = tb - delay
    ca = rng.choice([C.AZ0, C.AZ1, C.AX0, C.AX1], 10).astype(np.uint8)
    ann = build_announcement(0, tb, cb)
    res = sift_match(ta, ca, ann, LOCKED)
    want = [i for i in range(10) if abs(delay[i]) <= 64 and (cb[i] & 2) == 0 and (ca[i] & 2) == 0]
    assert res.response.indices.tolist() == want
    assert res.alice_bits.tolist() == [int(ca[i] & 1) for i in want]


def test_requires_locked_clock():
    ann = build_announcement(0, [1], [C.BZ0])
    with pytest.raises(ClockNotLocked):
        sift_match([1], [C.AZ0], ann, None)
    with pytest.raises(ClockNotLocked):
        sift_match([1], [C.AZ0], ann, ClockEstimate(0.0))


def test_bob_bits_reject_x_index():
    ann = build_announcement(0, [1, 2], [C.BZ0, C.BX0])
    res = sift_match([1, 2], [C.AZ0, C.AX0], ann, LOCKED)
    bad = type(res.response)(0, np.array([1]))
    with pytest.raises(ValueError):
        bob_sifted_bits([C.BZ0, C.BX0], bad)


def test_accumulator_seals_exact_blocks():
    acc = RawKeyAccumulator()
    assert len(acc.push(np.zeros(16384, np.uint8), 0)) == 1 and acc.pending == 0
    acc = RawKeyAccumulator()
    sealed = acc.push(np.ones(20000, np.uint8), 0)
    assert len(sealed) == 1 and acc.pending == 20000 - 16384
    assert len(sealed[0].bits) == 16384


@given(st.lists(st.integers(0, 5000), max_size=30))
def test_accumulator_preserves_order(sizes):
    acc = RawKeyAccumulator(1000)
    rng = np.random.default_rng(len(sizes))
    chunks = [rng.integers(0, 2, s, dtype=np.uint8) for s in sizes]
    sealed = []
    for i, ch in enumerate(chunks):
        sealed += acc.push(ch, i)
    flat = np.concatenate(chunks) if chunks else np.zeros(0, np.uint8)
    assert [b.seq for b in sealed] == list(range(len(sealed)))
    assert len(sealed) * 1000 + acc.pending == len(flat)
    if sealed:
        np.testing.assert_array_equal(np.concatenate([b.bits for b in sealed]), flat[: 1000 * len(sealed)])


def test_estimate_qber_x():
    a = np.zeros(100, np.uint8)
    b = a.copy()
    b[:5] = 1
    stats = estimate_qber_x(a, b)
    assert stats.qber_x == pytest.approx(0.05)
    assert stats.sigma == pytest.approx(math.sqrt(0.05 * 0.95 / 100))
    with pytest.raises(InsufficientStatistics):
        estimate_qber_x(a[:99], b[:99])


def _cosine_qber(v):
    return lambda phi: (1 - v * math.cos(phi)) / 2


@pytest.mark.parametrize("start", [1.2, -0.8, 2.0])
def test_phase_controller_converges(start):
    q = _cosine_qber(0.99)
    ctl = PhaseController(start)
    for _ in range(400):
        ctl.step(q(ctl.command))
    assert abs(ctl.centre) < 0.05


def test_phase_controller_holds_at_minimum():
    ctl = PhaseController(0.0)
    q = _cosine_qber(0.99)
    for _ in range(200):
        ctl.step(q(ctl.command))
    assert abs(ctl.centre) < 1e-9


def test_phase_controller_bounded_at_zero_visibility():
    ctl = PhaseController(0.3, limit=2 * math.pi)
    for i in range(500):
        ctl.step(0.5 + 0.01 * ((i * 7919) % 3 - 1))
        assert abs(ctl.centre) <= 2 * math.pi
    assert ctl.step(None) == ctl.command


def test_noiseless_link_gives_identical_keys(cfg):
    c = replace(lossless(cfg), **{
        "source.mu": 1e-6, "source.visibility": 1.0, "source.intrinsic_qber_z": 0.0,
        "detectors.dark_rate_hz": 0.0,
    })
    run = sift_with_truth_clock(c, 1.0, seed=4)
    assert run.sifted > 1000
    assert run.errors == 0
    assert run.x_anti == 0
