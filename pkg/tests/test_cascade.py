import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqkd import cascade
from eqkd.cascade import (
    HASH_BITS,
    CascadeReference,
    PassRequest,
    block_parity,
    block_schedule,
    binary_search_correct,
    cascade_reconcile,
    initial_block_size,
    pass_permutation,
    verification_hash,
)


def _pair(n, q, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, n, dtype=np.uint8)
    return a, a ^ (rng.random(n) < q).astype(np.uint8)


def test_initial_block_size():
    assert initial_block_size(0.05) == 16
    assert initial_block_size(0.25) == 8
    assert initial_block_size(1e-9) == 16384 // 2
    with pytest.raises(ValueError):
        initial_block_size(0.0)
    with pytest.raises(ValueError):
        initial_block_size(0.3)


def test_schedule_starts_with_doubling():
    s = block_schedule(0.05)
    assert s[:4] == [16, 32, 64, 8192]
    assert all(k == 8192 for k in s[3:])


def test_block_parity():
    assert block_parity(np.array([1, 0, 1], np.uint8)) == 0
    assert block_parity(np.array([], np.uint8)) == 0
    assert block_parity(np.array([1, 1, 1, 0], np.uint8), [0, 3]) == 1


@given(st.integers(0, 2**64 - 1))
def test_block_parity_popcount(word):
    bits = np.array([(word >> i) & 1 for i in range(64)], np.uint8)
    assert block_parity(bits) == bin(word).count("1") % 2


def test_binary_search_single_error():
    a = np.zeros(16, np.uint8)
    b = a.copy()
    b[5] = 1
    ref = CascadeReference(a)
    (top,) = ref.answer(PassRequest(0, 16, 21))
    perm = pass_permutation(21, 16)
    pos, asked = binary_search_correct(b, ref, perm, 0, 16, int(top))
    assert pos == 5 and asked <= 4
    np.testing.assert_array_equal(b, a)
    with pytest.raises(ValueError):
        binary_search_correct(b, ref, perm, 0, 16, 0)


def test_binary_search_three_errors_fixes_one():
    a = np.zeros(16, np.uint8)
    b = a.copy()
    b[[2, 9, 13]] = 1
    ref = CascadeReference(a)
    ref.answer(PassRequest(0, 16, 21))
    perm = pass_permutation(21, 16)
    pos, _ = binary_search_correct(b, ref, perm, 0, 16, 0)
    assert pos in (2, 9, 13)
    assert int(b.sum()) == 2


def test_identical_blocks_disclose_top_parities_only():
    a, _ = _pair(16384, 0.0, 1)
    res, ref = cascade_reconcile(a, a.copy(), 0.05, session_seed=3)
    expected = sum(math.ceil(16384 / k) for k in block_schedule(0.05)) + HASH_BITS
    assert expected == 1802 + 64
    assert res.errors_corrected == 0
    assert res.bits_disclosed == ref.bits_disclosed == expected
    assert res.verified


def test_corrects_and_counts_exactly():
    a, b = _pair(16384, 0.05, 2)
    res, ref = cascade_reconcile(a, b, 0.05, session_seed=11, keep_transcript=True)
    assert res.verified
    np.testing.assert_array_equal(res.bits, a)
    assert res.errors_corrected == int(np.count_nonzero(a != b))
    assert res.measured_qber == pytest.approx(np.mean(a != b))
    transcript_bits = sum(len(np.atleast_1d(ans)) for _, ans in res.transcript)
    assert transcript_bits == res.parity_bits
    assert res.bits_disclosed == res.parity_bits + HASH_BITS == ref.bits_disclosed
    assert 1.0 < res.f_ec < 1.3


def test_deterministic_transcript():
    a, b = _pair(4096, 0.03, 5)
    r1, _ = cascade_reconcile(a, b, 0.03, session_seed=99, keep_transcript=True)
    r2, _ = cascade_reconcile(a, b, 0.03, session_seed=99, keep_transcript=True)
    assert r1.bits_disclosed == r2.bits_disclosed
    for (q1, a1), (q2, a2) in zip(r1.transcript, r2.transcript):
        assert type(q1) is type(q2)
        np.testing.assert_array_equal(np.atleast_1d(a1), np.atleast_1d(a2))


def test_permutations_shared():
    np.testing.assert_array_equal(pass_permutation(42, 100), pass_permutation(42, 100))
    assert sorted(pass_permutation(42, 100)) == list(range(100))


def test_half_errors_terminate_unverified():
    a, b = _pair(16384, 0.5, 4)
    res, _ = cascade_reconcile(a, b, 0.05, session_seed=1)
    assert not res.verified


def test_verification_hash_distinguishes():
    a, _ = _pair(16384, 0, 8)
    b = a.copy()
    b[100] ^= 1
    assert verification_hash(a, 7) == verification_hash(a.copy(), 7)
    assert verification_hash(a, 7) != verification_hash(b, 7)


@settings(max_examples=25)
@given(st.integers(64, 3000), st.floats(0.005, 0.08), st.integers(0, 2**32 - 1))
def test_verified_implies_equal(n, q, seed):
    a, b = _pair(n, q, seed)
    res, ref = cascade_reconcile(a, b, q, session_seed=seed)
    assert res.bits_disclosed == ref.bits_disclosed
    if res.verified:
        np.testing.assert_array_equal(res.bits, a)
    assert 0.0 <= res.measured_qber <= 1.0


def test_corrector_runs_against_remote_style_driver():
    # The generator only ever sees answers, never the reference bits.
    a, b = _pair(2048, 0.04, 12)
    ref = CascadeReference(a)
    gen = cascade.cascade_corrector(b, 0.04, 5)
    req = next(gen)
    n_req = 0
    try:
        while True:
            n_req += 1
            req = gen.send(ref.answer(req))
    except StopIteration as stop:
        res = stop.value
    assert res.verified and n_req > 8
