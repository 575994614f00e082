"""Interactive Cascade reconciliation over sealed raw-key blocks.

Alice holds the reference block and only ever answers parity queries; Bob
runs the corrector.  The corrector is written as a generator that yields
requests and receives the reference side's answers, so the same code runs
against an in-process reference (tests, benchmarks) and against a remote
node over the wire (see :mod:`eqkd.nodes`).

Every parity bit the reference reveals is counted, and the verification
hash is charged as well, so ``bits_disclosed`` is the exact leakage that
enters the secret-length computation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Generator, Iterator

import numpy as np

# Raw-key correction block length.
N_EC = 16384
# k1, 2k1, 4k1 followed by n/2-sized passes; the trailing n/2 passes cost two
# parities each when clean and catch error pairs that earlier passes kept together.
N_PASSES = 8
Q_BOOTSTRAP = 0.05
HASH_BITS = 64
_MERSENNE61 = (1 << 61) - 1


class VerificationFailed(Exception):
    """Corrected block still differs from the reference after all passes."""


class ChannelError(Exception):
    """Transport failed while a session was in progress."""


@dataclass(frozen=True)
class PassRequest:
    pass_index: int
    block_size: int
    perm_seed: int


@dataclass(frozen=True)
class SearchRequest:
    # rows of (pass_index, start, end) in permuted positions, end exclusive
    ranges: np.ndarray


@dataclass(frozen=True)
class VerifyRequest:
    hash_seed: int
    digest: int


@dataclass
class CorrectionResult:
    block_id: int
    bits: np.ndarray
    bits_disclosed: int
    parity_bits: int
    errors_corrected: int
    measured_qber: float
    verified: bool
    transcript: list = field(default_factory=list, repr=False)

    @property
    def f_ec(self) -> float:
        """Disclosed bits over the Shannon minimum at the measured error rate."""
        from .distill import binary_entropy

        h = binary_entropy(self.measured_qber)
        n = len(self.bits)
        return self.bits_disclosed / (n * h) if h > 0 else math.inf


def initial_block_size(q_est: float, n: int = N_EC) -> int:
    if not 0 < q_est <= 0.25:
        raise ValueError(f"q_est must lie in (0, 0.25], got {q_est}")
    k1 = math.ceil(0.8 / q_est)
    return int(min(max(k1, 8), n // 2))


def block_schedule(q_est: float, n: int = N_EC, n_passes: int = N_PASSES) -> list[int]:
    k1 = initial_block_size(q_est, n)
    sizes = [k1, 2 * k1, 4 * k1] + [n // 2] * max(1, n_passes - 3)
    return [min(k, n // 2) for k in sizes][:n_passes]


def block_parity(bits: np.ndarray, indices=None) -> int:
    """XOR of ``bits`` (optionally restricted to ``indices``)."""
    sel = bits if indices is None else np.asarray(bits)[np.asarray(indices, dtype=np.int64)]
    if len(sel) == 0:
        return 0
    return int(np.bitwise_xor.reduce(np.asarray(sel, dtype=np.uint8)))


def pass_permutation(perm_seed: int, n: int) -> np.ndarray:
    return np.random.default_rng(perm_seed).permutation(n)


def session_seeds(session_seed: int, n_passes: int = N_PASSES) -> list[int]:
    ss = np.random.SeedSequence(session_seed)
    return [int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(n_passes + 1)]


def verification_hash(bits: np.ndarray, seed: int) -> int:
    """Polynomial hash of the packed block over GF(2^61 - 1), evaluated at a
    seed-derived point.  Collision probability <= words / 2^61."""
    words = np.packbits(np.asarray(bits, dtype=np.uint8)).view(np.uint8)
    pad = (-len(words)) % 8
    if pad:
        words = np.concatenate([words, np.zeros(pad, np.uint8)])
    words = words.view("<u8")
    r = (seed % (_MERSENNE61 - 2)) + 2
    acc = len(bits) % _MERSENNE61
    for w in words.tolist():
        acc = (acc * r + (w % _MERSENNE61)) % _MERSENNE61
    return acc


def _prefix_xor(permuted: np.ndarray) -> np.ndarray:
    out = np.zeros(len(permuted) + 1, dtype=np.uint8)
    np.bitwise_xor.accumulate(permuted, out=out[1:])
    return out


class CascadeReference:
    """Alice's side: answers parity queries about her (fixed) block."""

    def __init__(self, bits: np.ndarray, block_id: int = 0):
        self.bits = np.asarray(bits, dtype=np.uint8)
        self.block_id = block_id
        self.n = len(self.bits)
        self._prefix: dict[int, np.ndarray] = {}
        self._sizes: dict[int, int] = {}
        self.bits_disclosed = 0
        self.verified: bool | None = None

    def answer(self, request):
        if isinstance(request, PassRequest):
            perm = pass_permutation(request.perm_seed, self.n)
            pre = _prefix_xor(self.bits[perm])
            self._prefix[request.pass_index] = pre
            self._sizes[request.pass_index] = request.block_size
            k = request.block_size
            starts = np.arange(0, self.n, k)
            ends = np.minimum(starts + k, self.n)
            parities = pre[ends] ^ pre[starts]
            self.bits_disclosed += len(parities)
            return parities
        if isinstance(request, SearchRequest):
            r = np.asarray(request.ranges, dtype=np.int64).reshape(-1, 3)
            out = np.empty(len(r), dtype=np.uint8)
            for p in np.unique(r[:, 0]):
                sel = r[:, 0] == p
                pre = self._prefix[int(p)]
                out[sel] = pre[r[sel, 2]] ^ pre[r[sel, 1]]
            self.bits_disclosed += len(out)
            return out
        if isinstance(request, VerifyRequest):
            self.bits_disclosed += HASH_BITS
            mine = verification_hash(self.bits, request.hash_seed)
            self.verified = mine == request.digest
            return self.verified
        raise TypeError(f"unknown cascade request {request!r}")


class _Pass:
    __slots__ = ("perm", "inv", "k", "alice_top", "bob_top")

    def __init__(self, perm, k, alice_top, bits):
        self.perm = perm
        self.inv = np.empty_like(perm)
        self.inv[perm] = np.arange(len(perm))
        self.k = k
        self.alice_top = np.asarray(alice_top, dtype=np.uint8)
        n = len(perm)
        pre = _prefix_xor(bits[perm])
        starts = np.arange(0, n, k)
        self.bob_top = pre[np.minimum(starts + k, n)] ^ pre[starts]

    def block_range(self, b: int, n: int) -> tuple[int, int]:
        return b * self.k, min((b + 1) * self.k, n)


def cascade_corrector(
    bits: np.ndarray,
    q_est: float = Q_BOOTSTRAP,
    session_seed: int = 0,
    block_id: int = 0,
    keep_transcript: bool = False,
    n_passes: int = N_PASSES,
) -> Generator[object, object, CorrectionResult]:
    """Bob's side of a Cascade session.

    Yields :class:`PassRequest`, :class:`SearchRequest` and
    :class:`VerifyRequest` objects; the driver sends back the reference's
    answer.  Returns the :class:`CorrectionResult`.
    """
    bits = np.array(bits, dtype=np.uint8, copy=True)
    n = len(bits)
    q = min(max(q_est, 1e-6), 0.25)
    sizes = block_schedule(q, n, n_passes)
    seeds = session_seeds(session_seed, len(sizes))
    passes: list[_Pass] = []
    known: dict[tuple[int, int, int], int] = {}
    parity_bits = 0
    errors = 0
    budget = 10 * max(1, math.ceil(n * q))
    bisections = 0
    transcript: list = []

    for p, k in enumerate(sizes):
        req = PassRequest(p, k, seeds[p])
        alice_top = yield req
        parity_bits += len(alice_top)
        if keep_transcript:
            transcript.append((req, np.asarray(alice_top).copy()))
        passes.append(_Pass(pass_permutation(seeds[p], n), k, alice_top, bits))
        for b, par in enumerate(passes[-1].alice_top):
            s, e = passes[-1].block_range(b, n)
            known[(p, s, e)] = int(par)

        while bisections < budget:
            target = None
            for j, ps in enumerate(passes):
                odd = np.flatnonzero(ps.bob_top != ps.alice_top)
                if len(odd):
                    target = (j, odd)
                    break
            if target is None:
                break
            j, odd = target
            odd = odd[: budget - bisections]
            bisections += len(odd)
            flips, asked = yield from _parallel_bisect(
                passes[j], j, odd, bits, known, n, transcript if keep_transcript else None
            )
            parity_bits += asked
            for i in flips:
                bits[i] ^= 1
                errors += 1
                for ps in passes:
                    ps.bob_top[ps.inv[i] // ps.k] ^= 1

    hash_seed = session_seeds(session_seed, len(sizes))[-1]
    verified = bool((yield VerifyRequest(hash_seed, verification_hash(bits, hash_seed))))
    return CorrectionResult(
        block_id=block_id,
        bits=bits,
        bits_disclosed=parity_bits + HASH_BITS,
        parity_bits=parity_bits,
        errors_corrected=errors,
        measured_qber=errors / n if n else 0.0,
        verified=verified,
        transcript=transcript,
    )


def _parallel_bisect(ps: _Pass, j: int, blocks, bits, known, n, transcript):
    """Binary search every odd block of pass ``j`` at once, one query round per
    tree level.  Reuses any parity already revealed for the same sub-range."""
    pre = _prefix_xor(bits[ps.perm])
    active = []
    for b in blocks:
        s, e = ps.block_range(int(b), n)
        active.append([s, e, known[(j, s, e)]])
    flips = []
    asked = 0
    while active:
        queries = []
        for a in active:
            s, e, _ = a
            if e - s > 1:
                m = (s + e) // 2
                if (j, s, m) not in known:
                    queries.append((j, s, m))
        if queries:
            q = np.array(queries, dtype=np.int64)
            answer = yield SearchRequest(q)
            asked += len(queries)
            if transcript is not None:
                transcript.append((SearchRequest(q), np.asarray(answer).copy()))
            for (jj, s, m), par in zip(queries, np.asarray(answer).tolist()):
                known[(jj, s, m)] = int(par)
        nxt = []
        for s, e, par in active:
            if e - s == 1:
                flips.append(int(ps.perm[s]))
                continue
            m = (s + e) // 2
            left = known[(j, s, m)]
            right = par ^ left
            known.setdefault((j, m, e), right)
            if (pre[m] ^ pre[s]) != left:
                nxt.append([s, m, left])
            else:
                nxt.append([m, e, right])
        active = nxt
    return flips, asked


def binary_search_correct(bits: np.ndarray, reference: CascadeReference, perm: np.ndarray,
                          start: int, end: int, alice_parity: int, pass_index: int = 0):
    """Single-block bisection against ``reference``, which must already hold
    pass ``pass_index``.  ``alice_parity`` is the reference's top-level parity
    of permuted range [start, end).  Returns (original index of the flipped
    bit, number of sub-parities disclosed); ``bits`` is corrected in place."""
    pre = _prefix_xor(np.asarray(bits, dtype=np.uint8)[perm])
    if (pre[end] ^ pre[start]) == alice_parity:
        raise ValueError("block parities agree; nothing to correct")
    asked = 0
    s, e = start, end
    while e - s > 1:
        m = (s + e) // 2
        left = reference.answer(SearchRequest(np.array([[pass_index, s, m]])))[0]
        asked += 1
        if (pre[m] ^ pre[s]) != left:
            e = m
        else:
            s = m
    pos = int(perm[s])
    bits[pos] ^= 1
    return pos, asked


def drive_local(corrector: Iterator, reference: CascadeReference) -> CorrectionResult:
    """Run a corrector generator to completion against an in-process reference."""
    try:
        req = next(corrector)
        while True:
            req = corrector.send(reference.answer(req))
    except StopIteration as stop:
        return stop.value


def cascade_reconcile(alice_bits: np.ndarray, bob_bits: np.ndarray, q_est: float = Q_BOOTSTRAP,
                      session_seed: int = 0, block_id: int = 0,
                      keep_transcript: bool = False) -> tuple[CorrectionResult, CascadeReference]:
    """Loopback reconciliation of one block; both sides observable."""
    reference = CascadeReference(alice_bits, block_id)
    result = drive_local(
        cascade_corrector(bob_bits, q_est, session_seed, block_id, keep_transcript), reference
    )
    if reference.bits_disclosed != result.bits_disclosed:
        raise AssertionError("leakage accounting mismatch between the two sides")
    return result, reference
