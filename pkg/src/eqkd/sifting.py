"""Basis reconciliation, raw-key accumulation and X-basis phase feedback."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .sim_link import Channel
from .timetag import ClockEstimate, match_coincidences

N_EC = 16384
BASIS_Z = 0
BASIS_X = 1


class ClockNotLocked(RuntimeError):
    pass


class InsufficientStatistics(ValueError):
    pass


@dataclass
class Announcement:
    """Bob's public record of one block: times (his clock), bases, X bits."""

    block_id: int
    times: np.ndarray  # int64, sorted
    basis: np.ndarray  # uint8, 0 = Z, 1 = X
    x_bits: np.ndarray  # uint8, one per X entry in time order

    def __len__(self):
        return len(self.times)

    def __eq__(self, other):
        return (
            isinstance(other, Announcement)
            and self.block_id == other.block_id
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.basis, other.basis)
            and np.array_equal(self.x_bits, other.x_bits)
        )


@dataclass
class SiftResponse:
    block_id: int
    indices: np.ndarray  # int64, strictly increasing, into the announcement

    def __eq__(self, other):
        return isinstance(other, SiftResponse) and self.block_id == other.block_id and np.array_equal(
            self.indices, other.indices
        )


@dataclass
class SiftResult:
    response: SiftResponse
    alice_bits: np.ndarray  # Z key bits in announcement order
    x_alice: np.ndarray  # X outcome pairs for QBERx
    x_bob: np.ndarray
    residual_ps: np.ndarray  # Z-Z residual delays


def build_announcement(block_id: int, times, channels) -> Announcement:
    """Public announcement of a sealed block; Z outcomes are withheld."""
    times = np.asarray(times, dtype=np.int64)
    ch = np.asarray(channels, dtype=np.uint8)
    basis = ((ch & 2) >> 1).astype(np.uint8)
    x_bits = (ch[basis == BASIS_X] & 1).astype(np.uint8)
    return Announcement(block_id, times, basis, x_bits)


def sift_match(alice_times, alice_channels, ann: Announcement, clock: ClockEstimate | None,
               window_ps: int = 128) -> SiftResult:
    """Alice's side: per-basis zero-delay matching of an announcement.

    Bob's Z tags are matched against Alice's AZ0/AZ1 logical tags (a match on
    AZ1 means bit 1); X tags against Alice's X tags. A Bob tag can only meet
    an Alice tag of the same basis, so mixed-basis coincidences are dropped.
    """
    if clock is None or not math.isfinite(clock.offset_uncertainty_ps):
        raise ClockNotLocked("sifting requires a locked clock estimate")
    ta = np.asarray(alice_times, dtype=np.int64)
    ca = np.asarray(alice_channels, dtype=np.uint8)
    tb = clock.to_alice(ann.times)
    za = ca <= Channel.AZ1
    xa = (ca == Channel.AX0) | (ca == Channel.AX1)
    bz = np.flatnonzero(ann.basis == BASIS_Z)
    bx = np.flatnonzero(ann.basis == BASIS_X)
    ta_z, ca_z = ta[za], ca[za]
    mz = match_coincidences(ta_z, tb[bz], 0, window_ps)
    order = np.argsort(mz.bob_index, kind="stable")
    idx = bz[mz.bob_index[order]]
    alice_bits = (ca_z[mz.alice_index[order]] & 1).astype(np.uint8)
    ta_x, ca_x = ta[xa], ca[xa]
    mx = match_coincidences(ta_x, tb[bx], 0, window_ps)
    x_alice = (ca_x[mx.alice_index] & 1).astype(np.uint8)
    x_bob = np.asarray(ann.x_bits)[mx.bob_index].astype(np.uint8)
    return SiftResult(SiftResponse(ann.block_id, idx.astype(np.int64)), alice_bits, x_alice, x_bob,
                      mz.residual_ps[order])


def bob_sifted_bits(channels, response: SiftResponse) -> np.ndarray:
    """Bob's key bits for the announcement entries Alice matched in Z."""
    ch = np.asarray(channels, dtype=np.uint8)[response.indices]
    if np.any(ch & 2):
        raise ValueError("sift response references a non-Z event")
    return (ch & 1).astype(np.uint8)


@dataclass
class RawKeyBlock:
    seq: int
    bits: np.ndarray
    source_blocks: list = field(default_factory=list)
    bits_disclosed: int = 0


class RawKeyAccumulator:
    """Concatenates sifted bits and seals fixed-size correction blocks."""

    def __init__(self, n_ec: int = N_EC):
        self.n_ec = n_ec
        self._pending: list[np.ndarray] = []
        self._pending_n = 0
        self._pending_sources: list[int] = []
        self._seq = 0

    @property
    def pending(self) -> int:
        return self._pending_n

    def push(self, bits, block_id: int | None = None) -> list[RawKeyBlock]:
        bits = np.asarray(bits, dtype=np.uint8)
        if len(bits):
            self._pending.append(bits)
            self._pending_n += len(bits)
            if block_id is not None:
                self._pending_sources.append(block_id)
        sealed = []
        if self._pending_n < self.n_ec:
            return sealed
        buf = np.concatenate(self._pending)
        n_full = len(buf) // self.n_ec
        for i in range(n_full):
            sealed.append(RawKeyBlock(self._seq, buf[i * self.n_ec : (i + 1) * self.n_ec].copy(),
                                      list(self._pending_sources)))
            self._seq += 1
        rest = buf[n_full * self.n_ec :]
        self._pending = [rest] if len(rest) else []
        self._pending_n = len(rest)
        self._pending_sources = self._pending_sources[-1:] if len(rest) else []
        return sealed


@dataclass
class XBasisStats:
    correlated: int
    anticorrelated: int

    @property
    def total(self) -> int:
        return self.correlated + self.anticorrelated

    @property
    def qber_x(self) -> float:
        return self.anticorrelated / self.total if self.total else 0.0

    @property
    def sigma(self) -> float:
        q, n = self.qber_x, max(self.total, 1)
        return math.sqrt(max(q * (1 - q), 1.0 / n) / n)


def estimate_qber_x(x_alice, x_bob, floor: int = 100) -> XBasisStats:
    """Anticorrelated fraction; at lock (phase sum 0) outcomes are correlated."""
    a = np.asarray(x_alice, dtype=np.uint8)
    b = np.asarray(x_bob, dtype=np.uint8)
    anti = int(np.count_nonzero(a != b))
    stats = XBasisStats(len(a) - anti, anti)
    if stats.total < max(floor, 1):
        raise InsufficientStatistics(f"{stats.total} X coincidences, need {floor}")
    return stats


class PhaseController:
    """Dither-and-descend controller for the interferometer phase.

    The actuator alternates between centre + delta and centre - delta. After
    each pair of measurements the centre moves against the finite-difference
    gradient of qber_x. A missing measurement (None) holds everything.
    """

    def __init__(self, phase: float = 0.0, delta: float = 0.05, gain: float = 0.5,
                 limit: float = 2 * math.pi):
        self.centre = phase
        self.delta, self.gain, self.limit = delta, gain, limit
        self._sign = +1
        self._q_plus: float | None = None

    @property
    def command(self) -> float:
        return self.centre + self._sign * self.delta

    def step(self, qber_x: float | None) -> float:
        """Feed the QBERx measured under the current command; returns the next command."""
        if qber_x is None:
            return self.command
        if self._sign > 0:
            self._q_plus = qber_x
            self._sign = -1
        else:
            grad = (self._q_plus - qber_x) / (2 * self.delta)
            self.centre = float(np.clip(self.centre - self.gain * grad, -self.limit, self.limit))
            self._sign = +1
        return self.command
