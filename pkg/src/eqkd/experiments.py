"""Experiment harnesses behind the acceptance suite, the scripts and the CLI.

Each harness returns a small report dataclass. Nothing here asserts;
callers compare the reports against their tolerances.
"""
from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import cascade, timetag as tt
from .config import Config, replace
from .distill import binary_entropy, secret_key_length
from .nodes import LoopbackResult, run_loopback
from .protocol import HEADER, HEADER_LEN, MsgType
from .sifting import PhaseController, XBasisStats, bob_sifted_bits, build_announcement, sift_match
from .sim_link import PS_PER_S, LinkSimulator
from .skr_model import optimize_mu, predict

LOSSES = ("AZ", "AX1", "AX2", "BZ1", "BZ2", "BX1", "BX2")


def lossless(cfg: Config) -> Config:
    """Same configuration with every channel at 0 dB."""
    return replace(cfg, **{f"losses.{k}": 0.0 for k in LOSSES})


# ---------------------------------------------------------------- rate model


@dataclass
class ScanReport:
    mu: np.ndarray
    skr: np.ndarray
    qber_z: np.ndarray
    qber_x: np.ndarray
    mu_opt: float
    qber_z_opt: float
    skr_opt: float
    runtime_s: float

    @property
    def qber_z_increasing(self) -> bool:
        return bool(np.all(np.diff(self.qber_z) > 0))

    @property
    def interior_maximum(self) -> bool:
        k = int(np.argmax(self.skr))
        return 0 < k < len(self.skr) - 1

    @property
    def unimodal(self) -> bool:
        k = int(np.argmax(self.skr))
        return bool(np.all(np.diff(self.skr[: k + 1]) >= 0) and np.all(np.diff(self.skr[k:]) <= 0))


def model_scan(cfg: Config, n_points: int = 200, mu_range=(1e-4, 0.5)) -> ScanReport:
    """SKR and QBERs over a log grid of mu plus the optimum."""
    t0 = time.perf_counter()
    grid = np.geomspace(*mu_range, n_points)
    preds = [predict(float(m), cfg) for m in grid]
    mu_opt, best = optimize_mu(cfg, mu_range)
    return ScanReport(grid, np.array([p.secret_rate for p in preds]), np.array([p.qber_z for p in preds]),
                      np.array([p.qber_x for p in preds]), mu_opt, best.qber_z, best.secret_rate,
                      time.perf_counter() - t0)


# ---------------------------------------------------------------- clock sync


@dataclass
class SyncReport:
    times_s: np.ndarray
    errors_ps: np.ndarray
    lock_time_s: float
    locks: int
    runtime_s: float

    def fraction_within(self, bound_ps: float = 32.0) -> float:
        return float(np.mean(np.abs(self.errors_ps) <= bound_ps)) if len(self.errors_ps) else 0.0


def clock_sync_run(cfg: Config, duration_s: float = 600.0, seed: int = 0) -> SyncReport:
    """Full node pipeline on a simulated link; per-second offset error after lock."""
    t0 = time.perf_counter()
    res = run_loopback(cfg, duration_s, seed, feedback=False)
    log = np.array(res.alice.sync_log, dtype=float).reshape(-1, 3)
    return SyncReport(log[:, 0], log[:, 2], float(log[0, 0]) if len(log) else math.inf, res.alice.locks,
                      time.perf_counter() - t0)


# ---------------------------------------------------------------- reconciliation


@dataclass
class CascadeReport:
    n_blocks: int
    verified: int
    f_ec: np.ndarray
    disclosed: np.ndarray
    runtime_s: float

    @property
    def verified_fraction(self) -> float:
        return self.verified / self.n_blocks

    @property
    def f_ec_mean(self) -> float:
        return float(np.mean(self.f_ec))


def cascade_efficiency(n_blocks: int = 1000, qber: float = 0.05, n: int = cascade.N_EC, seed: int = 0) -> CascadeReport:
    """Cascade over random block pairs with iid errors at rate ``qber``.

    Cascade starts from the true error rate; f_EC uses the error count
    actually corrected.
    """
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    ok = 0
    f = np.empty(n_blocks)
    disclosed = np.empty(n_blocks, np.int64)
    for b in range(n_blocks):
        alice = rng.integers(0, 2, n, dtype=np.uint8)
        bob = alice ^ (rng.random(n) < qber).astype(np.uint8)
        res, _ = cascade.cascade_reconcile(alice, bob, qber, session_seed=int(rng.integers(2**62)), block_id=b)
        ok += bool(res.verified and np.array_equal(res.bits, alice))
        f[b] = res.f_ec
        disclosed[b] = res.bits_disclosed
    return CascadeReport(n_blocks, ok, f, disclosed, time.perf_counter() - t0)


@dataclass
class SecretFractionReport:
    f_ec: float
    fraction: float
    expected: float

    @property
    def deviation(self) -> float:
        return self.fraction - self.expected


def secret_fraction_check(f_ec: float, q: float = 0.05, k: int = 100, n_ec: int = cascade.N_EC) -> SecretFractionReport:
    """l/n_z at phi_u = qber = q with leakage f_ec * n_z * h(q)."""
    p = Config().distillation
    n_z = k * n_ec
    lam = int(round(f_ec * n_z * binary_entropy(q)))
    l = secret_key_length(n_z, q, lam, p.eps_hash)
    return SecretFractionReport(f_ec, l / n_z, 1 - binary_entropy(q) - f_ec * binary_entropy(q))


# ---------------------------------------------------------------- end to end


class AnnouncementAudit:
    """Frame tap counting announcement payload content beyond times, bases and X bits.

    A payload that carried Z outcomes would need bits beyond one per X
    entry, so ``surplus_bytes`` stays 0 for a clean transcript.
    """

    def __init__(self):
        self.announcements = 0
        self.surplus_bytes = 0
        self.z_entries = 0

    def __call__(self, frame: bytes):
        _, _, mtype, _, length = HEADER.unpack_from(frame, 0)
        if mtype != MsgType.ANNOUNCEMENT:
            return
        self.announcements += 1
        payload = frame[HEADER_LEN : HEADER_LEN + length]
        (n,) = struct.unpack_from("<I", payload, 0)
        pos = 4 + 8 * n
        basis = np.unpackbits(np.frombuffer(payload, np.uint8, (n + 7) // 8, pos))[:n]
        pos += (n + 7) // 8
        (n_x,) = struct.unpack_from("<I", payload, pos)
        self.z_entries += n - int(basis.sum())
        self.surplus_bytes += abs(n_x - int(basis.sum())) + length - (pos + 4 + (n_x + 7) // 8)


@dataclass
class LoopbackReport:
    result: LoopbackResult
    model_skr: float
    pipeline_skr: float
    audit: AnnouncementAudit
    raw_in_progress: int
    runtime_s: float

    @property
    def keys_match(self) -> bool:
        return self.result.keys_match

    @property
    def skr_ratio(self) -> float:
        return self.pipeline_skr / self.model_skr if self.model_skr else math.nan


def loopback_run(cfg: Config, duration_s: float = 60.0, seed: int = 0) -> LoopbackReport:
    t0 = time.perf_counter()
    audit = AnnouncementAudit()
    res = run_loopback(cfg, duration_s, seed, taps=(None, audit))
    return LoopbackReport(res, predict(cfg.source.mu, cfg).secret_rate, res.pipeline_skr(), audit,
                          res.alice.acc.pending, time.perf_counter() - t0)


# ---------------------------------------------------------------- sifting


def _truth_clock(sim: LinkSimulator, block) -> tt.ClockEstimate:
    mid = 0.5 * (block.t_start_ps + block.t_end_ps)
    return tt.ClockEstimate(float(sim.clock.offset_at([mid])[0]), sim.clock.skew_at(mid), 1.0, mid / PS_PER_S)


@dataclass
class SiftRun:
    sifted: int
    errors: int
    x_anti: int
    x_total: int
    duration_s: float

    @property
    def rate(self) -> float:
        return self.sifted / self.duration_s

    @property
    def qber_z(self) -> float:
        return self.errors / self.sifted if self.sifted else math.nan


def sift_with_truth_clock(cfg: Config, duration_s: float, seed: int = 0, on_x=None) -> SiftRun:
    """Sift a simulated link using the oracle clock, bypassing synchronization.

    ``on_x(xa, xb)`` is called per block and may return a new phase for Alice.
    """
    sim = LinkSimulator(cfg, seed, duration_s, block_s=cfg.network.block_s)
    out = SiftRun(0, 0, 0, 0, duration_s)
    while True:
        blk = sim.next_block("bob")
        a = sim.next_block("alice")
        if a is None or blk is None:
            break
        ann = build_announcement(blk.block_id, blk.times, blk.channels)
        res = sift_match(a.times, a.channels, ann, _truth_clock(sim, blk), int(cfg.source.window_ps))
        bits = bob_sifted_bits(blk.channels, res.response)
        out.sifted += len(bits)
        out.errors += int(np.count_nonzero(bits != res.alice_bits))
        out.x_anti += int(np.count_nonzero(res.x_alice != res.x_bob))
        out.x_total += len(res.x_alice)
        if on_x is not None:
            phase = on_x(res.x_alice, res.x_bob)
            if phase is not None:
                sim.phase_a_rad = phase
    return out


@dataclass
class SiftGainReport:
    electrical: SiftRun
    passive: SiftRun

    @property
    def ratio(self) -> float:
        return self.electrical.rate / self.passive.rate


def sifting_gain(cfg: Config, duration_s: float = 20.0, seed: int = 0) -> SiftGainReport:
    """Sifted Z-Z rate of the electrical-delay analyser over the passive one."""
    e = sift_with_truth_clock(replace(cfg, **{"source.alice_z_scheme": "electrical"}), duration_s, seed)
    p = sift_with_truth_clock(replace(cfg, **{"source.alice_z_scheme": "passive"}), duration_s, seed + 1)
    return SiftGainReport(e, p)


# ---------------------------------------------------------------- X basis


@dataclass
class XBasisPoint:
    phase_sum: float
    qber_x: float
    sigma: float
    expected: float
    n: int

    @property
    def z_score(self) -> float:
        return (self.qber_x - self.expected) / self.sigma if self.sigma else math.inf


def xbasis_point(cfg: Config, phase_sum: float, duration_s: float = 5.0, seed: int = 0) -> XBasisPoint:
    """Measured QBERx at a fixed phase sum against (1 - V cos phi)/2."""
    c = replace(cfg, **{"source.phase_a_rad": phase_sum - cfg.source.phase_b_rad})
    run = sift_with_truth_clock(c, duration_s, seed)
    stats = XBasisStats(run.x_total - run.x_anti, run.x_anti)
    q = stats.qber_x
    sigma = math.sqrt(q * (1 - q) / stats.total) if 0 < q < 1 else 1.0 / stats.total
    return XBasisPoint(phase_sum, q, sigma, (1 - cfg.source.visibility * math.cos(phase_sum)) / 2, stats.total)


@dataclass
class FeedbackReport:
    start_phase: float
    qber_by_block: np.ndarray  # per acquisition block, NaN when no X coincidences
    steps: list = field(default_factory=list)  # (block, qber_x, command)
    converged_block: int = -1
    held_blocks: int = 0

    @property
    def final_qber(self) -> float:
        tail = self.qber_by_block[-50:]
        return float(np.nanmean(tail)) if len(tail) else math.nan


def _hold(qber: np.ndarray, threshold: float) -> tuple[int, int]:
    """First block after which every later block stays below threshold, and how many follow."""
    bad = np.flatnonzero(~(qber < threshold))
    start = int(bad[-1]) + 1 if len(bad) else 0
    return (start, len(qber) - start) if start < len(qber) else (-1, 0)


def feedback_run(cfg: Config, duration_s: float = 40.0, seed: int = 0, start_phase: float | None = None,
                 threshold: float = 0.07) -> FeedbackReport:
    """Closed-loop phase feedback through the node pipeline from a random start."""
    if start_phase is None:
        start_phase = float(np.random.default_rng(seed).uniform(-math.pi, math.pi))
    c = replace(cfg, **{"source.phase_a_rad": start_phase - cfg.source.phase_b_rad})
    res = run_loopback(c, duration_s, seed, feedback=True)
    xb = res.alice.x_by_block
    ids = sorted(xb)
    q = np.array([xb[i][0] / xb[i][1] if xb[i][1] else np.nan for i in ids])
    conv, held = _hold(q, threshold)
    return FeedbackReport(start_phase, q, list(res.alice.feedback_log), ids[conv] if conv >= 0 else -1, held)


def feedback_steps_direct(cfg: Config, start_phase: float, n_steps: int = 50, seed: int = 0,
                          min_x: int | None = None) -> list[float]:
    """QBERx after each controller step, with the oracle clock and one step per ``min_x`` X pairs."""
    d = cfg.distillation
    min_x = d.feedback_min_x if min_x is None else min_x
    ctl = PhaseController(start_phase - cfg.source.phase_b_rad, d.feedback_delta_rad, d.feedback_gain)
    c = replace(cfg, **{"source.phase_a_rad": ctl.command})
    history: list[float] = []
    acc: list[tuple[np.ndarray, np.ndarray]] = []

    class Done(Exception):
        pass

    def on_x(xa, xb):
        acc.append((xa, xb))
        a = np.concatenate([p[0] for p in acc])
        b = np.concatenate([p[1] for p in acc])
        if len(a) < min_x:
            return None
        acc.clear()
        q = float(np.mean(a != b))
        history.append(q)
        if len(history) >= n_steps:
            raise Done
        return ctl.step(q)

    # Upper bound on the simulated time needed; the run stops after n_steps.
    try:
        sift_with_truth_clock(c, 3600.0, seed, on_x)
    except Done:
        pass
    return history


# ---------------------------------------------------------------- throughput


@dataclass
class ThroughputReport:
    n_tags: int
    histogram_s: float
    match_s: float
    coincidences: int

    @property
    def tags_per_s(self) -> float:
        return self.n_tags / (self.histogram_s + self.match_s)


def synthetic_tags(n_tags: int, rate_hz: float = 1e7, pair_fraction: float = 0.1, offset_ps: int = 1_000_000,
                   jitter_ps: float = 42.0, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Two sorted Poisson tag streams sharing ``pair_fraction`` of correlated events."""
    rng = np.random.default_rng(seed)
    span = n_tags / rate_hz * PS_PER_S
    ta = np.sort(rng.uniform(0, span, n_tags)).astype(np.int64)
    tb = np.sort(rng.uniform(0, span, n_tags)).astype(np.int64)
    k = int(n_tags * pair_fraction)
    pick = rng.choice(n_tags, k, replace=False)
    tb[:k] = ta[pick] + offset_ps + np.rint(rng.normal(0, jitter_ps, k)).astype(np.int64)
    return ta, np.sort(tb)


def throughput_bench(n_tags: int = 10_000_000, seed: int = 0, repeats: int = 1) -> ThroughputReport:
    """Tracking histogram (+-5 ns, 16 ps) plus window matching over n tags per side."""
    ta, tb = synthetic_tags(n_tags, seed=seed)
    tt.match_coincidences(ta[:1000], tb[:1000], 1_000_000)  # compile
    tt.correlation_histogram(ta[:1000], tb[:1000], 1_000_000, tt.TRACK_HALF_RANGE_PS, tt.STAGE3_BIN_PS)
    best_h = best_m = math.inf
    n_pairs = 0
    for _ in range(repeats):
        t0 = time.perf_counter()
        tt.correlation_histogram(ta, tb, 1_000_000, tt.TRACK_HALF_RANGE_PS, tt.STAGE3_BIN_PS)
        t1 = time.perf_counter()
        m = tt.match_coincidences(ta, tb, 1_000_000, 128)
        t2 = time.perf_counter()
        best_h, best_m = min(best_h, t1 - t0), min(best_m, t2 - t1)
        n_pairs = len(m)
    return ThroughputReport(n_tags, best_h, best_m, n_pairs)
