"""Timestamp-level simulator of the entangled-pair link.

A CW pair source emits pairs as a homogeneous Poisson process. Each photon
is routed by its analyser (basis, arm or interferometer path, output port),
thinned by the per-detector transmittance and efficiency, jittered, and
registered by a detector with dead time. Bob's tags are then mapped through
his free-running clock. Time is integer picoseconds throughout.

Only pairs with at least one registered photon are materialized. By Poisson
thinning this is statistically identical to generating every emission and
discarding the undetected ones, and it keeps the simulator fast at realistic
losses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator

import numpy as np

from ._kernels import dead_time_mask, route_pairs

PS_PER_S = 1_000_000_000_000


class Channel(IntEnum):
    """Logical channels. Bit 1 set means X basis, bit 0 is the outcome bit."""

    AZ0 = 0
    AZ1 = 1
    AX0 = 2
    AX1 = 3
    BZ0 = 4
    BZ1 = 5
    BX0 = 6
    BX1 = 7


def is_x(channels) -> np.ndarray:
    return (np.asarray(channels) & 2) != 0


def outcome_bit(channels) -> np.ndarray:
    return np.asarray(channels) & 1


# Origin annotations.
ORIGIN_PAIR = 0
ORIGIN_SATELLITE = 1
ORIGIN_DARK = 2


class ConfigError(ValueError):
    """Base class for configuration problems."""


class EqOneViolation(ConfigError):
    """Interferometer delay outside the open interval (tau_coh_single, tau_coh_pump)."""


class NegativeParameter(ConfigError):
    """A physical parameter is negative or otherwise out of its range."""


@dataclass
class CoherenceParams:
    tau_delay_ps: float = 1600.0
    tau_coh_single_ps: float = 0.003
    tau_coh_pump_ps: float = 3e5
    tau_mismatch_ps: float = 0.0


@dataclass
class DetectorParams:
    efficiency: float = 0.80
    dead_time_ps: float = 50_000.0
    jitter_sigma_ps: float = 30.0
    dark_rate_hz: float = 100.0


@dataclass
class ChannelLosses:
    AZ: float = 12.6
    AX1: float = 20.33
    AX2: float = 20.46
    BZ1: float = 15.86
    BZ2: float = 16.22
    BX1: float = 21.83
    BX2: float = 22.47
    # Residual chromatic dispersion as extra Gaussian jitter; 0 = compensated.
    dispersion_sigma_ps: float = 0.0


@dataclass
class ClockModel:
    offset_ps: float = 0.0
    skew_ps_per_s: float = 100.0
    skew_random_walk_ps_per_s: float = 1.0
    # Optional fault injection: a step of step_ps at true time step_time_s.
    step_time_s: float = -1.0
    step_ps: float = 0.0


@dataclass
class SourceParams:
    mu: float = 0.04
    window_ps: float = 128.0
    visibility: float = 0.997
    basis_prob_z: float = 0.5
    basis_prob_x: float = 0.5
    phase_a_rad: float = 0.0
    phase_b_rad: float = 0.0
    # Probability that a Z-basis photon at Bob lands in the wrong time bin.
    intrinsic_qber_z: float = 0.003
    # "electrical": one detector, delay applied to the 1 copy in software.
    # "passive": 50/50 splitter with short/long paths and two detectors.
    alice_z_scheme: str = "electrical"
    # Attenuator unblock time; before it only dark counts exist.
    light_on_s: float = 0.0
    channel_pair: str = "ITU-20/22"


ALICE_DETECTORS = ("AZ", "AZb", "AX1", "AX2")
BOB_DETECTORS = ("BZ1", "BZ2", "BX1", "BX2")
_ALICE_LOGICAL = np.array([Channel.AZ0, Channel.AZ1, Channel.AX0, Channel.AX1], dtype=np.uint8)
_BOB_LOGICAL = np.array([Channel.BZ0, Channel.BZ1, Channel.BX0, Channel.BX1], dtype=np.uint8)


def transmittance(loss_db: float) -> float:
    """Per-photon survival for a loss in dB (inf dB gives 0)."""
    return 10.0 ** (-loss_db / 10.0)


@dataclass
class LinkDerived:
    """Quantities computed once from a validated configuration."""

    config: object
    transmittance: dict
    pair_rate_hz: float
    visibility_eff: float


def effective_visibility(source: SourceParams, coherence: CoherenceParams) -> float:
    """Visibility reduced by the interferometer delay mismatch."""
    r = coherence.tau_mismatch_ps / coherence.tau_coh_single_ps
    return source.visibility * math.exp(-r * r)


def validate_config(cfg) -> LinkDerived:
    """Check the physical invariants of a configuration.

    ``cfg`` needs ``source``, ``coherence``, ``detectors``, ``losses`` and
    ``clock`` attributes. The configuration itself is not modified.
    """
    co, src, det, los = cfg.coherence, cfg.source, cfg.detectors, cfg.losses
    for name, value in (
        ("tau_coh_single_ps", co.tau_coh_single_ps),
        ("tau_coh_pump_ps", co.tau_coh_pump_ps),
        ("tau_mismatch_ps", co.tau_mismatch_ps),
        ("mu", src.mu),
        ("window_ps", src.window_ps),
        ("basis_prob_z", src.basis_prob_z),
        ("basis_prob_x", src.basis_prob_x),
        ("intrinsic_qber_z", src.intrinsic_qber_z),
        ("light_on_s", src.light_on_s),
        ("efficiency", det.efficiency),
        ("dead_time_ps", det.dead_time_ps),
        ("jitter_sigma_ps", det.jitter_sigma_ps),
        ("dark_rate_hz", det.dark_rate_hz),
        ("dispersion_sigma_ps", los.dispersion_sigma_ps),
        ("skew_random_walk_ps_per_s", cfg.clock.skew_random_walk_ps_per_s),
    ):
        if not value >= 0:
            raise NegativeParameter(f"{name} must be non-negative, got {value}")
    if not (co.tau_coh_single_ps < co.tau_delay_ps < co.tau_coh_pump_ps):
        raise EqOneViolation(
            f"need tau_coh_single ({co.tau_coh_single_ps}) < tau_delay ({co.tau_delay_ps})"
            f" < tau_coh_pump ({co.tau_coh_pump_ps})"
        )
    if det.efficiency > 1:
        raise NegativeParameter(f"efficiency must be <= 1, got {det.efficiency}")
    if not 0 <= src.visibility <= 1:
        raise NegativeParameter(f"visibility must lie in [0, 1], got {src.visibility}")
    if src.window_ps <= 0:
        raise NegativeParameter("window_ps must be positive")
    if abs(src.basis_prob_z + src.basis_prob_x - 1.0) > 1e-9:
        raise ConfigError("basis_prob_z + basis_prob_x must equal 1")
    if src.intrinsic_qber_z > 0.5:
        raise NegativeParameter("intrinsic_qber_z must be <= 0.5")
    if src.alice_z_scheme not in ("electrical", "passive"):
        raise ConfigError(f"alice_z_scheme must be 'electrical' or 'passive', got {src.alice_z_scheme!r}")
    trans = {}
    for name in ("AZ", "AX1", "AX2", "BZ1", "BZ2", "BX1", "BX2"):
        loss = getattr(los, name)
        if not loss >= 0:
            raise NegativeParameter(f"loss {name} must be non-negative dB, got {loss}")
        trans[name] = transmittance(loss)
    return LinkDerived(
        config=cfg,
        transmittance=trans,
        pair_rate_hz=src.mu / src.window_ps * PS_PER_S,
        visibility_eff=effective_visibility(src, co),
    )


def generate_pair_emissions(duration_s: float, source: SourceParams, rng_seed) -> np.ndarray:
    """All pair emission times (int64 ps, sorted) of a Poisson source."""
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    rng = np.random.default_rng(rng_seed)
    span = duration_s * PS_PER_S
    n = rng.poisson(source.mu / source.window_ps * span)
    return np.sort(np.floor(rng.uniform(0.0, span, n))).astype(np.int64)


def x_port_probabilities(visibility: float, phase_sum: float) -> np.ndarray:
    """Joint outcome table p[i, j] for central-peak X coincidences."""
    c = visibility * math.cos(phase_sum)
    same = (1.0 + c) / 4.0
    diff = (1.0 - c) / 4.0
    return np.array([[same, diff], [diff, same]])


@dataclass
class _Categories:
    """Joint routing outcomes of one pair, restricted to >= 1 registration."""

    prob: np.ndarray  # normalised over detected categories
    p_detect: float  # probability that a pair yields at least one registration
    a_det: np.ndarray  # physical detector index or -1
    a_delay: np.ndarray
    a_origin: np.ndarray
    b_det: np.ndarray
    b_delay: np.ndarray
    b_origin: np.ndarray


def _side_routes(derived: LinkDerived, side: str):
    """(prob, detector, delay, x_path, x_port) tuples for one analyser."""
    cfg = derived.config
    src, tau = cfg.source, cfg.coherence.tau_delay_ps
    pz, px = src.basis_prob_z, src.basis_prob_x
    routes = []
    if side == "a":
        if src.alice_z_scheme == "electrical":
            routes.append((pz, 0, 0.0, -1, -1))
        else:
            routes.append((pz / 2, 0, 0.0, -1, -1))
            routes.append((pz / 2, 1, tau, -1, -1))
        xdet = (2, 3)
    else:
        e = src.intrinsic_qber_z
        routes.append((pz / 2 * (1 - e), 0, 0.0, -1, -1))
        routes.append((pz / 2 * e, 0, tau, -1, -1))
        routes.append((pz / 2 * (1 - e), 1, tau, -1, -1))
        routes.append((pz / 2 * e, 1, 0.0, -1, -1))
        xdet = (2, 3)
    for path, delay in ((0, 0.0), (1, tau)):
        for port in (0, 1):
            routes.append((px / 4, xdet[port], delay, path, port))
    return [r for r in routes if r[0] > 0]


def build_categories(derived: LinkDerived, phase_sum: float) -> _Categories:
    """Enumerate every joint outcome with its probability."""
    cfg = derived.config
    eta = cfg.detectors.efficiency
    tr = derived.transmittance
    surv_a = [tr["AZ"] * eta, tr["AZ"] * eta, tr["AX1"] * eta, tr["AX2"] * eta]
    surv_b = [tr["BZ1"] * eta, tr["BZ2"] * eta, tr["BX1"] * eta, tr["BX2"] * eta]
    pij = x_port_probabilities(derived.visibility_eff, phase_sum)
    rows = []
    for pa, da, dla, path_a, port_a in _side_routes(derived, "a"):
        for pb, db, dlb, path_b, port_b in _side_routes(derived, "b"):
            p = pa * pb
            origin = ORIGIN_PAIR
            if path_a >= 0 and path_b >= 0:
                if path_a == path_b:
                    # Replace the product of port marginals (1/4) by p_ij.
                    p = p * 4.0 * pij[port_a, port_b]
                else:
                    origin = ORIGIN_SATELLITE
            sa, sb = surv_a[da], surv_b[db]
            rows.append((p * sa * sb, da, dla, origin, db, dlb, origin))
            rows.append((p * sa * (1 - sb), da, dla, origin, -1, 0.0, origin))
            rows.append((p * (1 - sa) * sb, -1, 0.0, origin, db, dlb, origin))
    rows = [r for r in rows if r[0] > 0]
    if not rows:
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return _Categories(z, 0.0, zi, z, zi, zi, z, zi)
    arr = list(zip(*rows))
    prob = np.array(arr[0])
    total = prob.sum()
    return _Categories(
        prob=prob / total,
        p_detect=float(total),
        a_det=np.array(arr[1], dtype=np.int64),
        a_delay=np.array(arr[2]),
        a_origin=np.array(arr[3], dtype=np.int64),
        b_det=np.array(arr[4], dtype=np.int64),
        b_delay=np.array(arr[5]),
        b_origin=np.array(arr[6], dtype=np.int64),
    )


def pack_code(detector, origin, pair_id):
    """Pack (detector, origin, pair id) into one int64 event code."""
    return (np.asarray(pair_id, np.int64) << 4) | (np.asarray(origin, np.int64) << 2) | np.asarray(detector, np.int64)


@dataclass
class SideEvents:
    """Registered detections of one side before logical-channel mapping."""

    times: np.ndarray  # int64 ps, sorted
    code: np.ndarray  # pair_id << 4 | origin << 2 | physical detector

    @property
    def detectors(self):
        return self.code & 3

    @property
    def origin(self):
        return (self.code >> 2) & 3

    @property
    def pair_id(self):
        return self.code >> 4


def _route(t_emit, pair_ids, cats: _Categories, rng, sigma_a, sigma_b):
    """Route detected pairs to both sides; returns [(times, code)] for Alice, Bob."""
    cdf = np.cumsum(cats.prob)
    cdf[-1] = np.inf
    r = route_pairs(np.asarray(t_emit, np.float64), pair_ids, rng.random(len(t_emit)), cdf,
                    pack_code(cats.a_det, cats.a_origin, 0), cats.a_delay,
                    pack_code(cats.b_det, cats.b_origin, 0), cats.b_delay, cats.a_det, cats.b_det)
    out = []
    for (t, code), sigma in ((r[:2], sigma_a), (r[2:], sigma_b)):
        if sigma > 0:
            t = t + sigma * rng.standard_normal(len(t))
        out.append((np.rint(t).astype(np.int64), code))
    return out


def _sort_events(times, code):
    order = np.argsort(times, kind="stable")
    return times[order], code[order]


def route_and_detect(emissions, cfg, rng_seed=None, phase_sum=None) -> tuple[SideEvents, SideEvents]:
    """Route every emission through both analysers and register detections.

    Dark counts are added over the span of the emissions, jitter is applied
    per detector and dead time is enforced per physical detector. Alice's
    electrical Z copies are not yet split here, see :func:`logical_tags`.
    """
    derived = validate_config(cfg)
    rng = np.random.default_rng(rng_seed)
    emissions = np.asarray(emissions, dtype=np.int64)
    if phase_sum is None:
        phase_sum = cfg.source.phase_a_rad + cfg.source.phase_b_rad
    cats = build_categories(derived, phase_sum)
    # Thin to the pairs with at least one registration.
    keep = rng.random(len(emissions)) < cats.p_detect
    ids = np.nonzero(keep)[0].astype(np.int64)
    sa, sb = _jitter_sigmas(cfg)
    routed = _route(emissions[keep].astype(np.float64), ids, cats, rng, sa, sb)
    span = float(emissions[-1] + 1) if len(emissions) else 0.0
    sides = []
    for (times, code), active in zip(routed, (_alice_active(cfg), range(4))):
        times, code = _sort_events(*_add_darks(times, code, 0.0, span, cfg, rng, active))
        last = np.full(4, np.iinfo(np.int64).min // 2, dtype=np.int64)
        mask = dead_time_mask(times, code & 3, last, np.int64(cfg.detectors.dead_time_ps))
        sides.append(SideEvents(times[mask], code[mask]))
    return sides[0], sides[1]


def _alice_active(cfg):
    """Physical Alice detectors present in the configured Z scheme."""
    return (0, 1, 2, 3) if cfg.source.alice_z_scheme == "passive" else (0, 2, 3)


def _jitter_sigmas(cfg):
    sig = cfg.detectors.jitter_sigma_ps
    disp = cfg.losses.dispersion_sigma_ps
    return math.hypot(sig, disp), math.hypot(sig, disp)


def _add_darks(times, code, t0, t1, cfg, rng, active):
    rate = cfg.detectors.dark_rate_hz / PS_PER_S
    ts, cs = [times], [code]
    for d in active:
        k = rng.poisson(rate * max(t1 - t0, 0.0))
        if k:
            ts.append(np.floor(rng.uniform(t0, t1, k)).astype(np.int64))
            cs.append(np.full(k, int(pack_code(d, ORIGIN_DARK, -1)), dtype=np.int64))
    if len(ts) == 1:
        return times, code
    return np.concatenate(ts), np.concatenate(cs)


def logical_tags(side: str, events: SideEvents, cfg):
    """Map physical detections to logical channels.

    Alice's single electrical-scheme Z detector yields two logical tags per
    detection: AZ0 at t and AZ1 at t + tau. Returns (times, channels, code)
    sorted by time.
    """
    det = events.code & 3
    if side == "b":
        return events.times, _BOB_LOGICAL[det], events.code
    ch = _ALICE_LOGICAL[det]
    if cfg.source.alice_z_scheme != "electrical":
        return events.times, ch, events.code
    z = det == 0
    tau = int(round(cfg.coherence.tau_delay_ps))
    times = np.concatenate([events.times, events.times[z] + tau])
    chans = np.concatenate([ch, np.full(int(z.sum()), Channel.AZ1, dtype=np.uint8)])
    code = np.concatenate([events.code, events.code[z]])
    order = np.argsort(times, kind="stable")
    return times[order], chans[order], code[order]


class ClockPath:
    """Bob's clock offset phi(t) = local - true, generated lazily on a grid.

    The skew follows a deterministic drift plus a Brownian random walk with
    diffusion ``skew_random_walk_ps_per_s`` per sqrt(s). The offset is the
    integral of the skew, piecewise linear between grid points.
    """

    def __init__(self, clock: ClockModel, rng_seed, grid_s: float = 0.01):
        self.clock = clock
        self.grid_ps = grid_s * PS_PER_S
        self._rng = np.random.default_rng(rng_seed)
        self._phi = [float(clock.offset_ps)]
        self._walk = 0.0

    def _extend(self, t_ps: float):
        need = int(t_ps // self.grid_ps) + 2
        c = self.clock
        dt = self.grid_ps / PS_PER_S
        while len(self._phi) < need:
            k = max(need - len(self._phi), 1024)
            if c.skew_random_walk_ps_per_s > 0:
                steps = self._rng.normal(0.0, c.skew_random_walk_ps_per_s * math.sqrt(dt), k)
                w = self._walk + np.cumsum(steps)
                w_prev = np.concatenate([[self._walk], w[:-1]])
                self._walk = float(w[-1])
            else:
                w = w_prev = np.zeros(k)
            inc = (c.skew_ps_per_s + 0.5 * (w + w_prev)) * dt
            self._phi.extend((self._phi[-1] + np.cumsum(inc)).tolist())

    def offset_at(self, t_ps) -> np.ndarray:
        """phi(t) in ps for true times ``t_ps``."""
        t = np.asarray(t_ps, dtype=np.float64)
        if t.size == 0:
            return t.copy()
        self._extend(float(t.max()))
        phi = np.asarray(self._phi)
        g = np.arange(len(phi)) * self.grid_ps
        out = np.interp(t, g, phi)
        c = self.clock
        if c.step_time_s >= 0 and c.step_ps:
            out = out + np.where(t >= c.step_time_s * PS_PER_S, c.step_ps, 0.0)
        return out

    def skew_at(self, t_ps: float) -> float:
        """Local slope of phi in ps/s."""
        h = self.grid_ps
        a, b = self.offset_at([t_ps, t_ps + h])
        return float((b - a) / (h / PS_PER_S))

    def to_local(self, t_ps) -> np.ndarray:
        t = np.asarray(t_ps, dtype=np.int64)
        return t + np.rint(self.offset_at(t)).astype(np.int64)


def apply_clock(times, clock: ClockModel, duration_s: float | None = None, rng_seed=None):
    """Map true-frame Bob tags to his local clock.

    Returns (sorted local times, ClockPath). With zero skew and no random walk
    the result is exactly ``times + offset_ps``.
    """
    path = ClockPath(clock, rng_seed)
    t = np.asarray(times, dtype=np.int64)
    if duration_s is not None:
        path.offset_at([duration_s * PS_PER_S])
    return np.sort(path.to_local(t)), path


@dataclass
class AcquisitionBlock:
    """One side's detections in a 100 ms window of its own clock."""

    side: str  # "alice" or "bob"
    block_id: int
    t_start_ps: int
    t_end_ps: int
    times: np.ndarray  # int64 local ps, sorted
    channels: np.ndarray  # uint8 logical channel
    origin: np.ndarray | None = None
    pair_id: np.ndarray | None = None

    def __len__(self):
        return len(self.times)


class _BlockBuffer:
    """Collects final tags and cuts them into fixed local-time blocks."""

    def __init__(self, side, block_ps, n_blocks, annotate):
        self.side, self.block_ps, self.n_blocks = side, block_ps, n_blocks
        self.annotate = annotate
        self.next_id = 0
        self.parts = []

    def add(self, times, chans, code):
        if len(times):
            self.parts.append((times, chans, code))

    def pop_ready(self, frontier_ps) -> list[AcquisitionBlock]:
        """Blocks whose whole window lies before ``frontier_ps``."""
        out = []
        while self.next_id < self.n_blocks and (self.next_id + 1) * self.block_ps <= frontier_ps:
            out.append(self._cut())
        return out

    def _cut(self) -> AcquisitionBlock:
        k = self.next_id
        lo, hi = k * self.block_ps, (k + 1) * self.block_ps
        if self.parts:
            t, c, e = (np.concatenate(x) for x in zip(*self.parts))
            order = np.argsort(t, kind="stable")
            t, c, e = t[order], c[order], e[order]
        else:
            t = e = np.zeros(0, np.int64)
            c = np.zeros(0, np.uint8)
        a, b = np.searchsorted(t, [lo, hi], side="left")
        blk = AcquisitionBlock(
            side=self.side,
            block_id=k,
            t_start_ps=lo,
            t_end_ps=hi,
            times=t[a:b],
            channels=c[a:b],
            origin=(e[a:b] >> 2) & 3 if self.annotate else None,
            pair_id=e[a:b] >> 4 if self.annotate else None,
        )
        self.parts = [(t[b:], c[b:], e[b:])] if b < len(t) else []
        self.next_id += 1
        return blk


class LinkSimulator:
    """Incremental simulation of both sides, one chunk of true time at a time.

    Blocks are served through :meth:`next_block` per side, so a node can pull
    its own stream at its own pace while memory stays bounded by a few chunks.
    ``phase_a_rad`` is a settable actuator (the piezo of Alice's interferometer).
    ``sides`` limits which streams are kept.
    """

    def __init__(self, cfg, rng_seed=0, duration_s: float = 60.0, annotate: bool = False,
                 block_s: float = 0.1, chunk_s: float | None = None, sides=("alice", "bob")):
        self.derived = validate_config(cfg)
        self.cfg = cfg
        self.duration_s = duration_s
        self.annotate = annotate
        self.block_ps = int(round(block_s * PS_PER_S))
        self.n_blocks = int(round(duration_s / block_s))
        self.chunk_ps = int(round((chunk_s or block_s) * PS_PER_S))
        self.phase_a_rad = cfg.source.phase_a_rad
        ss = np.random.SeedSequence(rng_seed)
        s_pairs, s_dark, s_clock = ss.spawn(3)
        self._rng = np.random.default_rng(s_pairs)
        self._rng_dark = np.random.default_rng(s_dark)
        self.clock = ClockPath(cfg.clock, s_clock)
        self._t0 = 0
        self._next_pair_id = 0
        self._cats = None
        self._cats_phase = None
        self._hold = {"a": None, "b": None}
        self._last = {"a": np.full(4, np.iinfo(np.int64).min // 2, np.int64),
                      "b": np.full(4, np.iinfo(np.int64).min // 2, np.int64)}
        self._buf = {"a": _BlockBuffer("alice", self.block_ps, self.n_blocks, annotate),
                     "b": _BlockBuffer("bob", self.block_ps, self.n_blocks, annotate)}
        self._ready = {"a": [], "b": []}
        # A single-node process keeps only its own side's blocks.
        self._keep = {s[0] for s in sides}
        sa, sb = _jitter_sigmas(cfg)
        self._sigma = {"a": sa, "b": sb}
        self._margin = int(cfg.coherence.tau_delay_ps + 12 * max(sa, sb) + 2000)
        self._end_ps = duration_s * PS_PER_S
        self.clock.offset_at([self._end_ps + 2 * self.chunk_ps])
        # Bob needs true time up to the instant his clock reads the end.
        phi_min = float(np.min(self.clock._phi[: int(self._end_ps // self.clock.grid_ps) + 3]))
        self._true_end_ps = self._end_ps + max(0.0, -phi_min) + 2 * self._margin
        self.done = False

    def set_phase(self, phase_a_rad: float) -> int:
        """Move Alice's phase; returns the first block index simulated entirely with it."""
        self.phase_a_rad = phase_a_rad
        return -(-self._t0 // self.block_ps) + 1

    @property
    def phase_sum(self) -> float:
        return self.phase_a_rad + self.cfg.source.phase_b_rad

    def _categories(self):
        if self._cats is None or self._cats_phase != self.phase_sum:
            self._cats = build_categories(self.derived, self.phase_sum)
            self._cats_phase = self.phase_sum
        return self._cats

    def _step(self):
        """Simulate one chunk of true time and move final tags to the buffers."""
        cfg = self.cfg
        t0, t1 = self._t0, self._t0 + self.chunk_ps
        self._t0 = t1
        last_chunk = t1 >= self._true_end_ps
        cats = self._categories()
        light_ps = cfg.source.light_on_s * PS_PER_S
        lo = max(float(t0), light_ps)
        if t1 > lo and cats.p_detect > 0:
            rate = self.derived.pair_rate_hz / PS_PER_S * cats.p_detect
            n = self._rng.poisson(rate * (t1 - lo))
            e = self._rng.standard_exponential(n + 1)
            t_emit = lo + np.cumsum(e[:-1]) / e.sum() * (t1 - lo)
            ids = np.arange(self._next_pair_id, self._next_pair_id + n, dtype=np.int64)
            self._next_pair_id += n
            routed = _route(t_emit, ids, cats, self._rng, self._sigma["a"], self._sigma["b"])
        else:
            routed = [(np.zeros(0, np.int64), np.zeros(0, np.int64))] * 2
        frontier = t1 - self._margin if not last_chunk else np.iinfo(np.int64).max // 4
        for key, (times, code), active in (
            ("a", routed[0], _alice_active(cfg)),
            ("b", routed[1], range(4)),
        ):
            times, code = _add_darks(times, code, float(t0), float(t1), cfg, self._rng_dark, active)
            if self._hold[key] is not None:
                times = np.concatenate([self._hold[key][0], times])
                code = np.concatenate([self._hold[key][1], code])
            times, code = _sort_events(times, code)
            cut = np.searchsorted(times, frontier, side="left")
            self._hold[key] = (times[cut:], code[cut:])
            times, code = times[:cut], code[:cut]
            if key == "b":
                times = self.clock.to_local(times)
            mask = dead_time_mask(times, code & 3, self._last[key], np.int64(cfg.detectors.dead_time_ps))
            self._buf[key].add(*logical_tags(key, SideEvents(times[mask], code[mask]), cfg))
        if last_chunk:
            self.done = True
            fa = fb = np.iinfo(np.int64).max // 4
        else:
            fa = frontier
            fb = int(frontier + self.clock.offset_at([frontier])[0]) - 10_000
        for key, f in (("a", fa), ("b", fb)):
            ready = self._buf[key].pop_ready(f)
            if key in self._keep:
                self._ready[key].extend(ready)

    def next_block(self, side: str) -> AcquisitionBlock | None:
        """Next block for ``side`` ("alice"/"bob"), or None at end of run."""
        key = side[0]
        while not self._ready[key]:
            if self.done:
                return None
            self._step()
        return self._ready[key].pop(0)

    def blocks(self) -> Iterator[tuple[str, AcquisitionBlock]]:
        """All blocks of both sides in production order."""
        while True:
            if not self._ready["a"] and not self._ready["b"]:
                if self.done:
                    return
                self._step()
                continue
            for key, name in (("a", "alice"), ("b", "bob")):
                while self._ready[key]:
                    yield name, self._ready[key].pop(0)

    def truth_offset_ps(self, t_true_ps) -> np.ndarray:
        """Oracle: Bob-minus-Alice clock offset at true (Alice) time."""
        return self.clock.offset_at(t_true_ps)


def simulate(duration_s: float, cfg, rng_seed=0, annotate: bool = False,
             block_s: float = 0.1) -> Iterator[tuple[str, AcquisitionBlock]]:
    """Stream (side, AcquisitionBlock) tuples for a run of ``duration_s``."""
    sim = LinkSimulator(cfg, rng_seed, duration_s, annotate=annotate, block_s=block_s)
    yield from sim.blocks()
