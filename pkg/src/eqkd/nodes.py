"""Alice and Bob node processes running the real-time distillation pipeline.

Bob pushes one announcement per sealed acquisition block and drives Cascade
as the corrector. Alice synchronizes to Bob's clock, sifts, answers Cascade
queries as the reference, steers the interferometer phase and runs privacy
amplification every ``k`` verified correction blocks.

Both nodes are asyncio coroutines talking over a :class:`Transport`. The
loopback transport still runs every message through the codec and MAC, so
in-process runs exercise the wire format.
"""
from __future__ import annotations

import asyncio
import logging
import secrets
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import timetag as tt
from .cascade import Q_BOOTSTRAP, CascadeReference, PassRequest, SearchRequest, VerifyRequest, cascade_corrector
from .config import Config
from .distill import KeyStore, MetricsLog, SecretKey, estimate_security, key_tag, toeplitz_extract
from .protocol import (
    HEADER_LEN,
    Abort,
    BadMac,
    Codec,
    KeyConfirm,
    Message,
    PASeed,
    ParityReply,
    RateGate,
    RateGateMsg,
    SearchReply,
    VerifyReply,
    encode_body,
    millisecond_counts,
    read_tag_file,
)
from .sifting import (
    Announcement,
    InsufficientStatistics,
    PhaseController,
    RawKeyAccumulator,
    SiftResponse,
    bob_sifted_bits,
    build_announcement,
    estimate_qber_x,
    sift_match,
)
from .sim_link import PS_PER_S, AcquisitionBlock, LinkSimulator

log = logging.getLogger("eqkd.nodes")

# Alice keeps this much of her own stream around an unsynchronized request.
ACQUIRE_MARGIN_PS = 1_000_000_000
LOCKED_MARGIN_PS = 1_000_000
ABORT_EOS = 0
ABORT_PROTOCOL = 3
ABORT_SECURITY = 4


class Phase(str, Enum):
    WAITING_FOR_LIGHT = "WaitingForLight"
    ACQUIRING = "Acquiring"
    LOCKED = "Locked"
    DISTILLING = "Distilling"
    ABORTED = "Aborted"


@dataclass
class NodeState:
    phase: Phase = Phase.WAITING_FOR_LIGHT
    clock: tt.ClockEstimate | None = None
    pending_blocks: int = 0
    history: list = field(default_factory=lambda: [Phase.WAITING_FOR_LIGHT])

    def enter(self, phase: Phase):
        if phase != self.phase:
            self.history.append(phase)
            self.phase = phase


class PeerAborted(RuntimeError):
    def __init__(self, code: int, reason: str):
        super().__init__(f"peer aborted ({code}): {reason}")
        self.code = code


# ---------------------------------------------------------------- transports


class Transport:
    """Reliable ordered message channel; frames with a bad MAC are dropped."""

    def __init__(self, codec: Codec, tap=None):
        self.codec = codec
        self.tap = tap  # called with every outgoing frame
        self.bytes_sent = 0
        self.dropped = 0

    def _frame(self, body, msg_id: int) -> bytes:
        frame = self.codec.encode(Message(encode_body(body)[0], msg_id, body))
        self.bytes_sent += len(frame)
        if self.tap is not None:
            self.tap(frame)
        return frame

    def _decode(self, frame: bytes) -> Message | None:
        try:
            return self.codec.decode(frame)
        except BadMac:
            self.dropped += 1
            log.warning("dropped frame with bad MAC (%d so far)", self.dropped)
            return None

    async def send(self, body, msg_id: int = 0):
        raise NotImplementedError

    async def recv(self) -> Message:
        raise NotImplementedError

    async def close(self):
        pass


class LoopbackTransport(Transport):
    """In-process endpoint backed by a pair of queues."""

    def __init__(self, codec: Codec, inbox: asyncio.Queue, outbox: asyncio.Queue, tap=None):
        super().__init__(codec, tap)
        self.inbox, self.outbox = inbox, outbox

    @classmethod
    def pair(cls, mac_key: bytes, taps=(None, None)):
        a2b, b2a = asyncio.Queue(), asyncio.Queue()
        return cls(Codec(mac_key), b2a, a2b, taps[0]), cls(Codec(mac_key), a2b, b2a, taps[1])

    async def send(self, body, msg_id: int = 0):
        await self.outbox.put(self._frame(body, msg_id))

    async def recv(self) -> Message:
        while True:
            msg = self._decode(await self.inbox.get())
            if msg is not None:
                return msg


class StreamTransport(Transport):
    """Framed messages over an asyncio stream (TCP)."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, codec: Codec, tap=None):
        super().__init__(codec, tap)
        self.reader, self.writer = reader, writer

    async def send(self, body, msg_id: int = 0):
        self.writer.write(self._frame(body, msg_id))
        await self.writer.drain()

    async def recv(self) -> Message:
        while True:
            header = await self.reader.readexactly(HEADER_LEN)
            rest = await self.reader.readexactly(Codec.frame_length(header) - HEADER_LEN)
            msg = self._decode(header + rest)
            if msg is not None:
                return msg

    async def close(self):
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


async def tcp_listen(host: str, port: int, codec: Codec, timeout_s: float | None = None) -> StreamTransport:
    """Accept a single peer connection."""
    ready: asyncio.Future = asyncio.get_running_loop().create_future()

    async def on_conn(reader, writer):
        if not ready.done():
            ready.set_result(StreamTransport(reader, writer, codec))
        else:
            writer.close()

    server = await asyncio.start_server(on_conn, host, port)
    try:
        return await asyncio.wait_for(ready, timeout_s)
    finally:
        server.close()


async def tcp_connect(host: str, port: int, codec: Codec, timeout_s: float = 10.0) -> StreamTransport:
    """Connect, retrying until ``timeout_s`` while the peer comes up."""
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            reader, writer = await asyncio.open_connection(host, port)
            return StreamTransport(reader, writer, codec)
        except OSError:
            if time.monotonic() > deadline:
                raise
            await asyncio.sleep(0.2)


# ---------------------------------------------------------------- tag sources


class SimulatedSource:
    """One side's block stream from a :class:`LinkSimulator`."""

    def __init__(self, sim: LinkSimulator, side: str):
        self.sim, self.side = sim, side

    def next_block(self) -> AcquisitionBlock | None:
        return self.sim.next_block(self.side)


class FileSource:
    """Replays a tag file as fixed-length blocks of local time."""

    def __init__(self, path, side: str, block_s: float = 0.1):
        self.header, self.times, self.channels = read_tag_file(path)
        self.times = self.times.astype(np.int64)
        self.side = side
        self.block_ps = int(round(block_s * PS_PER_S))
        self._k = 0
        self._n = int(self.times[-1] // self.block_ps) + 1 if len(self.times) else 0

    def next_block(self) -> AcquisitionBlock | None:
        if self._k >= self._n:
            return None
        lo, hi = self._k * self.block_ps, (self._k + 1) * self.block_ps
        a, b = np.searchsorted(self.times, [lo, hi])
        blk = AcquisitionBlock(self.side, self._k, lo, hi, self.times[a:b], self.channels[a:b])
        self._k += 1
        return blk


# ---------------------------------------------------------------- Bob


class BobNode:
    """Corrector side: announces blocks, drives Cascade, confirms keys."""

    def __init__(self, cfg: Config, transport: Transport, source, metrics: MetricsLog | None = None,
                 key_store: KeyStore | None = None):
        self.cfg = cfg
        self.tx = transport
        self.source = source
        self.metrics = metrics or MetricsLog()
        self.key_store = key_store
        self.state = NodeState()
        self.depth = cfg.network.queue_depth
        self.ec_limit = 2 * self.depth
        self._slots = asyncio.Semaphore(self.depth)
        self._ec_changed = asyncio.Event()
        # Expected dark counts summed over Bob's four detectors.
        self.gate = RateGate(4 * cfg.detectors.dark_rate_hz)
        self.pending: dict[int, np.ndarray] = {}
        self.acc = RawKeyAccumulator(cfg.distillation.n_ec)
        self.sessions: dict[int, object] = {}
        self.corrected: dict[int, object] = {}
        self.q_est = Q_BOOTSTRAP
        self.keys: list[SecretKey] = []
        self.announced = 0
        self.discarded: list[tuple[int, str]] = []
        self.duplicates = 0
        self._candidate: SecretKey | None = None
        self.abort: PeerAborted | None = None

    async def run(self):
        consumer = asyncio.create_task(self._consume())
        producer = asyncio.create_task(self._produce())
        done, _ = await asyncio.wait({consumer, producer}, return_when=asyncio.FIRST_EXCEPTION)
        for t in done:
            if t.exception() is not None:
                producer.cancel()
                consumer.cancel()
                raise t.exception()
        await consumer
        producer.cancel()
        if self.abort is not None:
            raise self.abort
        return self

    async def _wait_ec(self, limit: int):
        while len(self.sessions) > limit:
            self._ec_changed.clear()
            await self._ec_changed.wait()

    async def _produce(self):
        while True:
            blk = self.source.next_block()
            if blk is None:
                break
            if not self.gate.present:
                self.gate.feed(millisecond_counts(blk.times, blk.t_start_ps, blk.t_end_ps))
                if self.gate.present:
                    self.state.enter(Phase.ACQUIRING)
                    await self.tx.send(RateGateMsg(True), blk.block_id)
                # The block in which the light appeared is never announced.
                await asyncio.sleep(0)
                continue
            await self._slots.acquire()
            await self._wait_ec(self.ec_limit - 1)
            self.pending[blk.block_id] = blk.channels
            self.state.pending_blocks = len(self.pending)
            await self.tx.send(build_announcement(blk.block_id, blk.times, blk.channels), blk.block_id)
            self.announced += 1
            await asyncio.sleep(0)
        for _ in range(self.depth):
            await self._slots.acquire()
        await self._wait_ec(0)
        await self.tx.send(Abort(ABORT_EOS, "eos"), 0)

    async def _consume(self):
        while True:
            msg = await self.tx.recv()
            body = msg.body
            if isinstance(body, SiftResponse):
                await self._on_sift(body)
            elif isinstance(body, (ParityReply, SearchReply, VerifyReply)):
                await self._on_cascade(msg.msg_id, body)
            elif isinstance(body, PASeed):
                await self._on_seed(msg.msg_id, body)
            elif isinstance(body, KeyConfirm):
                self._on_confirm(msg.msg_id, body)
            elif isinstance(body, Abort):
                if body.code != ABORT_EOS:
                    self.state.enter(Phase.ABORTED)
                    self.abort = PeerAborted(body.code, body.reason)
                return

    async def _on_sift(self, resp: SiftResponse):
        channels = self.pending.pop(resp.block_id, None)
        if channels is None:
            self.duplicates += 1
            return
        self.state.pending_blocks = len(self.pending)
        self._slots.release()
        if len(resp.indices) and self.state.phase == Phase.ACQUIRING:
            self.state.enter(Phase.LOCKED)
        for raw in self.acc.push(bob_sifted_bits(channels, resp), resp.block_id):
            seed = (self.cfg.seed << 32) ^ raw.seq
            gen = cascade_corrector(raw.bits, max(self.q_est, 0.005), seed, raw.seq)
            self.sessions[raw.seq] = gen
            await self.tx.send(next(gen), raw.seq)

    async def _on_cascade(self, seq: int, body):
        gen = self.sessions.get(seq)
        if gen is None:
            return
        try:
            req = gen.send(body.ok if isinstance(body, VerifyReply) else body.bits)
        except StopIteration as stop:
            res = stop.value
            del self.sessions[seq]
            self._ec_changed.set()
            self.metrics.write(kind="cascade", node="bob", block=seq, errors=res.errors_corrected,
                               disclosed=res.bits_disclosed, f_ec=res.f_ec, verified=res.verified)
            if res.verified:
                self.corrected[seq] = res
                self.q_est = res.measured_qber
            else:
                self.discarded.append((seq, "verification failed"))
            return
        await self.tx.send(req, seq)

    async def _on_seed(self, period: int, seed: PASeed):
        missing = [s for s in seed.block_seqs if s not in self.corrected]
        if missing:
            self.discarded.append((period, f"missing blocks {missing}"))
            await self.tx.send(KeyConfirm(bytes(16), 2), period)
            return
        blocks = [self.corrected.pop(s) for s in seed.block_seqs]
        qz = float(np.mean([b.measured_qber for b in blocks]))
        if qz > self.cfg.distillation.qber_abort:
            self.discarded.append((period, f"QBERz {qz:.4f} above abort threshold"))
            await self.tx.send(KeyConfirm(bytes(16), 2), period)
            return
        bits = np.concatenate([b.bits for b in blocks])
        out = toeplitz_extract(bits, seed.seed, seed.l)
        self._candidate = SecretKey(period, out, list(seed.block_seqs), seed.phi_u, seed.lambda_ec, seed.n_z)
        self.state.enter(Phase.DISTILLING)
        await self.tx.send(KeyConfirm(key_tag(out, self.cfg.security.mac_key, period), 0), period)

    def _on_confirm(self, period: int, msg: KeyConfirm):
        key = self._candidate
        if key is None or key.key_id != period:
            return
        self._candidate = None
        if msg.status == 1:
            self.keys.append(key)
            if self.key_store:
                self.key_store.append(key)
        else:
            self.discarded.append((period, "key confirmation mismatch"))
        self.state.enter(Phase.LOCKED)


# ---------------------------------------------------------------- Alice


@dataclass
class _Verified:
    seq: int
    bits: np.ndarray
    source_blocks: list
    disclosed: int
    x_anti: int
    x_total: int
    span_s: float


class AliceNode:
    """Reference side: clock sync, sifting, Cascade answers, distillation."""

    def __init__(self, cfg: Config, transport: Transport, source, actuator=None,
                 metrics: MetricsLog | None = None, key_store: KeyStore | None = None, truth=None):
        self.cfg = cfg
        self.tx = transport
        self.source = source
        self.actuator = actuator
        self.metrics = metrics or MetricsLog()
        self.key_store = key_store
        self.truth = truth
        self.state = NodeState()
        self.block_ps = int(round(cfg.network.block_s * PS_PER_S))
        self._blocks: deque = deque()
        self._source_done = False
        self._acq: list[Announcement] = []
        self._first_est: tt.ClockEstimate | None = None
        self._track: list = []
        self.tracker: tt.ClockTracker | None = None
        self.acc = RawKeyAccumulator(cfg.distillation.n_ec)
        self._x_block = [0, 0]  # anticorrelated, total since the last sealed raw block
        self._x_fb: list[tuple[np.ndarray, np.ndarray]] = []
        self.refs: dict[int, tuple] = {}
        self.verified: list[_Verified] = []
        d = cfg.distillation
        self.controller = PhaseController(cfg.source.phase_a_rad, d.feedback_delta_rad, d.feedback_gain)
        self._sealed_at: int | None = None
        self._fb_valid_from = 0
        self.keys: list[SecretKey] = []
        self.discarded: list[tuple[int, str]] = []
        self.sync_log: list[tuple[float, float, float]] = []
        self.feedback_log: list[tuple[int, float, float]] = []
        self.sifted_bits = 0
        self.sifted_by_block: dict[int, int] = {}
        self.x_by_block: dict[int, tuple[int, int]] = {}
        self._confirming: dict[int, tuple] = {}
        self._period = 0
        self._eos = False
        self.locks = 0

    async def run(self):
        while True:
            msg = await self.tx.recv()
            body = msg.body
            if isinstance(body, Announcement):
                await self._on_announcement(body)
            elif isinstance(body, (PassRequest, SearchRequest, VerifyRequest)):
                await self._on_cascade(msg.msg_id, body)
            elif isinstance(body, KeyConfirm):
                await self._on_confirm(msg.msg_id, body)
            elif isinstance(body, RateGateMsg):
                if body.present and self.state.phase == Phase.WAITING_FOR_LIGHT:
                    self.state.enter(Phase.ACQUIRING)
            elif isinstance(body, Abort):
                if body.code != ABORT_EOS:
                    self.state.enter(Phase.ABORTED)
                    raise PeerAborted(body.code, body.reason)
                self._eos = True
            if self._eos and not self._confirming:
                await self.tx.send(Abort(ABORT_EOS, "done"), 0)
                return self

    # -- own tags ----------------------------------------------------

    def _tags(self, lo: int, hi: int):
        """Alice's tags with lo <= t < hi, pulling blocks as needed."""
        while not self._source_done and (not self._blocks or self._blocks[-1].t_end_ps < hi):
            blk = self.source.next_block()
            if blk is None:
                self._source_done = True
                break
            self._blocks.append(blk)
        while self._blocks and self._blocks[0].t_end_ps < lo - ACQUIRE_MARGIN_PS:
            self._blocks.popleft()
        sel = [b for b in self._blocks if b.t_end_ps > lo and b.t_start_ps < hi]
        if not sel:
            return np.zeros(0, np.int64), np.zeros(0, np.uint8)
        t = np.concatenate([b.times for b in sel])
        c = np.concatenate([b.channels for b in sel])
        a, b = np.searchsorted(t, [lo, hi])
        return t[a:b], c[a:b]

    # -- sync and sifting --------------------------------------------

    async def _on_announcement(self, ann: Announcement):
        if self.tracker is None:
            if self.state.phase == Phase.WAITING_FOR_LIGHT:
                self.state.enter(Phase.ACQUIRING)
            self._acquire(ann)
            await self.tx.send(SiftResponse(ann.block_id, np.zeros(0, np.int64)), ann.block_id)
            return
        est = self.tracker.estimate
        tb = est.to_alice(ann.times)
        if len(tb):
            ta, ca = self._tags(int(tb[0]) - LOCKED_MARGIN_PS, int(tb[-1]) + LOCKED_MARGIN_PS)
        else:
            ta, ca = self._tags(ann.block_id * self.block_ps, (ann.block_id + 1) * self.block_ps)
        res = sift_match(ta, ca, ann, est, int(self.cfg.source.window_ps))
        await self.tx.send(res.response, ann.block_id)
        self.sifted_bits += len(res.alice_bits)
        self.sifted_by_block[ann.block_id] = len(res.alice_bits)
        self.x_by_block[ann.block_id] = (int(np.count_nonzero(res.x_alice != res.x_bob)), len(res.x_alice))
        self._x_block[0] += int(np.count_nonzero(res.x_alice != res.x_bob))
        self._x_block[1] += len(res.x_alice)
        self._feedback(ann.block_id, res.x_alice, res.x_bob)
        if self._sealed_at is None:
            self._sealed_at = ann.block_id - 1
        sealed = self.acc.push(res.alice_bits, ann.block_id)
        for raw in sealed:
            # Acquisition time attributed to this block, without overlap.
            span = (ann.block_id - self._sealed_at) * self.cfg.network.block_s / len(sealed)
            anti, total = self._x_block
            self._x_block = [0, 0]
            self.refs[raw.seq] = (CascadeReference(raw.bits, raw.seq), raw, anti, total, span)
        if sealed:
            self._sealed_at = ann.block_id
        self._track.append((ann.times, ta))
        if len(self._track) >= self.cfg.network.track_every_blocks:
            self._update_clock()

    def _acquire(self, ann: Announcement):
        """Stages 1-3 on one batch of announcements, then a second batch for skew."""
        self._acq.append(ann)
        per = self.cfg.network.track_every_blocks
        if len(self._acq) < per:
            return
        batch, self._acq = self._acq, []
        tb = np.concatenate([a.times for a in batch])
        start = batch[0].block_id * self.block_ps
        end = (batch[-1].block_id + 1) * self.block_ps
        ta, _ = self._tags(start - ACQUIRE_MARGIN_PS, end + ACQUIRE_MARGIN_PS)
        if len(tb) == 0 or len(ta) == 0:
            return
        t_mid = float(np.median(tb)) / PS_PER_S
        try:
            if self._first_est is None:
                coarse = tt.coarse_offset(ta[ta >= start], tb[tb >= start])
                stage2, _ = tt.acquire_offset(ta, tb, coarse)
                self._first_est = tt.refine_offset(ta, tb, stage2, t_mid)
                return
            e0 = self._first_est
            e1 = tt.refine_offset(ta, tb, e0.offset_ps, t_mid)
        except (tt.NoPeak, tt.EmptyBlock) as exc:
            log.info("acquisition attempt failed: %s", exc)
            self._first_est = None
            return
        self._first_est = None
        dt = t_mid - e0.last_update_time
        skew = (e1.offset_ps - e0.offset_ps) / dt if dt > 0 else 0.0
        est = tt.ClockEstimate(e1.offset_ps, skew, e1.offset_uncertainty_ps, t_mid)
        self.tracker = tt.ClockTracker(est)
        self.state.clock = est
        self.state.enter(Phase.LOCKED)
        self.locks += 1
        self._record_sync(t_mid, est)

    def _update_clock(self):
        batch, self._track = self._track, []
        tb = np.concatenate([x[0] for x in batch])
        ta = np.unique(np.concatenate([x[1] for x in batch]))
        if len(tb) == 0:
            return
        t_mid = float(np.median(tb)) / PS_PER_S
        try:
            est, _ = self.tracker.track(t_mid, ta, tb)
        except tt.LostLock as exc:
            log.warning("%s; re-acquiring", exc)
            self.tracker = None
            self.state.clock = None
            self.state.enter(Phase.ACQUIRING)
            return
        self.state.clock = est
        self._record_sync(t_mid, est)

    def _record_sync(self, t_s: float, est: tt.ClockEstimate):
        # t_s is on Bob's clock while the oracle takes true time; the two
        # differ by microseconds, far below the skew time scale.
        err = float("nan")
        if self.truth is not None:
            err = est.offset_ps - float(self.truth([t_s * PS_PER_S])[0])
        self.sync_log.append((t_s, est.offset_ps, err))
        self.metrics.write(kind="clock", t_s=t_s, offset_ps=est.offset_ps, skew_ps_per_s=est.skew_ps_per_s,
                           uncertainty_ps=est.offset_uncertainty_ps, error_ps=err)

    def _feedback(self, block_id: int, xa: np.ndarray, xb: np.ndarray):
        """One controller step per batch with enough X coincidences.

        Blocks acquired before the last command took effect are skipped; the
        actuator may return the first block it affects.
        """
        if block_id < self._fb_valid_from:
            return
        self._x_fb.append((xa, xb))
        xa = np.concatenate([p[0] for p in self._x_fb])
        xb = np.concatenate([p[1] for p in self._x_fb])
        try:
            stats = estimate_qber_x(xa, xb, self.cfg.distillation.feedback_min_x)
        except InsufficientStatistics:
            return
        self._x_fb = []
        command = self.controller.step(stats.qber_x)
        self.feedback_log.append((block_id, stats.qber_x, command))
        if self.actuator is not None:
            first = self.actuator(command)
            if first is not None:
                self._fb_valid_from = int(first)

    # -- reconciliation and distillation -----------------------------

    async def _on_cascade(self, seq: int, req):
        entry = self.refs.get(seq)
        if entry is None:
            await self.tx.send(Abort(ABORT_PROTOCOL, f"unknown correction block {seq}"), seq)
            raise PeerAborted(ABORT_PROTOCOL, f"unknown correction block {seq}")
        ref = entry[0]
        answer = ref.answer(req)
        if isinstance(req, PassRequest):
            await self.tx.send(ParityReply(np.asarray(answer, np.uint8)), seq)
            return
        if isinstance(req, SearchRequest):
            await self.tx.send(SearchReply(np.asarray(answer, np.uint8)), seq)
            return
        await self.tx.send(VerifyReply(bool(answer)), seq)
        _, raw, anti, total, span = self.refs.pop(seq)
        self.metrics.write(kind="cascade", node="alice", block=seq, disclosed=ref.bits_disclosed,
                           verified=bool(answer))
        if not answer:
            self.discarded.append((seq, "verification failed"))
            return
        self.verified.append(_Verified(seq, raw.bits, raw.source_blocks, ref.bits_disclosed, anti, total, span))
        if len(self.verified) >= self.cfg.distillation.k:
            await self._distill()

    async def _distill(self):
        p = self.cfg.distillation
        batch, self.verified = self.verified[: p.k], self.verified[p.k :]
        bits = np.concatenate([v.bits for v in batch])
        lam = sum(v.disclosed for v in batch)
        anti = sum(v.x_anti for v in batch)
        n_x = sum(v.x_total for v in batch)
        phi_x = anti / n_x if n_x else 0.5
        sec = estimate_security(phi_x, n_x, lam, p, n_z=len(bits))
        blocks = sorted({b for v in batch for b in v.source_blocks})
        duration_s = sum(v.span_s for v in batch)
        period = self._period
        self._period += 1
        record = dict(kind="period", period=period, n_z=sec.n_z, n_x=n_x, phi_x=phi_x, phi_u=sec.phi_u,
                      lambda_ec=lam, l=sec.l, duration_s=duration_s,
                      first_block=blocks[0] if blocks else -1, last_block=blocks[-1] if blocks else -1)
        if sec.l == 0:
            self.discarded.append((period, "security abort: non-positive key length"))
            self.metrics.write(**record, committed=False, skr=0.0)
            return
        n_seed = sec.n_z + sec.l - 1
        seed_bits = np.unpackbits(np.frombuffer(secrets.token_bytes((n_seed + 7) // 8), np.uint8))[:n_seed]
        out = toeplitz_extract(bits, seed_bits, sec.l)
        key = SecretKey(period, out, [v.seq for v in batch], sec.phi_u, lam, sec.n_z)
        self._confirming[period] = (key, record)
        self.state.enter(Phase.DISTILLING)
        await self.tx.send(PASeed(sec.l, sec.n_z, tuple(v.seq for v in batch), sec.phi_u, lam, seed_bits), period)

    async def _on_confirm(self, period: int, msg: KeyConfirm):
        entry = self._confirming.pop(period, None)
        if entry is None:
            return
        key, record = entry
        mine = key_tag(key.bits, self.cfg.security.mac_key, period)
        ok = msg.status == 0 and mine == msg.tag
        await self.tx.send(KeyConfirm(mine, 1 if ok else 2), period)
        skr = key.length / record["duration_s"] if ok and record["duration_s"] else 0.0
        self.metrics.write(**record, committed=ok, skr=skr)
        if ok:
            self.keys.append(key)
            if self.key_store:
                self.key_store.append(key)
        else:
            self.discarded.append((period, "key confirmation mismatch"))
        self.state.enter(Phase.LOCKED)


# ---------------------------------------------------------------- drivers


@dataclass
class LoopbackResult:
    alice: AliceNode
    bob: BobNode
    sim: LinkSimulator
    wall_s: float

    @property
    def keys_match(self) -> bool:
        a, b = self.alice.keys, self.bob.keys
        return bool(a) and len(a) == len(b) and all(
            x.key_id == y.key_id and np.array_equal(x.bits, y.bits) for x, y in zip(a, b))

    @property
    def secret_bits(self) -> int:
        return sum(k.length for k in self.alice.keys)

    def pipeline_skr(self) -> float:
        """Committed secret bits over the acquisition time they came from."""
        periods = [r for r in self.alice.metrics.records if r.get("kind") == "period" and r.get("committed")]
        span = sum(r["duration_s"] for r in periods)
        return sum(r["l"] for r in periods) / span if span else 0.0


async def _loopback(cfg, duration_s, seed, taps, metrics, key_stores, feedback):
    sim = LinkSimulator(cfg, seed, duration_s, block_s=cfg.network.block_s)
    ta, tb = LoopbackTransport.pair(cfg.security.mac_key, taps)

    alice = AliceNode(cfg, ta, SimulatedSource(sim, "alice"), sim.set_phase if feedback else None,
                      metrics=metrics, key_store=key_stores[0], truth=sim.truth_offset_ps)
    bob = BobNode(cfg, tb, SimulatedSource(sim, "bob"), key_store=key_stores[1])
    t0 = time.perf_counter()
    await asyncio.gather(alice.run(), bob.run())
    return LoopbackResult(alice, bob, sim, time.perf_counter() - t0)


def run_loopback(cfg: Config, duration_s: float, seed: int | None = None, taps=(None, None),
                 metrics: MetricsLog | None = None, key_stores=(None, None), feedback: bool = True) -> LoopbackResult:
    """Run both nodes in-process on one simulated link until the stream ends.

    ``taps`` are optional callables receiving every frame sent by Alice and Bob.
    """
    seed = cfg.seed if seed is None else seed
    return asyncio.run(_loopback(cfg, duration_s, seed, taps, metrics, key_stores, feedback))


def simulated_source(cfg: Config, side: str, duration_s: float, seed: int | None = None) -> SimulatedSource:
    """Single-side source for two-process runs; both peers must share the seed.

    The phase actuator cannot reach the peer's simulator, so two-process runs
    keep the configured phase fixed.
    """
    seed = cfg.seed if seed is None else seed
    sim = LinkSimulator(cfg, seed, duration_s, block_s=cfg.network.block_s, sides=(side,))
    return SimulatedSource(sim, side)


async def _serve_alice(cfg, source, metrics, key_store, timeout_s):
    tx = await tcp_listen(cfg.network.host, cfg.network.port, Codec(cfg.security.mac_key), timeout_s)
    try:
        return await AliceNode(cfg, tx, source, metrics=metrics, key_store=key_store).run()
    finally:
        await tx.close()


async def _serve_bob(cfg, source, metrics, key_store):
    tx = await tcp_connect(cfg.network.host, cfg.network.port, Codec(cfg.security.mac_key),
                           cfg.network.connect_timeout_s)
    try:
        return await BobNode(cfg, tx, source, metrics=metrics, key_store=key_store).run()
    finally:
        await tx.close()


def run_alice(cfg: Config, source, metrics=None, key_store=None, timeout_s: float | None = None) -> AliceNode:
    """Listen on the configured host and port; run Alice until Bob's end of stream."""
    return asyncio.run(_serve_alice(cfg, source, metrics, key_store, timeout_s))


def run_bob(cfg: Config, source, metrics=None, key_store=None) -> BobNode:
    """Connect to Alice and run Bob until the stream ends."""
    return asyncio.run(_serve_bob(cfg, source, metrics, key_store))
